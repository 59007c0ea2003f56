"""Trainable noise-prediction network with three heads: the noise estimate,
the sigmoid-conv refined attention, and an injected binary shadow classifier
hanging off the encoder bottleneck (the features CAM needs).

Input fusion is channel-wise concatenation of (x_t, x_cond, a_t): 7 channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

IN_CHANNELS = 7  # x_t (3) + x_cond (3) + a_t (1)


@dataclass
class DenoiserConfig:
    base_width: int = 32
    levels: int = 3          # resolution levels; levels - 1 downsamplings
    time_dim: int = 64

    def widths(self) -> list[int]:
        return [self.base_width * (2 ** i) for i in range(self.levels)]


@dataclass
class ClassifierOutput:
    logit: torch.Tensor          # (B,)
    probability: torch.Tensor    # (B,), logistic(logit)
    feature_map: torch.Tensor    # (B, C, h, w) bottleneck activations
    class_weights: torch.Tensor  # (C,) linear-head weights


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    ).to(t.device)
    args = t[:, None].double() * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ConvBlock(nn.Module):
    """Two 3x3 convs with GroupNorm/SiLU, additive timestep injection and a
    residual shortcut."""

    def __init__(self, c_in, c_out, time_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(1, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(1, c_out)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, t_emb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.time_proj(t_emb)[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Encoder-decoder noise predictor with skip connections.

    forward(x_t, x_cond, a_t, t) -> (eps_hat, a_refined); classify(image)
    runs the encoder alone and returns the classifier branch outputs.
    """

    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = config or DenoiserConfig()
        cfg = self.config
        widths = cfg.widths()
        td = cfg.time_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.inc = ConvBlock(IN_CHANNELS, widths[0], td)
        self.downs = nn.ModuleList(
            [ConvBlock(widths[i], widths[i + 1], td)
             for i in range(cfg.levels - 1)])
        self.bottleneck = ConvBlock(widths[-1], widths[-1], td)
        self.ups = nn.ModuleList(
            [ConvBlock(widths[i + 1] + widths[i], widths[i], td)
             for i in reversed(range(cfg.levels - 1))])
        self.eps_head = nn.Conv2d(widths[0], 3, 3, padding=1)
        self.att_head = nn.Conv2d(widths[0], 1, 3, padding=1)
        self.classifier = nn.Linear(widths[-1], 1)

    def _time_features(self, t, batch, device, dtype):
        if not torch.is_tensor(t):
            t = torch.tensor([t] * batch, device=device)
        elif t.ndim == 0:
            t = t[None].expand(batch)
        emb = timestep_embedding(t, self.config.time_dim).to(dtype)
        return self.time_mlp(emb)

    def _encode(self, x, t_emb):
        feats = [self.inc(x, t_emb)]
        for down in self.downs:
            feats.append(down(F.avg_pool2d(feats[-1], 2), t_emb))
        return feats[:-1], self.bottleneck(feats[-1], t_emb)

    def forward(self, x_t, x_cond, a_t, t):
        squeeze = x_t.ndim == 3
        if squeeze:
            x_t, x_cond, a_t = x_t[None], x_cond[None], a_t[None]
        if x_t.shape[-2:] != x_cond.shape[-2:] or x_t.shape[-2:] != a_t.shape[-2:]:
            raise ValueError("x_t, x_cond and a_t spatial shapes must agree")
        x = torch.cat([x_t, x_cond, a_t], dim=1)
        t_emb = self._time_features(t, x.shape[0], x.device, x.dtype)
        skips, h = self._encode(x, t_emb)
        for up, skip in zip(self.ups, reversed(skips)):
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = up(torch.cat([h, skip], dim=1), t_emb)
        eps_hat = self.eps_head(h)
        a_refined = torch.sigmoid(self.att_head(h))
        if squeeze:
            return eps_hat[0], a_refined[0]
        return eps_hat, a_refined

    def classify(self, image: torch.Tensor) -> ClassifierOutput:
        """Shadow-vs-clean logit for an un-noised image.

        The image rides in the conditioning slot with zeroed x_t, uniform
        attention and t = 0, so classification shares the denoising encoder.
        """
        if image.ndim == 3:
            image = image[None]
        b, _, h, w = image.shape
        x_t = torch.zeros_like(image)
        a_t = torch.full((b, 1, h, w), 0.5, dtype=image.dtype,
                         device=image.device)
        x = torch.cat([x_t, image, a_t], dim=1)
        t_emb = self._time_features(0, b, image.device, image.dtype)
        _, bottleneck = self._encode(x, t_emb)
        pooled = bottleneck.mean(dim=(-2, -1))
        logit = self.classifier(pooled).squeeze(-1)
        return ClassifierOutput(
            logit=logit,
            probability=torch.sigmoid(logit),
            feature_map=bottleneck,
            class_weights=self.classifier.weight.reshape(-1),
        )


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
