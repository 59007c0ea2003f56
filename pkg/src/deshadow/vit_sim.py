"""Vision-transformer key self-similarity: feature extractors, the n x n
dissimilarity descriptor, the structure loss used as the sampling stop
signal, and the PCA-as-RGB visualization.

Two extractor bindings share one interface: a pretrained ViT-S loaded from
a local checkpoint for real use, and a seeded patch-projection stub that
keeps the full math testable (and differentiable) without any weights.
Extractors consume images in [-1, 1] diffusion space.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_EPS = 1e-12

# ImageNet channel statistics used by the pretrained binding.
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class PatchProjectionExtractor(nn.Module):
    """Deterministic stub extractor: fixed random projection of image patches.

    Each layer owns a seeded projection matrix mapping flattened
    patch_size**2 * 3 patches to key_dim-dimensional keys. Linear, hence
    differentiable end to end.
    """

    def __init__(self, patch_size: int = 8, key_dim: int = 64,
                 depth: int = 12, seed: int = 0):
        super().__init__()
        self.patch_size = patch_size
        self.key_dim = key_dim
        self.depth = depth
        g = torch.Generator().manual_seed(seed)
        proj = torch.randn(depth, patch_size * patch_size * 3, key_dim,
                           generator=g, dtype=torch.float64)
        proj /= math.sqrt(patch_size * patch_size * 3)
        self.register_buffer("proj", proj)

    def preprocess(self, image: torch.Tensor) -> torch.Tensor:
        """Map [-1, 1] input to [0, 1] and pad to a multiple of patch_size."""
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValueError("expected a (3, H, W) image")
        x = (image + 1.0) / 2.0
        p = self.patch_size
        h, w = x.shape[-2:]
        if h < p or w < p:
            raise ValueError(f"image {h}x{w} smaller than one {p}px patch")
        pad_h = (-h) % p
        pad_w = (-w) % p
        if pad_h or pad_w:
            x = F.pad(x[None], (0, pad_w, 0, pad_h), mode="replicate")[0]
        return x

    def grid_shape(self, image: torch.Tensor) -> tuple[int, int]:
        x = self.preprocess(image)
        return x.shape[-2] // self.patch_size, x.shape[-1] // self.patch_size

    def get_keys(self, image: torch.Tensor, layer: int) -> torch.Tensor:
        if not 0 <= layer < self.depth:
            raise ValueError(f"layer {layer} outside [0, {self.depth})")
        x = self.preprocess(image)
        p = self.patch_size
        patches = F.unfold(x[None], kernel_size=p, stride=p)[0]  # (p*p*3, n)
        return patches.T @ self.proj[layer].to(patches.dtype)


class _VitAttention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def qkv_split(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads)
        qkv = qkv.permute(2, 0, 3, 1, 4)  # (3, b, heads, n, d_head)
        return qkv[0], qkv[1], qkv[2]

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv_split(x)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class _VitMlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class _VitBlock(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _VitAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _VitMlp(dim, dim * mlp_ratio)

    def keys(self, x):
        """Key projections of this block, heads kept separate."""
        _, k, _ = self.attn.qkv_split(self.norm1(x))
        return k

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class _PatchEmbed(nn.Module):
    def __init__(self, embed_dim, patch_size):
        super().__init__()
        self.proj = nn.Conv2d(3, embed_dim, kernel_size=patch_size,
                              stride=patch_size)

    def forward(self, x):
        return self.proj(x).flatten(2).transpose(1, 2)


class DinoVitExtractor(nn.Module):
    """ViT-S key extractor compatible with self-distilled pretrained weights.

    Loads a state dict in the standard timm-style naming (patch_embed.proj /
    cls_token / pos_embed / blocks.N...). Inputs are resized to 224x224 and
    ImageNet-normalized, so the positional embedding needs no interpolation.
    """

    IMAGE_SIZE = 224

    def __init__(self, patch_size: int = 16, embed_dim: int = 384,
                 depth: int = 12, num_heads: int = 6,
                 weights_path: str | None = None):
        super().__init__()
        self.patch_size = patch_size
        self.depth = depth
        self.patch_embed = _PatchEmbed(embed_dim, patch_size)
        n_patches = (self.IMAGE_SIZE // patch_size) ** 2
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_patches + 1, embed_dim))
        self.blocks = nn.ModuleList(
            [_VitBlock(embed_dim, num_heads) for _ in range(depth)])
        if weights_path is not None:
            state = torch.load(weights_path, map_location="cpu",
                               weights_only=True)
            if isinstance(state, dict) and "state_dict" in state:
                state = state["state_dict"]
            state = {k: v for k, v in state.items()
                     if not k.startswith(("head.", "norm."))}
            self.load_state_dict(state, strict=True)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        mean = torch.tensor(_IMAGENET_MEAN).view(3, 1, 1)
        std = torch.tensor(_IMAGENET_STD).view(3, 1, 1)
        self.register_buffer("px_mean", mean)
        self.register_buffer("px_std", std)

    def preprocess(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 3 or image.shape[0] != 3:
            raise ValueError("expected a (3, H, W) image")
        x = (image + 1.0) / 2.0
        x = F.interpolate(x[None], size=(self.IMAGE_SIZE, self.IMAGE_SIZE),
                          mode="bilinear", align_corners=False)
        return ((x[0] - self.px_mean) / self.px_std).float()

    def grid_shape(self, image: torch.Tensor) -> tuple[int, int]:
        g = self.IMAGE_SIZE // self.patch_size
        return g, g

    def get_keys(self, image: torch.Tensor, layer: int) -> torch.Tensor:
        if not 0 <= layer < self.depth:
            raise ValueError(f"layer {layer} outside [0, {self.depth})")
        x = self.preprocess(image)[None]
        x = self.patch_embed(x)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for blk in self.blocks[:layer]:
            x = blk(x)
        k = self.blocks[layer].keys(x)  # (1, heads, n+1, d_head)
        k = k.permute(0, 2, 1, 3).reshape(k.shape[0], k.shape[2], -1)
        return k[0, 1:]  # drop the class token


def extract_keys(image: torch.Tensor, layer: int, extractor) -> torch.Tensor:
    """Spatial keys (n, d) of `image` at `layer`, class token excluded."""
    return extractor.get_keys(image, layer)


def self_similarity(keys: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Pairwise key dissimilarity S_ij = 1 - cos(k_i, k_j).

    Symmetric with an exactly zero diagonal; entries lie in [0, 2].
    """
    if keys.ndim != 2:
        raise ValueError("keys must be an (n, d) matrix")
    norms = keys.norm(dim=1)
    bad = (norms < eps).nonzero().flatten()
    if bad.numel() > 0:
        raise ValueError(f"zero-norm key rows: {bad.tolist()}")
    unit = keys / norms[:, None]
    s = 1.0 - unit @ unit.T
    s = 0.5 * (s + s.T)
    s = s.clamp(0.0, 2.0)
    n = s.shape[0]
    return s * (1.0 - torch.eye(n, dtype=s.dtype, device=s.device))


def loss_sim(x_cond: torch.Tensor, x0_hat: torch.Tensor, extractor,
             layer: int = 11) -> torch.Tensor:
    """Frobenius distance between the self-similarity descriptors of the
    condition image and the current denoised estimate."""
    s_cond = self_similarity(extract_keys(x_cond, layer, extractor))
    s_hat = self_similarity(extract_keys(x0_hat, layer, extractor))
    return ((s_cond - s_hat) ** 2).sum().sqrt()


def pca_scores(descriptor: torch.Tensor, n_components: int = 3) -> np.ndarray:
    """Project descriptor rows onto their top principal components.

    Returns raw (n, n_components) scores; rank-deficient components come
    back as zero columns. Component signs are fixed so the largest-magnitude
    score in each column is positive.
    """
    d = np.asarray(descriptor.detach().cpu().numpy() if torch.is_tensor(descriptor)
                   else descriptor, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError("descriptor must be 2-D")
    centered = d - d.mean(axis=0, keepdims=True)
    u, s, _ = np.linalg.svd(centered, full_matrices=False)
    scores = u * s  # (n, r) projections, variance-ordered
    out = np.zeros((d.shape[0], n_components))
    r = min(n_components, scores.shape[1])
    out[:, :r] = scores[:, :r]
    # kill numerically-zero components, fix signs for reproducibility
    for j in range(n_components):
        col = out[:, j]
        if np.abs(col).max() <= 1e-9 * max(1.0, np.abs(scores).max()):
            out[:, j] = 0.0
        elif col[np.abs(col).argmax()] < 0:
            out[:, j] = -col
    return out


def keys_pca_rgb(descriptor: torch.Tensor,
                 grid_shape: tuple[int, int]) -> np.ndarray:
    """Top-3 principal components of the descriptor rows as an RGB patch grid.

    Each channel is min-max normalized to [0, 1]; zero components (rank
    deficiency, or an all-zero descriptor) stay all-zero.
    """
    gh, gw = grid_shape
    n = descriptor.shape[0]
    if gh * gw != n:
        raise ValueError(f"grid {gh}x{gw} does not tile {n} patches")
    scores = pca_scores(descriptor, n_components=3)
    img = np.zeros((n, 3))
    for j in range(3):
        col = scores[:, j]
        rng = col.max() - col.min()
        if rng > 0:
            img[:, j] = (col - col.min()) / rng
    return img.reshape(gh, gw, 3)
