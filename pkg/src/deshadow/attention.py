"""Classifier-driven attention: CAM computation, the residual refinement
target, and the attention/classifier losses.

Attention maps are single-channel tensors (1, H, W) with values in [0, 1].
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

PROB_EPS = 1e-7


def minmax_normalize(x: torch.Tensor) -> torch.Tensor:
    """Rescale to [0, 1]; a constant map collapses to all zeros."""
    lo, hi = x.min(), x.max()
    if float(hi - lo) == 0.0:
        return torch.zeros_like(x)
    return (x - lo) / (hi - lo)


def compute_cam(feature_map: torch.Tensor, class_weights: torch.Tensor,
                size: tuple[int, int] | None = None) -> torch.Tensor:
    """Class activation map from spatial features and linear-head weights.

    Weighted sum over feature channels, bilinearly upsampled to `size`
    (H, W) when given, then min-max normalized to [0, 1].
    """
    if feature_map.ndim != 3:
        raise ValueError("feature_map must be (C, h, w)")
    weights = class_weights.reshape(-1)
    if weights.numel() != feature_map.shape[0]:
        raise ValueError("class_weights length must match feature channels")
    cam = (weights[:, None, None] * feature_map).sum(dim=0, keepdim=True)
    if size is not None and tuple(cam.shape[-2:]) != tuple(size):
        cam = F.interpolate(cam[None], size=size, mode="bilinear",
                            align_corners=False)[0]
    return minmax_normalize(cam)


def residual_target(x0: torch.Tensor, x_cond: torch.Tensor,
                    gain: float = 5.0) -> torch.Tensor:
    """Fixed supervision target for the attention head.

    Per-pixel mean absolute channel difference d, squashed so zero
    difference maps to exactly 0: m = 2 * sigmoid(gain * d) - 1.
    """
    if x0.shape != x_cond.shape:
        raise ValueError("x0 and x_cond shapes must match")
    d = (x0 - x_cond).abs().mean(dim=-3, keepdim=True)
    return 2.0 * torch.sigmoid(gain * d) - 1.0


def loss_att(a_t: torch.Tensor, m_res: torch.Tensor) -> torch.Tensor:
    """Mean squared error between an attention map and the residual target."""
    if a_t.shape != m_res.shape:
        raise ValueError("attention and target shapes must match")
    return ((a_t - m_res) ** 2).mean()


def loss_cam(prob_shadow, prob_clean, eps: float = PROB_EPS) -> torch.Tensor:
    """Binary-classifier loss -(E[log p_shadow] + E[log(1 - p_clean)]).

    Accepts scalars or batched probability tensors; probabilities are
    clamped to [eps, 1 - eps] before the logs.
    """
    if not torch.is_tensor(prob_shadow):
        prob_shadow = torch.as_tensor(prob_shadow, dtype=torch.float64)
    if not torch.is_tensor(prob_clean):
        prob_clean = torch.as_tensor(prob_clean, dtype=torch.float64)
    p_s = prob_shadow.clamp(eps, 1.0 - eps)
    p_c = prob_clean.clamp(eps, 1.0 - eps)
    return -(torch.log(p_s).mean() + torch.log(1.0 - p_c).mean())


def init_attention(x_cond: torch.Tensor, model=None) -> torch.Tensor:
    """Seed attention for the reverse chain: CAM of the shadow condition.

    Without a classifier-bearing model, falls back to a uniform 0.5 map.
    """
    h, w = x_cond.shape[-2:]
    if model is None or not hasattr(model, "classify"):
        return torch.full((1, h, w), 0.5, dtype=x_cond.dtype)
    with torch.no_grad():
        out = model.classify(x_cond)
    return compute_cam(out.feature_map[0], out.class_weights,
                       size=(h, w)).to(x_cond.dtype)
