"""Closed-form diffusion math: noise schedule, forward noising, clean-image
estimation and the deterministic DDIM reverse step.

Timesteps are 1-based: t runs over 1..T_train, and t = 0 is the virtual
"fully denoised" index with alpha_bar(0) == 1 exactly. Images live in
[-1, 1] normalized space; everything here is shape-agnostic and works on
single images (C, H, W) as well as batches (B, C, H, W).
"""

from __future__ import annotations

import torch


class NoiseSchedule:
    """Precomputed beta_t, alpha_t and alpha_bar_t sequences.

    Internally stored as float64 1-D tensors of length T_train (0-based
    storage, 1-based accessors).
    """

    def __init__(self, betas: torch.Tensor):
        betas = torch.as_tensor(betas, dtype=torch.float64)
        if betas.ndim != 1 or betas.numel() < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if not bool(((betas > 0) & (betas < 1)).all()):
            raise ValueError("every beta must lie in (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)
        self.T_train = betas.numel()

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product of alphas up to t; alpha_bar(0) is exactly 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T_train:
            raise ValueError(f"timestep {t} outside [1, {self.T_train}]")

    def gather_alpha_bar(self, t: torch.Tensor) -> torch.Tensor:
        """alpha_bar values for a batch of 1-based integer timesteps."""
        if bool((t < 1).any()) or bool((t > self.T_train).any()):
            raise ValueError("batched timesteps outside [1, T_train]")
        return self.alpha_bars[t - 1]


def make_linear_schedule(T_train: int, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    """Linear variance schedule with betas evenly spaced over [beta_start, beta_end]."""
    if T_train < 2:
        raise ValueError("T_train must be >= 2")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError("need 0 < beta_start < beta_end < 1")
    betas = torch.linspace(beta_start, beta_end, T_train, dtype=torch.float64)
    return NoiseSchedule(betas)


def _coeffs(t, sched: NoiseSchedule, x: torch.Tensor):
    """sqrt(alpha_bar_t) and sqrt(1 - alpha_bar_t), broadcastable against x."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        ab = sched.gather_alpha_bar(t).to(x.dtype)
        ab = ab.view(-1, *([1] * (x.ndim - 1)))
    else:
        ab = sched.alpha_bar(int(t))
        ab = torch.tensor(ab, dtype=x.dtype)
    return ab.sqrt(), (1.0 - ab).sqrt()


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor,
             sched: NoiseSchedule) -> torch.Tensor:
    """Forward-noise x0 to timestep t: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps shapes must match")
    sqrt_ab, sqrt_1mab = _coeffs(t, sched, x0)
    return sqrt_ab * x0 + sqrt_1mab * eps


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t,
               sched: NoiseSchedule) -> torch.Tensor:
    """Estimated clean image (x_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t).

    No clamping here; clamping to [-1, 1] belongs at the display boundary.
    """
    sqrt_ab, sqrt_1mab = _coeffs(t, sched, x_t)
    return (x_t - sqrt_1mab * eps_hat) / sqrt_ab


def ddim_step(x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, t_prev: int,
              sched: NoiseSchedule) -> torch.Tensor:
    """Deterministic (eta = 0) reverse step from t to t_prev.

    x_{t_prev} = sqrt(ab_{t_prev}) * x0_hat + sqrt(1 - ab_{t_prev}) * eps_hat,
    with alpha_bar(0) == 1 so the final step returns x0_hat itself.
    """
    if not 0 <= t_prev < t <= sched.T_train:
        raise ValueError(f"invalid step ordering t={t}, t_prev={t_prev}")
    x0_hat = predict_x0(x_t, eps_hat, t, sched)
    ab_prev = sched.alpha_bar(t_prev)
    return (ab_prev ** 0.5) * x0_hat + ((1.0 - ab_prev) ** 0.5) * eps_hat


def make_inference_timesteps(T_train: int, T_infer: int) -> list[int]:
    """Evenly strided decreasing timestep subsequence for few-step sampling.

    Starts at T_train with stride T_train // T_infer; the last entry pairs
    with the virtual t_prev = 0 in the sampling loop.
    """
    if not 1 <= T_infer <= T_train:
        raise ValueError("need 1 <= T_infer <= T_train")
    stride = T_train // T_infer
    ts = [T_train - i * stride for i in range(T_infer)]
    assert ts[-1] >= 1
    return ts
