"""Conditional DDIM reverse sampling with attention chaining and the
key-similarity early-stopping criterion. Records full trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .attention import init_attention
from .schedule import NoiseSchedule, ddim_step, make_inference_timesteps, predict_x0
from .vit_sim import loss_sim

MIN_STOP_STEP = 3  # earliest step at which the stop rule may fire


@dataclass
class SamplingConfig:
    T_infer: int = 25
    lambda_sim: float = 2.0
    stop_patience: int = 1
    stop_rel_tol: float = 0.01
    seed: int = 0
    stop_enabled: bool = True
    sim_layer: int = 11

    def __post_init__(self):
        if self.T_infer < 1:
            raise ValueError("T_infer must be >= 1")
        if self.lambda_sim < 0:
            raise ValueError("lambda_sim must be >= 0")


@dataclass
class StepRecord:
    t: int
    x_t: torch.Tensor
    eps_hat: torch.Tensor
    x0_hat: torch.Tensor
    attention: torch.Tensor
    loss_sim: float
    loss_total: float


@dataclass
class SampleTrajectory:
    records: list[StepRecord] = field(default_factory=list)
    final_image: torch.Tensor | None = None
    steps_executed: int = 0
    stopped_early: bool = False

    def sim_losses(self) -> list[float]:
        return [r.loss_sim for r in self.records]

    def total_losses(self) -> list[float]:
        return [r.loss_total for r in self.records]


def stop_check(loss_history, cfg: SamplingConfig) -> bool:
    """True once the guidance loss has stopped improving.

    Fires when the loss grew by more than stop_rel_tol (relative to the
    preceding value) for stop_patience consecutive steps; never before
    MIN_STOP_STEP recorded losses.
    """
    n = len(loss_history)
    if n < max(MIN_STOP_STEP, cfg.stop_patience + 1):
        return False
    for i in range(cfg.stop_patience):
        latest = loss_history[n - 1 - i]
        prev = loss_history[n - 2 - i]
        if not latest > prev * (1.0 + cfg.stop_rel_tol):
            return False
    return True


@torch.no_grad()
def sample(x_cond: torch.Tensor, denoiser, sched: NoiseSchedule, extractor,
           cfg: SamplingConfig) -> tuple[torch.Tensor, SampleTrajectory]:
    """Run the reverse chain on one conditioning image (3, H, W).

    Starts from seeded Gaussian noise with CAM-initialized attention; each
    step predicts noise, estimates the clean image, scores it against the
    condition's self-similarity descriptor and chains the refined attention
    into the next step. Returns the restored image and the trajectory.
    """
    if x_cond.ndim != 3:
        raise ValueError("x_cond must be a single (3, H, W) image")
    gen = torch.Generator().manual_seed(cfg.seed)
    x = torch.randn(x_cond.shape, generator=gen, dtype=x_cond.dtype)
    a = init_attention(x_cond, denoiser)

    timesteps = make_inference_timesteps(sched.T_train, cfg.T_infer)
    traj = SampleTrajectory()
    use_stop = cfg.stop_enabled and cfg.lambda_sim > 0 and extractor is not None

    for i, t in enumerate(timesteps):
        t_prev = timesteps[i + 1] if i + 1 < len(timesteps) else 0
        eps_hat, a_next = denoiser(x, x_cond, a, t)
        x0_hat = predict_x0(x, eps_hat, t, sched)
        l_sim = float(loss_sim(x_cond, x0_hat, extractor, cfg.sim_layer)) \
            if extractor is not None else 0.0
        l_total = cfg.lambda_sim * l_sim
        traj.records.append(StepRecord(
            t=t, x_t=x.clone(), eps_hat=eps_hat.clone(), x0_hat=x0_hat,
            attention=a.clone(), loss_sim=l_sim, loss_total=l_total))
        if use_stop and stop_check(traj.total_losses(), cfg):
            traj.stopped_early = True
            break
        x = ddim_step(x, eps_hat, t, t_prev, sched)
        a = a_next

    traj.steps_executed = len(traj.records)
    if traj.stopped_early:
        best = min(traj.records, key=lambda r: r.loss_total)
        final = best.x0_hat
    else:
        final = traj.records[-1].x0_hat  # the t_prev = 0 step output
    traj.final_image = final
    return final, traj
