"""Training loop: assembles l_cdm + alpha_w * l_cam + beta_w * l_att over
paired data, with seeded determinism, CSV loss logging and resumable
checkpoints.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .attention import loss_att, loss_cam, residual_target
from .data import ShadowPair, to_diffusion
from .denoiser import Denoiser, DenoiserConfig
from .schedule import NoiseSchedule, make_linear_schedule, q_sample

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "deshadow-ckpt-v1"
LOSS_LOG_HEADER = "iteration,l_cdm,l_cam,l_att,total"


@dataclass
class TrainConfig:
    T_train: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    alpha_w: float = 0.5   # weight on the classifier loss
    beta_w: float = 0.5    # weight on the attention loss
    learning_rate: float = 2e-4
    batch_size: int = 8
    total_iterations: int = 2000
    seed: int = 0
    attention_gain: float = 5.0
    checkpoint_every: int = 500
    log_every: int = 50
    model: DenoiserConfig = field(default_factory=DenoiserConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = DenoiserConfig(**self.model)
        if self.alpha_w < 0 or self.beta_w < 0:
            raise ValueError("loss weights must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")

    def make_schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T_train, self.beta_start, self.beta_end)


@dataclass
class LossReport:
    iteration: int
    l_cdm: float
    l_cam: float
    l_att: float
    total: float

    def csv_row(self) -> str:
        return (f"{self.iteration},{self.l_cdm!r},{self.l_cam!r},"
                f"{self.l_att!r},{self.total!r}")


def batch_tensors(pairs: list[ShadowPair]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack pairs into (x0, x_cond) float32 batches in [-1, 1] space."""
    x0 = torch.stack([to_diffusion(p.clean) for p in pairs])
    xw = torch.stack([to_diffusion(p.shadow) for p in pairs])
    return x0, xw


def train_step(batch: list[ShadowPair], model: Denoiser,
               optimizer: torch.optim.Optimizer, sched: NoiseSchedule,
               cfg: TrainConfig, generator: torch.Generator,
               iteration: int = 0) -> LossReport:
    """One optimizer update over a batch of shadow pairs.

    Timesteps are drawn uniformly from [1, T_train] per sample; the
    attention input is teacher-forced to the pair's residual target, and
    the classifier sees the un-noised images (shadow label 1, clean 0).
    """
    if not batch:
        raise ValueError("empty batch")
    x0, xw = batch_tensors(batch)
    b = x0.shape[0]
    t = torch.randint(1, sched.T_train + 1, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = q_sample(x0, t, eps, sched)
    m_res = residual_target(x0, xw, gain=cfg.attention_gain)

    eps_hat, a_refined = model(x_t, xw, m_res, t)
    l_cdm = ((eps - eps_hat) ** 2).mean()
    l_att = loss_att(a_refined, m_res)
    l_cam = loss_cam(model.classify(xw).probability,
                     model.classify(x0).probability)
    total = l_cdm + cfg.alpha_w * l_cam + cfg.beta_w * l_att

    if not torch.isfinite(total):
        raise RuntimeError(
            f"non-finite loss at iteration {iteration}: "
            f"l_cdm={float(l_cdm)}, l_cam={float(l_cam)}, l_att={float(l_att)}")

    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    # report recombines in float64 so the weight formula holds exactly
    cdm, cam, att = float(l_cdm), float(l_cam), float(l_att)
    return LossReport(iteration=iteration, l_cdm=cdm, l_cam=cam, l_att=att,
                      total=cdm + cfg.alpha_w * cam + cfg.beta_w * att)


def save_checkpoint(path: Path, model: Denoiser,
                    optimizer: torch.optim.Optimizer, cfg: TrainConfig,
                    iteration: int, generator: torch.Generator) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(cfg),
        "iteration": iteration,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "generator_state": generator.get_state(),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    payload["config"] = TrainConfig(**payload["config"])
    return payload


def load_model(path) -> tuple[Denoiser, TrainConfig, NoiseSchedule]:
    """Rebuild the trained model plus its schedule from a checkpoint."""
    payload = load_checkpoint(path)
    cfg = payload["config"]
    model = Denoiser(cfg.model)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, cfg, cfg.make_schedule()


def train(dataset: list[ShadowPair], cfg: TrainConfig, out_dir,
          resume_from=None) -> Path:
    """Run the full loop; returns the final checkpoint path.

    Writes loss_log.csv and periodic checkpoint_<iter>.pt files under
    out_dir. Resuming restores parameters, optimizer moments and the RNG
    stream so the loss curve continues where it stopped.
    """
    if not dataset:
        raise ValueError("empty dataset: nothing to train on")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    model = Denoiser(cfg.model)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    generator = torch.Generator().manual_seed(cfg.seed + 1)
    sched = cfg.make_schedule()
    start_iter = 0
    log_rows = [LOSS_LOG_HEADER]

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        model.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        generator.set_state(payload["generator_state"])
        start_iter = payload["iteration"]
        log.info("resumed from %s at iteration %d", resume_from, start_iter)
        prior_log = out_dir / "loss_log.csv"
        if prior_log.exists():
            kept = [r for r in prior_log.read_text().splitlines()
                    if r and not r.startswith("iteration")
                    and int(r.split(",")[0]) <= start_iter]
            log_rows += kept

    model.train()
    for it in range(start_iter + 1, cfg.total_iterations + 1):
        idx = torch.randint(len(dataset), (cfg.batch_size,), generator=generator)
        batch = [dataset[i] for i in idx.tolist()]
        report = train_step(batch, model, optimizer, sched, cfg, generator,
                            iteration=it)
        log_rows.append(report.csv_row())
        if it % cfg.log_every == 0 or it == cfg.total_iterations:
            log.info("iter %d: total=%.4f cdm=%.4f cam=%.4f att=%.4f",
                     it, report.total, report.l_cdm, report.l_cam, report.l_att)
        if cfg.checkpoint_every and it % cfg.checkpoint_every == 0 \
                and it != cfg.total_iterations:
            save_checkpoint(out_dir / f"checkpoint_{it:06d}.pt", model,
                            optimizer, cfg, it, generator)

    (out_dir / "loss_log.csv").write_text("\n".join(log_rows) + "\n")
    final_path = out_dir / "checkpoint_final.pt"
    save_checkpoint(final_path, model, optimizer, cfg, cfg.total_iterations,
                    generator)
    return final_path
