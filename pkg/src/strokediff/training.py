"""Losses, the denoiser training loop and refinement fine-tuning."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import tensorcore as tc
from .dataset import InMemoryDataset
from .denoiser import ModelBundle, clone_for_refinement, save_bundle
from .diffusion import NoiseSchedule, SamplerConfig, make_schedule, q_sample, sample_normalized
from .errors import ConfigError, NumericalError
from .rasterizer import SoftRasterConfig, soft_raster
from .rng import numpy_rng, torch_generator

log = logging.getLogger(__name__)

DEFAULT_SCALES = ((16, 1.5), (32, 2.5), (64, 4.0))
LOSS_SAMPLES_PER_STROKE = 16


@dataclass
class TrainConfig:
    batch: int = 32
    lr: float = 5e-5
    steps: int = 1000
    lambda_raster: float = 0.2
    cfg_dropout: float = 0.1
    raster_scales: Sequence[Sequence[float]] = DEFAULT_SCALES
    seed: int = 0
    checkpoint_every: int = 0
    warmup_steps: int = 0

    def __post_init__(self):
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise ConfigError("cfg_dropout must be in [0, 1]")
        if self.lambda_raster < 0:
            raise ConfigError("lambda_raster must be >= 0")
        if not self.raster_scales:
            raise ConfigError("raster_scales must be nonempty")
        self.raster_scales = tuple((int(r), float(s)) for r, s in self.raster_scales)


@dataclass
class RefineConfig:
    lr: float = 5e-6
    steps: int = 1000
    source: str = "sampler_outputs"
    perturb_sigma: float = 0.05
    batch: int = 32
    raster_scales: Sequence[Sequence[float]] = DEFAULT_SCALES
    seed: int = 0
    guidance_scale: float = 2.5
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("refine lr must be > 0")
        if self.source not in ("sampler_outputs", "gaussian_perturb"):
            raise ConfigError(f"unknown refine source {self.source!r}")
        if not 0.0 <= self.perturb_sigma < 1.0:
            raise ConfigError("perturb_sigma must be in [0, 1)")
        self.raster_scales = tuple((int(r), float(s)) for r, s in self.raster_scales)


# --------------------------------------------------------------------------
# losses


def loss_points(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute coordinate error (strokes compared slot by slot)."""
    return tc.l1_loss(pred, target)


def _raster_cfg(res: int, sigma: float) -> SoftRasterConfig:
    return SoftRasterConfig(res=(res, res), sigma=sigma, samples_per_stroke=LOSS_SAMPLES_PER_STROKE)


def target_rasters(target: torch.Tensor, scales=DEFAULT_SCALES) -> list[torch.Tensor]:
    """Soft rasters of ``target`` at each scale, without gradient."""
    with torch.no_grad():
        return [soft_raster(target, _raster_cfg(int(r), float(s))) for r, s in scales]


def loss_raster(pred: torch.Tensor, target: torch.Tensor | None, scales=DEFAULT_SCALES,
                target_grad: bool = False, targets: Sequence[torch.Tensor] | None = None) -> torch.Tensor:
    """Mean over scales of the per-pixel squared error between soft rasters.

    ``targets`` may hold precomputed target rasters (see ``target_rasters``).
    """
    if not scales:
        raise ValueError("scales must be nonempty")
    if targets is None:
        if target_grad:
            targets = [soft_raster(target, _raster_cfg(int(r), float(s))) for r, s in scales]
        else:
            targets = target_rasters(target, scales)
    if len(targets) != len(scales):
        raise ValueError(f"{len(targets)} target rasters for {len(scales)} scales")
    total = pred.new_zeros(())
    for (res, sigma), rt in zip(scales, targets):
        rp = soft_raster(pred, _raster_cfg(int(res), float(sigma)))
        total = total + tc.mse_loss(rp, rt.to(rp.dtype))
    return total / len(scales)


class _TargetCache:
    # target rasters depend only on the ground truth, so they are computed once per sample
    def __init__(self, scales):
        self.scales = scales
        self.store: dict[str, list[torch.Tensor]] = {}

    def get(self, ids: Sequence[str], s0: torch.Tensor) -> list[torch.Tensor]:
        missing = [i for i, sid in enumerate(ids) if sid not in self.store]
        if missing:
            fresh = target_rasters(s0[missing], self.scales)
            for j, i in enumerate(missing):
                self.store[ids[i]] = [r[j] for r in fresh]
        return [torch.stack([self.store[sid][k] for sid in ids]) for k in range(len(self.scales))]


def total_loss(pred, target, lambda_raster: float, scales=DEFAULT_SCALES, targets=None):
    lp = loss_points(pred, target)
    lr = loss_raster(pred, target, scales, targets=targets)
    return lp + lambda_raster * lr, lp, lr


# --------------------------------------------------------------------------
# training


def _params(*modules) -> list[torch.Tensor]:
    return [p for m in modules for p in m.parameters()]


def _zero_unused(params) -> None:
    # the null condition is unused on conditioned steps and the encoder on
    # dropped ones; they take an explicit zero gradient for that step
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)


def parameter_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.log])


def _lr_at(step: int, cfg) -> float:
    warm = getattr(cfg, "warmup_steps", 0)
    if warm and step < warm:
        return cfg.lr * (step + 1) / warm
    return cfg.lr


def train(bundle: ModelBundle, data: InMemoryDataset, cfg: TrainConfig,
          sched: NoiseSchedule | None = None, out_dir: str | Path | None = None,
          on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Train denoiser and encoder jointly; returns the per-step log.

    With ``out_dir`` the log is written as JSON lines to ``metrics.jsonl``
    and checkpoints are saved every ``checkpoint_every`` steps and at the end.
    """
    if len(data) == 0:
        raise ConfigError("training dataset is empty")
    sched = sched or make_schedule(bundle.model.config.timesteps)
    if sched.T != bundle.model.config.timesteps:
        raise ConfigError(f"schedule T={sched.T} != model timesteps={bundle.model.config.timesteps}")
    model, encoder = bundle.model, bundle.encoder
    model.train()
    encoder.train()
    opt = tc.Adam(_params(model, encoder), lr=cfg.lr)
    gen = torch_generator(cfg.seed, "train-noise")
    drop_rng = numpy_rng(cfg.seed, "cfg-dropout")
    t_rng = numpy_rng(cfg.seed, "timesteps")
    batches = data.batches(cfg.batch, cfg.seed, epochs=None)
    cache = _TargetCache(cfg.raster_scales)
    result = TrainResult()
    metrics = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = open(out_dir / "metrics.jsonl", "w")
    dtype = next(model.parameters()).dtype
    try:
        for step in range(cfg.steps):
            batch = next(batches)
            s0 = torch.from_numpy(batch.coords).to(dtype)
            b = s0.shape[0]
            t = torch.from_numpy(t_rng.integers(1, sched.T + 1, size=b))
            eps = torch.randn(s0.shape, generator=gen, dtype=dtype)
            s_t = q_sample(s0, t, eps, sched)
            dropped = bool(drop_rng.random() < cfg.cfg_dropout)
            cond = None if dropped else encoder(torch.from_numpy(batch.images).to(dtype))
            pred = model(s_t, t, cond)
            loss, lp, lr = total_loss(pred, s0, cfg.lambda_raster, cfg.raster_scales,
                                      targets=cache.get(batch.ids, s0))
            record = {"step": step, "loss": loss.item(), "points": lp.item(),
                      "raster": lr.item(), "cfg_dropped": dropped}
            if not math.isfinite(record["loss"]):
                log.error("non-finite loss at step %d", step)
                if metrics is not None:
                    metrics.write(json.dumps(record) + "\n")
                raise NumericalError(f"non-finite loss at step {step}", step=step)
            tc.backward(loss)
            _zero_unused(opt.params)
            opt.state.lr = _lr_at(step, cfg)
            opt.step()
            result.log.append(record)
            if metrics is not None:
                metrics.write(json.dumps(record) + "\n")
            if on_step is not None:
                on_step(record)
            if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_bundle(out_dir, bundle, sched.to_dict())
    finally:
        if metrics is not None:
            metrics.close()
        model.eval()
        encoder.eval()
    bundle.schedule = sched.to_dict()
    if out_dir is not None:
        save_bundle(out_dir, bundle, sched.to_dict())
    return result


def _perturb(s0: torch.Tensor, sigma: float, gen: torch.Generator) -> torch.Tensor:
    eps = torch.randn(s0.shape, generator=gen, dtype=s0.dtype)
    return math.sqrt(1.0 - sigma**2) * s0 + sigma * eps


def train_refiner(bundle: ModelBundle, data: InMemoryDataset, cfg: RefineConfig,
                  sched: NoiseSchedule | None = None, out_dir: str | Path | None = None) -> TrainResult:
    """Fine-tune ``bundle.refiner`` (cloned from the model if absent) at t=0.

    The base model and encoder stay frozen; only the refiner is updated,
    using the raster loss alone.
    """
    if len(data) == 0:
        raise ConfigError("training dataset is empty")
    sched = sched or make_schedule(bundle.model.config.timesteps)
    if bundle.refiner is None:
        bundle.refiner = clone_for_refinement(bundle.model)
    model, encoder, refiner = bundle.model, bundle.encoder, bundle.refiner
    model.eval()
    encoder.eval()
    for p in _params(model, encoder):
        p.requires_grad_(False)
    refiner.train()
    opt = tc.Adam(refiner.parameters(), lr=cfg.lr)
    gen = torch_generator(cfg.seed, "refine-noise")
    batches = data.batches(cfg.batch, cfg.seed, epochs=None)
    cache = _TargetCache(cfg.raster_scales)
    dtype = next(refiner.parameters()).dtype
    result = TrainResult()
    metrics = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = open(out_dir / "refine_metrics.jsonl", "w")
    try:
        for step in range(cfg.steps):
            batch = next(batches)
            s0 = torch.from_numpy(batch.coords).to(dtype)
            with torch.no_grad():
                cond = encoder(torch.from_numpy(batch.images).to(dtype))
                if cfg.source == "gaussian_perturb":
                    inputs = _perturb(s0, cfg.perturb_sigma, gen)
                else:
                    scfg = SamplerConfig(guidance_scale=cfg.guidance_scale, stochastic_renoise=True,
                                         seed=cfg.seed * 1_000_003 + step, apply_refinement=False)
                    inputs = sample_normalized(model, cond, scfg, sched, shape=tuple(s0.shape))
            pred = refiner(inputs, torch.zeros(s0.shape[0], dtype=torch.long), cond)
            loss = loss_raster(pred, s0, cfg.raster_scales, targets=cache.get(batch.ids, s0))
            record = {"step": step, "loss": loss.item(), "raster": loss.item()}
            if not math.isfinite(record["loss"]):
                raise NumericalError(f"non-finite refinement loss at step {step}", step=step)
            tc.backward(loss)
            _zero_unused(opt.params)
            opt.step()
            result.log.append(record)
            if metrics is not None:
                metrics.write(json.dumps(record) + "\n")
            if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_bundle(out_dir, bundle, sched.to_dict())
    finally:
        if metrics is not None:
            metrics.close()
        for p in _params(model, encoder):
            p.requires_grad_(True)
        refiner.eval()
    if out_dir is not None:
        save_bundle(out_dir, bundle, sched.to_dict())
    return result
