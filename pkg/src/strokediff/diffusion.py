"""Noise schedule, forward noising and the guided x0-prediction sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .geometry import DEFAULT_CANVAS, Sketch, denormalize
from .rng import torch_generator

ALPHA_BAR_FLOOR = 1e-8


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray
    exponent: float
    offset_s: float

    def sqrt_ab(self, t) -> torch.Tensor:
        return torch.as_tensor(np.sqrt(self.alpha_bar[np.asarray(t)]))

    def to_dict(self) -> dict:
        return {"T": self.T, "exponent": self.exponent, "offset_s": self.offset_s}


def make_schedule(T: int = 50, exponent: float = 0.4, offset_s: float = 0.008) -> NoiseSchedule:
    """Cosine schedule with a configurable exponent.

    ``f(t) = cos(((t/T + s) / (1 + s)) * pi/2) ** exponent`` and
    ``alpha_bar[t] = f(t) / f(0)``, clamped to ``[1e-8, 1]``.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not exponent > 0:
        raise ValueError(f"exponent must be > 0, got {exponent}")
    if not offset_s >= 0:
        raise ValueError(f"offset_s must be >= 0, got {offset_s}")
    t = np.arange(T + 1, dtype=np.float64)
    base = np.cos(((t / T + offset_s) / (1.0 + offset_s)) * math.pi / 2.0)
    f = np.clip(base, 0.0, None) ** exponent
    alpha_bar = np.clip(f / f[0], ALPHA_BAR_FLOOR, 1.0)
    alpha_bar[0] = 1.0
    alpha_bar.setflags(write=False)
    return NoiseSchedule(int(T), alpha_bar, float(exponent), float(offset_s))


def q_sample(s0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """``sqrt(ab_t) * s0 + sqrt(1 - ab_t) * eps``; ``t`` is an int or a per-batch vector."""
    if eps.shape != s0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} does not match {tuple(s0.shape)}")
    t_arr = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    if t_arr.size and (t_arr.min() < 0 or t_arr.max() > sched.T):
        raise ValueError(f"timestep {t} outside [0, {sched.T}]")
    ab = sched.alpha_bar[t_arr]
    a = torch.as_tensor(np.sqrt(ab), dtype=s0.dtype)
    b = torch.as_tensor(np.sqrt(1.0 - ab), dtype=s0.dtype)
    if a.ndim == 1:
        shape = (-1,) + (1,) * (s0.ndim - 1)
        a, b = a.reshape(shape), b.reshape(shape)
    return a * s0 + b * eps


# --------------------------------------------------------------------------
# sampling


@dataclass
class SamplerConfig:
    guidance_scale: float = 2.5
    stochastic_renoise: bool = True
    seed: int = 0
    apply_refinement: bool = True

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")


Denoise = Callable[[torch.Tensor, torch.Tensor, Optional[torch.Tensor]], torch.Tensor]


def cfg_predict(model: Denoise, s_t: torch.Tensor, t: torch.Tensor, cond, s: float) -> torch.Tensor:
    """Guided prediction ``M(x, t, null) + s * (M(x, t, cond) - M(x, t, null))``."""
    if s < 0:
        raise ValueError("guidance scale must be >= 0")
    if s == 1.0:
        return model(s_t, t, cond)
    uncond = model(s_t, t, None)
    if s == 0.0:
        return uncond
    c = model(s_t, t, cond)
    return uncond + s * (c - uncond)


@torch.no_grad()
def sample_normalized(
    model: Denoise,
    cond,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    *,
    shape: tuple[int, ...],
    refiner: Denoise | None = None,
    on_step: Callable[[int, torch.Tensor], None] | None = None,
    dtype: torch.dtype | None = None,
) -> torch.Tensor:
    """Run the T-step loop and return normalized coordinates of ``shape``.

    ``shape`` is ``(B, n, 4, 2)``; ``cond`` is whatever ``model`` accepts as
    its condition (encoded tokens for the real denoiser).
    """
    dtype = dtype or torch.get_default_dtype()
    gen = torch_generator(cfg.seed, "sample")
    x = torch.randn(shape, generator=gen, dtype=dtype)
    fixed_eps = None if cfg.stochastic_renoise else torch.randn(shape, generator=gen, dtype=dtype)
    batch = shape[0]
    x0 = x
    for t in range(sched.T, 0, -1):
        tt = torch.full((batch,), t, dtype=torch.long)
        x0 = cfg_predict(model, x, tt, cond, cfg.guidance_scale)
        if on_step is not None:
            on_step(t, x0)
        if t > 1:
            eps = torch.randn(shape, generator=gen, dtype=dtype) if fixed_eps is None else fixed_eps
            x = q_sample(x0, t - 1, eps, sched)
    if cfg.apply_refinement:
        if refiner is None:
            raise ValueError("apply_refinement is set but no refiner was given")
        x0 = refiner(x0, torch.zeros(batch, dtype=torch.long), cond)
        if on_step is not None:
            on_step(0, x0)
    return x0


def sample(
    model: Denoise,
    refiner: Denoise | None,
    cond,
    cfg: SamplerConfig,
    sched: NoiseSchedule,
    *,
    n_strokes: int | None = None,
    canvas=DEFAULT_CANVAS,
    encoder: Callable[[torch.Tensor], torch.Tensor] | None = None,
    on_step=None,
) -> list[Sketch]:
    """Sample one sketch per conditioning item and return them in canvas units.

    With ``encoder`` given, ``cond`` is a batch of conditioning images
    ``(B, 1, H, W)`` and is encoded once before the loop.
    """
    if n_strokes is None:
        n_strokes = model.config.n_strokes
    if encoder is not None:
        with torch.no_grad():
            cond = encoder(cond)
    batch = _batch_size(cond)
    coords = sample_normalized(
        model, cond, cfg, sched, shape=(batch, n_strokes, 4, 2), refiner=refiner, on_step=on_step
    )
    return [denormalize(c.double().numpy(), canvas) for c in coords]


def _batch_size(cond) -> int:
    if isinstance(cond, torch.Tensor) and cond.ndim >= 3:
        return cond.shape[0]
    return 1
