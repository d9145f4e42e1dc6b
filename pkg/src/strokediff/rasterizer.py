"""Soft (differentiable) and hard (binary) stroke rasterization, PNG I/O.

The soft rasterizer works on normalized coordinates (model space,
``[-2, 2]`` covers the canvas). Each stroke is sampled at a fixed set of
Bezier parameters; a pixel's intensity is a smooth maximum of Gaussian
kernels centred on those samples::

    g_q   = exp(-|p - q|^2 / (2 sigma^2))
    I(p)  = clamp(tau * log(1 + sum_q (exp(g_q / tau) - 1)), 0, 1)

The ``exp(g/tau) - 1`` form makes a far-away sample contribute exactly
nothing, so an empty neighbourhood gives 0 and the result is continuous at
the window cutoff. For a single sample it reduces to ``g_q``.

The Gaussian factors as ``gy * gx``, so ``exp(g/tau) - 1`` is expanded as a
power series and each term becomes a batched matmul between per-row and
per-column factors. The series is truncated once the remaining tail is
below ``SERIES_TOL`` relative to the leading value. The window is applied to
each factor, i.e. a square of half-width ``window_radius * sigma``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError
from .geometry import Sketch, bernstein, sample_sketch


@dataclass(frozen=True)
class SoftRasterConfig:
    res: tuple[int, int] = (64, 64)
    sigma: float = 2.0
    samples_per_stroke: int = 16
    window_radius: float = 6.0
    smoothmax_temp: float = 0.05

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        if self.window_radius < 3:
            raise ValueError("window_radius must be >= 3 (multiples of sigma)")
        if self.samples_per_stroke < 2:
            raise ValueError("samples_per_stroke must be >= 2")
        if self.smoothmax_temp <= 0:
            raise ValueError("smoothmax_temp must be > 0")


_BASIS_CACHE: dict[tuple[int, torch.dtype], torch.Tensor] = {}


def _basis(m: int, dtype: torch.dtype) -> torch.Tensor:
    key = (m, dtype)
    if key not in _BASIS_CACHE:
        _BASIS_CACHE[key] = torch.from_numpy(bernstein(np.linspace(0.0, 1.0, m))).to(dtype)
    return _BASIS_CACHE[key]


def _pixel_centers(res, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    h, w = res
    ys = torch.arange(h, dtype=dtype) + 0.5
    xs = torch.arange(w, dtype=dtype) + 0.5
    return ys, xs


SERIES_TOL = 1e-10


def _series_coeffs(lam: float) -> list[float]:
    """``lam**k / k!`` for k = 1..K with the Poisson tail past K below SERIES_TOL."""
    coeffs = []
    log_c = 0.0
    k = 0
    while True:
        k += 1
        log_c += math.log(lam) - math.log(k)
        coeffs.append(math.exp(log_c))
        # tail of the Poisson(lam) pmf beyond k, bounded by a geometric series
        nxt = log_c + math.log(lam) - math.log(k + 1) - lam
        if k + 2 > lam and math.exp(nxt) * (k + 2) / (k + 2 - lam) < SERIES_TOL:
            return coeffs


@contextmanager
def _flush_denormals():
    # high powers of the factors underflow; denormal arithmetic is ~10x slower
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


class _SeparableExpSum(torch.autograd.Function):
    """``S[b,h,w] = sum_q sum_k c_k (ey[b,h,q] ex[b,w,q])**k`` with an analytic backward."""

    @staticmethod
    def forward(ctx, ey, ex, coeffs):
        with _flush_denormals():
            out = _SeparableExpSum._sum(ey, ex, coeffs)
        ctx.save_for_backward(ey, ex)
        ctx.coeffs = coeffs
        return out

    @staticmethod
    def _sum(ey, ex, coeffs):
        a, b = ey, ex
        out = ey.new_zeros(ey.shape[0], ey.shape[1], ex.shape[1])
        for k, c in enumerate(coeffs, start=1):
            if k > 1:
                a = a * ey
                b = b * ex
            out.baddbmm_(a, b.transpose(1, 2), alpha=c)
        return out

    @staticmethod
    def backward(ctx, grad):
        ey, ex = ctx.saved_tensors
        with _flush_denormals():
            return _SeparableExpSum._grad(grad, ey, ex, ctx.coeffs)

    @staticmethod
    def _grad(grad, ey, ex, coeffs):
        gt = grad.transpose(1, 2)
        g_ey = torch.zeros_like(ey)
        g_ex = torch.zeros_like(ex)
        a_prev = b_prev = None
        a, b = ey, ex
        for k, c in enumerate(coeffs, start=1):
            if k > 1:
                a_prev, b_prev = a, b
                a = a * ey
                b = b * ex
            gy = torch.bmm(grad, b)
            gx = torch.bmm(gt, a)
            if a_prev is not None:
                gy.mul_(a_prev)
                gx.mul_(b_prev)
            g_ey.add_(gy, alpha=k * c)
            g_ex.add_(gx, alpha=k * c)
        return g_ey, g_ex, None


def soft_raster(coords: torch.Tensor, cfg: SoftRasterConfig = SoftRasterConfig()) -> torch.Tensor:
    """Rasterize normalized strokes ``(..., n, 4, 2)`` to ``(..., H, W)``."""
    if coords.shape[-2:] != (4, 2):
        raise ValueError(f"expected (..., n, 4, 2) coordinates, got {tuple(coords.shape)}")
    h, w = cfg.res
    batch_shape = coords.shape[:-3]
    n = coords.shape[-3]
    if n == 0:
        return coords.new_zeros(*batch_shape, h, w)
    flat = coords.reshape(-1, n, 4, 2)
    lam = 1.0 / cfg.smoothmax_temp
    # large 1/tau overflows single precision in the series sum
    work = coords.dtype if lam <= 30.0 else torch.float64
    basis = _basis(cfg.samples_per_stroke, work)
    # (B, n*m, 2) sample points in grid pixels
    pts = torch.einsum("mk,bnkd->bnmd", basis, flat.to(work)).reshape(flat.shape[0], -1, 2)
    px = (pts[..., 0] + 2.0) * (w / 4.0)
    py = (pts[..., 1] + 2.0) * (h / 4.0)
    ys, xs = _pixel_centers(cfg.res, work)
    ey = _factor(ys, py, cfg)
    ex = _factor(xs, px, cfg)
    total = _SeparableExpSum.apply(ey, ex, _series_coeffs(lam))
    grid = (cfg.smoothmax_temp * torch.log1p(total)).clamp(0.0, 1.0).to(coords.dtype)
    return grid.reshape(*batch_shape, h, w)


def _factor(centers: torch.Tensor, pos: torch.Tensor, cfg: SoftRasterConfig) -> torch.Tensor:
    # (B, L, P) one-dimensional Gaussian factor, zero outside the window
    d = centers[None, :, None] - pos[:, None, :]
    f = torch.exp(-(d * d) / (2.0 * cfg.sigma**2))
    return torch.where(d.abs() <= cfg.window_radius * cfg.sigma, f, torch.zeros_like(f))


# --------------------------------------------------------------------------
# hard raster


def hard_raster(sketch: Sketch, res=(256, 256), width_px: float = 2.0, samples: int = 64) -> np.ndarray:
    """Binary grid: 1 where a pixel centre is within ``width_px / 2`` of a stroke.

    ``res`` is ``(H, W)``; sketch coordinates are scaled from its canvas.
    """
    if width_px <= 0:
        raise ValueError("width_px must be > 0")
    h, w = res
    grid = np.zeros((h, w), dtype=np.float64)
    for stroke_mask in _stroke_masks(sketch, res, width_px, max(samples, 64)):
        if stroke_mask is not None:
            (r0, c0), mask = stroke_mask
            grid[r0 : r0 + mask.shape[0], c0 : c0 + mask.shape[1]][mask] = 1.0
    return grid


def stroke_pixels(sketch: Sketch, res, width_px: float = 2.0, samples: int = 64) -> list[np.ndarray]:
    """Per-stroke flat pixel indices covered by the hard raster."""
    h, w = res
    out = []
    for stroke_mask in _stroke_masks(sketch, res, width_px, max(samples, 64)):
        if stroke_mask is None:
            out.append(np.zeros(0, dtype=np.int64))
            continue
        (r0, c0), mask = stroke_mask
        rr, cc = np.nonzero(mask)
        out.append((rr + r0) * w + (cc + c0))
    return out


def _stroke_masks(sketch: Sketch, res, width_px: float, samples: int):
    h, w = res
    if len(sketch) == 0:
        return
    scale = np.array([w / sketch.canvas[0], h / sketch.canvas[1]])
    polys = sample_sketch(sketch, samples) * scale
    half = width_px / 2.0
    for poly in polys:
        lo = np.floor(poly.min(axis=0) - half).astype(int)
        hi = np.ceil(poly.max(axis=0) + half).astype(int)
        c0, r0 = max(lo[0], 0), max(lo[1], 0)
        c1, r1 = min(hi[0] + 1, w), min(hi[1] + 1, h)
        if c0 >= c1 or r0 >= r1:
            yield None
            continue
        cy, cx = np.mgrid[r0:r1, c0:c1]
        pix = np.stack([cx.ravel() + 0.5, cy.ravel() + 0.5], axis=-1)  # (K, 2)
        a, b = poly[:-1], poly[1:]
        ab = b - a
        len2 = (ab**2).sum(-1)
        rel = pix[:, None, :] - a[None, :, :]
        t = np.where(len2 > 0, (rel * ab).sum(-1) / np.where(len2 > 0, len2, 1.0), 0.0)
        t = np.clip(t, 0.0, 1.0)
        closest = a[None] + t[..., None] * ab[None]
        d2 = ((pix[:, None, :] - closest) ** 2).sum(-1).min(axis=1)
        yield (r0, c0), (d2 <= half * half).reshape(r1 - r0, c1 - c0)


# --------------------------------------------------------------------------
# PNG


def to_bytes(grid) -> np.ndarray:
    g = np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0)
    return np.floor(g * 255.0 + 0.5).astype(np.uint8)


def save_png(grid, path: str | Path) -> None:
    Image.fromarray(to_bytes(grid), mode="L").save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    """Load an 8-bit grayscale PNG as floats in ``[0, 1]``."""
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise DataError(f"{path}: expected 8-bit grayscale PNG, got mode {img.mode}")
            arr = np.asarray(img, dtype=np.float64)
    except (OSError, SyntaxError) as exc:
        raise DataError(f"{path}: cannot read PNG ({exc})") from None
    return arr / 255.0


def load_gray(path: str | Path, res: tuple[int, int] | None = None) -> np.ndarray:
    """Load any image, convert to grayscale and optionally box-resize to ``(H, W)``."""
    try:
        with Image.open(path) as img:
            img = img.convert("L")
            if res is not None and img.size != (res[1], res[0]):
                img = img.resize((res[1], res[0]), Image.Resampling.BOX)
            arr = np.asarray(img, dtype=np.float64)
    except (OSError, SyntaxError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from None
    return arr / 255.0


def box_downsample(grid: np.ndarray, factor: int) -> np.ndarray:
    h, w = grid.shape
    if h % factor or w % factor:
        raise ValueError(f"grid {grid.shape} not divisible by {factor}")
    return grid.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
