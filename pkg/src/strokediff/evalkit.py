"""Fidelity metrics: stroke-space Chamfer distance, raster MSE and MS-SSIM."""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from .geometry import Sketch, sample_sketch
from .rasterizer import hard_raster

EVAL_RES = (64, 64)
EVAL_WIDTH_PX = 1.0
CHAMFER_SAMPLES = 16

# per-scale exponents for five scales, finest first
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

METRICS = ("chamfer", "raster_mse", "ms_ssim")


# --------------------------------------------------------------------------
# chamfer


def _pooled_points(sketch: Sketch, samples_per_stroke: int) -> np.ndarray:
    if len(sketch) == 0:
        raise ValueError("chamfer is undefined for an empty sketch")
    pts = sample_sketch(sketch, samples_per_stroke).reshape(-1, 2)
    # same affine map as geometry.normalize
    return pts * (4.0 / np.asarray(sketch.canvas, dtype=np.float64)) - 2.0


def chamfer(a: Sketch, b: Sketch, samples_per_stroke: int = CHAMFER_SAMPLES) -> float:
    """Symmetric Chamfer distance between pooled stroke samples, in normalized units.

    Half the sum of the mean nearest-neighbour distance a->b and b->a.
    """
    pa = _pooled_points(a, samples_per_stroke)
    pb = _pooled_points(b, samples_per_stroke)
    da, _ = cKDTree(pb).query(pa)
    db, _ = cKDTree(pa).query(pb)
    return 0.5 * (float(np.mean(da)) + float(np.mean(db)))


# --------------------------------------------------------------------------
# MS-SSIM


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # separable Gaussian, keeping only positions where the window fits
    out = correlate1d(correlate1d(img, win, axis=0, mode="constant"), win, axis=1, mode="constant")
    r = len(win) // 2
    return out[r : img.shape[0] - r, r : img.shape[1] - r]


def _ssim_terms(x: np.ndarray, y: np.ndarray, win: np.ndarray) -> tuple[float, float]:
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2.0 * sxy + c2) / (sxx + syy + c2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def ms_ssim_scales(side: int) -> int:
    """Largest scale count <= 5 whose coarsest image still fits the window."""
    m = 0
    while m < len(MS_SSIM_WEIGHTS) and side / 2**m >= SSIM_WINDOW:
        m += 1
    return m


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def ms_ssim(a, b) -> float:
    """Multi-scale SSIM of two grayscale grids in ``[0, 1]``.

    Uses an 11x11 Gaussian window (sigma 1.5) and the standard per-scale
    weights. Small images use fewer scales with the leading weights
    renormalized to sum to one; negative contrast terms are clamped to 0.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.ndim != 2 or x.shape != y.shape:
        raise ValueError(f"resolution mismatch: {x.shape} vs {y.shape}")
    m = ms_ssim_scales(min(x.shape))
    if m == 0:
        raise ValueError(f"image {x.shape} is smaller than the {SSIM_WINDOW}px window")
    weights = np.asarray(MS_SSIM_WEIGHTS[:m])
    weights = weights / weights.sum()
    win = _gaussian_window()
    value = 1.0
    for j in range(m):
        full, cs = _ssim_terms(x, y, win)
        term = full if j == m - 1 else cs
        value *= max(term, 0.0) ** weights[j]
        if j < m - 1:
            x, y = _downsample(x), _downsample(y)
    return float(min(max(value, 0.0), 1.0))


def raster_mse(a, b) -> float:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"resolution mismatch: {x.shape} vs {y.shape}")
    return float(np.mean((x - y) ** 2))


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    ids: list[str]
    per_sample: dict[str, list[float]]
    mean: dict[str, float] = field(default_factory=dict)
    median: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name, values in self.per_sample.items():
            if len(values) != len(self.ids):
                raise ValueError(f"metric {name!r} has {len(values)} values for {len(self.ids)} ids")
        if not self.mean:
            self.mean = {k: float(np.mean(v)) if v else math.nan for k, v in self.per_sample.items()}
        if not self.median:
            self.median = {k: float(statistics.median(v)) if v else math.nan for k, v in self.per_sample.items()}

    def to_dict(self) -> dict:
        return {"ids": list(self.ids), "per_sample": self.per_sample, "mean": self.mean, "median": self.median}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(ids=d["ids"], per_sample={k: [float(x) for x in v] for k, v in d["per_sample"].items()},
                   mean=d["mean"], median=d["median"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def evaluate(outputs: Sequence[Sketch], ground_truth: Sequence[Sketch], cond_images=None,
             ids: Sequence[str] | None = None) -> EvalReport:
    """Per-sample and aggregate metrics for aligned output/target lists.

    Raster metrics compare 64x64 hard rasters. With ``cond_images`` an extra
    ``ms_ssim_cond`` column compares each output raster to its conditioning image.
    """
    if len(outputs) != len(ground_truth):
        raise ValueError(f"misaligned lists: {len(outputs)} outputs vs {len(ground_truth)} targets")
    if cond_images is not None and len(cond_images) != len(outputs):
        raise ValueError(f"misaligned lists: {len(cond_images)} conditioning images for {len(outputs)} outputs")
    ids = [str(i) for i in range(len(outputs))] if ids is None else list(ids)
    if len(ids) != len(outputs):
        raise ValueError("ids do not match the number of outputs")
    cols: dict[str, list[float]] = {k: [] for k in METRICS}
    if cond_images is not None:
        cols["ms_ssim_cond"] = []
    for i, (out, gt) in enumerate(zip(outputs, ground_truth)):
        ro = hard_raster(out, EVAL_RES, EVAL_WIDTH_PX)
        rg = hard_raster(gt, EVAL_RES, EVAL_WIDTH_PX)
        cols["chamfer"].append(chamfer(out, gt))
        cols["raster_mse"].append(raster_mse(ro, rg))
        cols["ms_ssim"].append(ms_ssim(ro, rg))
        if cond_images is not None:
            cols["ms_ssim_cond"].append(ms_ssim(ro, np.asarray(cond_images[i], dtype=np.float64)))
    return EvalReport(ids=ids, per_sample=cols)
