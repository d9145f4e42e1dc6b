"""Attention-guided stroke initialization and stroke sorting.

Initialization splits the object mask into ``k`` roughly equal-area regions
with an attention-weighted K-means, hands out half the strokes evenly over
regions and half in proportion to each region's mean attention, and places
each region's share at K-means centroids of the region's pixels.

Sorting ranks strokes by how much of their raster falls on the mask's
contour band plus their mean attention.

Pixel coordinates are ``(x, y)`` of pixel centres, i.e. column + 0.5 and
row + 0.5, in the attention/mask grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError
from .geometry import Sketch, sample_sketch
from .rasterizer import load_gray, stroke_pixels
from .rng import numpy_rng

MAX_LLOYD_ITERS = 100
CENTROID_TOL_PX = 0.5
BALANCE_TOL = 0.10


@dataclass(frozen=True)
class AttentionMask:
    attention: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        att = np.asarray(self.attention, dtype=np.float64)
        mask = np.asarray(self.mask).astype(bool)
        if att.shape != mask.shape or att.ndim != 2:
            raise DataError(f"attention {att.shape} and mask {mask.shape} must be equal 2-D grids")
        if not np.all(np.isfinite(att)) or att.min(initial=0.0) < 0:
            raise DataError("attention must be finite and non-negative")
        object.__setattr__(self, "attention", att)
        object.__setattr__(self, "mask", mask)

    @property
    def res(self) -> tuple[int, int]:
        return self.mask.shape

    def foreground(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat indices and (x, y) pixel-centre coordinates of mask pixels."""
        idx = np.flatnonzero(self.mask)
        rows, cols = np.divmod(idx, self.mask.shape[1])
        return idx, np.stack([cols + 0.5, rows + 0.5], axis=1)

    @classmethod
    def from_png(cls, attention_path, mask_path) -> "AttentionMask":
        mask = load_gray(mask_path) >= 128 / 255
        att = load_gray(attention_path)
        if att.shape != mask.shape:
            att = load_gray(attention_path, res=mask.shape)
        peak = att.max()
        if peak > 0:
            att = att / peak
        return cls(att, mask)


@dataclass(frozen=True)
class RegionPartition:
    labels: np.ndarray
    k: int

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels[self.labels >= 0], minlength=self.k)


def default_regions(n: int) -> int:
    return max(1, round(math.sqrt(n)))


# --------------------------------------------------------------------------
# K-means


def _kmeanspp(coords: np.ndarray, weights: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(coords)
    w = weights if weights.sum() > 0 else np.ones(n)
    first = rng.choice(n, p=w / w.sum())
    centers = [coords[first]]
    d2 = ((coords - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        score = w * d2
        total = score.sum()
        nxt = rng.choice(n, p=score / total) if total > 0 else rng.choice(n)
        centers.append(coords[nxt])
        d2 = np.minimum(d2, ((coords - coords[nxt]) ** 2).sum(1))
    return np.array(centers, dtype=np.float64)


def _assign(coords: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d2 = ((coords[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    return d2.argmin(1), d2


def weighted_kmeans(coords: np.ndarray, weights: np.ndarray, k: int, rng: np.random.Generator):
    """Weighted K-means++ seeding followed by Lloyd iterations.

    Stops when no centroid moves by ``CENTROID_TOL_PX`` or more, or after
    ``MAX_LLOYD_ITERS``. Returns ``(labels, centers)``; each centre is the
    weighted mean of the points labelled with it (plain mean when the
    cluster's weights sum to zero).
    """
    coords = np.asarray(coords, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if k > len(coords):
        raise ValueError(f"k={k} exceeds the number of points ({len(coords)})")
    centers = _kmeanspp(coords, weights, k, rng)
    labels = np.zeros(len(coords), dtype=int)
    for _ in range(MAX_LLOYD_ITERS):
        labels, d2 = _assign(coords, centers)
        new = np.empty_like(centers)
        for c in range(k):
            members = labels == c
            if not members.any():
                # reseed an empty cluster at the point farthest from its centre
                far = d2[np.arange(len(coords)), labels].argmax()
                labels[far] = c
                members = labels == c
            w = weights[members]
            pts = coords[members]
            new[c] = (w[:, None] * pts).sum(0) / w.sum() if w.sum() > 0 else pts.mean(0)
        shift = np.sqrt(((new - centers) ** 2).sum(1)).max()
        centers = new
        if shift < CENTROID_TOL_PX:
            break
    return labels, centers


def _capacity(total: int, k: int) -> tuple[int, int]:
    target = total / k
    lo = min(math.floor(target), math.ceil(target * (1 - BALANCE_TOL)))
    hi = max(math.ceil(target), math.floor(target * (1 + BALANCE_TOL)))
    return lo, hi


def balance(coords: np.ndarray, labels: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Greedy capacity repair: move the cheapest pixels out of over-full
    clusters and into under-full ones until every size is within bounds."""
    labels = labels.copy()
    lo, hi = _capacity(len(coords), k)
    dist = np.sqrt(((coords[:, None, :] - centers[None, :, :]) ** 2).sum(-1))
    sizes = np.bincount(labels, minlength=k)

    def move(src_ok, dst_ok, amount_fn):
        nonlocal sizes
        while True:
            src = np.flatnonzero(src_ok(sizes))
            dst = np.flatnonzero(dst_ok(sizes))
            if len(src) == 0 or len(dst) == 0:
                return
            cand = np.isin(labels, src)
            idx = np.flatnonzero(cand)
            cost = dist[idx][:, dst] - dist[idx, labels[idx]][:, None]
            flat = cost.argmin()
            i, j = divmod(flat, len(dst))
            s, d = labels[idx[i]], dst[j]
            n_move = amount_fn(sizes[s], sizes[d])
            # cheapest pixels of cluster s with respect to destination d
            from_s = np.flatnonzero(labels == s)
            order = np.argsort(dist[from_s, d] - dist[from_s, s], kind="stable")[:n_move]
            labels[from_s[order]] = d
            sizes = np.bincount(labels, minlength=k)

    move(lambda z: z > hi, lambda z: z < hi, lambda a, b: max(1, min(a - hi, hi - b)))
    move(lambda z: z > lo, lambda z: z < lo, lambda a, b: max(1, min(a - lo, lo - b)))
    return labels


def partition_regions(am: AttentionMask, k: int, seed: int = 0) -> RegionPartition:
    idx, coords = am.foreground()
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(idx) == 0:
        raise DataError("mask has no foreground pixels")
    if k > len(idx):
        raise ValueError(f"k={k} exceeds the foreground pixel count ({len(idx)})")
    weights = am.attention.ravel()[idx]
    rng = numpy_rng(seed, "partition")
    labels, centers = weighted_kmeans(coords, weights, k, rng)
    labels = balance(coords, labels, centers, k)
    grid = np.full(am.mask.size, -1, dtype=int)
    grid[idx] = labels
    return RegionPartition(grid.reshape(am.mask.shape), k)


# --------------------------------------------------------------------------
# apportionment


def largest_remainder(total: int, shares) -> np.ndarray:
    """Integer apportionment of ``total`` over ``shares``; ties go to the lower index."""
    shares = np.asarray(shares, dtype=np.float64)
    k = len(shares)
    if total == 0 or k == 0:
        return np.zeros(k, dtype=int)
    s = shares.sum()
    quotas = np.full(k, total / k) if s <= 0 else total * shares / s
    base = np.floor(quotas + 1e-9).astype(int)
    rem = np.round(quotas - base, 9)
    left = total - base.sum()
    order = sorted(range(k), key=lambda i: (-rem[i], i))
    for i in order[:left]:
        base[i] += 1
    return base


def region_mean_attention(partition: RegionPartition, am: AttentionMask) -> np.ndarray:
    labels = partition.labels.ravel()
    fg = labels >= 0
    sums = np.bincount(labels[fg], weights=am.attention.ravel()[fg], minlength=partition.k)
    counts = np.bincount(labels[fg], minlength=partition.k)
    return np.divide(sums, counts, out=np.zeros(partition.k), where=counts > 0)


def allocate_points(partition: RegionPartition, am: AttentionMask, n: int) -> np.ndarray:
    """Half of ``n`` split evenly across regions, the rest by mean attention."""
    if n < partition.k:
        raise ValueError(f"n={n} must be >= k={partition.k}")
    equal = largest_remainder(n // 2, np.ones(partition.k))
    prop = largest_remainder(n - n // 2, region_mean_attention(partition, am))
    return equal + prop


def place_points(partition: RegionPartition, region_id: int, count: int, seed: int = 0) -> np.ndarray:
    """``count`` well-spread points inside one region, shape ``(count, 2)``."""
    rows, cols = np.nonzero(partition.labels == region_id)
    coords = np.stack([cols + 0.5, rows + 0.5], axis=1)
    if count < 0:
        raise ValueError("count must be >= 0")
    if count > len(coords):
        raise ValueError(f"count={count} exceeds region {region_id} size ({len(coords)})")
    if count == 0:
        return np.zeros((0, 2))
    rng = numpy_rng(seed, "place", region_id)
    _, centers = weighted_kmeans(coords, np.ones(len(coords)), count, rng)
    # snap to the nearest pixel of the region
    nearest = ((centers[:, None, :] - coords[None, :, :]) ** 2).sum(-1).argmin(1)
    return coords[nearest]


def init_strokes(points, radius: float = 256 / 100, seed: int = 0, canvas=(256, 256)) -> Sketch:
    """One stroke per point: p0 at the point, p1..p3 jittered within ``radius``."""
    if radius <= 0:
        raise ValueError("radius must be > 0")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    rng = numpy_rng(seed, "init-strokes")
    offsets = rng.uniform(-radius, radius, size=(len(pts), 3, 2))
    strokes = np.concatenate([pts[:, None, :], pts[:, None, :] + offsets], axis=1)
    return Sketch(strokes, canvas)


def initialize_sketch(am: AttentionMask, n: int = 32, seed: int = 0, canvas=(256, 256),
                      k: int | None = None, radius: float | None = None) -> Sketch:
    """Full initialization pipeline: regions, allocation, placement, strokes."""
    k = default_regions(n) if k is None else k
    partition = partition_regions(am, k, seed)
    counts = allocate_points(partition, am, n)
    sizes = partition.sizes()
    # a region can't host more seed points than it has pixels
    while np.any(counts > sizes):
        over = int(np.argmax(counts - sizes))
        counts[over] -= 1
        room = np.flatnonzero(counts < sizes)
        counts[room[np.argmax(sizes[room] - counts[room])]] += 1
    points = np.concatenate([place_points(partition, r, int(c), seed) for r, c in enumerate(counts)])
    h, w = am.res
    points = points * np.array([canvas[0] / w, canvas[1] / h])
    radius = canvas[0] / 100 if radius is None else radius
    return init_strokes(points, radius, seed, canvas)


# --------------------------------------------------------------------------
# sorting


def contour_band(mask: np.ndarray, r_dilate: int = 2, r_erode: int = 2) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    dil = ndimage.binary_dilation(mask, structure=np.ones((2 * r_dilate + 1,) * 2, dtype=bool))
    ero = ndimage.binary_erosion(mask, structure=np.ones((2 * r_erode + 1,) * 2, dtype=bool),
                                 border_value=0)
    return dil & ~ero


def stroke_scores(sketch: Sketch, am: AttentionMask, beta: float = 1.0, r_dilate: int = 2,
                  r_erode: int = 2, width_px: float = 2.0, samples: int = 64) -> np.ndarray:
    if not am.mask.any():
        raise DataError("mask has no foreground pixels")
    n = len(sketch)
    if n == 0:
        return np.zeros(0)
    h, w = am.res
    band = contour_band(am.mask, r_dilate, r_erode).ravel()
    contour = np.array([band[pix].sum() for pix in stroke_pixels(sketch, (h, w), width_px, samples)],
                       dtype=np.float64)
    pts = sample_sketch(sketch, samples) * np.array([w / sketch.canvas[0], h / sketch.canvas[1]])
    cols = np.floor(pts[..., 0]).astype(int)
    rows = np.floor(pts[..., 1]).astype(int)
    inside = (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    att = np.where(inside, am.attention[np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1)], 0.0)
    attention = att.mean(axis=1)
    score = np.zeros(n)
    if contour.max() > 0:
        score += contour / contour.max()
    if attention.max() > 0:
        score += beta * attention / attention.max()
    return score


def sort_strokes(sketch: Sketch, am: AttentionMask, beta: float = 1.0, **kwargs) -> np.ndarray:
    """Permutation putting contour-heavy, salient strokes first (stable on ties)."""
    score = stroke_scores(sketch, am, beta, **kwargs)
    return np.argsort(-score, kind="stable")
