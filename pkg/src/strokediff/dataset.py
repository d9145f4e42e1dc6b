"""Toy sketch/image pairs and the on-disk paired-dataset layout.

Layout (one directory per sample)::

    <root>/manifest.json
    <root>/<id>/image.png       conditioning image (any size, resized to 64x64 on load)
    <root>/<id>/sketch.svg      n sorted strokes
    <root>/<id>/mask.png        optional object mask
    <root>/<id>/attention.png   optional attention map
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import DataError, SVGParseError
from .geometry import DEFAULT_CANVAS, Sketch, normalize, read_svg, sample_sketch, write_svg
from .rasterizer import box_downsample, hard_raster, load_gray, save_png
from .rng import numpy_rng
from .strokeops import AttentionMask, largest_remainder, sort_strokes

log = logging.getLogger(__name__)

FAMILIES = ("blob", "polygon", "star")
COND_RES = 64
MANIFEST = "manifest.json"
TEST_FRACTION = 0.1


@dataclass
class SketchSample:
    id: str
    sketch: Sketch
    cond_image: np.ndarray
    attention: AttentionMask | None = None
    class_id: int | None = None


@dataclass
class DatasetManifest:
    n_strokes: int
    canvas: tuple[float, float]
    ids: list[str]
    splits: dict[str, str]
    seed: int
    root: str = "."
    path: Path | None = field(default=None, compare=False, repr=False)

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "n_strokes": self.n_strokes,
            "canvas": list(self.canvas),
            "ids": list(self.ids),
            "splits": {k: self.splits[k] for k in self.ids},
            "seed": self.seed,
        }

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        (directory / MANIFEST).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        self.path = directory

    @classmethod
    def load(cls, directory: str | Path) -> "DatasetManifest":
        directory = Path(directory)
        try:
            d = json.loads((directory / MANIFEST).read_text())
        except FileNotFoundError:
            raise DataError(f"{directory}: no {MANIFEST}") from None
        ids = list(d["ids"])
        if len(set(ids)) != len(ids):
            raise DataError(f"{directory}/{MANIFEST}: duplicate sample ids")
        return cls(
            n_strokes=int(d["n_strokes"]),
            canvas=tuple(d["canvas"]),
            ids=ids,
            splits=dict(d["splits"]),
            seed=int(d["seed"]),
            root=d.get("root", "."),
            path=directory,
        )

    def split_ids(self, split: str | None) -> list[str]:
        if split is None:
            return list(self.ids)
        return [i for i in self.ids if self.splits.get(i) == split]


def split_tag(sample_id: str, seed: int) -> str:
    digest = hashlib.sha256(f"{seed}:{sample_id}".encode()).digest()
    return "test" if int.from_bytes(digest[:8], "little") % 10 < TEST_FRACTION * 10 else "train"


def class_of(sample_id: str) -> int | None:
    prefix = sample_id.split("-", 1)[0]
    return FAMILIES.index(prefix) if prefix in FAMILIES else None


# --------------------------------------------------------------------------
# toy outlines


def _hermite_segments(knots: np.ndarray, tangents: np.ndarray, dtheta: float) -> np.ndarray:
    p0 = knots[:-1]
    p3 = knots[1:]
    p1 = p0 + tangents[:-1] * dtheta / 3.0
    p2 = p3 - tangents[1:] * dtheta / 3.0
    return np.stack([p0, p1, p2, p3], axis=1)


def blob_outline(rng: np.random.Generator, n: int, center, radius: float) -> np.ndarray:
    harmonics = np.arange(2, 5)
    amp = rng.uniform(-0.15, 0.15, size=len(harmonics))
    phase = rng.uniform(0, 2 * math.pi, size=len(harmonics))
    theta0 = rng.uniform(0, 2 * math.pi)
    theta = theta0 + 2 * math.pi * np.arange(n + 1) / n
    arg = harmonics[None, :] * theta[:, None] + phase[None, :]
    r = radius * (1.0 + (amp * np.cos(arg)).sum(1))
    dr = radius * (-(amp * harmonics * np.sin(arg)).sum(1))
    c, s = np.cos(theta), np.sin(theta)
    knots = np.asarray(center) + np.stack([r * c, r * s], axis=1)
    tangents = np.stack([dr * c - r * s, dr * s + r * c], axis=1)
    knots[-1] = knots[0]
    tangents[-1] = tangents[0]
    return _hermite_segments(knots, tangents, 2 * math.pi / n)


def polygon_segments(vertices: np.ndarray, n: int) -> np.ndarray:
    """Split a closed polygon into exactly ``n`` straight cubic segments."""
    m = len(vertices)
    if n < m:
        raise ValueError(f"cannot split a {m}-gon into {n} segments")
    nxt = np.roll(vertices, -1, axis=0)
    lengths = np.linalg.norm(nxt - vertices, axis=1)
    per_edge = 1 + largest_remainder(n - m, lengths)
    knots = []
    for a, b, count in zip(vertices, nxt, per_edge):
        u = np.arange(count) / count
        knots.append(a[None] + u[:, None] * (b - a)[None])
    knots = np.concatenate(knots + [vertices[:1]])
    p0, p3 = knots[:-1], knots[1:]
    return np.stack([p0, p0 + (p3 - p0) / 3.0, p0 + 2.0 * (p3 - p0) / 3.0, p3], axis=1)


def polygon_outline(rng: np.random.Generator, n: int, center, radius: float) -> np.ndarray:
    m = int(rng.integers(3, 8))
    angles = rng.uniform(0, 2 * math.pi) + 2 * math.pi * (np.arange(m) + rng.uniform(-0.2, 0.2, m)) / m
    radii = radius * rng.uniform(0.85, 1.1, m)
    verts = np.asarray(center) + np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    return polygon_segments(verts, n)


def star_outline(rng: np.random.Generator, n: int, center, radius: float) -> np.ndarray:
    m = int(rng.integers(4, 8))
    inner = rng.uniform(0.4, 0.6)
    angles = rng.uniform(0, 2 * math.pi) + math.pi * np.arange(2 * m) / m
    radii = radius * np.where(np.arange(2 * m) % 2 == 0, 1.0, inner)
    verts = np.asarray(center) + np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    return polygon_segments(verts, n)


_OUTLINES = {"blob": blob_outline, "polygon": polygon_outline, "star": star_outline}


def toy_outline(family: str, rng: np.random.Generator, n: int, canvas=DEFAULT_CANVAS) -> Sketch:
    """Unsorted closed outline of ``n`` C0-continuous cubic segments."""
    w, h = canvas
    radius = rng.uniform(0.2, 0.34) * min(w, h)
    center = (w / 2 + rng.uniform(-0.08, 0.08) * w, h / 2 + rng.uniform(-0.08, 0.08) * h)
    return Sketch(_OUTLINES[family](rng, n, center, radius), canvas)


def filled_mask(sketch: Sketch, res) -> np.ndarray:
    h, w = res
    outline = sample_sketch(sketch, 16).reshape(-1, 2) * np.array([w / sketch.canvas[0], h / sketch.canvas[1]])
    img = Image.new("L", (w, h), 0)
    ImageDraw.Draw(img).polygon([tuple(p) for p in outline], fill=255)
    return np.asarray(img) > 0


def centroid_attention(mask: np.ndarray, spread: float) -> np.ndarray:
    rows, cols = np.nonzero(mask)
    cy, cx = rows.mean() + 0.5, cols.mean() + 0.5
    yy, xx = np.mgrid[0 : mask.shape[0], 0 : mask.shape[1]] + 0.5
    return np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * spread**2))


def conditioning_image(sketch: Sketch, width_px: float = 4.0) -> np.ndarray:
    w = int(round(sketch.canvas[0]))
    h = int(round(sketch.canvas[1]))
    factor = h // COND_RES
    if factor * COND_RES != h or w != h:
        grid = hard_raster(sketch, (COND_RES * 4, COND_RES * 4), width_px)
        factor = 4
    else:
        grid = hard_raster(sketch, (h, w), width_px)
    return box_downsample(grid, factor)


def make_toy_sample(sample_id: str, family: str, rng: np.random.Generator, n_strokes: int,
                    canvas=DEFAULT_CANVAS) -> tuple[SketchSample, Sketch]:
    """Returns the sorted sample and the raw (pre-sort) outline."""
    outline = toy_outline(family, rng, n_strokes, canvas)
    res = (int(round(canvas[1])), int(round(canvas[0])))
    mask = filled_mask(outline, res)
    attention = centroid_attention(mask, spread=0.25 * min(res))
    am = AttentionMask(attention, mask)
    sketch = outline.reorder(sort_strokes(outline, am))
    sample = SketchSample(sample_id, sketch, conditioning_image(sketch), am, FAMILIES.index(family))
    return sample, outline


def write_sample(root: Path, sample: SketchSample) -> None:
    d = root / sample.id
    d.mkdir(parents=True, exist_ok=True)
    write_svg(d / "sketch.svg", sample.sketch)
    save_png(sample.cond_image, d / "image.png")
    if sample.attention is not None:
        save_png(sample.attention.mask.astype(float), d / "mask.png")
        save_png(sample.attention.attention, d / "attention.png")


def generate_toy(root: str | Path, n_samples: int, n_strokes: int = 32,
                 families: Sequence[str] = FAMILIES, seed: int = 0,
                 canvas=DEFAULT_CANVAS) -> DatasetManifest:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    unknown = set(families) - set(FAMILIES)
    if unknown:
        raise DataError(f"unknown toy families {sorted(unknown)}")
    ids = []
    for i in range(n_samples):
        rng = numpy_rng(seed, "toy", i)
        family = families[int(rng.integers(len(families)))]
        sample_id = f"{family}-{i:05d}"
        sample, _ = make_toy_sample(sample_id, family, rng, n_strokes, canvas)
        write_sample(root, sample)
        ids.append(sample_id)
    manifest = DatasetManifest(
        n_strokes=n_strokes, canvas=tuple(canvas), ids=sorted(ids),
        splits={i: split_tag(i, seed) for i in ids}, seed=seed,
    )
    manifest.save(root)
    return manifest


# --------------------------------------------------------------------------
# loading


def _sample_dir(manifest: DatasetManifest, sample_id: str) -> Path:
    if manifest.path is None:
        raise DataError("manifest has no location on disk")
    return manifest.path / manifest.root / sample_id


def load_sample(manifest: DatasetManifest, sample_id: str, with_attention: bool = False) -> SketchSample:
    d = _sample_dir(manifest, sample_id)
    if not d.is_dir():
        raise DataError("sample directory missing", sample_id)
    try:
        sketch = read_svg(d / "sketch.svg")
    except FileNotFoundError:
        raise DataError("sketch.svg missing", sample_id) from None
    except SVGParseError as exc:
        raise DataError(f"malformed SVG: {exc}", sample_id) from None
    if len(sketch) != manifest.n_strokes:
        raise DataError(f"expected {manifest.n_strokes} strokes, found {len(sketch)}", sample_id)
    if not (d / "image.png").exists():
        raise DataError("image.png missing", sample_id)
    try:
        image = load_gray(d / "image.png", res=(COND_RES, COND_RES))
    except DataError as exc:
        raise DataError(str(exc), sample_id) from None
    attention = None
    if with_attention and (d / "mask.png").exists() and (d / "attention.png").exists():
        attention = AttentionMask.from_png(d / "attention.png", d / "mask.png")
    return SketchSample(sample_id, sketch, np.clip(image, 0.0, 1.0), attention, class_of(sample_id))


@dataclass
class Batch:
    ids: list[str]
    coords: np.ndarray  # (B, n, 4, 2) normalized
    images: np.ndarray  # (B, 1, 64, 64)


class InMemoryDataset:
    """All samples of one split held as arrays, ready for batching."""

    def __init__(self, ids: list[str], coords: np.ndarray, images: np.ndarray):
        self.ids = list(ids)
        self.coords = np.asarray(coords, dtype=np.float32)
        self.images = np.asarray(images, dtype=np.float32)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, split: str | None = None) -> "InMemoryDataset":
        ids = manifest.split_ids(split)
        samples = [load_sample(manifest, i) for i in ids]
        coords = np.stack([normalize(s.sketch) for s in samples]) if samples else np.zeros((0, manifest.n_strokes, 4, 2))
        images = np.stack([s.cond_image[None] for s in samples]) if samples else np.zeros((0, 1, COND_RES, COND_RES))
        return cls(ids, coords, images)

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, index) -> Batch:
        index = np.asarray(index, dtype=int)
        return Batch([self.ids[i] for i in index], self.coords[index], self.images[index])

    def batches(self, batch: int, seed: int, epochs: int | None = 1) -> Iterator[Batch]:
        if len(self) == 0:
            raise DataError("dataset is empty")
        epoch = 0
        while epochs is None or epoch < epochs:
            order = numpy_rng(seed, "epoch", epoch).permutation(len(self))
            for start in range(0, len(order), batch):
                yield self.take(order[start : start + batch])
            epoch += 1


def iterate_batches(manifest: DatasetManifest, batch: int, seed: int, split: str | None = "train",
                    epochs: int | None = 1) -> Iterator[Batch]:
    return InMemoryDataset.from_manifest(manifest, split).batches(batch, seed, epochs)


# --------------------------------------------------------------------------
# ingest / export


def _validate_sample_dir(d: Path, n_strokes: int) -> Sketch:
    sample_id = d.name
    if not (d / "image.png").exists():
        raise DataError("image.png missing", sample_id)
    if not (d / "sketch.svg").exists():
        raise DataError("sketch.svg missing", sample_id)
    try:
        sketch = read_svg(d / "sketch.svg")
    except SVGParseError as exc:
        raise DataError(f"malformed SVG: {exc}", sample_id) from None
    if len(sketch) != n_strokes:
        raise DataError(f"stroke count {len(sketch)} != {n_strokes}", sample_id)
    try:
        load_gray(d / "image.png", res=(COND_RES, COND_RES))
        if (d / "mask.png").exists() != (d / "attention.png").exists():
            raise DataError("mask.png and attention.png must be provided together", sample_id)
        if (d / "mask.png").exists():
            AttentionMask.from_png(d / "attention.png", d / "mask.png")
    except DataError as exc:
        if exc.sample_id is not None:
            raise
        raise DataError(str(exc), sample_id) from None
    return sketch


def ingest_controlsketch(root: str | Path, n_strokes: int = 32, seed: int = 0,
                         write: bool = True) -> tuple[DatasetManifest, list[DataError]]:
    """Validate every ``<root>/<id>/`` sample and build a manifest.

    Invalid samples are skipped and returned as errors; valid ones are kept.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    ids: list[str] = []
    errors: list[DataError] = []
    canvas = None
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            sketch = _validate_sample_dir(d, n_strokes)
            if canvas is None:
                canvas = tuple(sketch.canvas)
            elif tuple(sketch.canvas) != canvas:
                raise DataError(f"canvas {sketch.canvas} differs from dataset canvas {canvas}", d.name)
        except DataError as exc:
            log.warning("rejected sample: %s", exc)
            errors.append(exc)
            continue
        ids.append(d.name)
    manifest = DatasetManifest(
        n_strokes=n_strokes, canvas=canvas or DEFAULT_CANVAS, ids=ids,
        splits={i: split_tag(i, seed) for i in ids}, seed=seed, path=root,
    )
    if write:
        manifest.save(root)
    return manifest, errors


def export_controlsketch(manifest: DatasetManifest, dest: str | Path) -> Path:
    """Copy every sample into ``dest`` using the paired-dataset layout (no manifest)."""
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    for sample_id in manifest.ids:
        src = _sample_dir(manifest, sample_id)
        out = dest / sample_id
        out.mkdir(exist_ok=True)
        for name in ("image.png", "sketch.svg", "mask.png", "attention.png"):
            if (src / name).exists():
                shutil.copyfile(src / name, out / name)
    return dest
