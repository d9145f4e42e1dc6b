"""Strokes, sketches, coordinate normalization and SVG I/O.

A stroke is a cubic Bezier curve stored as a ``(4, 2)`` array of control
points in canvas pixels. A :class:`Sketch` holds an ordered ``(n, 4, 2)``
array; the order is meaningful and is preserved by every operation here.
"""

from __future__ import annotations

import re
import xml.parsers.expat
from dataclasses import dataclass, field

import numpy as np

from .errors import SVGParseError

DEFAULT_CANVAS = (256, 256)
SVG_NS = "http://www.w3.org/2000/svg"
SVG_DECIMALS = 6


@dataclass(frozen=True)
class Sketch:
    points: np.ndarray
    canvas: tuple[float, float] = DEFAULT_CANVAS

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4, 2)
        if pts.ndim != 3 or pts.shape[1:] != (4, 2):
            raise ValueError(f"sketch points must have shape (n, 4, 2), got {pts.shape}")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "canvas", (self.canvas[0], self.canvas[1]))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def strokes(self) -> list[np.ndarray]:
        return list(self.points)

    def reorder(self, order) -> "Sketch":
        return Sketch(self.points[np.asarray(order, dtype=int)], self.canvas)


# --------------------------------------------------------------------------
# Bezier evaluation


def bernstein(u) -> np.ndarray:
    """Cubic Bernstein weights, shape ``(len(u), 4)``."""
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v = 1.0 - u
    return np.stack([v**3, 3 * u * v**2, 3 * u**2 * v, u**3], axis=-1)


def bezier_point(stroke, u: float) -> np.ndarray:
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"bezier parameter u={u} outside [0, 1]")
    ctrl = np.asarray(stroke, dtype=np.float64).reshape(4, 2)
    return bernstein(u)[0] @ ctrl


def sample_polyline(stroke, m: int) -> np.ndarray:
    """``m`` points at evenly spaced parameters ``u = j / (m - 1)``."""
    if m < 2:
        raise ValueError(f"sample_polyline needs m >= 2, got {m}")
    ctrl = np.asarray(stroke, dtype=np.float64).reshape(4, 2)
    return bernstein(np.linspace(0.0, 1.0, m)) @ ctrl


def sample_sketch(sketch: Sketch, m: int) -> np.ndarray:
    """Polyline samples for every stroke, shape ``(n, m, 2)``."""
    if m < 2:
        raise ValueError(f"sample_polyline needs m >= 2, got {m}")
    return np.einsum("mk,nkd->nmd", bernstein(np.linspace(0.0, 1.0, m)), sketch.points)


# --------------------------------------------------------------------------
# normalization


def _canvas_scale(canvas) -> np.ndarray:
    w, h = canvas
    if w <= 0 or h <= 0:
        raise ValueError(f"canvas dimensions must be positive, got {canvas}")
    return np.array([w, h], dtype=np.float64)


def normalize(sketch: Sketch) -> np.ndarray:
    """Map canvas pixels onto model space: ``x -> 4 x / width - 2``."""
    return 4.0 * sketch.points / _canvas_scale(sketch.canvas) - 2.0


def denormalize(coords, canvas=DEFAULT_CANVAS) -> Sketch:
    coords = np.asarray(coords, dtype=np.float64)
    return Sketch((coords + 2.0) * _canvas_scale(canvas) / 4.0, canvas)


# --------------------------------------------------------------------------
# SVG


def _fmt(v: float) -> str:
    s = f"{v:.{SVG_DECIMALS}f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _fmt_dim(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else _fmt(v)


def path_data(stroke) -> str:
    (x0, y0), (x1, y1), (x2, y2), (x3, y3) = np.asarray(stroke, dtype=np.float64)
    f = _fmt
    return f"M {f(x0)} {f(y0)} C {f(x1)} {f(y1)}, {f(x2)} {f(y2)}, {f(x3)} {f(y3)}"


def to_svg(sketch: Sketch, stroke_width: float = 1.5) -> str:
    w, h = sketch.canvas
    lines = [f'<svg xmlns="{SVG_NS}" viewBox="0 0 {_fmt_dim(w)} {_fmt_dim(h)}">']
    for stroke in sketch.points:
        lines.append(
            f'  <path d="{path_data(stroke)}" fill="none" stroke="black" '
            f'stroke-width="{_fmt(stroke_width)}"/>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


_NUM = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_SEP = r"(?:\s*,\s*|\s+)"
_PATH_RE = re.compile(
    rf"^\s*M\s*({_NUM}){_SEP}({_NUM})\s*C\s*"
    rf"({_NUM}){_SEP}({_NUM}){_SEP}({_NUM}){_SEP}({_NUM}){_SEP}({_NUM}){_SEP}({_NUM})\s*$"
)
_PATH_ATTRS = {"d", "fill", "stroke", "stroke-width"}
_SVG_ATTRS = {"xmlns", "viewBox", "width", "height", "version"}


def parse_path_data(d: str, line: int | None = None) -> np.ndarray:
    m = _PATH_RE.match(d)
    if m is None:
        raise SVGParseError(f"path data is not a single 'M x y C x y, x y, x y' segment: {d!r}", line)
    vals = np.array([float(g) for g in m.groups()], dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise SVGParseError(f"non-finite coordinate in path data: {d!r}", line)
    return vals.reshape(4, 2)


def from_svg(text: str) -> Sketch:
    """Parse the restricted SVG subset written by :func:`to_svg`."""
    parser = xml.parsers.expat.ParserCreate()
    strokes: list[np.ndarray] = []
    state: dict = {"depth": 0, "canvas": None}

    def start(name, attrs):
        line = parser.CurrentLineNumber
        depth = state["depth"]
        state["depth"] = depth + 1
        if depth == 0:
            if name != "svg":
                raise SVGParseError(f"root element must be <svg>, got <{name}>", line)
            extra = set(attrs) - _SVG_ATTRS
            if extra:
                raise SVGParseError(f"unsupported <svg> attributes {sorted(extra)}", line)
            if attrs.get("xmlns", SVG_NS) != SVG_NS:
                raise SVGParseError(f"unexpected namespace {attrs['xmlns']!r}", line)
            if "viewBox" not in attrs:
                raise SVGParseError("missing viewBox", line)
            parts = attrs["viewBox"].replace(",", " ").split()
            try:
                box = [float(p) for p in parts]
            except ValueError:
                box = []
            if len(box) != 4 or box[0] != 0 or box[1] != 0 or box[2] <= 0 or box[3] <= 0:
                raise SVGParseError(f"viewBox must be '0 0 W H', got {attrs['viewBox']!r}", line)
            state["canvas"] = tuple(int(v) if v.is_integer() else v for v in box[2:])
            return
        if depth > 1:
            raise SVGParseError(f"nested element <{name}> not supported", line)
        if name != "path":
            raise SVGParseError(f"unsupported element <{name}>", line)
        extra = set(attrs) - _PATH_ATTRS
        if "transform" in extra:
            raise SVGParseError("transforms are not supported", line)
        if extra:
            raise SVGParseError(f"unsupported <path> attributes {sorted(extra)}", line)
        if "d" not in attrs:
            raise SVGParseError("<path> without d attribute", line)
        strokes.append(parse_path_data(attrs["d"], line))

    def end(name):
        state["depth"] -= 1

    def chars(data):
        if data.strip():
            raise SVGParseError(f"unexpected text content {data.strip()[:20]!r}", parser.CurrentLineNumber)

    parser.StartElementHandler = start
    parser.EndElementHandler = end
    parser.CharacterDataHandler = chars
    try:
        parser.Parse(text, True)
    except xml.parsers.expat.ExpatError as exc:
        raise SVGParseError(f"malformed XML: {xml.parsers.expat.errors.messages[exc.code]}", exc.lineno) from None
    if state["canvas"] is None:
        raise SVGParseError("no <svg> root element")
    pts = np.stack(strokes) if strokes else np.zeros((0, 4, 2))
    return Sketch(pts, state["canvas"])


def read_svg(path) -> Sketch:
    with open(path, encoding="utf-8") as fh:
        return from_svg(fh.read())


def write_svg(path, sketch: Sketch, stroke_width: float = 1.5) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(to_svg(sketch, stroke_width))
