"""Tensor primitives, tape-based backward, Adam and the weight container.

Tensors are ``torch.Tensor`` objects; torch's autograd records the
computation tape. This module adds the contracts the rest of the package
relies on:

* primitive ops check shapes explicitly and never broadcast,
* :func:`backward` consumes a tape exactly once and overwrites (rather than
  accumulates) leaf gradients,
* :class:`Adam` refuses to step a parameter whose gradient is missing,
* weights are stored in a flat ``VSD1`` container (JSON header followed by
  little-endian payloads).

Training runs in 32-bit; :func:`float64_mode` switches the default dtype for
finite-difference checks.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
import torch

from .errors import ShapeError, StrokeDiffError

Tensor = torch.Tensor

MAGIC = b"VSD1"
_DTYPES = {"float32": torch.float32, "float64": torch.float64}
_DTYPE_NAMES = {v: k for k, v in _DTYPES.items()}


# --------------------------------------------------------------------------
# precision


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Make float64 the default dtype inside the block (gradient checks)."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def default_dtype() -> torch.dtype:
    return torch.get_default_dtype()


def tensor(data, requires_grad: bool = False) -> Tensor:
    return torch.tensor(np.asarray(data), dtype=default_dtype(), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# primitive ops


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_axis(op: str, x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {tuple(x.shape)}")
    return axis % x.ndim


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading (batch) dims must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: incompatible ranks {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.matmul(a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return a * b


def scale(a: Tensor, c: float) -> Tensor:
    return a * float(c)


def transpose(a: Tensor, dim0: int = -2, dim1: int = -1) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose: needs rank >= 2, got {tuple(a.shape)}")
    _check_axis("transpose", a, dim0)
    _check_axis("transpose", a, dim1)
    return a.transpose(dim0, dim1)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != a.numel() or any(s < 0 for s in shape):
        raise ShapeError(f"reshape: cannot view {tuple(a.shape)} as {shape}")
    return a.reshape(shape)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input")
    first = tensors[0]
    axis = _check_axis("concat", first, axis)
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            t.shape[d] != first.shape[d] for d in range(first.ndim) if d != axis
        ):
            raise ShapeError(
                f"concat: shape mismatch {tuple(first.shape)} vs {tuple(t.shape)} on axis {axis}"
            )
    return torch.cat(list(tensors), dim=axis)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("softmax", x, axis)
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(x: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    axis = _check_axis("layer_norm", x, axis)
    mu = x.mean(dim=axis, keepdim=True)
    centered = x - mu
    var = (centered * centered).mean(dim=axis, keepdim=True)
    return centered / torch.sqrt(var + eps)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    return 0.5 * x * (1.0 + torch.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return x.mean()
    return x.mean(dim=_check_axis("mean", x, axis))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        return x.sum()
    return x.sum(dim=_check_axis("sum", x, axis))


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape("l1_loss", pred, target)
    return (pred - target).abs().mean()


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape("mse_loss", pred, target)
    d = pred - target
    return (d * d).mean()


# --------------------------------------------------------------------------
# backward


class TapeError(StrokeDiffError, RuntimeError):
    pass


def _leaves(loss: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    leaves: list[Tensor] = []
    stack = [loss.grad_fn]
    while stack:
        node = stack.pop()
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        variable = getattr(node, "variable", None)
        if variable is not None:
            leaves.append(variable)
        stack.extend(fn for fn, _ in node.next_functions)
    return leaves


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``.

    Existing leaf gradients are overwritten. The tape is single-use: a second
    call on the same loss raises :class:`TapeError`.
    """
    if loss.ndim != 0:
        raise TapeError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None:
        raise TapeError("backward: empty tape (loss does not depend on any requires_grad tensor)")
    meta = loss.grad_fn.metadata
    if meta.get("consumed"):
        raise TapeError("backward: tape already consumed; run a fresh forward pass")
    for leaf in _leaves(loss):
        leaf.grad = None
    meta["consumed"] = True
    loss.backward()


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[Tensor] = field(default_factory=list)
    v: list[Tensor] = field(default_factory=list)


@torch.no_grad()
def adam_step(params: Sequence[Tensor], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise StrokeDiffError(f"adam_step: parameter {i} with shape {tuple(p.shape)} has no grad")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ShapeError(f"adam_step: state holds {len(state.m)} moments for {len(params)} params")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / c1)
    return state


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 5e-5, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.state)


# --------------------------------------------------------------------------
# finite differences


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5,
                 indices: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``fn()`` w.r.t. entries of ``x``.

    ``x`` is perturbed in place and restored. Only the flat ``indices`` are
    evaluated when given (others are left at zero).
    """
    flat = x.data.view(-1)
    out = np.zeros(flat.numel())
    idx = range(flat.numel()) if indices is None else indices
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            plus = float(fn())
            flat[i] = orig - h
            minus = float(fn())
            flat[i] = orig
            out[i] = (plus - minus) / (2 * h)
    return out


def relative_error(analytic, numeric) -> float:
    """max |a - n| / max(|a|, |n|), over the whole gradient."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / denom)


# --------------------------------------------------------------------------
# weight container


def save_tensors(path: str | Path, tensors: Mapping[str, Tensor]) -> None:
    header: dict[str, dict] = {}
    payloads: list[bytes] = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPE_NAMES:
            t = t.to(torch.float32)
        arr = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        header[name] = {
            "shape": list(t.shape),
            "dtype": _DTYPE_NAMES[t.dtype],
            "offset": offset,
            "nbytes": len(raw),
        }
        payloads.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in payloads:
            fh.write(raw)


def load_tensors(path: str | Path) -> dict[str, Tensor]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise StrokeDiffError(f"{path}: not a VSD1 weight file")
    (head_len,) = struct.unpack("<Q", blob[4:12])
    header = json.loads(blob[12 : 12 + head_len])
    base = 12 + head_len
    out = {}
    for name, info in header.items():
        dtype = np.dtype(info["dtype"]).newbyteorder("<")
        start = base + info["offset"]
        arr = np.frombuffer(blob, dtype=dtype, count=math.prod(info["shape"]), offset=start)
        out[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).reshape(info["shape"])
    return out


def save_module(path: str | Path, module: torch.nn.Module, prefix: str = "") -> None:
    save_tensors(path, {prefix + k: v for k, v in module.state_dict().items()})


def load_module(path: str | Path, module: torch.nn.Module, prefix: str = "") -> None:
    tensors = load_tensors(path)
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    module.load_state_dict(state)
