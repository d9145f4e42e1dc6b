"""Transformer-decoder denoiser and the convolutional condition encoder.

One token per stroke (its 8 coordinates). Each decoder block runs pre-norm
self-attention over stroke tokens, cross-attention over a context made of
one timestep token followed by the image tokens, and a GELU feed-forward.
The model predicts the clean sketch directly.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch
from torch import nn

from . import tensorcore as tc
from .errors import ConfigError, ShapeError, StrokeDiffError

COND_RES = 64
COND_GRID = 8  # encoder output is COND_GRID x COND_GRID tokens
TIME_FEATURES = 128


@dataclass(frozen=True)
class DenoiserConfig:
    n_strokes: int = 32
    d_model: int = 128
    n_layers: int = 8
    n_heads: int = 4
    ff_mult: int = 4
    cond_tokens: int = COND_GRID * COND_GRID
    dropout: float = 0.0
    timesteps: int = 50
    encoder_channels: tuple[int, ...] = (32, 64, 128, 128)

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.cond_tokens != COND_GRID * COND_GRID:
            raise ConfigError(f"cond_tokens is fixed by the encoder at {COND_GRID * COND_GRID}")
        if len(self.encoder_channels) != 4:
            raise ConfigError("encoder_channels needs 4 entries")
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown denoiser config keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# building blocks


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        return tc.transpose(tc.reshape(x, (b, n, self.n_heads, d // self.n_heads)), 1, 2)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(ctx)), self._split(self.v(ctx))
        scores = tc.scale(tc.matmul(q, tc.transpose(k)), 1.0 / math.sqrt(d // self.n_heads))
        mixed = tc.matmul(tc.softmax(scores, axis=-1), v)
        return self.out(tc.reshape(tc.transpose(mixed, 1, 2), (b, n, d)))


class AffineNorm(nn.Module):
    """``layer_norm`` with a learned per-feature gain and bias."""

    def __init__(self, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))

    def forward(self, x):
        return tc.layer_norm(x) * self.weight + self.bias


class FeedForward(nn.Module):
    def __init__(self, d_model: int, mult: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_model * mult)
        self.fc2 = nn.Linear(d_model * mult, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.drop(tc.gelu(self.fc1(x))))


class DecoderBlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.d_model
        self.norm_self = AffineNorm(d)
        self.self_attn = Attention(d, cfg.n_heads)
        self.norm_cross = AffineNorm(d)
        self.norm_ctx = AffineNorm(d)
        self.cross_attn = Attention(d, cfg.n_heads)
        self.norm_ff = AffineNorm(d)
        self.ff = FeedForward(d, cfg.ff_mult, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, ctx):
        h = self.norm_self(x)
        x = x + self.drop(self.self_attn(h, h))
        x = x + self.drop(self.cross_attn(self.norm_cross(x), self.norm_ctx(ctx)))
        return x + self.drop(self.ff(self.norm_ff(x)))


def timestep_features(t: torch.Tensor, T: int, dim: int = TIME_FEATURES) -> torch.Tensor:
    """Sinusoidal features of ``t / T`` (scaled by 1000 so all bands vary)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = (t.to(torch.float64) / T * 1000.0)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1).to(torch.get_default_dtype())


# --------------------------------------------------------------------------
# models


class ConditionEncoder(nn.Module):
    """64x64 grayscale image -> 64 tokens of width ``d_model``.

    Three stride-2 convolutions bring 64x64 down to 8x8, a fourth (stride 1)
    mixes features at that grid; each cell gets a learned position vector
    and is refined by three linear layers.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        c1, c2, c3, c4 = cfg.encoder_channels
        self.convs = nn.ModuleList([
            nn.Conv2d(1, c1, 3, stride=2, padding=1),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1),
            nn.Conv2d(c3, c4, 3, stride=1, padding=1),
        ])
        self.pos = nn.Parameter(torch.randn(COND_GRID * COND_GRID, c4) * 0.02)
        self.proj = nn.ModuleList([nn.Linear(c4, cfg.d_model), nn.Linear(cfg.d_model, cfg.d_model),
                                   nn.Linear(cfg.d_model, cfg.d_model)])

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim == 2:
            image = image[None, None]
        elif image.ndim == 3:
            image = image[:, None]
        if image.shape[-2:] != (COND_RES, COND_RES) or image.shape[1] != 1:
            raise ShapeError(
                f"encode_condition: expected (B, 1, {COND_RES}, {COND_RES}) image, got {tuple(image.shape)}"
            )
        h = image.to(self.pos.dtype) * 2.0 - 1.0
        for conv in self.convs:
            h = tc.gelu(conv(h))
        tokens = h.flatten(2).transpose(1, 2) + self.pos  # (B, 64, c4)
        tokens = tc.gelu(self.proj[0](tokens))
        tokens = tc.gelu(self.proj[1](tokens))
        return self.proj[2](tokens)


class DenoiserModel(nn.Module):
    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = cfg
        d = cfg.d_model
        self.stroke_in = nn.Linear(8, d)
        self.pos_embed = nn.Parameter(torch.randn(cfg.n_strokes, d) * 0.02)
        self.t_mlp = nn.ModuleList([nn.Linear(TIME_FEATURES, d), nn.Linear(d, d)])
        self.null_cond = nn.Parameter(torch.randn(cfg.cond_tokens, d) * 0.02)
        self.blocks = nn.ModuleList([DecoderBlock(cfg) for _ in range(cfg.n_layers)])
        self.norm_out = AffineNorm(d)
        self.stroke_out = nn.Linear(d, 8)
        self.fixed_t: int | None = None

    def time_token(self, t: torch.Tensor) -> torch.Tensor:
        feats = timestep_features(t, self.config.timesteps).to(self.pos_embed.dtype)
        return self.t_mlp[1](tc.gelu(self.t_mlp[0](feats)))[:, None, :]

    def forward(self, s_t: torch.Tensor, t, cond: torch.Tensor | None) -> torch.Tensor:
        cfg = self.config
        squeeze = s_t.ndim == 3
        if squeeze:
            s_t = s_t[None]
        if s_t.ndim != 4 or s_t.shape[1:] != (cfg.n_strokes, 4, 2):
            raise ShapeError(
                f"denoise: expected (B, {cfg.n_strokes}, 4, 2) strokes, got {tuple(s_t.shape)}"
            )
        b = s_t.shape[0]
        if self.fixed_t is not None:
            t = self.fixed_t
        t = torch.as_tensor(t)
        if t.ndim == 0:
            t = t.expand(b)
        if cond is None:
            cond = self.null_cond.expand(b, -1, -1)
        elif cond.ndim == 2:
            cond = cond[None].expand(b, -1, -1)
        if cond.shape != (b, cfg.cond_tokens, cfg.d_model):
            raise ShapeError(
                f"denoise: condition must be ({b}, {cfg.cond_tokens}, {cfg.d_model}), got {tuple(cond.shape)}"
            )
        x = self.stroke_in(s_t.reshape(b, cfg.n_strokes, 8).to(self.pos_embed.dtype)) + self.pos_embed
        ctx = torch.cat([self.time_token(t), cond.to(x.dtype)], dim=1)
        for block in self.blocks:
            x = block(x, ctx)
        out = self.stroke_out(self.norm_out(x)).reshape(b, cfg.n_strokes, 4, 2)
        return out[0] if squeeze else out


def encode_condition(encoder: ConditionEncoder, image: torch.Tensor) -> torch.Tensor:
    return encoder(image)


def denoise(model: DenoiserModel, s_t, t, cond):
    return model(s_t, t, cond)


def clone_for_refinement(model: DenoiserModel) -> DenoiserModel:
    """Independent copy whose forward always sees timestep 0."""
    refiner = copy.deepcopy(model)
    refiner.fixed_t = 0
    return refiner


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class ModelBundle:
    """Everything needed to sample: denoiser, encoder, optional refiner."""

    model: DenoiserModel
    encoder: ConditionEncoder
    refiner: DenoiserModel | None = None
    schedule: dict | None = None

    def eval(self) -> "ModelBundle":
        self.model.eval()
        self.encoder.eval()
        if self.refiner is not None:
            self.refiner.eval()
        return self


def build(cfg: DenoiserConfig, seed: int = 0) -> ModelBundle:
    torch.manual_seed(seed)
    return ModelBundle(DenoiserModel(cfg), ConditionEncoder(cfg))


WEIGHTS = "denoiser.vsd"
REFINER_WEIGHTS = "refiner.vsd"
MODEL_CONFIG = "model_config.json"


def save_bundle(directory: str | Path, bundle: ModelBundle, schedule: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sidecar = {"denoiser": bundle.model.config.to_dict(), "schedule": schedule or bundle.schedule}
    (directory / MODEL_CONFIG).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    state = {f"model.{k}": v for k, v in bundle.model.state_dict().items()}
    state.update({f"encoder.{k}": v for k, v in bundle.encoder.state_dict().items()})
    tc.save_tensors(directory / WEIGHTS, state)
    if bundle.refiner is not None:
        tc.save_module(directory / REFINER_WEIGHTS, bundle.refiner, prefix="model.")


def load_bundle(directory: str | Path, with_refiner: bool = True) -> ModelBundle:
    directory = Path(directory)
    if not (directory / MODEL_CONFIG).exists() or not (directory / WEIGHTS).exists():
        raise StrokeDiffError(f"{directory}: no trained model ({MODEL_CONFIG} / {WEIGHTS} missing)")
    sidecar = json.loads((directory / MODEL_CONFIG).read_text())
    cfg = DenoiserConfig.from_dict(sidecar["denoiser"])
    bundle = ModelBundle(DenoiserModel(cfg), ConditionEncoder(cfg), schedule=sidecar.get("schedule"))
    tc.load_module(directory / WEIGHTS, bundle.model, prefix="model.")
    tc.load_module(directory / WEIGHTS, bundle.encoder, prefix="encoder.")
    if with_refiner and (directory / REFINER_WEIGHTS).exists():
        refiner = clone_for_refinement(bundle.model)
        tc.load_module(directory / REFINER_WEIGHTS, refiner, prefix="model.")
        bundle.refiner = refiner
    return bundle.eval()
