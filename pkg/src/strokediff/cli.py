"""Command-line entry point: ``strokediff <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical failure. Errors are written to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from argparse import SUPPRESS
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from . import dataset as ds
from .denoiser import DenoiserConfig, build, load_bundle
from .diffusion import SamplerConfig, make_schedule, sample_normalized
from .errors import ConfigError, DataError, NumericalError, StrokeDiffError
from .evalkit import evaluate
from .geometry import Sketch, denormalize, normalize, read_svg, write_svg
from .rasterizer import SoftRasterConfig, hard_raster, load_gray, save_png, soft_raster
from .rng import derive_seed
from .strokeops import AttentionMask, initialize_sketch, sort_strokes
from .training import RefineConfig, TrainConfig, train, train_refiner

log = logging.getLogger("strokediff")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
RUN_CONFIG = "run_config.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# run config


def _section_defaults() -> dict[str, dict[str, Any]]:
    # per-section seeds are derived from the top-level seed, so they are not config keys
    return {
        "denoiser": DenoiserConfig().to_dict(),
        "train": _without_seed(asdict(TrainConfig())),
        "refine": _without_seed(asdict(RefineConfig())),
        "sampler": _without_seed(asdict(SamplerConfig())),
        "raster": _jsonable(asdict(SoftRasterConfig())),
        "schedule": {"T": 50, "exponent": 0.4, "offset_s": 0.008},
        "data": {"root": None, "n_samples": 200, "n_strokes": 32, "families": list(ds.FAMILIES),
                 "split": "train"},
    }


def _jsonable(d: dict) -> dict:
    return json.loads(json.dumps(d))


def _without_seed(d: dict) -> dict:
    d = _jsonable(d)
    d.pop("seed", None)
    return d


def default_run_config() -> dict[str, Any]:
    cfg: dict[str, Any] = {"seed": 0}
    cfg.update(_section_defaults())
    return cfg


def merge_config(base: dict, override: dict, path: str = "") -> dict:
    """Overlay ``override`` on ``base``; keys absent from ``base`` are rejected."""
    out = dict(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = merge_config(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_run_config(path: str | None) -> dict[str, Any]:
    cfg = default_run_config()
    if path is None:
        return cfg
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"{path}: cannot read config ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return merge_config(cfg, doc)


def _apply_flags(cfg: dict, args: argparse.Namespace, mapping: dict[str, tuple[str, str]]) -> dict:
    # flags left at None fall through to the config file / defaults
    for flag, (section, key) in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            cfg[section][key] = value
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _build(cls, section: dict):
    names = {f.name for f in fields(cls)}
    try:
        return cls(**{k: v for k, v in section.items() if k in names})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from None


def _echo(cfg: dict, directory: Path, command: str) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **cfg}
    (directory / RUN_CONFIG).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_dataset_gen(args, cfg) -> int:
    data = cfg["data"]
    out = Path(args.out)
    _echo(cfg, out, "dataset-gen")
    families = tuple(data["families"])
    unknown = set(families) - set(ds.FAMILIES)
    if unknown:
        raise ConfigError(f"unknown shape families {sorted(unknown)}; choose from {list(ds.FAMILIES)}")
    manifest = ds.generate_toy(out, int(data["n_samples"]), int(data["n_strokes"]), families=families,
                               seed=derive_seed(cfg["seed"], "dataset-gen"))
    print(json.dumps({"root": str(out), "samples": len(manifest.ids)}))
    return EXIT_OK


def _dataset(cfg) -> ds.InMemoryDataset:
    root = cfg["data"]["root"]
    if root is None:
        raise ConfigError("no dataset given (use --data or data.root in the config)")
    manifest = ds.DatasetManifest.load(root)
    return ds.InMemoryDataset.from_manifest(manifest, cfg["data"]["split"])


def _schedule(cfg):
    s = cfg["schedule"]
    return make_schedule(int(s["T"]), float(s["exponent"]), float(s["offset_s"]))


def cmd_train(args, cfg) -> int:
    out = Path(args.out)
    _echo(cfg, out, "train")
    data = _dataset(cfg)
    mcfg = DenoiserConfig.from_dict(cfg["denoiser"])
    tcfg = _build(TrainConfig, {**cfg["train"], "seed": derive_seed(cfg["seed"], "train")})
    bundle = build(mcfg, seed=derive_seed(cfg["seed"], "init"))
    sched = _schedule(cfg)
    result = train(bundle, data, tcfg, sched, out_dir=out)
    losses = result.losses()
    print(json.dumps({"out": str(out), "steps": len(losses), "final_loss": float(losses[-1]) if len(losses) else None}))
    return EXIT_OK


def cmd_refine(args, cfg) -> int:
    ckpt = Path(args.checkpoint)
    out = Path(args.out) if args.out else ckpt
    _echo(cfg, out, "refine")
    data = _dataset(cfg)
    bundle = load_bundle(ckpt, with_refiner=True)
    rcfg = _build(RefineConfig, {**cfg["refine"], "seed": derive_seed(cfg["seed"], "refine")})
    sched = make_schedule(**bundle.schedule) if bundle.schedule else _schedule(cfg)
    result = train_refiner(bundle, data, rcfg, sched, out_dir=out)
    losses = result.losses()
    print(json.dumps({"out": str(out), "steps": len(losses), "final_loss": float(losses[-1]) if len(losses) else None}))
    return EXIT_OK


def cmd_sample(args, cfg) -> int:
    out = Path(args.out)
    _echo(cfg, out.parent, "sample")
    scfg = _build(SamplerConfig, {**cfg["sampler"], "seed": derive_seed(cfg["seed"], "sample")})
    if args.deterministic:
        scfg.stochastic_renoise = False
        torch.use_deterministic_algorithms(True)
    bundle = load_bundle(args.checkpoint, with_refiner=scfg.apply_refinement)
    if scfg.apply_refinement and bundle.refiner is None:
        raise DataError(f"{args.checkpoint}: no refiner weights; run `refine` first or pass --no-refine")
    sched = make_schedule(**bundle.schedule) if bundle.schedule else _schedule(cfg)
    image = load_gray(args.image, (ds.COND_RES, ds.COND_RES))
    dtype = next(bundle.model.parameters()).dtype
    with torch.no_grad():
        cond = bundle.encoder(torch.from_numpy(image).to(dtype)[None, None])
    canvas = (args.canvas, args.canvas)
    on_step = None
    if args.steps_dir:
        steps_dir = Path(args.steps_dir)
        steps_dir.mkdir(parents=True, exist_ok=True)

        def on_step(t, x0):
            write_svg(steps_dir / f"step_{t:03d}.svg", denormalize(x0[0].double().numpy(), canvas))

    coords = sample_normalized(bundle.model, cond, scfg, sched, shape=(1, bundle.model.config.n_strokes, 4, 2),
                               refiner=bundle.refiner, on_step=on_step, dtype=dtype)
    sketch = denormalize(coords[0].double().numpy(), canvas)
    _check_finite(sketch)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_svg(out, sketch)
    if args.png:
        save_png(hard_raster(sketch, (int(canvas[1]), int(canvas[0])), args.width), args.png)
    print(json.dumps({"svg": str(out), "strokes": len(sketch)}))
    return EXIT_OK


def _check_finite(sketch: Sketch) -> None:
    if not np.all(np.isfinite(sketch.points)):
        raise NumericalError("sampler produced non-finite coordinates")


def cmd_sort(args, cfg) -> int:
    out = Path(args.out)
    _echo(cfg, out.parent, "sort")
    sketch = read_svg(args.svg)
    am = AttentionMask.from_png(args.attention, args.mask)
    order = sort_strokes(sketch, am, beta=args.beta)
    write_svg(out, sketch.reorder(order))
    print(json.dumps({"svg": str(out), "order": [int(i) for i in order]}))
    return EXIT_OK


def cmd_init(args, cfg) -> int:
    out = Path(args.out)
    _echo(cfg, out.parent, "init")
    am = AttentionMask.from_png(args.attention, args.mask)
    if not am.mask.any():
        raise DataError(f"{args.mask}: mask has no foreground pixels")
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    canvas = (args.canvas, args.canvas)
    sketch = initialize_sketch(am, n=args.n, seed=derive_seed(cfg["seed"], "init"), canvas=canvas,
                               k=args.regions)
    write_svg(out, sketch)
    print(json.dumps({"svg": str(out), "strokes": len(sketch)}))
    return EXIT_OK


def cmd_render(args, cfg) -> int:
    out = Path(args.out)
    _echo(cfg, out.parent, "render")
    sketch = read_svg(args.svg)
    if args.soft:
        rcfg = _build(SoftRasterConfig, {**cfg["raster"], "res": tuple(cfg["raster"]["res"])})
        h, res = rcfg.res
        coords = torch.from_numpy(normalize(sketch))
        save_png(soft_raster(coords, rcfg).numpy(), out)
        print(json.dumps({"png": str(out), "res": [h, res]}))
        return EXIT_OK
    res = args.res or int(round(sketch.canvas[0]))
    h = int(round(res * sketch.canvas[1] / sketch.canvas[0]))
    save_png(hard_raster(sketch, (h, res), args.width), out)
    print(json.dumps({"png": str(out), "res": [h, res]}))
    return EXIT_OK


def _svgs(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    return {p.stem: p for p in sorted(directory.glob("*.svg"))}


def cmd_eval(args, cfg) -> int:
    out = Path(args.out)
    _echo(cfg, out.parent, "eval")
    preds = _svgs(Path(args.pred))
    gt_root = Path(args.gt)
    cond = None
    if (gt_root / ds.MANIFEST).exists():
        manifest = ds.DatasetManifest.load(gt_root)
        ids = [i for i in manifest.ids if i in preds]
        samples = [ds.load_sample(manifest, i) for i in ids]
        gts = [s.sketch for s in samples]
        cond = [s.cond_image for s in samples]
    else:
        gt_files = _svgs(gt_root)
        ids = [i for i in preds if i in gt_files]
        gts = [read_svg(gt_files[i]) for i in ids]
    missing = sorted(set(preds) - set(ids))
    if missing:
        raise DataError(f"no ground truth for {missing}")
    if not ids:
        raise DataError(f"{args.pred}: no predictions to evaluate")
    report = evaluate([read_svg(preds[i]) for i in ids], gts, cond, ids=ids)
    report.save(out)
    print(json.dumps({"report": str(out), "mean": report.mean}))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

# flag dest -> (config section, key)
FLAG_MAP = {
    "dataset-gen": {"n_samples": ("data", "n_samples"), "n_strokes": ("data", "n_strokes"),
                    "families": ("data", "families")},
    "train": {"data": ("data", "root"), "split": ("data", "split"), "steps": ("train", "steps"),
              "batch": ("train", "batch"), "lr": ("train", "lr"), "lambda_raster": ("train", "lambda_raster"),
              "cfg_dropout": ("train", "cfg_dropout"), "d_model": ("denoiser", "d_model"),
              "n_layers": ("denoiser", "n_layers"), "n_strokes": ("denoiser", "n_strokes")},
    "refine": {"data": ("data", "root"), "split": ("data", "split"), "steps": ("refine", "steps"),
               "batch": ("refine", "batch"), "lr": ("refine", "lr"), "source": ("refine", "source")},
    "sample": {"guidance": ("sampler", "guidance_scale")},
}


def _common(p: argparse.ArgumentParser, out_help: str, out_required: bool = True) -> None:
    p.add_argument("--config", default=None, help="JSON run config (flags override it)")
    p.add_argument("--seed", type=int, default=SUPPRESS, help="master seed (default: config seed, else 0)")
    p.add_argument("--out", required=out_required, default=None, help=out_help)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="strokediff", formatter_class=fmt,
                     description="Conditional stroke-diffusion sketch generation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("dataset-gen", formatter_class=fmt, help="generate a toy paired dataset")
    _common(p, "dataset directory to create")
    p.add_argument("--n-samples", dest="n_samples", type=int, default=SUPPRESS, help="number of samples (default 200)")
    p.add_argument("--n-strokes", dest="n_strokes", type=int, default=SUPPRESS, help="strokes per sketch (default 32)")
    p.add_argument("--families", nargs="+", default=SUPPRESS, help="shape families (default: blob polygon star)")

    p = sub.add_parser("train", formatter_class=fmt, help="train the denoiser and condition encoder")
    _common(p, "checkpoint directory")
    p.add_argument("--data", default=SUPPRESS, help="dataset root containing manifest.json (default: config data.root)")
    p.add_argument("--split", default=SUPPRESS, help="dataset split to train on (default train)")
    p.add_argument("--steps", type=int, default=SUPPRESS, help="optimizer steps (default 1000)")
    p.add_argument("--batch", type=int, default=SUPPRESS, help="batch size (default 32)")
    p.add_argument("--lr", type=float, default=SUPPRESS, help="learning rate (default 5e-5)")
    p.add_argument("--lambda-raster", dest="lambda_raster", type=float, default=SUPPRESS,
                   help="raster loss weight (default 0.2)")
    p.add_argument("--cfg-dropout", dest="cfg_dropout", type=float, default=SUPPRESS,
                   help="fraction of steps trained with the null condition (default 0.1)")
    p.add_argument("--d-model", dest="d_model", type=int, default=SUPPRESS, help="model width (default 128)")
    p.add_argument("--n-layers", dest="n_layers", type=int, default=SUPPRESS, help="decoder blocks (default 8)")
    p.add_argument("--n-strokes", dest="n_strokes", type=int, default=SUPPRESS, help="strokes per sketch (default 32)")

    p = sub.add_parser("refine", formatter_class=fmt, help="fine-tune the refinement network")
    _common(p, "output directory (default: the checkpoint directory)", out_required=False)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint directory")
    p.add_argument("--data", default=SUPPRESS, help="dataset root containing manifest.json (default: config data.root)")
    p.add_argument("--split", default=SUPPRESS, help="dataset split to train on (default train)")
    p.add_argument("--steps", type=int, default=SUPPRESS, help="optimizer steps (default 1000)")
    p.add_argument("--batch", type=int, default=SUPPRESS, help="batch size (default 32)")
    p.add_argument("--lr", type=float, default=SUPPRESS, help="learning rate (default 5e-6)")
    p.add_argument("--source", choices=("sampler_outputs", "gaussian_perturb"), default=SUPPRESS,
                   help="refiner inputs (default sampler_outputs)")

    p = sub.add_parser("sample", formatter_class=fmt, help="sample a sketch for a conditioning image")
    _common(p, "output SVG path")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint directory")
    p.add_argument("--image", required=True, help="conditioning image (resized to 64x64 grayscale)")
    p.add_argument("--guidance", type=float, default=SUPPRESS, help="guidance scale (default 2.5)")
    p.add_argument("--no-refine", dest="no_refine", action="store_true", help="skip the refinement step")
    p.add_argument("--deterministic", action="store_true", help="reuse one noise draw for every re-noising step")
    p.add_argument("--png", default=None, help="also write a PNG render to this path")
    p.add_argument("--steps-dir", dest="steps_dir", default=None, help="write each intermediate sketch here as SVG")
    p.add_argument("--canvas", type=float, default=256.0, help="output canvas size in pixels")
    p.add_argument("--width", type=float, default=2.0, help="stroke width of the PNG render in pixels")

    p = sub.add_parser("sort", formatter_class=fmt, help="reorder strokes by contour and attention")
    _common(p, "output SVG path")
    p.add_argument("--svg", required=True, help="input sketch")
    p.add_argument("--mask", required=True, help="object mask PNG")
    p.add_argument("--attention", required=True, help="attention map PNG")
    p.add_argument("--beta", type=float, default=1.0, help="weight of the attention term")

    p = sub.add_parser("init", formatter_class=fmt, help="place initial strokes from an attention map")
    _common(p, "output SVG path")
    p.add_argument("--attention", required=True, help="attention map PNG")
    p.add_argument("--mask", required=True, help="object mask PNG")
    p.add_argument("--n", type=int, default=32, help="number of strokes")
    p.add_argument("--regions", type=int, default=None, help="number of regions (default round(sqrt(n)))")
    p.add_argument("--canvas", type=float, default=256.0, help="output canvas size in pixels")

    p = sub.add_parser("render", formatter_class=fmt, help="rasterize an SVG sketch to PNG")
    _common(p, "output PNG path")
    p.add_argument("--svg", required=True, help="input sketch")
    p.add_argument("--res", type=int, default=None, help="output width in pixels (default: canvas width)")
    p.add_argument("--width", type=float, default=2.0, help="stroke width in pixels")
    p.add_argument("--soft", action="store_true", help="use the differentiable rasterizer (config section raster)")

    p = sub.add_parser("eval", formatter_class=fmt, help="score predicted sketches against ground truth")
    _common(p, "output report JSON path")
    p.add_argument("--pred", required=True, help="directory of predicted <id>.svg files")
    p.add_argument("--gt", required=True, help="dataset root or directory of ground-truth <id>.svg files")
    return parser


COMMANDS = {
    "dataset-gen": cmd_dataset_gen,
    "train": cmd_train,
    "refine": cmd_refine,
    "sample": cmd_sample,
    "sort": cmd_sort,
    "init": cmd_init,
    "render": cmd_render,
    "eval": cmd_eval,
}


def _error(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def _threads() -> None:
    value = os.environ.get("VSD_THREADS")
    if value:
        try:
            n = int(value)
        except ValueError:
            raise ConfigError(f"VSD_THREADS must be an integer, got {value!r}") from None
        if n < 1:
            raise ConfigError("VSD_THREADS must be >= 1")
        torch.set_num_threads(n)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _error("usage", str(exc), EXIT_USAGE)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _threads()
        cfg = load_run_config(args.config)
        cfg = _apply_flags(cfg, args, FLAG_MAP.get(args.command, {}))
        if args.command == "sample" and args.no_refine:
            cfg["sampler"]["apply_refinement"] = False
        return COMMANDS[args.command](args, cfg)
    except NumericalError as exc:
        return _error("numerical", str(exc), EXIT_NUMERICAL)
    except (StrokeDiffError, ValueError, OSError) as exc:
        return _error(type(exc).__name__, str(exc), EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
