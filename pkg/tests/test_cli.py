import json
from pathlib import Path

import numpy as np
import pytest

from strokediff import cli
from strokediff.geometry import read_svg

GOLDEN = Path(__file__).parent / "golden"
COMMANDS = ["dataset-gen", "train", "refine", "sample", "sort", "init", "render", "eval"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("dataset-gen", "--out", root / "data", "--n-samples", 6, "--seed", 1) == 0
    return root


@pytest.fixture(scope="module")
def checkpoint(toy):
    ck = toy / "ck"
    assert run("train", "--data", toy / "data", "--split", "train", "--out", ck, "--steps", 2,
               "--batch", 4, "--lr", 1e-3, "--d-model", 16, "--n-layers", 1) == 0
    return ck


def sample_dir(toy):
    return toy / "data" / sorted(p.name for p in (toy / "data").iterdir() if p.is_dir())[0]


# --------------------------------------------------------------------------
# help and usage


@pytest.mark.parametrize("command", ["main"] + COMMANDS)
def test_help_matches_golden(command, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "100")
    argv = ["--help"] if command == "main" else [command, "--help"]
    assert cli.main(argv) == 0
    assert capsys.readouterr().out == (GOLDEN / f"help_{command}.txt").read_text()


@pytest.mark.parametrize("command", COMMANDS)
def test_help_states_every_default(command, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "200")
    cli.main([command, "--help"])
    text = capsys.readouterr().out.split("options:", 1)[1]
    # one entry per option; wrapped help continues on more deeply indented lines
    entries = []
    for ln in text.splitlines():
        if ln.startswith("  -"):
            entries.append(ln)
        elif entries and ln.strip():
            entries[-1] += " " + ln.strip()
    entries = [e for e in entries if not e.strip().startswith("-h")]
    assert entries
    for e in entries:
        assert "default" in e, e


def test_usage_errors_exit_1(capsys):
    assert run("render") == 1
    assert last_error(capsys)["exit_code"] == 1
    assert run("frobnicate") == 1
    assert run("render", "--svg", "x.svg", "--out", "y.png", "--res", "abc") == 1


def test_data_errors_exit_2(tmp_path, capsys):
    assert run("render", "--svg", tmp_path / "missing.svg", "--out", tmp_path / "o.png") == 2
    err = last_error(capsys)
    assert err["exit_code"] == 2 and "message" in err
    (tmp_path / "bad.svg").write_text("<svg><path d='M 0 0 L 1 1'/></svg>")
    assert run("render", "--svg", tmp_path / "bad.svg", "--out", tmp_path / "o.png") == 2


def test_stderr_error_is_single_line_json(tmp_path, capsys):
    run("sample", "--checkpoint", tmp_path, "--image", tmp_path / "i.png", "--out", tmp_path / "o.svg")
    err = capsys.readouterr().err.strip()
    assert "\n" not in err
    assert set(json.loads(err)) == {"error", "message", "exit_code"}


def test_vsd_threads_validation(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("VSD_THREADS", "zero")
    assert run("dataset-gen", "--out", tmp_path / "d", "--n-samples", 1) == 2


# --------------------------------------------------------------------------
# config layering


def test_config_precedence(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"seed": 5, "data": {"n_samples": 3, "n_strokes": 8}}))
    assert run("dataset-gen", "--config", cfg, "--out", tmp_path / "a", "--n-strokes", 12) == 0
    echoed = json.loads((tmp_path / "a" / "run_config.json").read_text())
    assert echoed["command"] == "dataset-gen"
    assert echoed["seed"] == 5
    assert echoed["data"]["n_samples"] == 3  # from the file
    assert echoed["data"]["n_strokes"] == 12  # flag beats file
    assert echoed["denoiser"]["d_model"] == 128  # default
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert len(manifest["ids"]) == 3 and manifest["n_strokes"] == 12
    assert run("dataset-gen", "--config", cfg, "--out", tmp_path / "b", "--seed", 9) == 0
    assert json.loads((tmp_path / "b" / "run_config.json").read_text())["seed"] == 9


def test_unknown_config_keys_rejected(tmp_path, capsys):
    for doc in ({"bogus": 1}, {"train": {"lr": 1e-3, "momentum": 0.9}}):
        cfg = tmp_path / "run.json"
        cfg.write_text(json.dumps(doc))
        assert run("dataset-gen", "--config", cfg, "--out", tmp_path / "x") == 2
        assert "unknown config key" in last_error(capsys)["message"]


def test_default_config_round_trips_through_merge():
    base = cli.default_run_config()
    assert cli.merge_config(base, json.loads(json.dumps(base))) == base


# --------------------------------------------------------------------------
# subcommands


def test_dataset_gen_is_seed_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("dataset-gen", "--out", tmp_path / name, "--n-samples", 2, "--seed", 3) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.svg"))
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_writes_checkpoint_and_metrics(checkpoint):
    assert (checkpoint / "denoiser.vsd").exists()
    rows = (checkpoint / "metrics.jsonl").read_text().splitlines()
    assert len(rows) == 2
    assert json.loads((checkpoint / "run_config.json").read_text())["denoiser"]["d_model"] == 16


def test_sample_deterministic_is_byte_identical(tmp_path, toy, checkpoint):
    image = sample_dir(toy) / "image.png"
    outs = []
    for name in ("a.svg", "b.svg"):
        out = tmp_path / name
        assert run("sample", "--checkpoint", checkpoint, "--image", image, "--out", out,
                   "--deterministic", "--seed", 4, "--no-refine") == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert len(read_svg(tmp_path / "a.svg")) == 32


def test_sample_steps_dir_and_png(tmp_path, toy, checkpoint):
    image = sample_dir(toy) / "image.png"
    assert run("sample", "--checkpoint", checkpoint, "--image", image, "--out", tmp_path / "s.svg",
               "--png", tmp_path / "s.png", "--steps-dir", tmp_path / "steps", "--no-refine") == 0
    steps = sorted((tmp_path / "steps").glob("step_*.svg"))
    assert len(steps) == 50
    assert (tmp_path / "s.png").exists()


def test_refine_then_sample_with_refiner(tmp_path, toy, checkpoint):
    out = tmp_path / "refined"
    assert run("refine", "--checkpoint", checkpoint, "--data", toy / "data", "--out", out, "--steps", 1,
               "--batch", 2, "--source", "gaussian_perturb") == 0
    assert (out / "refiner.vsd").exists()
    assert run("sample", "--checkpoint", out, "--image", sample_dir(toy) / "image.png",
               "--out", tmp_path / "r.svg") == 0


def test_sample_rejects_checkpoint_without_model(tmp_path, toy, capsys):
    assert run("sample", "--checkpoint", tmp_path, "--image", sample_dir(toy) / "image.png",
               "--out", tmp_path / "o.svg") == 2


def test_render_of_sorted_equals_render(tmp_path, toy):
    d = sample_dir(toy)
    assert run("sort", "--svg", d / "sketch.svg", "--mask", d / "mask.png", "--attention", d / "attention.png",
               "--out", tmp_path / "sorted.svg") == 0
    assert run("render", "--svg", d / "sketch.svg", "--out", tmp_path / "a.png") == 0
    assert run("render", "--svg", tmp_path / "sorted.svg", "--out", tmp_path / "b.png") == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    a, b = read_svg(d / "sketch.svg"), read_svg(tmp_path / "sorted.svg")
    assert sorted(map(tuple, a.points.reshape(len(a), 8))) == sorted(map(tuple, b.points.reshape(len(b), 8)))


def test_render_soft_and_resolution(tmp_path, toy):
    d = sample_dir(toy)
    assert run("render", "--svg", d / "sketch.svg", "--out", tmp_path / "s.png", "--soft") == 0
    assert run("render", "--svg", d / "sketch.svg", "--out", tmp_path / "h.png", "--res", 64) == 0
    from strokediff.rasterizer import load_gray

    assert load_gray(tmp_path / "h.png").shape == (64, 64)


@pytest.mark.parametrize("n", [32, 7])
def test_init_stroke_count(tmp_path, toy, n):
    d = sample_dir(toy)
    assert run("init", "--attention", d / "attention.png", "--mask", d / "mask.png", "--n", n,
               "--out", tmp_path / "init.svg", "--seed", 2) == 0
    assert len(read_svg(tmp_path / "init.svg")) == n
    first = (tmp_path / "init.svg").read_bytes()
    run("init", "--attention", d / "attention.png", "--mask", d / "mask.png", "--n", n,
        "--out", tmp_path / "init.svg", "--seed", 2)
    assert (tmp_path / "init.svg").read_bytes() == first


def test_eval_identity(tmp_path, toy):
    pred = tmp_path / "pred"
    pred.mkdir()
    data = toy / "data"
    for d in sorted(p for p in data.iterdir() if p.is_dir()):
        (pred / f"{d.name}.svg").write_bytes((d / "sketch.svg").read_bytes())
    assert run("eval", "--pred", pred, "--gt", data, "--out", tmp_path / "report.json") == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert len(rep["ids"]) == 6
    assert rep["mean"]["chamfer"] == 0.0
    assert np.isclose(rep["mean"]["ms_ssim"], 1.0)
