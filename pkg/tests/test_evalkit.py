import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from strokediff.evalkit import (
    EvalReport,
    chamfer,
    evaluate,
    ms_ssim,
    ms_ssim_scales,
    raster_mse,
)
from strokediff.geometry import Sketch


def random_sketch(seed, n=6):
    rng = np.random.default_rng(seed)
    return Sketch(rng.uniform(20, 236, size=(n, 4, 2)))


def point_sketch(x, y):
    return Sketch(np.tile([[x, y]], (1, 4, 1)).astype(float))


def checkerboard(res=64, cell=4):
    yy, xx = np.mgrid[:res, :res]
    return (((yy // cell) + (xx // cell)) % 2).astype(float)


def brute_chamfer(a, b):
    d = np.linalg.norm(a[:, None] - b[None], axis=-1)
    return 0.5 * (d.min(1).mean() + d.min(0).mean())


# --------------------------------------------------------------------------
# chamfer


def test_chamfer_self_is_zero():
    s = random_sketch(0)
    assert chamfer(s, s) == 0.0


def test_chamfer_single_points():
    # 5 px at 256 px canvas is 5 * 4 / 256 normalized units
    assert chamfer(point_sketch(100, 100), point_sketch(103, 104)) == pytest.approx(5 * 4 / 256)


def test_chamfer_matches_brute_force():
    from strokediff.geometry import sample_sketch

    a, b = random_sketch(1), random_sketch(2, n=9)
    pa = sample_sketch(a, 16).reshape(-1, 2) * 4 / 256 - 2
    pb = sample_sketch(b, 16).reshape(-1, 2) * 4 / 256 - 2
    assert chamfer(a, b) == pytest.approx(brute_chamfer(pa, pb), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 2**31))
def test_chamfer_symmetric_and_order_invariant(s1, s2):
    a, b = random_sketch(s1), random_sketch(s2)
    assert abs(chamfer(a, b) - chamfer(b, a)) < 1e-9
    perm = np.random.default_rng(s1).permutation(len(a))
    assert abs(chamfer(a.reorder(perm), b) - chamfer(a, b)) < 1e-12
    assert chamfer(a, b) >= 0


def test_chamfer_rejects_empty():
    with pytest.raises(ValueError):
        chamfer(Sketch(np.zeros((0, 4, 2))), random_sketch(0))


# --------------------------------------------------------------------------
# MS-SSIM


def test_scale_count():
    assert ms_ssim_scales(64) == 3
    assert ms_ssim_scales(32) == 2
    assert ms_ssim_scales(176) == 5
    assert ms_ssim_scales(256) == 5


def test_ms_ssim_self_is_one():
    x = np.random.default_rng(0).uniform(size=(64, 64))
    assert ms_ssim(x, x) == pytest.approx(1.0, abs=1e-6)


def test_ms_ssim_inverse_checkerboard_is_low():
    x = checkerboard()
    assert ms_ssim(x, 1 - x) < 0.5


def test_ms_ssim_constant_offset():
    x = checkerboard(cell=8) * 0.8
    y = np.clip(x + np.random.default_rng(1).normal(0, 0.05, x.shape), 0, 0.9)
    base = ms_ssim(x, y)
    for c in (0.05, 0.1):
        assert abs(ms_ssim(x + c, y + c) - base) < 2e-2


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (32, 32), elements=st.floats(0, 1)), arrays(np.float64, (32, 32), elements=st.floats(0, 1)))
def test_ms_ssim_symmetric_and_bounded(a, b):
    v = ms_ssim(a, b)
    assert abs(v - ms_ssim(b, a)) < 1e-9
    assert 0.0 <= v <= 1.0


def test_ms_ssim_single_scale_matches_direct_ssim():
    # at 16 px only one scale fits, so the value is plain mean SSIM over valid windows
    rng = np.random.default_rng(2)
    a, b = rng.uniform(size=(16, 16)), rng.uniform(size=(16, 16))
    g = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5**2))
    w = np.outer(g, g) / np.outer(g, g).sum()
    vals = []
    for i in range(6):
        for j in range(6):
            pa, pb = a[i : i + 11, j : j + 11], b[i : i + 11, j : j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va, vb = (w * pa * pa).sum() - ma**2, (w * pb * pb).sum() - mb**2
            cov = (w * pa * pb).sum() - ma * mb
            c1, c2 = 0.01**2, 0.03**2
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    assert ms_ssim(a, b) == pytest.approx(max(np.mean(vals), 0.0), abs=1e-10)


def test_ms_ssim_errors():
    with pytest.raises(ValueError):
        ms_ssim(np.zeros((32, 32)), np.zeros((64, 64)))
    with pytest.raises(ValueError):
        ms_ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_raster_mse():
    assert raster_mse(np.zeros((4, 4)), np.full((4, 4), 0.5)) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        raster_mse(np.zeros((4, 4)), np.zeros((4, 5)))


# --------------------------------------------------------------------------
# reports


def test_evaluate_identity():
    sketches = [random_sketch(i) for i in range(4)]
    rep = evaluate(sketches, sketches)
    assert rep.per_sample["chamfer"] == [0.0] * 4
    assert rep.per_sample["raster_mse"] == [0.0] * 4
    assert np.allclose(rep.per_sample["ms_ssim"], 1.0, atol=1e-6)


def test_report_aggregates_and_round_trip(tmp_path):
    outs = [random_sketch(i) for i in range(5)]
    gts = [random_sketch(i + 10) for i in range(5)]
    rep = evaluate(outs, gts, ids=list("abcde"))
    for k, v in rep.per_sample.items():
        assert abs(rep.mean[k] - np.mean(v)) < 1e-9
        assert abs(rep.median[k] - np.median(v)) < 1e-9
        assert all(x >= 0 for x in v)
    assert all(0 <= x <= 1 for x in rep.per_sample["ms_ssim"])
    assert EvalReport.from_json(rep.to_json()) == rep
    rep.save(tmp_path / "r.json")
    assert EvalReport.from_json((tmp_path / "r.json").read_text()) == rep


def test_report_aggregates_permutation_invariant():
    outs = [random_sketch(i) for i in range(6)]
    gts = [random_sketch(i + 20) for i in range(6)]
    a = evaluate(outs, gts)
    perm = [3, 0, 5, 1, 4, 2]
    b = evaluate([outs[i] for i in perm], [gts[i] for i in perm])
    for k in a.mean:
        assert a.mean[k] == pytest.approx(b.mean[k], abs=1e-12)
        assert a.median[k] == pytest.approx(b.median[k], abs=1e-12)


def test_evaluate_with_conditioning_images():
    from strokediff.rasterizer import hard_raster

    outs = [random_sketch(i) for i in range(2)]
    conds = [hard_raster(s, (64, 64), 1.0) for s in outs]
    rep = evaluate(outs, outs, cond_images=conds)
    assert np.allclose(rep.per_sample["ms_ssim_cond"], 1.0, atol=1e-6)


def test_evaluate_misaligned():
    with pytest.raises(ValueError):
        evaluate([random_sketch(0)], [])
    with pytest.raises(ValueError):
        evaluate([random_sketch(0)], [random_sketch(1)], cond_images=[])
    with pytest.raises(ValueError):
        EvalReport(ids=["a"], per_sample={"chamfer": [1.0, 2.0]})
