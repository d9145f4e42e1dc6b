import filecmp
import json

import numpy as np
import pytest

from strokediff.dataset import (
    COND_RES,
    DatasetManifest,
    InMemoryDataset,
    export_controlsketch,
    generate_toy,
    ingest_controlsketch,
    iterate_batches,
    load_sample,
    make_toy_sample,
    split_tag,
)
from strokediff.errors import DataError
from strokediff.geometry import Sketch, from_svg, normalize, to_svg, write_svg
from strokediff.rng import numpy_rng


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return generate_toy(root, 12, seed=3)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_generation_is_byte_identical(tmp_path, toy):
    generate_toy(tmp_path, 12, seed=3)
    assert tree_bytes(tmp_path) == tree_bytes(toy.path)


def test_different_seed_differs(tmp_path, toy):
    generate_toy(tmp_path, 12, seed=4)
    assert tree_bytes(tmp_path) != tree_bytes(toy.path)


def test_every_sketch_has_32_strokes_and_round_trips(toy):
    for sample_id in toy.ids:
        s = load_sample(toy, sample_id)
        assert len(s.sketch) == 32
        back = from_svg(to_svg(s.sketch))
        assert np.allclose(back.points, s.sketch.points, atol=1e-6)
        assert s.cond_image.shape == (COND_RES, COND_RES)
        assert 0.0 <= s.cond_image.min() and s.cond_image.max() <= 1.0


@pytest.mark.parametrize("family", ["blob", "polygon", "star"])
def test_outline_is_c0_before_sorting(family):
    for i in range(100 // 3 + 1):
        _, outline = make_toy_sample("x", family, numpy_rng(0, "c0", family, i), 32)
        p = outline.points
        gaps = np.linalg.norm(p[:, 3] - np.roll(p, -1, axis=0)[:, 0], axis=1)
        assert gaps.max() < 1e-6


def test_sorted_sketch_is_a_permutation_of_the_outline():
    sample, outline = make_toy_sample("x", "star", numpy_rng(0, "perm"), 32)
    a = sorted(map(tuple, sample.sketch.points.reshape(32, 8)))
    b = sorted(map(tuple, outline.points.reshape(32, 8)))
    assert a == b


def test_manifest_load_and_splits(toy):
    loaded = DatasetManifest.load(toy.path)
    assert loaded == toy
    assert set(toy.splits.values()) <= {"train", "test"}
    assert all(toy.splits[i] == split_tag(i, 3) for i in toy.ids)
    assert sorted(toy.split_ids("train") + toy.split_ids("test")) == sorted(toy.ids)


def test_split_fraction_is_roughly_ten_percent():
    tags = [split_tag(f"blob-{i:05d}", 0) for i in range(5000)]
    assert abs(tags.count("test") / 5000 - 0.1) < 0.02


def test_write_then_load(tmp_path):
    manifest = generate_toy(tmp_path, 2, seed=0)
    sample_id = manifest.ids[0]
    rng = numpy_rng(0, "toy", int(sample_id[-5:]))
    rng.integers(3)  # the generator draws the family first
    original, _ = make_toy_sample(sample_id, sample_id.split("-")[0], rng, 32)
    loaded = load_sample(manifest, sample_id, with_attention=True)
    assert np.allclose(loaded.sketch.points, original.sketch.points, atol=1e-6)
    assert loaded.attention is not None and loaded.attention.mask.any()
    assert loaded.class_id == original.class_id


def test_load_errors_name_the_sample(tmp_path):
    manifest = generate_toy(tmp_path, 3, seed=0)
    bad, missing = manifest.ids[0], manifest.ids[1]
    write_svg(tmp_path / bad / "sketch.svg", Sketch(np.zeros((31, 4, 2))))
    (tmp_path / missing / "image.png").unlink()
    with pytest.raises(DataError, match=bad) as exc:
        load_sample(manifest, bad)
    assert exc.value.sample_id == bad and "31" in str(exc.value)
    with pytest.raises(DataError, match=missing):
        load_sample(manifest, missing)
    (tmp_path / manifest.ids[2] / "sketch.svg").write_text("<svg><path d='M 0 0 Q 1 1 2 2'/></svg>")
    with pytest.raises(DataError, match="malformed"):
        load_sample(manifest, manifest.ids[2])


def test_batches_cover_each_id_once_per_epoch(toy):
    data = InMemoryDataset.from_manifest(toy)
    epoch = list(data.batches(5, seed=1))
    seen = [i for b in epoch for i in b.ids]
    assert sorted(seen) == sorted(toy.ids)
    assert [len(b.ids) for b in epoch] == [5, 5, 2]
    b = epoch[0]
    assert b.coords.shape == (5, 32, 4, 2) and b.images.shape == (5, 1, 64, 64)
    idx = [toy.ids.index(i) for i in b.ids]
    assert np.allclose(b.coords, data.coords[idx])
    assert np.allclose(b.coords[0], normalize(load_sample(toy, b.ids[0]).sketch), atol=1e-6)


def test_batches_are_seed_deterministic(toy):
    a = [b.ids for b in iterate_batches(toy, 4, seed=9, split=None, epochs=3)]
    b = [b.ids for b in iterate_batches(toy, 4, seed=9, split=None, epochs=3)]
    c = [b.ids for b in iterate_batches(toy, 4, seed=10, split=None, epochs=3)]
    assert a == b and a != c
    # each epoch draws a fresh permutation
    assert a[:3] != a[3:6]


def test_unknown_family(tmp_path):
    with pytest.raises(DataError):
        generate_toy(tmp_path, 1, families=["circle"])


def test_ingest_single_valid_sample(tmp_path, toy):
    export_controlsketch(DatasetManifest(32, (256, 256), toy.ids[:1], toy.splits, 3, path=toy.path), tmp_path)
    manifest, errors = ingest_controlsketch(tmp_path)
    assert manifest.ids == toy.ids[:1] and errors == []
    assert json.loads((tmp_path / "manifest.json").read_text())["ids"] == toy.ids[:1]


def test_ingest_rejects_31_strokes(tmp_path, toy):
    export_controlsketch(toy, tmp_path)
    victim = toy.ids[2]
    sk = load_sample(toy, victim).sketch
    write_svg(tmp_path / victim / "sketch.svg", Sketch(sk.points[:31], sk.canvas))
    manifest, errors = ingest_controlsketch(tmp_path)
    assert victim not in manifest.ids and len(manifest.ids) == len(toy.ids) - 1
    assert len(errors) == 1 and errors[0].sample_id == victim and "31" in str(errors[0])


def test_ingest_reports_layout_violations(tmp_path, toy):
    export_controlsketch(toy, tmp_path)
    (tmp_path / toy.ids[0] / "image.png").unlink()
    (tmp_path / toy.ids[1] / "mask.png").unlink()
    manifest, errors = ingest_controlsketch(tmp_path)
    assert {e.sample_id for e in errors} == {toy.ids[0], toy.ids[1]}
    assert len(manifest.ids) == len(toy.ids) - 2


def test_export_ingest_round_trip_gives_identical_manifest(tmp_path, toy):
    dest = export_controlsketch(toy, tmp_path / "cs")
    manifest, errors = ingest_controlsketch(dest, seed=toy.seed)
    assert errors == []
    assert manifest.to_dict() == toy.to_dict()
    for sample_id in toy.ids:
        assert filecmp.cmp(dest / sample_id / "sketch.svg", toy.path / sample_id / "sketch.svg", shallow=False)
