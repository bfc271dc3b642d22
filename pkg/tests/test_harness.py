import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgmp.gmm import GmmParams
from rgmp.gss import Skill
from rgmp.harness import (
    SLOTS,
    Dataset,
    SceneSpec,
    evaluate_policy,
    generate_dataset,
    kinematic_map,
    load_dataset,
    save_dataset,
    wkv_check,
)


def label_oracle(demo, dims=(128, 128)):
    return kinematic_map(demo.center, dims)


# ---------------------------------------------------------------- labels


def test_kinematic_map_examples():
    np.testing.assert_allclose(kinematic_map((64, 64), (128, 128)), [0, 0, math.pi / 24, 0, math.pi / 6, 0], atol=1e-15)
    np.testing.assert_allclose(kinematic_map((0, 0), (128, 128)), [-math.pi / 2, -math.pi / 8, 0, 0, 0, 0], atol=1e-15)
    with pytest.raises(ValueError):
        kinematic_map((129, 3), (128, 128))


@settings(max_examples=50)
@given(st.floats(0, 640), st.floats(0, 480))
def test_kinematic_map_range(cx, cy):
    a = kinematic_map((cx, cy), (640, 480))
    assert a[5] == 0.0
    assert np.all(np.abs(a) <= math.pi)


# ---------------------------------------------------------------- generation


def test_generation_is_deterministic():
    a = generate_dataset(6, SceneSpec(seed=3))
    b = generate_dataset(6, SceneSpec(seed=3))
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = generate_dataset(6, SceneSpec(seed=4))
    assert not np.array_equal(a.images, c.images)


def test_labels_match_centres_and_bounds():
    ds = generate_dataset(20, SceneSpec(seed=5, layout="uniform"))
    for d in ds.demos:
        np.testing.assert_array_equal(d.joints, label_oracle(d))
        assert d.image.min() >= 0 and d.image.max() <= 1
        assert np.all(np.abs(d.joints) < math.pi)


def test_slot_layout_centres():
    ds = generate_dataset(30, SceneSpec(seed=6))
    allowed = {(sx * 128, sy * 128) for sx, sy in SLOTS}
    assert {d.center for d in ds.demos} <= allowed


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(width=20, height=20, radius_range=(6, 12))
    with pytest.raises(ValueError):
        SceneSpec(layout="grid")
    with pytest.raises(ValueError):
        generate_dataset(0)
    with pytest.raises(ValueError):
        Dataset(generate_dataset(3).demos, capacity=2)


def test_dataset_round_trip(tmp_path):
    ds = generate_dataset(5, SceneSpec(seed=7), Skill.TOP_PINCH)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.skill == Skill.TOP_PINCH and back.seed == 7 and back.capacity == 5
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


def test_saved_bytes_are_identical(tmp_path):
    for name in ("a", "b"):
        save_dataset(generate_dataset(3, SceneSpec(seed=8)), tmp_path / name)
    for rel in ("manifest.jsonl", "dataset.json", "images/00000.png", "images/00002.png"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


# ---------------------------------------------------------------- evaluation


def label_gmm(ds, scale=1e-4):
    means = np.unique(ds.labels, axis=0)
    k = len(means)
    return GmmParams(np.full(k, 1 / k), means, np.stack([scale * np.eye(6)] * k))


def oracle_predictor(ds):
    table = {d.image.tobytes(): d.joints for d in ds.demos}
    return lambda image: table[image.tobytes()]


def test_perfect_predictor():
    ds = generate_dataset(10, SceneSpec(seed=9))
    m = evaluate_policy(oracle_predictor(ds), None, ds)
    assert m.acc_t == 1.0 and m.acc == 1.0 and m.count == 10
    assert evaluate_policy(oracle_predictor(ds), label_gmm(ds), ds).acc_t == 1.0


def test_zero_tolerance():
    ds = generate_dataset(6, SceneSpec(seed=10))
    noisy = lambda image: oracle_predictor(ds)(image) + 1e-3  # noqa: E731
    assert evaluate_policy(noisy, None, ds, tol=0.0).acc_t == 0.0


def test_nearest_mode_snaps_to_means():
    ds = generate_dataset(12, SceneSpec(seed=11))
    gmm = label_gmm(ds)
    rng = np.random.default_rng(0)
    offsets = {d.image.tobytes(): rng.normal(scale=0.03, size=6) for d in ds.demos}
    pred = lambda image: oracle_predictor(ds)(image) + offsets[image.tobytes()]  # noqa: E731
    m = evaluate_policy(pred, gmm, ds)
    # the labels are the means, so success means snapping back to the right one
    expected = np.mean([
        np.argmin(np.linalg.norm(gmm.means - (d.joints + offsets[d.image.tobytes()]), axis=1))
        == np.argmin(np.linalg.norm(gmm.means - d.joints, axis=1))
        for d in ds.demos
    ])
    assert m.acc_t == expected


def test_metrics_invariants_and_order():
    ds = generate_dataset(8, SceneSpec(seed=12))
    rng = np.random.default_rng(1)
    offsets = {d.image.tobytes(): rng.normal(scale=0.04, size=6) for d in ds.demos}
    pred = lambda image: oracle_predictor(ds)(image) + offsets[image.tobytes()]  # noqa: E731
    a = evaluate_policy(pred, None, ds, acc_s=0.85)
    b = evaluate_policy(pred, None, list(reversed(ds.demos)), acc_s=0.85)
    assert a.acc == a.acc_s * a.acc_t
    assert a.acc_t == b.acc_t
    np.testing.assert_allclose(a.joint_mae, b.joint_mae, rtol=1e-15)
    with pytest.raises(ValueError):
        evaluate_policy(pred, None, [])
    with pytest.raises(ValueError):
        evaluate_policy(pred, None, ds, acc_s=1.5)


# ---------------------------------------------------------------- self checks


def test_wkv_check_is_tight():
    for n in (1, 2, 4, 16, 64):
        assert wkv_check(0, n) < 1e-10
    with pytest.raises(ValueError):
        wkv_check(0, 0)
