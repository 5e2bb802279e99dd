from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparsevote.errors import InvalidArgument
from sparsevote.synthetic import SyntheticSpec, generate_synthetic, nominal, synthetic_suite


def test_noise_free_bump_labels_exact():
    spec = SyntheticSpec(n_points=64 * 64, noise_sigma=0.0, anomaly_depth=0.004, seed=3)
    cloud, mask = generate_synthetic(spec)
    base, base_mask = generate_synthetic(nominal(spec))
    assert not base_mask.any() and mask.any()
    dz = base.points[:, 2] - cloud.points[:, 2]
    # the bump raises (lowers z) exactly the labelled points
    np.testing.assert_array_equal(dz > 0, mask)
    assert np.isclose(dz.max(), 0.004)
    assert np.all(dz >= 0)


def test_dent_and_hole_go_down():
    spec = SyntheticSpec(n_points=48 * 48, noise_sigma=0.0, anomaly_depth=0.003, seed=1)
    base, _ = generate_synthetic(nominal(spec))
    for kind in ("dent", "hole"):
        cloud, mask = generate_synthetic(replace(spec, anomaly=kind))
        dz = cloud.points[:, 2] - base.points[:, 2]
        np.testing.assert_array_equal(dz > 0, mask)
    _, hole = generate_synthetic(replace(spec, anomaly="hole"))
    cloud, _ = generate_synthetic(replace(spec, anomaly="hole"))
    np.testing.assert_allclose(cloud.points[hole, 2] - base.points[hole, 2], spec.depth_amplitude)


def test_zero_radius_gives_empty_mask():
    _, mask = generate_synthetic(SyntheticSpec(n_points=32 * 32, anomaly_radius=0.0))
    assert not mask.any()


def test_default_depth_is_five_sigma():
    assert SyntheticSpec(noise_sigma=0.001).depth_amplitude == 0.005


def test_shape_and_table():
    spec = SyntheticSpec(n_points=1000, base_shape="box", noise_sigma=0.0, anomaly="none")
    cloud, _ = generate_synthetic(spec)
    assert cloud.grid_shape == (32, 32)
    z = cloud.points[:, 2].reshape(32, 32)
    assert np.all(z[0] == 0.6) and np.all(z[:, -1] == 0.6)
    assert z.min() < 0.6


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["sphere", "box", "plane"]), st.sampled_from(["bump", "dent", "hole"]))
def test_deterministic_and_mask_on_object(seed, shape, kind):
    spec = SyntheticSpec(n_points=24 * 24, base_shape=shape, anomaly=kind, seed=seed)
    a, ma = generate_synthetic(spec)
    b, mb = generate_synthetic(spec)
    np.testing.assert_array_equal(a.points, b.points)
    np.testing.assert_array_equal(ma, mb)
    clean, _ = generate_synthetic(replace(spec, noise_sigma=0.0, anomaly="none"))
    assert np.all(clean.points[ma, 2] < 0.6)


@pytest.mark.parametrize("kw", [
    {"base_shape": "torus"},
    {"anomaly": "scratch"},
    {"n_points": 10},
    {"noise_sigma": -1.0},
    {"anomaly_radius": 0.05},
    {"object_size": 0.12},
])
def test_invalid_specs(kw):
    with pytest.raises(InvalidArgument):
        SyntheticSpec(**kw)


def test_suite_layout():
    samples = synthetic_suite(SyntheticSpec(n_points=16 * 16, seed=2), 2, 3, 4)
    ids = [s.sample_id for s in samples]
    assert ids == ["train/good/000", "train/good/001", "test/good/000", "test/good/001", "test/good/002",
                   "test/bump/000", "test/dent/001", "test/bump/002", "test/dent/003"]
    assert [s.label for s in samples] == [False] * 5 + [True] * 4
    assert all(s.mask.any() for s in samples if s.label)
