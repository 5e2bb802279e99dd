import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sparsevote.detect import (
    bank_build,
    bank_score,
    concat_features,
    detect,
    image_score,
    normalize_scores,
    threshold_detect,
)
from sparsevote.errors import DegenerateInput, EmptyBank, InvalidArgument, ShapeError


def test_concat_examples():
    np.testing.assert_array_equal(concat_features([[1.0, 2.0]], [[3.0]]), [[1, 2, 3]])
    a = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(concat_features(a, np.zeros((5, 0))), a)
    b = np.random.default_rng(1).normal(size=(5, 4))
    out = concat_features(a, b)
    assert np.array_equal(out[:, :3], a) and np.array_equal(out[:, 3:], b)
    with pytest.raises(ShapeError):
        concat_features(a, b[:4])


def test_bank_build():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
    assert len(bank_build([a, b])) == 20
    half = bank_build([a, b], 0.5, seed=7)
    assert len(half) == 10
    np.testing.assert_array_equal(half.rows, bank_build([a, b], 0.5, seed=7).rows)
    both = np.vstack([a, b])
    assert all(any(np.array_equal(r, s) for s in both) for r in half.rows)
    with pytest.raises(EmptyBank):
        bank_build([])
    with pytest.raises(EmptyBank):
        bank_build([np.zeros((0, 3))])


def test_bank_score_examples():
    bank = bank_build([np.zeros((1, 2))])
    assert bank_score([[3.0, 4.0]], bank)[0] == 5.0
    rows = np.random.default_rng(3).normal(size=(30, 6)) * 100
    assert np.all(bank_score(rows[[4, 17]], bank_build([rows])) == 0)
    with pytest.raises(ShapeError):
        bank_score(np.zeros((2, 3)), bank)


def test_bank_score_brute_force():
    rng = np.random.default_rng(4)
    bank = bank_build([rng.normal(size=(700, 12))])
    x = rng.normal(size=(600, 12))
    ref = np.array([np.sqrt(((bank.rows - r) ** 2).sum(1)).min() for r in x])
    np.testing.assert_allclose(bank_score(x, bank), ref, rtol=1e-12, atol=1e-12)
    assert np.all(bank_score(x, bank) > 0)


def test_normalize_examples():
    np.testing.assert_array_equal(normalize_scores([2, 4, 6]), [0, 0.5, 1])
    np.testing.assert_array_equal(normalize_scores([5, 5, 5]), [0, 0, 0])
    with pytest.raises(DegenerateInput):
        normalize_scores([])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-1e6, 1e6)))
def test_normalize_properties(raw):
    out = normalize_scores(raw)
    assert out.min() >= 0 and out.max() <= 1
    if raw.max() > raw.min():
        assert out.min() == 0 and out.max() == 1
        assert out[np.argmax(raw)] == 1.0
        i, j = np.nonzero(raw[:, None] < raw[None, :])
        assert np.all(out[i] <= out[j])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(0, 100)),
       st.floats(0.5, 20), st.floats(-50, 50))
def test_affine_invariance_of_detection(raw, a, b):
    # min-max normalization cancels any increasing affine map up to rounding
    got = normalize_scores(a * raw + b)
    if raw.max() > raw.min():
        assert got[np.argmax(raw)] == 1.0
    np.testing.assert_allclose(got, normalize_scores(raw), atol=1e-9)


def test_threshold_examples():
    assert threshold_detect([0.2, 0.9], 0.5).tolist() == [1]
    assert threshold_detect([0.2, 1.0], 1.0).tolist() == []
    s = np.random.default_rng(5).random(50)
    assert threshold_detect(s, 0.3).tolist() == [i for i in range(50) if s[i] > 0.3]
    with pytest.raises(InvalidArgument):
        threshold_detect(s, 1.5)


def test_image_score():
    assert image_score([0.1, 0.7, 0.3]) == 0.7
    assert image_score([2.5]) == 2.5
    with pytest.raises(DegenerateInput):
        image_score([])


def test_result_json():
    res = detect([1.0, 3.0, 2.0], 0.4, "s01")
    assert set(res.anomaly_set.tolist()) == {i for i, v in enumerate(res.norm_scores) if v > 0.4}
    doc = json.loads(json.dumps(res.to_json()))
    assert doc == {"sample_id": "s01", "image_score": 3.0, "tau": 0.4, "scores": [0.0, 1.0, 0.5], "anomalies": [1, 2]}
