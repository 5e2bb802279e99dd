import json
from dataclasses import replace

import numpy as np
import pytest

from sparsevote.errors import ConfigError
from sparsevote.feat2d import Extractor2DConfig
from sparsevote.fpfh import FpfhConfig
from sparsevote.io import Sample
from sparsevote.pipeline import (
    FeatureCache,
    GraphConfig,
    PipelineConfig,
    assemble,
    block_scales,
    config_from_dict,
    config_to_dict,
    evaluate_class,
    run_ablation,
    run_pipeline,
    write_csv,
)
from sparsevote.synthetic import SyntheticSpec, synthetic_suite

FAST = PipelineConfig(
    fpfh=FpfhConfig(normal_radius=0.01, feature_radius=0.02, leaf_size=0.006),
    n_views=2,
    image_size=(32, 32),
    extractor=Extractor2DConfig(channels=16),
)


@pytest.fixture(scope="module")
def small():
    return {"toy": synthetic_suite(SyntheticSpec(n_points=48 * 48), 3, 3, 3)}


def test_report_ranges_and_files(small, tmp_path):
    rep = run_pipeline(FAST, small, tmp_path)
    assert set(rep) == {"per_class", "mean_i_roc", "mean_p_pro"}
    assert 0.0 <= rep["mean_i_roc"] <= 1.0 and 0.0 <= rep["mean_p_pro"] <= 1.0
    assert rep["per_class"]["toy"]["i_roc"] == rep["mean_i_roc"]
    on_disk = json.loads((tmp_path / "report.json").read_text())
    assert on_disk == rep
    files = sorted(p.name for p in (tmp_path / "results" / "toy").iterdir())
    assert len(files) == 6 and "test__bump__000.json" in files
    doc = json.loads((tmp_path / "results" / "toy" / "test__bump__000.json").read_text())
    assert set(doc) == {"sample_id", "image_score", "tau", "scores", "anomalies"}
    assert len(doc["scores"]) == 48 * 48
    assert all(doc["scores"][i] > doc["tau"] for i in doc["anomalies"])


def test_deterministic_and_thread_independent(small, tmp_path):
    run_pipeline(FAST, small, tmp_path / "a")
    run_pipeline(FAST, small, tmp_path / "b", threads=3)
    for p in sorted((tmp_path / "a").rglob("*.json")):
        assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


def test_removed_points_score_zero(small):
    res = evaluate_class("toy", FAST, small["toy"], FeatureCache(FAST))
    cache = FeatureCache(FAST)
    for r, s in zip(res.results, [s for s in small["toy"] if s.split == "test"]):
        kept = cache.get([s], FAST.n_views, False)[0].kept
        off = np.setdiff1d(np.arange(len(s.cloud)), kept)
        assert np.all(r.raw_scores[off] == 0)
        assert r.image_score == r.raw_scores.max()


def test_ablation_rows(small):
    rows = run_ablation(FAST, small, "feature_mode")
    assert [r[0] for r in rows] == ["f3d", "f2d", "fused"]
    rows = run_ablation(FAST, small, "n_views", values=[1, 2])
    assert [r[0] for r in rows] == [1, 2] and all(len(r) == 3 for r in rows)
    with pytest.raises(ConfigError):
        run_ablation(FAST, small, "tau")


def test_mlp_scorer_runs(small):
    cfg = replace(FAST, scorer="mlp", graph=GraphConfig(hidden=8, train_iters=5))
    rep = run_pipeline(cfg, small)
    assert 0.0 <= rep["mean_i_roc"] <= 1.0


def test_block_scales(small):
    cache = FeatureCache(FAST)
    train = cache.get([s for s in small["toy"] if s.split == "train"], FAST.n_views, True)
    assert block_scales(train, FAST.n_views, "fused", "none", 0) == (1.0, 1.0)
    assert block_scales(train, FAST.n_views, "f3d", "nominal-nn", 0) == (1.0, 1.0)
    a, b = block_scales(train, FAST.n_views, "fused", "nominal-nn", 0)
    assert a > 0 and b > 0
    rows = assemble(train, "fused", FAST.n_views, (a, b))
    assert rows[0].shape[1] == train[0].f3d.shape[1] + train[0].f2d[FAST.n_views].shape[1]


def test_missing_mask_excluded_from_pro(small):
    samples = list(small["toy"])
    s = samples[-1]
    samples[-1] = Sample(s.sample_id, s.split, s.defect, s.cloud, None)
    res = evaluate_class("toy", FAST, samples, FeatureCache(FAST))
    assert res.i_roc is not None and res.p_pro is not None


def test_good_only_class_has_no_metrics():
    samples = synthetic_suite(SyntheticSpec(n_points=32 * 32), 2, 2, 0)
    rep = run_pipeline(FAST, {"plain": samples})
    assert rep["per_class"]["plain"] == {"i_roc": None, "p_pro": None}
    assert rep["mean_i_roc"] is None


def test_config_from_dict():
    cfg = config_from_dict({"n_views": "6", "fpfh.leaf_size": "0.01", "image_size": "64x48",
                            "graph.self_loops": "true", "extractor.path": "none"})
    assert cfg.n_views == 6 and cfg.fpfh.leaf_size == 0.01 and cfg.image_size == (64, 48)
    assert cfg.graph.self_loops is True and cfg.extractor.path is None
    assert config_from_dict(config_to_dict(cfg)) == cfg


@pytest.mark.parametrize("bad", [
    {"nope": "1"},
    {"fpfh": "1"},
    {"fpfh.nope": "1"},
    {"n_views": "three"},
    {"n_views": "0"},
    {"tau": "2"},
    {"feature_mode": "rgb"},
    {"extractor.kind": "magic"},
])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_write_csv(tmp_path):
    write_csv(tmp_path / "t.csv", ("a", "b"), [(1, 0.1), ("x", None)])
    assert (tmp_path / "t.csv").read_text() == "a,b\n1,0.1\nx,\n"
