"""End-to-end runner: features per sample, scoring, per-class metrics, ablations."""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import detect as det
from .core import PointCloud
from .errors import ConfigError, EmptyBank, SparseVoteError
from .feat2d import Extractor2DConfig, extract_2d, pyramid_weights
from .fpfh import FpfhConfig, fpfh_features
from .graph_net import build_graph, normalize_adjacency
from .io import Sample
from .metrics import RegionMask, auroc, grid_regions, metric_report, p_pro, point_regions
from .multiview import fuse_views, make_views, render_depth, sample_point_features
from .preprocess import PreprocessConfig, remove_background

log = logging.getLogger(__name__)

FEATURE_MODES = ("f3d", "f2d", "fused")
VIEW_SWEEP = (1, 3, 6, 9, 12, 15, 18, 21, 24, 27)
BLOCK_WEIGHTINGS = ("none", "norm", "nominal-nn")
_LOO_ROWS = 500


@dataclass(frozen=True)
class GraphConfig:
    k: int = 8
    layers: int = 2
    hidden: int = 64
    self_loops: bool = False
    train_iters: int = 200
    step: float = 0.05


@dataclass(frozen=True)
class PipelineConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    fpfh: FpfhConfig = field(default_factory=FpfhConfig)
    n_views: int = 3
    image_size: tuple = (224, 224)
    extractor: Extractor2DConfig = field(default_factory=Extractor2DConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    scorer: str = "bank"
    tau: float = 0.5
    feature_mode: str = "fused"
    seed: int = 0
    bank_subsample: float = 1.0
    block_weighting: str = "nominal-nn"  # how the 3D and 2D blocks are scaled before concatenation

    def __post_init__(self):
        if self.n_views < 1:
            raise ConfigError("n_views must be >= 1")
        if self.scorer not in ("bank", "mlp"):
            raise ConfigError(f"unknown scorer {self.scorer!r}")
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(f"unknown feature mode {self.feature_mode!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if self.block_weighting not in BLOCK_WEIGHTINGS:
            raise ConfigError(f"unknown block weighting {self.block_weighting!r}")
        if not 0.0 < self.bank_subsample <= 1.0:
            raise ConfigError("bank_subsample must lie in (0, 1]")
        if len(tuple(self.image_size)) != 2:
            raise ConfigError("image_size needs two entries")
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))

    def with_seed(self, seed: int) -> "PipelineConfig":
        return replace(self, seed=seed, preprocess=replace(self.preprocess, seed=seed),
                       extractor=replace(self.extractor, seed=seed))


def _coerce(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = raw.replace(",", " ").replace("x", " ").split()
        if len(parts) != len(default):
            raise ValueError(raw)
        return tuple(type(d)(p) for d, p in zip(default, parts))
    if default is None:
        return raw if raw.lower() not in ("", "none") else None
    return raw


def config_from_dict(values: dict) -> PipelineConfig:
    """Build a config from ``key = value`` pairs; nested fields use dotted keys (``fpfh.leaf_size``)."""
    base = PipelineConfig()
    top, nested = {}, {}
    for key, raw in values.items():
        head, _, rest = key.partition(".")
        target = getattr(base, head, dataclasses.MISSING)
        if target is dataclasses.MISSING:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            if rest:
                if not dataclasses.is_dataclass(target) or not hasattr(target, rest):
                    raise ConfigError(f"unknown config key {key!r}")
                val = _coerce(raw, getattr(target, rest))
                nested.setdefault(head, {})[rest] = val
            else:
                if dataclasses.is_dataclass(target):
                    raise ConfigError(f"config key {key!r} needs a field name")
                val = _coerce(raw, target)
                top[head] = val
        except ValueError:
            raise ConfigError(f"bad value {raw!r} for config key {key!r}") from None
    try:
        for head, fields in nested.items():
            top[head] = replace(getattr(base, head), **fields)
        return replace(base, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _text(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_text(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def config_to_dict(cfg: PipelineConfig) -> dict[str, str]:
    """Flat ``key -> value text`` form accepted by :func:`config_from_dict`."""
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            for g in dataclasses.fields(v):
                out[f"{f.name}.{g.name}"] = _text(getattr(v, g.name))
        else:
            out[f.name] = _text(v)
    return out


@contextlib.contextmanager
def stage(name: str, sample_id: str):
    """Prefix any package error with the stage and sample that raised it."""
    try:
        yield
    except SparseVoteError as exc:
        msg = f"{name} failed on {sample_id}: {exc}"
        exc.args = (msg,)
        raise


@dataclass
class SampleFeatures:
    sample_id: str
    n_points: int  # points in the original cloud
    kept: np.ndarray  # cloud indices that survived preprocessing
    f3d: np.ndarray
    f2d: dict = field(default_factory=dict)  # n_views -> fused 2D features


class FeatureCache:
    """Per-sample features, with 2D features memoized per view count."""

    def __init__(self, cfg: PipelineConfig, threads: int = 1):
        self.cfg = cfg
        self.threads = max(1, int(threads))
        self._store: dict[str, SampleFeatures] = {}
        ext = cfg.extractor
        self._weights = pyramid_weights(ext.channels, ext.levels, ext.seed) if ext.kind == "builtin-pyramid" else None

    def _base(self, sample: Sample) -> SampleFeatures:
        cfg = self.cfg
        cloud = sample.cloud
        if cloud.organized:
            with stage("preprocess", sample.sample_id):
                kept = remove_background(cloud, cfg.preprocess).kept
        else:
            kept = cloud.valid_indices
        obj = PointCloud(cloud.points[kept])
        with stage("fpfh", sample.sample_id):
            f3d = fpfh_features(obj, cfg.fpfh)
        return SampleFeatures(sample.sample_id, len(cloud), kept, f3d)

    def _views(self, sample: Sample, feats: SampleFeatures, n_views: int) -> np.ndarray:
        obj = PointCloud(sample.cloud.points[feats.kept])
        with stage("multiview", sample.sample_id):
            per_view = []
            for vi, pose in enumerate(make_views(obj, n_views, image_size=self.cfg.image_size)):
                img = render_depth(obj, pose)
                fmap = extract_2d(img, self.cfg.extractor, sample.sample_id, vi, self._weights)
                per_view.append(sample_point_features(obj, pose, fmap, img))
            return fuse_views(per_view)

    def _one(self, sample: Sample, n_views: int, need_2d: bool) -> SampleFeatures:
        feats = self._store.get(sample.sample_id)
        if feats is None:
            feats = self._base(sample)
        if need_2d and n_views not in feats.f2d:
            feats.f2d[n_views] = self._views(sample, feats, n_views)
        return feats

    def get(self, samples: Sequence[Sample], n_views: int, need_2d: bool = True) -> list[SampleFeatures]:
        if self.threads > 1 and len(samples) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                out = list(pool.map(lambda s: self._one(s, n_views, need_2d), samples))
        else:
            out = [self._one(s, n_views, need_2d) for s in samples]
        for s, f in zip(samples, out):
            self._store[s.sample_id] = f
        return out


def _mean_norm(blocks: Sequence[np.ndarray]) -> float:
    rows = [b for b in blocks if len(b)]
    m = float(np.linalg.norm(np.vstack(rows), axis=1).mean()) if rows else 0.0
    return m if m > 0 else 1.0


def _nominal_spread(blocks: Sequence[np.ndarray], seed: int) -> float:
    """Median nearest-neighbour distance of training rows to the other training samples."""
    blocks = [b for b in blocks if len(b)]
    if len(blocks) < 2:
        return _mean_norm(blocks)
    rng = np.random.default_rng(seed)
    dists = []
    for i, b in enumerate(blocks):
        bank = det.bank_build([o for j, o in enumerate(blocks) if j != i])
        rows = b if len(b) <= _LOO_ROWS else b[np.sort(rng.choice(len(b), _LOO_ROWS, replace=False))]
        dists.append(det.bank_score(rows, bank))
    m = float(np.median(np.concatenate(dists)))
    return m if m > 0 else _mean_norm(blocks)


def assemble(feats: Sequence[SampleFeatures], mode: str, n_views: int, scales=(1.0, 1.0)) -> list[np.ndarray]:
    out = []
    for f in feats:
        if mode == "f3d":
            out.append(f.f3d * scales[0])
        elif mode == "f2d":
            out.append(f.f2d[n_views] * scales[1])
        else:
            out.append(det.concat_features(f.f3d * scales[0], f.f2d[n_views] * scales[1]))
    return out


def block_scales(train: Sequence[SampleFeatures], n_views: int, mode: str, weighting: str,
                 seed: int = 0) -> tuple[float, float]:
    """Per-block multipliers computed from nominal training features only.

    ``norm`` equalizes the mean row norm of the blocks; ``nominal-nn`` divides
    each block by its typical nominal nearest-neighbour distance, so both
    blocks contribute the same score spread on anomaly-free data.
    """
    if weighting == "none" or mode != "fused":
        return 1.0, 1.0
    spread = _mean_norm if weighting == "norm" else (lambda b: _nominal_spread(b, seed))
    return 1.0 / spread([f.f3d for f in train]), 1.0 / spread([f.f2d[n_views] for f in train])


def _full_scores(feats: SampleFeatures, kept_scores: np.ndarray) -> np.ndarray:
    raw = np.zeros(feats.n_points)
    raw[feats.kept] = kept_scores
    return raw


@dataclass
class ClassResult:
    name: str
    i_roc: Optional[float]
    p_pro: Optional[float]
    results: list  # AnomalyResult per test sample


def _pro_regions(samples: Sequence[Sample], k: int) -> tuple[np.ndarray, RegionMask, list]:
    """Concatenated valid-point masks of the samples that carry one, with offset regions."""
    masks, regions, picks = [], [], []
    offset = 0
    for s in samples:
        if s.mask is None:
            continue
        valid = s.cloud.valid_indices
        remap = np.full(len(s.cloud), -1, dtype=np.int64)
        remap[valid] = np.arange(valid.size)
        if s.cloud.organized:
            rm = grid_regions(np.asarray(s.mask).reshape(s.cloud.grid_shape))
        else:
            rm = point_regions(s.cloud.points[valid], s.mask[valid], k)
            rm = RegionMask(rm.mask, rm.connectivity, tuple(valid[r] for r in rm.regions))
        for r in rm.regions:
            r = remap[r]
            r = r[r >= 0]
            if r.size:
                regions.append(r + offset)
        masks.append(np.asarray(s.mask, bool)[valid])
        picks.append((s, valid))
        offset += valid.size
    mask = np.concatenate(masks) if masks else np.zeros(0, bool)
    return mask, RegionMask(mask, "mixed", tuple(regions)), picks


def evaluate_class(name: str, cfg: PipelineConfig, samples: Sequence[Sample], cache: FeatureCache,
                   n_views: Optional[int] = None, mode: Optional[str] = None) -> ClassResult:
    n_views = cfg.n_views if n_views is None else n_views
    mode = cfg.feature_mode if mode is None else mode
    train = [s for s in samples if s.split == "train"]
    test = [s for s in samples if s.split == "test"]
    if not train:
        raise EmptyBank(f"class {name}: no nominal training samples")
    need_2d = mode != "f3d"
    tr = cache.get(train, n_views, need_2d)
    te = cache.get(test, n_views, need_2d)
    scales = block_scales(tr, n_views, mode, cfg.block_weighting, cfg.seed)
    train_rows = assemble(tr, mode, n_views, scales)
    test_rows = assemble(te, mode, n_views, scales)
    if cfg.scorer == "bank":
        with stage("detect", f"class {name}"):
            bank = det.bank_build(train_rows, cfg.bank_subsample, cfg.seed, [s.sample_id for s in train])
        kept_scores = [det.bank_score(r, bank) if len(r) else np.zeros(0) for r in test_rows]
    else:
        from .training import train_graph_scorer, graph_scores
        with stage("train", f"class {name}"):
            graphs = [normalize_adjacency(build_graph(PointCloud(s.cloud.points[f.kept]), cfg.graph.k,
                                                      cfg.graph.self_loops)) for s, f in zip(train, tr)]
            net = train_graph_scorer(train_rows, graphs, cfg.graph, cfg.seed)
        kept_scores = []
        for s, f, r in zip(test, te, test_rows):
            with stage("detect", s.sample_id):
                a_hat = normalize_adjacency(build_graph(PointCloud(s.cloud.points[f.kept]), cfg.graph.k,
                                                        cfg.graph.self_loops))
                kept_scores.append(graph_scores(r, a_hat, net))
    results = []
    for s, f, ks in zip(test, te, kept_scores):
        with stage("detect", s.sample_id):
            results.append(det.detect(_full_scores(f, ks), cfg.tau, s.sample_id))
    labels = np.array([s.label for s in test], bool)
    i_roc = None
    if labels.any() and (~labels).any():
        i_roc = auroc([r.image_score for r in results], labels)
    p = None
    by_id = {r.sample_id: r for r in results}
    mask, regions, picks = _pro_regions(test, cfg.graph.k)
    if regions.regions and (~mask).any():
        scores = np.concatenate([by_id[s.sample_id].raw_scores[valid] for s, valid in picks])
        p = p_pro(scores, regions)
    return ClassResult(name, i_roc, p, results)


def run_pipeline(cfg: PipelineConfig, dataset: dict, out_dir=None, threads: int = 1,
                 cache: Optional[dict] = None) -> dict:
    """Metric report over ``{class name: samples}``; optionally writes per-sample JSON results."""
    caches = cache if cache is not None else {}
    per_class = {}
    for name in sorted(dataset):
        fc = caches.setdefault(name, FeatureCache(cfg, threads))
        res = evaluate_class(name, cfg, dataset[name], fc)
        per_class[name] = {"i_roc": res.i_roc, "p_pro": res.p_pro}
        if out_dir is not None:
            folder = Path(out_dir) / "results" / name
            folder.mkdir(parents=True, exist_ok=True)
            for r in res.results:
                (folder / (r.sample_id.replace("/", "__") + ".json")).write_text(json.dumps(r.to_json()) + "\n")
    report = metric_report(per_class)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def run_ablation(cfg: PipelineConfig, dataset: dict, axis: str, threads: int = 1,
                 values: Optional[Sequence] = None) -> list[tuple]:
    """Rows of (axis_value, mean i_roc, mean p_pro), sharing features across axis values."""
    if axis == "n_views":
        values = list(VIEW_SWEEP if values is None else values)
        configs = [replace(cfg, n_views=int(v)) for v in values]
    elif axis == "feature_mode":
        values = list(FEATURE_MODES if values is None else values)
        configs = [replace(cfg, feature_mode=v) for v in values]
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    caches = {name: FeatureCache(cfg, threads) for name in dataset}
    rows = []
    for v, c in zip(values, configs):
        rep = run_pipeline(c, dataset, None, threads, caches)
        rows.append((v, rep["mean_i_roc"], rep["mean_p_pro"]))
    return rows


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]):
    def fmt(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return repr(v)
        return str(v)

    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])
