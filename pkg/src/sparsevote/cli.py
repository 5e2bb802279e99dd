"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric or
training error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import errors as E
from .bench import HEADER as BENCH_HEADER, bench_sparse
from .core import PointCloud
from .feat2d import extract_2d, pyramid_weights, write_vgf
from .fpfh import fpfh_features
from .io import FORMATS, dataset_classes, load_dataset, parse_config, read_cloud, write_cloud, write_mask_pgm, write_ply
from .multiview import fuse_views, make_views, render_depth, sample_point_features, write_pgm16
from .pipeline import (
    FEATURE_MODES,
    PipelineConfig,
    config_from_dict,
    run_ablation,
    run_pipeline,
    write_csv,
)
from .preprocess import remove_background
from .sparse_conv import save_kernels, save_params
from .synthetic import SyntheticSpec, synthetic_suite
from .training import ProxyConfig, train_proxy

log = logging.getLogger("sparsevote")

DATA_ERRORS = (E.LoadError, E.EmptyBank, E.InsufficientPoints, E.EmptyResult, E.RequiresOrganizedCloud,
               E.ShapeError, E.DegenerateInput)
NUMERIC_ERRORS = (E.TrainingDiverged, E.UndefinedMetric)


def _split_config(values: dict) -> dict[str, dict]:
    groups = {"pipeline": {}, "synth": {}, "proxy": {}, "bench": {}}
    for key, val in values.items():
        head, _, rest = key.partition(".")
        if head in ("synth", "proxy", "bench") and rest:
            groups[head][rest] = val
        else:
            groups["pipeline"][key] = val
    return groups


def _typed(cls, raw: dict, what: str):
    """Instantiate a flat dataclass from string values, coercing by the field defaults."""
    base = cls()
    kw = {}
    for key, val in raw.items():
        if not any(f.name == key for f in dataclasses.fields(cls)):
            raise E.ConfigError(f"unknown {what} config key {key!r}")
        default = getattr(base, key)
        try:
            if isinstance(default, bool):
                kw[key] = val.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                kw[key] = int(val)
            elif isinstance(default, float) or default is None:
                kw[key] = float(val)
            elif isinstance(default, tuple):
                kw[key] = tuple(int(v) for v in val.replace(",", " ").split())
            else:
                kw[key] = val
        except ValueError:
            raise E.ConfigError(f"bad value {val!r} for {what} key {key!r}") from None
    try:
        return cls(**kw)
    except E.InvalidArgument as exc:
        raise E.ConfigError(str(exc)) from exc


def _load_config(args) -> dict[str, dict]:
    return _split_config(parse_config(args.config)) if args.config else _split_config({})


def _pipeline_config(groups, args) -> PipelineConfig:
    try:
        cfg = config_from_dict(groups["pipeline"])
    except E.InvalidArgument as exc:
        raise E.ConfigError(str(exc)) from exc
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(path: Path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _cloud_format(path: Path) -> str:
    for fmt, ext in FORMATS.items():
        if path.suffix == ext:
            return fmt
    raise E.ConfigError(f"cannot tell the format of {path} (expected .xyz or .ply)")


def _dataset(args, cfg_groups) -> dict:
    fmt = args.format or cfg_groups["pipeline"].pop("format", "xyz-grid")
    classes = dataset_classes(args.dataset)
    if not classes:
        raise E.LoadError(f"no dataset classes under {args.dataset}")
    return {name: load_dataset(path, fmt) for name, path in classes.items()}


def cmd_synth(args) -> int:
    groups = _load_config(args)
    spec = _typed(SyntheticSpec, groups["synth"], "synth")
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    fmt = args.format or "xyz-grid"
    root = _out(args)
    samples = synthetic_suite(spec, args.n_train, args.n_good, args.n_defect)
    for s in samples:
        path = root / f"{s.sample_id}{FORMATS[fmt]}"
        path.parent.mkdir(parents=True, exist_ok=True)
        write_cloud(path, s.cloud, fmt)
        if s.label:
            gt = root / "ground_truth" / s.defect / f"{path.stem}.pgm"
            gt.parent.mkdir(parents=True, exist_ok=True)
            write_mask_pgm(gt, s.mask.reshape(s.cloud.grid_shape))
    log.info("wrote %d samples to %s", len(samples), root)
    return 0


def cmd_preprocess(args) -> int:
    cfg = _pipeline_config(_load_config(args), args)
    path = Path(args.input)
    cloud = read_cloud(path, _cloud_format(path))
    out = _out(args)
    cleaned = remove_background(cloud, cfg.preprocess)
    write_ply(out / f"{path.stem}.clean.ply", cleaned.cloud)
    _dump(out / f"{path.stem}.preprocess.json", {
        "input_points": len(cloud),
        "valid_points": int(cloud.valid_mask.sum()),
        "kept": len(cleaned.kept),
        "background": len(cleaned.background),
        "noise": len(cleaned.noise),
        "plane": {"normal": [float(v) for v in cleaned.plane.normal], "offset": float(cleaned.plane.offset)},
    })
    return 0


def cmd_features(args) -> int:
    cfg = _pipeline_config(_load_config(args), args)
    path = Path(args.input)
    cloud = read_cloud(path, _cloud_format(path))
    out = _out(args)
    obj = remove_background(cloud, cfg.preprocess).cloud if cloud.organized else PointCloud(cloud.valid_points)
    f3d = fpfh_features(obj, cfg.fpfh)
    ext = cfg.extractor
    weights = pyramid_weights(ext.channels, ext.levels, ext.seed) if ext.kind == "builtin-pyramid" else None
    fields, per_view = [], []
    for vi, pose in enumerate(make_views(obj, cfg.n_views, image_size=cfg.image_size)):
        img = render_depth(obj, pose)
        write_pgm16(out / f"{path.stem}.view{vi:02d}.pgm", img)
        fmap = extract_2d(img, ext, path.stem, vi, weights)
        fields.append(fmap)
        per_view.append(sample_point_features(obj, pose, fmap, img))
    write_vgf(out / f"{path.stem}.vgf", np.stack(fields))
    f2d = fuse_views(per_view)
    header = ["x", "y", "z"] + [f"f3d_{i}" for i in range(f3d.shape[1])] + [f"f2d_{i}" for i in range(f2d.shape[1])]
    write_csv(out / f"{path.stem}.features.csv", header,
              [[float(v) for v in row] for row in np.hstack([obj.valid_points, f3d, f2d])])
    return 0


def cmd_detect(args, with_report: bool) -> int:
    groups = _load_config(args)
    data = _dataset(args, groups)
    cfg = _pipeline_config(groups, args)
    out = _out(args)
    report = run_pipeline(cfg, data, out, threads=args.threads)
    if not with_report:
        (out / "report.json").unlink()
    else:
        log.info("mean I-ROC %s, mean P-PRO %s", report["mean_i_roc"], report["mean_p_pro"])
    return 0


def cmd_ablate(args) -> int:
    groups = _load_config(args)
    data = _dataset(args, groups)
    cfg = _pipeline_config(groups, args)
    values = None
    if args.values:
        values = [int(v) for v in args.values.split(",")] if args.axis == "n_views" else args.values.split(",")
        if args.axis == "feature_mode" and any(v not in FEATURE_MODES for v in values):
            raise E.ConfigError(f"feature modes must be among {FEATURE_MODES}")
    rows = run_ablation(cfg, data, args.axis, threads=args.threads, values=values)
    write_csv(_out(args) / f"ablation_{args.axis}.csv", ("axis_value", "i_roc", "p_pro"), rows)
    return 0


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise E.ConfigError(f"bad number list {text!r}") from None


def cmd_bench(args) -> int:
    groups = _load_config(args)
    raw = groups["bench"]
    sizes = [int(v) for v in _floats(args.sizes or raw.get("sizes", "16,32,64"))]
    occ = _floats(args.occupancies or raw.get("occupancies", "0.01,0.05,0.1"))
    kernel = int(args.kernel or raw.get("kernel", 3))
    chans = tuple(int(v) for v in _floats(args.channels or raw.get("channels", "8,8")))
    repeats = int(args.repeats or raw.get("repeats", 5))
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    if len(chans) != 2:
        raise E.ConfigError("channels needs c_in,c_out")
    try:
        rows = bench_sparse(sizes, occ, (kernel,) * 3, chans, repeats, seed, timing=not args.no_timing)
    except E.InvalidArgument as exc:
        raise E.ConfigError(str(exc)) from exc
    write_csv(_out(args) / "bench.csv", BENCH_HEADER, [r.as_tuple() for r in rows])
    return 0


def cmd_train_proxy(args) -> int:
    groups = _load_config(args)
    cfg = _typed(ProxyConfig, groups["proxy"], "proxy")
    over = {k: v for k, v in (("task", args.task), ("lam", args.lam), ("iters", args.iters)) if v is not None}
    if args.seed is not None:
        over["seed"] = args.seed
    try:
        cfg = dataclasses.replace(cfg, **over)
    except E.ConfigError:
        raise
    res = train_proxy(cfg)
    out = _out(args)
    if cfg.task == "sparse":
        save_kernels(out / "params.vgk", res.params)
    else:
        net = res.params
        save_params(out / "params.vgk", [(l.weight, l.bias) for l in net.layers] + list(net.mlp.layers))
    n_layers = len(res.sparsity[0]) if res.sparsity else 0
    write_csv(out / "loss.csv", ["iteration", "loss"] + [f"zero_frac_{i}" for i in range(n_layers)],
              [[i, l] + list(s) for i, (l, s) in enumerate(zip(res.loss, res.sparsity))])
    _dump(out / "train.json", {"task": cfg.task, "lam": cfg.lam, "iters": cfg.iters, "seed": cfg.seed,
                               "final_loss": res.loss[-1], "final_sparsity": res.final_sparsity,
                               "intermediate_sparsity": res.intermediate_sparsity})
    return 0


GLOBAL_DEFAULTS = {"config": None, "seed": None, "out": "out", "threads": 1, "verbose": False}


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return v


def _threads(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        v = 0
    if v < 1:
        raise argparse.ArgumentTypeError(f"threads must be a positive integer, got {text!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps one
    # position from overwriting the other with its default
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=_seed, help="seed for every random choice")
    common.add_argument("--out", help="output directory (default: out)")
    common.add_argument("--threads", type=_threads, help="samples processed in parallel (default: 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sparsevote", parents=[common],
                                description="Sparse voting convolution and point cloud anomaly detection")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    s.add_argument("--n-train", type=int, default=10)
    s.add_argument("--n-good", type=int, default=20)
    s.add_argument("--n-defect", type=int, default=20)
    s.add_argument("--format", choices=sorted(FORMATS))

    for name, hlp in (("preprocess", "remove background from one scan"),
                      ("features", "FPFH, depth views and 2D features of one scan")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("input")

    for name, hlp in (("detect", "per-sample anomaly results"), ("evaluate", "results plus metric report")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("dataset")
        s.add_argument("--format", choices=sorted(FORMATS))

    s = sub.add_parser("ablate", parents=[common], help="metric versus view count or feature mode")
    s.add_argument("dataset")
    s.add_argument("--axis", choices=("n_views", "feature_mode"), required=True)
    s.add_argument("--values", help="comma separated axis values (default: full sweep)")
    s.add_argument("--format", choices=sorted(FORMATS))

    s = sub.add_parser("bench", parents=[common], help="voting vs dense convolution timing")
    s.add_argument("--sizes")
    s.add_argument("--occupancies")
    s.add_argument("--kernel")
    s.add_argument("--channels")
    s.add_argument("--repeats")
    s.add_argument("--no-timing", action="store_true", help="record vote counts only")

    s = sub.add_parser("train-proxy", parents=[common], help="gradient descent on a proxy task")
    s.add_argument("--task", choices=("sparse", "graph"))
    s.add_argument("--lam", type=float)
    s.add_argument("--iters", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for key, val in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, val)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {
        "synth": cmd_synth,
        "preprocess": cmd_preprocess,
        "features": cmd_features,
        "detect": lambda a: cmd_detect(a, False),
        "evaluate": lambda a: cmd_detect(a, True),
        "ablate": cmd_ablate,
        "bench": cmd_bench,
        "train-proxy": cmd_train_proxy,
    }
    try:
        return handlers[args.command](args)
    except (E.ConfigError, E.InvalidArgument) as exc:
        log.error("%s", exc)
        return 2
    except DATA_ERRORS as exc:
        log.error("%s", exc)
        return 3
    except NUMERIC_ERRORS as exc:
        log.error("%s", exc)
        return 4
    except E.SparseVoteError as exc:
        log.error("%s", exc)
        return 4


if __name__ == "__main__":
    sys.exit(main())
