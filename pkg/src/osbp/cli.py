"""Command-line entry point.

Exit codes: 0 success, 1 check failure, 2 config error, 3 data or IO error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import nn
from .baselines import rejecting_predictor, train_bp, train_mmd, train_source_only
from .config import SWEEP_PARAMS, RunConfig, load_config
from .data import (
    load_csv_features,
    load_idx,
    make_scenario,
    read_manifest,
    subsample_unknown,
    synth_openset,
    write_csv_features,
    write_manifest,
)
from .errors import ConfigError, FormatError, UsageError, ValidationError
from .evaluation import dump_features, evaluate, sweep, write_report
from .model import (
    build_model,
    classify,
    compare_architecture,
    config_dict,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


class DataError(Exception):
    """Wraps data/IO problems so they map to exit code 3."""


def _data_errors(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (OSError, FormatError, ValidationError) as exc:
        raise DataError(str(exc)) from exc


def load_scenario(cfg: RunConfig):
    kind = cfg["data.kind"]
    ratio = cfg["data.unknown_ratio"]
    seed = cfg["data.seed"]
    if kind == "synth":
        scenario = synth_openset(cfg.synth_config(), seed)
        if ratio is not None:
            scenario = _data_errors(subsample_unknown, scenario, ratio, seed)
        return scenario
    if kind == "manifest":
        path = cfg["data.manifest"]
        if not path:
            raise ConfigError("data.manifest is required for kind = manifest")
        doc = _data_errors(read_manifest, path)
        base = os.path.dirname(path)
        source = _data_errors(load_csv_features, os.path.join(base, doc["source"]))
        target = _data_errors(load_csv_features, os.path.join(base, doc["target"]))
        known = doc["known"]
        if ratio is None:
            ratio = doc.get("unknown_ratio")
    else:
        known = cfg["data.known"]
        if not known:
            raise ConfigError(f"data.known is required for kind = {kind}")
        if kind == "csv":
            for key in ("data.source", "data.target"):
                if not cfg[key]:
                    raise ConfigError(f"{key} is required for kind = csv")
            source = _data_errors(load_csv_features, cfg["data.source"])
            target = _data_errors(load_csv_features, cfg["data.target"])
        else:
            for key in ("data.source_images", "data.source_labels",
                        "data.target_images", "data.target_labels"):
                if not cfg[key]:
                    raise ConfigError(f"{key} is required for kind = idx")
            source = _data_errors(load_idx, cfg["data.source_images"], cfg["data.source_labels"])
            target = _data_errors(load_idx, cfg["data.target_images"], cfg["data.target_labels"])
    if source.width != target.width:
        raise DataError(f"source width {source.width} differs from target width {target.width}")
    return _data_errors(make_scenario, source, target, known, seed, ratio)


def fit(cfg: RunConfig, scenario, log=None):
    """Build and train the configured method; returns the trained model."""
    method = cfg["train.method"]
    tc = cfg.train_config()
    model = build_model(scenario.source.width, scenario.K, tc, open_set=(method == "osbp"))
    sink = None
    if log is not None:
        def sink(epoch, stats):
            log(f"epoch {epoch + 1}/{tc.epochs} {stats}")
    if method == "osbp":
        train(model, scenario, tc, sink)
    elif method == "source_only":
        train_source_only(model, scenario.source, tc, n_target=len(scenario.target), sink=sink)
    elif method == "mmd":
        train_mmd(model, scenario, tc, cfg.mmd_config(), sink)
    else:
        train_bp(model, scenario, tc, cfg.domain_head(), sink)
    return model.eval()


def score(cfg: RunConfig, model, scenario):
    if model.open_set:
        return evaluate(lambda x: predict(model, x), scenario.target, scenario.K,
                        lambda x: classify(model, x)[:, model.K], cfg["output.bins"])
    return evaluate(rejecting_predictor(model, cfg.rejector()), scenario.target, scenario.K,
                    bins=cfg["output.bins"])


def _say(msg):
    print(msg, flush=True)


def _quiet(msg):
    pass


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    cfg = load_config(args.config, args.set)
    synth = cfg.synth_config()
    seed = cfg["data.seed"]
    scenario = synth_openset(synth, seed)
    if cfg["data.unknown_ratio"] is not None:
        scenario = _data_errors(subsample_unknown, scenario, cfg["data.unknown_ratio"], seed)
    try:
        os.makedirs(args.out_dir, exist_ok=True)
        write_csv_features(os.path.join(args.out_dir, "source.csv"), scenario.source)
        write_csv_features(os.path.join(args.out_dir, "target.csv"), scenario.target)
        write_manifest(
            os.path.join(args.out_dir, "manifest.json"),
            source="source.csv",
            target="target.csv",
            known=list(range(scenario.K)),
            K=scenario.K,
            sizes={"source": len(scenario.source), "target": len(scenario.target)},
            seed=seed,
            unknown_ratio=cfg["data.unknown_ratio"],
        )
    except OSError as exc:
        raise DataError(f"cannot write scenario files to {args.out_dir}: {exc}") from exc
    _say(f"wrote K={scenario.K} source={len(scenario.source)} target={len(scenario.target)} "
         f"to {args.out_dir}")
    return EXIT_OK


def _write_outputs(cfg, report, model=None, scenario=None, meta=None):
    fmt = cfg.report_format()
    _data_errors(write_report, report, cfg["output.report"], fmt)
    if model is not None and cfg["output.checkpoint"]:
        _data_errors(save_checkpoint, cfg["output.checkpoint"], model, meta)


def cmd_train(args):
    cfg = load_config(args.config, args.set)
    log = _quiet if args.quiet else _say
    scenario = load_scenario(cfg)
    if args.reruns > 1:
        return _reruns(cfg, scenario, args.reruns)
    model = fit(cfg, scenario, log if args.verbose else None)
    report = score(cfg, model, scenario)
    meta = {"method": cfg["train.method"], "train": config_dict(cfg.train_config())}
    _write_outputs(cfg, report, model, scenario, meta)
    if cfg["output.dump_features"]:
        _data_errors(dump_features, model, scenario.target, cfg["output.features"])
    log(report.summary())
    return EXIT_OK


def _reruns(cfg: RunConfig, scenario, n: int):
    base = cfg["train.seed"]
    rows = []
    for i in range(n):
        run = cfg.copy()
        run.set("train.seed", value=base + i)
        rep = score(run, fit(run, scenario), scenario)
        rows.append({"seed": base + i, **{k: getattr(rep, k) for k in ("OS", "OS_star", "ALL", "UNK")}})
    agg = {}
    for key in ("OS", "OS_star", "ALL", "UNK"):
        vals = [r[key] for r in rows if r[key] is not None]
        agg[key] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))} if vals else None
    doc = {"schema": "osbp-reruns", "version": 1, "runs": rows, "aggregate": agg}
    try:
        with open(cfg["output.report"], "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as exc:
        raise DataError(f"cannot write {cfg['output.report']}: {exc}") from exc
    _say(" ".join(f"{k}={v['mean']:.4f}+-{v['std']:.4f}" for k, v in agg.items() if v))
    return EXIT_OK


def _parse_values(param, text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"values for {param} must be comma-separated numbers") from None


def cmd_sweep(args):
    if args.param not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep {args.param!r}; choose from {', '.join(SWEEP_PARAMS)}")
    cfg = load_config(args.config, args.set)
    values = _parse_values(args.param, args.values)
    if not values:
        raise ConfigError("empty value grid")
    section, key = SWEEP_PARAMS[args.param]
    base_seed = cfg["train.seed"]

    def runner(value, seed):
        run = cfg.copy()
        run.set(f"{section}.{key}", value=value)
        run.set("train.seed", value=seed)
        run.train_config()
        scenario = load_scenario(run)
        return score(run, fit(run, scenario), scenario)

    rows = sweep(args.param, values, runner, base_seed, workers=args.workers)
    out = args.out or cfg["output.report"]
    fmt = "json" if out.lower().endswith(".json") else "csv"
    _data_errors(write_report, rows, out, fmt, param=args.param)
    for row in rows:
        if row.report:
            _say(f"{args.param}={row.value:g} {row.report.summary()}")
        else:
            _say(f"{args.param}={row.value:g} FAILED {row.error}")
    return EXIT_OK


def gradcheck_cases(seed: int = 0):
    """Small randomized stacks covering every layer kind and both losses."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 4))
    y = rng.integers(0, 3, size=6)

    def affine(a, b):
        return nn.Affine(a, b, rng)

    cases = [
        ("affine/cross_entropy", nn.LayerStack([affine(4, 3)]), "cross_entropy"),
        ("affine+leaky_relu/cross_entropy",
         nn.LayerStack([affine(4, 5), nn.LeakyReLU(0.1), affine(5, 3)]), "cross_entropy"),
        ("affine+batch_norm/cross_entropy",
         nn.LayerStack([affine(4, 5), nn.BatchNorm(5), nn.LeakyReLU(0.1), affine(5, 3)]),
         "cross_entropy"),
        ("grad_reversal/cross_entropy",
         nn.LayerStack([affine(4, 5), nn.GradReversal(1.0), nn.LeakyReLU(0.1), affine(5, 3)]),
         "cross_entropy"),
        ("affine+batch_norm/adv_bce",
         nn.LayerStack([affine(4, 5), nn.BatchNorm(5), nn.LeakyReLU(0.1), affine(5, 3)]), "adv_bce"),
        ("grad_reversal/adv_bce",
         nn.LayerStack([affine(4, 5), nn.BatchNorm(5), nn.LeakyReLU(0.1),
                        nn.GradReversal(0.7), affine(5, 3)]), "adv_bce"),
    ]
    return [(name, stack, loss, x, y) for name, stack, loss in cases]


def cmd_gradcheck(args):
    tol = args.tol
    failed = False
    cases = gradcheck_cases(args.seed)
    for name, stack, loss, x, y in cases:
        if args.corrupt_backward:
            _corrupt(stack)
        err = nn.grad_check(stack, loss, x, y, include_input=True)
        ok = err < tol
        failed |= not ok
        _say(f"{'ok  ' if ok else 'FAIL'} {name:36s} max_rel_err={err:.3e}")
    return EXIT_CHECK if failed else EXIT_OK


def _corrupt(stack):
    """Test hook: scale every affine layer's input gradient by 1.5."""
    for layer in stack.layers:
        if isinstance(layer, nn.Affine):
            original = layer.backward
            layer.backward = lambda cache, grad, f=original: 1.5 * f(cache, grad)


def cmd_eval(args):
    cfg = load_config(args.config, args.set)
    if args.dump_features:
        cfg.set("output.dump_features", value=True)
        cfg.set("output.features", value=args.dump_features)
    if args.report:
        cfg.set("output.report", value=args.report)
    path = args.checkpoint or cfg["output.checkpoint"]
    if not path:
        raise ConfigError("no checkpoint given (--checkpoint or output.checkpoint)")
    model, meta = _data_errors(load_checkpoint, path)
    scenario = load_scenario(cfg)
    expected = build_model(scenario.source.width, scenario.K, cfg.train_config(),
                           open_set=model.open_set)
    mismatch = compare_architecture(expected, model)
    if mismatch:
        raise DataError(f"checkpoint does not match the configured architecture: {mismatch}")
    report = score(cfg, model, scenario)
    _write_outputs(cfg, report)
    if cfg["output.dump_features"]:
        _data_errors(dump_features, model, scenario.target, cfg["output.features"])
    _say(report.summary())
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="osbp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        if config_required:
            p.add_argument("config", help="INI run configuration")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config key (repeatable)")

    p = sub.add_parser("synth", help="write a synthetic open-set scenario")
    common(p)
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train, evaluate on the target, write report and checkpoint")
    common(p)
    p.add_argument("--reruns", type=int, default=1, help="repeat with seeds seed..seed+N-1 and aggregate")
    p.add_argument("-v", "--verbose", action="store_true", help="print per-epoch statistics")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train+evaluate over a grid of one parameter")
    common(p)
    p.add_argument("--param", required=True, help=f"one of {', '.join(SWEEP_PARAMS)}")
    p.add_argument("--values", required=True, help="comma-separated grid")
    p.add_argument("--out", help="sweep table path (.csv or .json); default output.report")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer kind and loss")
    p.add_argument("config", nargs="?", help="ignored; accepted for symmetry")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured target data")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--report", help="report path; default output.report")
    p.add_argument("--dump-features", metavar="PATH", help="write generator features as CSV")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
