"""Command-line interface.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or
numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, thread_limit
from .gp import GpNumericalError
from .io import FORMATS, ParseError, iter_replay, load_trajectories, save_trajectories
from .model import ModelError, load_model, save_model, train
from .online import OnlineConfig, TrackSession, step
from .sim import SceneSpec, default_intersection, generate_intersection, inject_anomalies
from .trajectory import TrajectoryError

log = logging.getLogger("trajflow")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    """defaults < --config file < --set overrides < --seed."""
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, val = item.split("=", 1)
        cfg.set(key.strip(), val.strip())
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _load(args, path=None):
    return load_trajectories(path or args.input, format=args.format, fps=args.fps,
                             units=args.units)


def _scene(args) -> SceneSpec:
    seed = args.seed if args.seed is not None else 0
    if args.scene in (None, "default"):
        return default_intersection(seed=seed)
    spec = SceneSpec.from_file(args.scene)
    if args.seed is not None:
        spec = SceneSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    return spec


def _write_text(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        Path(path).write_text(text)


def ellipse(mean, cov, chi2: float, n: int = 64) -> list[list[float]]:
    """Polygon of the ``chi2`` contour of a 2-D Gaussian."""
    w, v = np.linalg.eigh(np.asarray(cov))
    ang = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    circle = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    pts = np.asarray(mean) + (circle * np.sqrt(chi2 * np.maximum(w, 0.0))) @ v.T
    return pts.round(4).tolist()


def geometry(model) -> dict:
    """Plot-ready geometry: member polylines, gate ellipses, transition probabilities."""
    return {
        "bounds": list(model.bounds),
        "units": model.units,
        "patterns": [
            {"id": p.id, "state": model.pattern_state(p.id), "n_members": len(p.members),
             "polylines": [t.points.round(4).tolist() for t in p.members]}
            for p in model.patterns
        ],
        "transition_points": [
            {"id": tp.id, "mean": tp.mean.tolist(), "cov": tp.cov.tolist(), "size": tp.size,
             "ellipse": ellipse(tp.mean, tp.cov, model.pp.chi2_gate)}
            for tp in model.tps
        ],
        "tpm": {"states": model.tpm.ids, "probs": model.tpm.probs.tolist()},
    }


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec = _scene(args)
    ds, truth = generate_intersection(spec)
    if args.anomalies:
        ds, truth = inject_anomalies(ds, args.anomalies, seed=spec.seed, spec=spec, truth=truth)
    save_trajectories(ds, args.output, args.out_format)
    if args.truth:
        Path(args.truth).write_text(json.dumps(truth.to_dict(), indent=1))
    log.info("wrote %d trajectories to %s", ds.n_t, args.output)
    return EXIT_OK


def cmd_inject(args) -> int:
    ds = _load(args)
    spec = SceneSpec.from_file(args.scene) if args.scene else None
    seed = args.seed if args.seed is not None else 0
    out, truth = inject_anomalies(ds, args.fraction, seed=seed, spec=spec)
    save_trajectories(out, args.output, args.out_format)
    if args.truth:
        Path(args.truth).write_text(json.dumps(
            {"anomalies": sorted(truth.anomalies), "n_added": out.n_t - ds.n_t}, indent=1))
    log.info("added %d anomalies (%d trajectories total)", out.n_t - ds.n_t, out.n_t)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    ds = _load(args)
    model = train(ds, cfg)
    save_model(model, args.output)
    print(model.summary())
    if model.provenance.get("converged") is False:
        log.warning("split iterations hit the guard; the model may be incomplete")
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = load_model(args.model)
    if args.geometry:
        _write_text(args.geometry, json.dumps(geometry(model)))
    if args.json:
        print(json.dumps({"summary": model.summary(), "provenance": model.provenance,
                          "tpm": model.tpm.to_dict()}, indent=1))
    else:
        print(model.summary())
        if args.tpm:
            ids = model.tpm.ids
            width = max(len(i) for i in ids) + 1
            print(" " * width + "".join(f"{i:>{width}}" for i in ids))
            for i, row in zip(ids, model.tpm.probs):
                print(f"{i:<{width}}" + "".join(f"{v:>{width}.2f}" for v in row))
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_model(args.model)
    base = model.online
    cfg = OnlineConfig(
        args.window if args.window is not None else base.window_size,
        args.l_thresh if args.l_thresh is not None else base.l_thresh,
        args.p_min if args.p_min is not None else base.p_min,
    )
    ds = _load(args)
    sessions: dict[str, TrackSession] = {}
    out = sys.stdout if args.output in (None, "-") else open(args.output, "w")
    try:
        for tid, point in iter_replay(ds):
            s = sessions.get(tid)
            if s is None:
                s = sessions[tid] = TrackSession(tid, cfg.window_size)
            rec = step(s, point, model, cfg)
            out.write(json.dumps(rec.to_json()) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluate import anomaly_set, robustness_sweep, run_kfold

    cfg = _run_config(args)
    thread_limit()  # validate early
    if args.input:
        ds = _load(args)
        anomalies, masks = [], {}
        if args.anomaly_data:
            extra = _load(args, args.anomaly_data)
            anomalies = list(extra.trajectories)
            masks = {t.id: np.ones(len(t), dtype=bool) for t in anomalies}
        spec = None
    else:
        spec = _scene(args)
        ds, _ = generate_intersection(spec)
        anomalies, masks = anomaly_set(spec, args.anomalies, seed=spec.seed + 1000)
    if args.robustness:
        if spec is None:
            raise UsageError("--robustness needs a simulated scene (omit the input file)")
        report = robustness_sweep(spec, trials=args.trials, cfg=cfg)
    else:
        report = run_kfold(ds, args.folds, cfg, anomalies, masks)
    if args.json:
        _write_text(args.json, report.to_json())
    if args.csv:
        _write_text(args.csv, report.to_csv())
    if not args.json or args.json != "-":
        for key, s in report.summary().items():
            print(f"{key:24s} mean {s['mean']:8.3f}  min {s['min']:8.3f}  max {s['max']:8.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _input_opts(p, positional=True):
    if positional:
        p.add_argument("input", help="trajectory file")
    p.add_argument("--format", choices=FORMATS, help="input format (default: from suffix)")
    p.add_argument("--fps", type=float, help="frame rate for duke-frames input")
    p.add_argument("--units", default="meters")


def _config_opts(p):
    p.add_argument("--config", help="TOML or JSON run configuration")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one configuration value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trajflow", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"trajflow {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic intersection dataset")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--scene", help="scene file (TOML/JSON); default intersection otherwise")
    p.add_argument("--seed", type=int)
    p.add_argument("--anomalies", type=float, default=0.0, help="fraction of anomalies to add")
    p.add_argument("--truth", help="write ground-truth labels here")
    p.add_argument("--out-format", choices=("csv", "json"))
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("inject-anomalies", help="append random-walk anomalies to a dataset")
    _input_opts(p)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int)
    p.add_argument("--scene", help="scene file for speed and noise settings")
    p.add_argument("--truth", help="write the anomaly ids here")
    p.add_argument("--out-format", choices=("csv", "json"))
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("train", help="learn a model from a dataset")
    _input_opts(p)
    _config_opts(p)
    p.add_argument("-o", "--output", required=True, help="model file (.json or .json.gz)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("inspect", help="summarise a model")
    p.add_argument("model")
    p.add_argument("--tpm", action="store_true", help="print the transition matrix")
    p.add_argument("--json", action="store_true", help="machine-readable summary")
    p.add_argument("--geometry", metavar="PATH", help="write plot geometry JSON ('-' for stdout)")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("predict", help="replay tracks and emit one JSON record per step")
    p.add_argument("model")
    _input_opts(p)
    p.add_argument("-o", "--output", help="JSONL output (default stdout)")
    p.add_argument("--window", type=int)
    p.add_argument("--l-thresh", type=float)
    p.add_argument("--p-min", type=float)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="k-fold evaluation or robustness sweep")
    p.add_argument("input", nargs="?", help="dataset; a simulated scene is used when omitted")
    _input_opts(p, positional=False)
    _config_opts(p)
    p.add_argument("--scene", help="scene file for the simulated dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--anomalies", type=int, default=40, help="simulated anomalies per fold")
    p.add_argument("--anomaly-data", help="file of anomalous tracks (with an input dataset)")
    p.add_argument("--robustness", action="store_true", help="run the anomaly robustness sweep")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--json", metavar="PATH", help="write the report as JSON ('-' for stdout)")
    p.add_argument("--csv", metavar="PATH", help="write one CSV row per fold")
    p.set_defaults(func=cmd_evaluate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad usage; that is an input error here
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (GpNumericalError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        print(f"trajflow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except FileNotFoundError as exc:
        print(f"trajflow: no such file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, ParseError, TrajectoryError, ModelError, UsageError,
            ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"trajflow: {msg}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"trajflow: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
