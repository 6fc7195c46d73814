"""Command-line entry point: simulate, fit nlls|ann, evaluate, render-maps."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .acquisition import (
    FormatError,
    ValidationError,
    filter_measurements,
    load_mask,
    load_protocol,
    load_signals,
    mudi_like_protocol,
    normalize_signals,
    write_protocol,
    write_signals,
)
from .ann import TrainConfig, infer, train
from .evaluation import fit_report
from .files import input_digests, read_params, write_history, write_json, write_params
from .model import PARAM_NAMES, ModelOptions
from .nlls import GridSpec, NllsConfig, fit_volume_nlls
from .render import render_maps
from .simulate import SimulationConfig, generate_dataset

log = logging.getLogger("t1ballstick")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; keys may use - or _."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _model_args(p):
    p.add_argument("--stick-exponent", choices=("squared", "linear"), default="squared")
    p.add_argument("--ir-form", choices=("product", "standard"), default="product")


def _input_args(p):
    p.add_argument("--signals", required=True, type=Path, help="voxel x measurement CSV, or .f32 with JSON sidecar")
    p.add_argument("--protocol", required=True, type=Path)
    p.add_argument("--mask", type=Path, help="mask CSV (header 'index') with {nx,ny,nz} sidecar")
    p.add_argument("--normalize", action="store_true", help="divide each voxel by its b=0 / longest-TI signal")
    p.add_argument("--te-keep", type=float, help="keep only this echo time (ms)")
    p.add_argument("--ti-min", type=float, help="drop inversion times below this (ms)")
    p.add_argument("--ti-max", type=float, help="drop inversion times above this (ms)")
    p.add_argument("--out", required=True, type=Path)


def build_parser():
    parser = _Parser(prog="t1ballstick", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    leaves = {}

    p = sub.add_parser("simulate", help="generate noisy synthetic voxels")
    p.add_argument("--protocol", required=True, type=Path)
    p.add_argument("--n", type=int, default=10000, help="number of voxels")
    p.add_argument("--sigma", type=float, default=0.02, help="per-channel noise std (normalized units)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "f32"), default="csv")
    p.add_argument("--out", required=True, type=Path)
    _model_args(p)
    leaves["simulate"] = p

    p = sub.add_parser("make-protocol", help="write a synthetic inversion-recovery/diffusion protocol")
    p.add_argument("--out", required=True, type=Path, help="output protocol CSV")
    p.add_argument("--with-outlier-tis", action="store_true", help="add the 20 ms and 7322 ms inversion times")
    leaves["make-protocol"] = p

    fit = sub.add_parser("fit", help="fit the model by nlls or ann")
    fit_sub = fit.add_subparsers(dest="method", required=True, parser_class=_Parser)

    p = fit_sub.add_parser("nlls", help="grid search + bounded Levenberg-Marquardt")
    _input_args(p)
    p.add_argument("--grid-points", type=int, default=5, help="grid points per scalar parameter")
    p.add_argument("--orientations", type=int, default=30, help="grid orientations on the hemisphere")
    p.add_argument("--max-iterations", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-8, help="relative cost decrease for convergence")
    p.add_argument("--workers", type=int, default=1)
    _model_args(p)
    leaves["fit nlls"] = p

    p = fit_sub.add_parser("ann", help="self-supervised MLP")
    _input_args(p)
    p.add_argument("--learning-rate", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--max-epochs", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    _model_args(p)
    leaves["fit ann"] = p

    p = sub.add_parser("evaluate", help="compare estimates with ground truth")
    p.add_argument("--truth", required=True, type=Path)
    p.add_argument("--est-a", required=True, type=Path)
    p.add_argument("--est-b", type=Path)
    p.add_argument("--label-a")
    p.add_argument("--label-b")
    p.add_argument("--out", type=Path, default=Path("."))
    leaves["evaluate"] = p

    p = sub.add_parser("render-maps", help="render parameter maps for one slice")
    p.add_argument("--params", required=True, type=Path)
    p.add_argument("--mask", required=True, type=Path)
    p.add_argument("--slice-axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--slice-index", type=int, help="default: middle slice")
    p.add_argument("--dec-weight", default="f", help="parameter weighting DEC brightness, or 'none'")
    p.add_argument("--out", required=True, type=Path)
    leaves["render-maps"] = p

    for leaf in leaves.values():
        leaf.add_argument("--config", type=Path, help="key = value defaults (overridden by flags)")
    return parser, leaves


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if tok.startswith("--config="):
            return Path(tok.split("=", 1)[1])
    return None


def _leaf_name(argv):
    words = [t for t in argv if not t.startswith("-")][:2]
    if words and words[0] == "fit":
        return " ".join(words)
    return words[0] if words else None


def parse_args(argv):
    """Parse with precedence: explicit flag > config file > built-in default."""
    parser, leaves = build_parser()
    cfg = _config_path(argv)
    leaf = leaves.get(_leaf_name(argv))
    if cfg is not None and leaf is not None:
        actions = {a.dest: a for a in leaf._actions}
        defaults = {}
        for key, raw in read_config(cfg).items():
            if key not in actions or key in ("config", "help"):
                raise ValidationError(f"{cfg}: unknown option {key!r}")
            action = actions[key]
            if isinstance(action, argparse._StoreTrueAction):
                value = raw.lower() in ("1", "true", "yes", "on")
            else:
                value = action.type(raw) if action.type else raw
                if action.choices and value not in action.choices:
                    raise ValidationError(f"{cfg}: {key} must be one of {list(action.choices)}")
            defaults[key] = value
            action.required = False
        leaf.set_defaults(**defaults)
    return parser.parse_args(argv)


# ------------------------------------------------------------------ commands


def _opts(args) -> ModelOptions:
    return ModelOptions(args.stick_exponent, args.ir_form)


def _load_inputs(args):
    protocol = load_protocol(args.protocol)
    signals = load_signals(args.signals, args.mask, protocol)
    if args.te_keep is not None or args.ti_min is not None or args.ti_max is not None:
        te = args.te_keep / 1000.0 if args.te_keep is not None else float(np.min(protocol.te))
        lo = args.ti_min / 1000.0 if args.ti_min is not None else -np.inf
        hi = args.ti_max / 1000.0 if args.ti_max is not None else np.inf
        protocol, signals = filter_measurements(protocol, signals, te, lo, hi)
    if args.normalize:
        signals = normalize_signals(protocol, signals, drop_invalid=True)
    else:
        signals.normalized = True
    return protocol, signals


def cmd_simulate(args) -> dict:
    protocol = load_protocol(args.protocol)
    config = SimulationConfig(args.n, args.sigma, args.seed, opts=_opts(args))
    ds = generate_dataset(protocol, config)
    args.out.mkdir(parents=True, exist_ok=True)
    sig_path = write_signals(ds.signals, args.out / f"signals.{args.format}")
    truth_path = write_params(args.out / "truth.csv", ds.truth)
    meta = write_json(args.out / "sim_meta.json", {**config.as_dict(), "n_meas": len(protocol), "protocol": str(args.protocol)})
    outputs = [sig_path, truth_path, meta]
    if args.format == "f32":
        outputs.append(sig_path.with_suffix(".json"))
    return {"inputs": [args.protocol], "outputs": outputs, "config": config.as_dict(), "seeds": {"simulate": args.seed}}


def cmd_make_protocol(args) -> dict:
    outliers = (20.0, 7322.0) if args.with_outlier_tis else ()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    path = write_protocol(mudi_like_protocol(outlier_tis_ms=outliers), args.out)
    return {"inputs": [], "outputs": [path], "config": {"with_outlier_tis": args.with_outlier_tis}, "seeds": {}}


def cmd_fit_nlls(args) -> dict:
    protocol, signals = _load_inputs(args)
    config = NllsConfig(GridSpec(args.grid_points, args.orientations), args.max_iterations, args.tol, opts=_opts(args))
    result = fit_volume_nlls(signals, protocol, config, n_workers=args.workers)
    args.out.mkdir(parents=True, exist_ok=True)
    params_path = write_params(args.out / "params_nlls.csv", result.params, signals.voxel_index, {"cost": result.cost})
    statuses = {s: result.status.count(s) for s in sorted(set(result.status))}
    meta = {
        "method": "nlls",
        "config": config.as_dict(),
        "n_voxels": signals.n_voxels,
        "n_meas": len(protocol),
        "wall_time": result.wall_time,
        "grid_time": result.grid_time,
        "refine_time": result.refine_time,
        "workers": args.workers,
        "status_counts": statuses,
    }
    meta_path = write_json(args.out / "fit_meta.json", meta)
    return {"inputs": [args.signals, args.protocol, args.mask], "outputs": [params_path, meta_path], "config": meta, "seeds": {}}


def cmd_fit_ann(args) -> dict:
    protocol, signals = _load_inputs(args)
    config = TrainConfig(
        learning_rate=args.learning_rate, batch_size=args.batch_size, dropout_rate=args.dropout,
        patience=args.patience, max_epochs=args.max_epochs, seed=args.seed, opts=_opts(args),
    )
    t0 = time.perf_counter()
    weights, history = train(signals, protocol, config)
    params = infer(weights, signals, config.bounds)
    wall = time.perf_counter() - t0
    args.out.mkdir(parents=True, exist_ok=True)
    outputs = [
        write_params(args.out / "params_ann.csv", params, signals.voxel_index),
        write_history(args.out / "train_history.csv", history.losses),
        weights.save(args.out / "weights.bin"),
        args.out / "weights.json",
    ]
    meta = {
        "method": "ann",
        "config": config.as_dict(),
        "n_voxels": signals.n_voxels,
        "n_meas": len(protocol),
        "wall_time": wall,
        "train_time": history.wall_time,
        "best_epoch": history.best_epoch,
        "stopped_epoch": history.stopped_epoch,
        "best_loss": history.best_loss,
    }
    outputs.append(write_json(args.out / "fit_meta.json", meta))
    return {"inputs": [args.signals, args.protocol, args.mask], "outputs": outputs, "config": meta, "seeds": {"train": args.seed}}


def _estimates(path, truth, label, truth_path):
    params, voxel, _ = read_params(path)
    if voxel is not None:
        if np.any(voxel >= truth.shape[0]):
            raise ValidationError(f"{path}: voxel index beyond the {truth.shape[0]} truth rows")
        truth = truth[voxel]
    if params.shape[0] != truth.shape[0]:
        raise ValidationError(f"{path}: {params.shape[0]} rows but truth has {truth.shape[0]}")
    meta_path = Path(path).parent / "fit_meta.json"
    wall = json.loads(meta_path.read_text()).get("wall_time") if meta_path.exists() else None
    if label is None:
        stem = Path(path).stem
        label = stem[len("params_"):] if stem.startswith("params_") else stem
    return fit_report(truth, params, label, wall, {"truth": str(truth_path), "estimates": str(path)})


def cmd_evaluate(args) -> dict:
    truth, _, _ = read_params(args.truth)
    reports = [_estimates(args.est_a, truth, args.label_a, args.truth)]
    if args.est_b is not None:
        reports.append(_estimates(args.est_b, truth, args.label_b, args.truth))
    args.out.mkdir(parents=True, exist_ok=True)
    rj = write_json(args.out / "report.json", {"truth": str(args.truth), "fits": [r.as_dict() for r in reports]})
    rc = args.out / "report.csv"
    with rc.open("w") as fh:
        fh.write("fitter,metric,value\n")
        for r in reports:
            for name, value in r.pearson.items():
                fh.write(f"{r.label},pearson_{name},{value!r}\n")
            fh.write(f"{r.label},angular_error_mean,{r.angular_error_mean!r}\n")
            fh.write(f"{r.label},angular_error_median,{r.angular_error_median!r}\n")
            fh.write(f"{r.label},wall_time,{'' if r.wall_time is None else repr(r.wall_time)}\n")
    for r in reports:
        rs = " ".join(f"{k}={v:.3f}" for k, v in r.pearson.items())
        print(f"{r.label}: {rs} angular_median={np.degrees(r.angular_error_median):.1f}deg wall={r.wall_time}")
    return {"inputs": [args.truth, args.est_a, args.est_b], "outputs": [rj, rc], "config": {}, "seeds": {}}


def cmd_render_maps(args) -> dict:
    params, voxel, _ = read_params(args.params)
    mask = load_mask(args.mask)
    weight = None if args.dec_weight.lower() == "none" else args.dec_weight
    if weight is not None and weight not in PARAM_NAMES:
        raise ValidationError(f"unknown DEC weight parameter {weight!r}")
    written = render_maps(params, voxel, mask, args.out, args.slice_axis, args.slice_index, dec_weight=weight)
    return {
        "inputs": [args.params, args.mask],
        "outputs": list(written.values()),
        "config": {"slice_axis": args.slice_axis, "slice_index": args.slice_index, "dec_weight": weight},
        "seeds": {},
    }


COMMANDS = {
    "simulate": cmd_simulate,
    "make-protocol": cmd_make_protocol,
    "fit nlls": cmd_fit_nlls,
    "fit ann": cmd_fit_ann,
    "evaluate": cmd_evaluate,
    "render-maps": cmd_render_maps,
}


def _write_manifest(out_dir, name, argv, record, wall):
    manifest = {
        "subcommand": name,
        "argv": list(argv),
        "tool_version": __version__,
        "config": record["config"],
        "seeds": record["seeds"],
        "inputs": input_digests(record["inputs"]),
        "outputs": [str(p) for p in record["outputs"]],
        "wall_time": wall,
    }
    write_json(Path(out_dir) / "manifest.json", manifest)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_VALIDATION
    except (ValidationError, FormatError, OSError) as e:
        print(f"t1ballstick: error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    name = " ".join(x for x in (args.command, getattr(args, "method", None)) if x)
    t0 = time.perf_counter()
    try:
        record = COMMANDS[name](args)
    except (ValidationError, FormatError, FileNotFoundError) as e:
        print(f"t1ballstick {name}: error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:  # noqa: BLE001
        log.exception("%s failed", name)
        print(f"t1ballstick {name}: runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    out_dir = args.out if args.command != "make-protocol" else args.out.parent
    _write_manifest(out_dir, name, argv, record, time.perf_counter() - t0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
