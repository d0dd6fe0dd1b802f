"""Command-line interface.

Exit codes: 0 success, 1 internal error, 2 input-format error,
3 infeasible calibration.

Configuration precedence, lowest to highest: built-in defaults, the
``--config`` file (flat ``key=value`` lines, ``#`` comments), then flags.
"""

import argparse
from concurrent.futures import ProcessPoolExecutor
import csv
import dataclasses
import hashlib
import json
import os
import platform
import sys
import time

import numpy as np

from . import __version__
from . import pipeline as pl
from .baselines import evaluate, key_value_report, metrics_csv
from .data import (
    ActivationSet,
    FormatError,
    OOD_LABEL,
    gen_gaussians,
    read_activations,
    read_points_csv,
    shift_sets,
    training_blobs,
    write_activations,
    write_points_csv,
)
from .experiment import GAUSSIAN_CONFIG, stream_seeds
from .toynet import CheckpointError, MlpModel, load_model, save_model, train

EXIT_OK, EXIT_INTERNAL, EXIT_FORMAT, EXIT_INFEASIBLE = 0, 1, 2, 3
ABSTAIN = "ABSTAIN"
PREDICTION_COLUMNS = ("id", "decision", "class", "min_p", "reason")


class InfeasibleCalibration(RuntimeError):
    pass


# -- configuration ---------------------------------------------------------

_FIELDS = {f.name: f for f in dataclasses.fields(pl.PipelineConfig)}


def _parse_floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _parse_value(key, text):
    text = text.strip()
    if text in ("", "none", "None"):
        return None
    if key in ("weights", "gammas"):
        return _parse_floats(text)
    if key in ("k", "min_class_count", "seed"):
        return int(text)
    if key in ("use_hull", "transpose"):
        if text.lower() not in ("true", "false", "1", "0"):
            raise FormatError(f"{key}: expected a boolean, got {text!r}")
        return text.lower() in ("true", "1")
    if key in ("alpha", "gamma_quantile", "omega", "gate_alpha", "gamma"):
        return float(text)
    return text


def read_config(path):
    """Parse a flat ``key=value`` file into a dict."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in _FIELDS and key not in ("gammas", "seed"):
                raise FormatError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                out[key] = _parse_value(key, value)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


def _fmt_value(v):
    if v is None:
        return "none"
    if isinstance(v, (tuple, list, np.ndarray)):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_config(path, values):
    with open(path, "w") as fh:
        for key in sorted(values):
            fh.write(f"{key}={_fmt_value(values[key])}\n")


def _flag_overrides(args):
    pairs = {"k": args.k, "alpha": args.alpha, "gamma_quantile": args.gamma_quantile,
             "weights": None if args.weights is None else _parse_floats(args.weights),
             "variant": args.variant, "effect_kind": args.effect}
    return {k: v for k, v in pairs.items() if v is not None}


def resolve_config(args):
    """PipelineConfig plus extra keys (``gammas``) after applying precedence."""
    values = {f: getattr(GAUSSIAN_CONFIG, f) for f in _FIELDS}
    extra = {}
    if getattr(args, "config", None):
        for key, v in read_config(args.config).items():
            (values if key in _FIELDS else extra)[key] = v
    values.update(_flag_overrides(args))
    try:
        cfg = pl.PipelineConfig(**values)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid configuration: {exc}") from None
    return cfg, extra


def config_dict(cfg, **extra):
    d = dataclasses.asdict(cfg)
    d.update(extra)
    return d


# -- manifest --------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command, argv, inputs, outputs, config=None, seed=None, timings=None,
                   results=None):
    """RunManifest JSON next to the primary output."""
    manifest = {
        "command": command,
        "argv": list(argv),
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": seed,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
        "timings": timings or {},
        "results": results or {},
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return manifest


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o).__name__)


def _manifest_path(out):
    return str(out) + ".manifest.json"


# -- commands --------------------------------------------------------------

def cmd_gen_gauss(args):
    t0 = time.perf_counter()
    os.makedirs(args.out_dir, exist_ok=True)
    seeds = stream_seeds(args.seed)
    sets = {"train": training_blobs(args.count), "validation": training_blobs(args.count),
            "calibration": training_blobs(args.count), "test": training_blobs(args.count)}
    sets.update(shift_sets(args.count))
    stream = {"validation": "reference"}
    outputs = []
    for name, specs in sets.items():
        X, y = gen_gaussians(specs, seeds[stream.get(name, name)])
        path = os.path.join(args.out_dir, f"{name}.csv")
        write_points_csv(path, X, y)
        outputs.append(path)
    write_manifest(os.path.join(args.out_dir, "manifest.json"), "gen-gauss", args.argv, [], outputs,
                   seed=args.seed, timings={"total": time.perf_counter() - t0})
    return EXIT_OK


def cmd_train_toy(args):
    t0 = time.perf_counter()
    X, y = read_points_csv(args.data)
    if X.shape[0] == 0:
        raise FormatError(f"{args.data}: no rows")
    if (y < 0).any():
        raise FormatError(f"{args.data}: training labels must be class ids")
    n_classes = int(y.max()) + 1
    sizes = [X.shape[1]] + [int(h) for h in _parse_floats(args.hidden)] + [n_classes]
    model = MlpModel.initialize(sizes, seed=args.seed)
    net, acc = train(model, X, y, epochs=args.epochs, learning_rate=args.lr,
                     batch_size=args.batch_size, seed=args.seed)
    save_model(net, args.out)
    print(f"accuracy={acc:.6g}")
    write_manifest(_manifest_path(args.out), "train-toy", args.argv, [args.data], [args.out],
                   seed=args.seed, config={"hidden": sizes[1:-1], "epochs": args.epochs, "lr": args.lr,
                                           "batch_size": args.batch_size},
                   timings={"total": time.perf_counter() - t0}, results={"accuracy": acc})
    return EXIT_OK


def cmd_extract(args):
    t0 = time.perf_counter()
    model = load_model(args.model)
    X, y = read_points_csv(args.data)
    if X.shape[1] != model.n_inputs:
        raise FormatError(f"{args.data}: {X.shape[1]} columns, model expects {model.n_inputs}")
    aset = ActivationSet(model.forward_with_trace(X), y, list(model.layer_names))
    write_activations(aset, args.out)
    write_manifest(_manifest_path(args.out), "extract", args.argv, [args.model, args.data], [args.out],
                   timings={"total": time.perf_counter() - t0},
                   results={"n": len(aset), "layers": aset.n_layers})
    return EXIT_OK


def _load_reference(path):
    aset = read_activations(path)
    if (aset.labels < 0).any():
        raise FormatError(f"{path}: reference points need class labels")
    return pl.Reference.from_activation_set(aset)


def _id_only(aset, path):
    keep = aset.labels != OOD_LABEL
    if not keep.any():
        raise FormatError(f"{path}: no in-distribution rows")
    return aset.subset(np.flatnonzero(keep))


def cmd_calibrate(args):
    t0 = time.perf_counter()
    cfg, _ = resolve_config(args)
    reference = _load_reference(args.reference)
    val = _id_only(read_activations(args.validation), args.validation)
    inputs = [args.reference, args.validation]
    gammas = None
    if cfg.variant == "main" and cfg.use_hull and cfg.gamma is None:
        hull_set = val
        if args.hull_data:
            hull_set = _id_only(read_activations(args.hull_data), args.hull_data)
            inputs.append(args.hull_data)
        gammas = pl.calibrate_gammas(reference, pl.collect_evidence(reference, hull_set.layers, cfg), cfg)
    evidence = pl.collect_evidence(reference, val.layers, cfg)
    cal = pl.calibrate_alpha(evidence, reference, cfg, args.target_pass, gammas)
    out = config_dict(cfg.with_(alpha=cal.alpha))
    if gammas is not None:
        out["gammas"] = gammas
    write_config(args.out, out)
    print(f"alpha={cal.alpha!r} pass_rate={cal.pass_rate:.6g} feasible={cal.feasible}")
    write_manifest(_manifest_path(args.out), "calibrate", args.argv, inputs, [args.out], config=out,
                   timings={"total": time.perf_counter() - t0},
                   results={"alpha": cal.alpha, "pass_rate": cal.pass_rate, "feasible": cal.feasible,
                            "target_pass": args.target_pass})
    if not cal.feasible:
        raise InfeasibleCalibration(
            f"no alpha reaches pass rate {args.target_pass} +/- 0.005 (closest {cal.pass_rate:.4f})")
    return EXIT_OK


def _predict_chunk(payload):
    reference, layers, cfg, gammas = payload
    return [pl.decide(ev, reference, cfg, gammas) for ev in pl.collect_evidence(reference, layers, cfg)]


def predict_parallel(reference, layers, cfg, gammas, workers):
    """Verdicts in input order, optionally spread over worker processes."""
    n = layers[0].shape[0]
    workers = max(1, min(int(workers), n))
    if workers == 1:
        return _predict_chunk((reference, layers, cfg, gammas))
    bounds = np.linspace(0, n, workers + 1).astype(int)
    chunks = [(reference, [m[a:b] for m in layers], cfg, gammas) for a, b in zip(bounds[:-1], bounds[1:])]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_predict_chunk, chunks))
    return [v for part in parts for v in part]


def verdict_rows(verdicts):
    for i, v in enumerate(verdicts):
        decision = ABSTAIN if not v.accepted else str(v.decision)
        yield [i, decision, v.candidate, repr(float(v.min_p)), v.rejection_reason]


def cmd_predict(args):
    t0 = time.perf_counter()
    cfg, extra = resolve_config(args)
    reference = _load_reference(args.reference)
    aset = read_activations(args.input)
    if aset.n_layers != reference.n_layers:
        raise FormatError(f"{args.input}: {aset.n_layers} layers, reference has {reference.n_layers}")
    gammas = extra.get("gammas")
    if cfg.variant == "main" and cfg.use_hull and cfg.gamma is None:
        if gammas is None:
            raise FormatError("config has no gammas; run calibrate first or set gamma")
        if len(gammas) != reference.n_layers:
            raise FormatError(f"config has {len(gammas)} gammas for {reference.n_layers} layers")
    workers = args.workers if args.workers is not None else (os.cpu_count() or 1)
    verdicts = predict_parallel(reference, aset.layers, cfg, gammas, workers)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        w.writerows(verdict_rows(verdicts))
    n_acc = sum(v.accepted for v in verdicts)
    write_manifest(_manifest_path(args.out), "predict", args.argv, [args.reference, args.input], [args.out],
                   config=config_dict(cfg, gammas=gammas), timings={"total": time.perf_counter() - t0},
                   results={"n": len(verdicts), "accepted": n_acc, "workers": workers})
    return EXIT_OK


def read_predictions(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != PREDICTION_COLUMNS:
        raise FormatError(f"{path}: expected header {','.join(PREDICTION_COLUMNS)}")
    decisions, scores, reasons = [], [], []
    try:
        for r in rows[1:]:
            decisions.append(None if r[1] == ABSTAIN else int(r[1]))
            scores.append(1.0 - float(r[3]))
            reasons.append(r[4])
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: {exc}") from None
    return decisions, np.array(scores), reasons


def _read_labels(path):
    if str(path).endswith(".pdka"):
        return read_activations(path).labels
    return read_points_csv(path)[1]


def cmd_eval(args):
    t0 = time.perf_counter()
    rows, inputs, report = [], [], []
    for spec in args.run:
        parts = spec.split(",")
        if len(parts) != 4:
            raise FormatError(f"--run expects dataset,method,predictions,labels; got {spec!r}")
        dataset, method, pred_path, label_path = parts
        decisions, scores, reasons = read_predictions(pred_path)
        labels = _read_labels(label_path)
        if len(labels) != len(decisions):
            raise FormatError(f"{pred_path}: {len(decisions)} rows but {label_path} has {len(labels)} labels")
        rep = evaluate(decisions, labels, labels != OOD_LABEL, scores, reasons)
        rows.append((dataset, method, rep))
        report.append(key_value_report(dataset, method, rep))
        inputs += [pred_path, label_path]
    with open(args.out, "w") as fh:
        fh.write(metrics_csv(rows))
    outputs = [args.out]
    text = "\n".join(report)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text)
        outputs.append(args.report)
    else:
        sys.stdout.write(text)
    write_manifest(_manifest_path(args.out), "eval", args.argv, inputs, outputs,
                   timings={"total": time.perf_counter() - t0})
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def _add_pipeline_flags(p):
    p.add_argument("--config", help="flat key=value file; flags override it")
    p.add_argument("--k", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma-quantile", type=float)
    p.add_argument("--weights", help="comma-separated layer weights")
    p.add_argument("--variant", choices=pl.VARIANTS)
    p.add_argument("--effect", choices=pl.EFFECT_KINDS)
    p.add_argument("--workers", type=int, help="worker processes (default: available cores)")
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="pdknn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-gauss", help="write the Gaussian point sets as CSV")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1000, help="points per Gaussian")
    p.set_defaults(func=cmd_gen_gauss)

    p = sub.add_parser("train-toy", help="train the small MLP on a points CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hidden", default="2", help="comma-separated hidden widths")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("extract", help="write per-layer activations to a PDKA file")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("calibrate", help="fit hull thresholds and alpha on held-out ID data")
    p.add_argument("--reference", required=True, help="reference PDKA")
    p.add_argument("--validation", required=True, help="held-out PDKA used to tune alpha")
    p.add_argument("--hull-data", help="held-out PDKA for the hull thresholds (default: --validation)")
    p.add_argument("--target-pass", type=float, default=0.965)
    p.add_argument("--out", required=True, help="calibrated config file")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("predict", help="classify or abstain on a PDKA file")
    p.add_argument("--reference", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="verdicts CSV")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="metrics from verdict CSVs")
    p.add_argument("--run", action="append", required=True,
                   help="dataset,method,predictions.csv,labels (PDKA or points CSV); repeatable")
    p.add_argument("--out", required=True, help="metrics CSV")
    p.add_argument("--report", help="key=value report (default: stdout)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    try:
        return args.func(args)
    except (FormatError, CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except InfeasibleCalibration as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except Exception as exc:  # noqa: BLE001 - report, then signal an internal failure
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
