"""Command line entry point: gen, score, select, train, eval, bench.

Every command validates its inputs before writing anything, emits its
outputs plus a run_manifest.json (written atomically) that records the
fully resolved configuration, seed, tool version and input digests, and
exits through a single error path that maps exception kinds to stable
exit codes: 0 ok, 2 usage, 3 validation, 4 I/O, 5 numerical.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

import ripu
from ripu.errors import RipuError, TensorIOError, UsageError, ValidationError
from ripu.loop import LoopConfig, run_active_loop
from ripu.losses import ClassifierParams
from ripu.scoring import RA, PA, RegionSpec, acquisition_map, region_uncertainty
from ripu.selection import BudgetLedger, resolve_budget, run_strategy
from ripu.synthgen import PRESETS, emit_benchmark
from ripu.tensors import (
    LabelMap,
    UNLABELED,
    load_manifest,
    read_tensor,
    write_tensor,
)

log = logging.getLogger("ripu")


def _setup_logging():
    level = os.environ.get("RIPU_LOG", "error").strip().lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"RIPU_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(name)s %(levelname)s %(message)s")


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _atomic_json(path, doc):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise TensorIOError(f"cannot write {path}: {exc}") from exc


def _write_run_manifest(out_dir, command, config, seed, inputs, outputs):
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": ripu.__version__,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }
    _atomic_json(Path(out_dir) / "run_manifest.json", doc)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _float(x):
    return "" if x is None or (isinstance(x, float) and not np.isfinite(x)) else repr(float(x))


# ---------------------------------------------------------------- gen

def _add_gen(sub):
    p = sub.add_parser("gen", help="emit a synthetic benchmark dataset")
    p.add_argument("--preset", default="desk-v1", help=f"one of {sorted(PRESETS)}")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    for name in (
        "height", "width", "classes", "smoothness", "head-classes", "feature-dims",
    ):
        p.add_argument(f"--{name}", type=int, default=None)
    for name in (
        "feature-scale", "tail-margin", "shift-rotation", "shift-offset", "noise",
    ):
        p.add_argument(f"--{name}", type=float, default=None)
    p.add_argument("--priors", default=None, help="comma separated class priors")
    p.add_argument("--object-size-range", default=None, help="LO,HI")
    p.add_argument("--object-count-range", default=None, help="LO,HI")


def _cmd_gen(args):
    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; available: {sorted(PRESETS)}")
    spec = PRESETS[args.preset]
    overrides = {}
    for key in (
        "height", "width", "classes", "smoothness", "feature_dims",
        "feature_scale", "tail_margin", "shift_rotation", "shift_offset", "noise",
    ):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.head_classes is not None:
        overrides["head_classes"] = args.head_classes
    if args.priors is not None:
        overrides["priors"] = tuple(float(x) for x in args.priors.split(","))
    elif args.classes is not None:
        overrides["priors"] = None  # rebuild geometric priors for the new count
    for key in ("object_size_range", "object_count_range"):
        value = getattr(args, key)
        if value is not None:
            lo, hi = value.split(",")
            overrides[key] = (int(lo), int(hi))
    if args.seed is not None:
        overrides["seed"] = args.seed

    config = replace(spec["config"], **overrides) if overrides else spec["config"]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emit_benchmark(out_dir, args.preset, config=config)

    outputs = sorted(str(p) for p in out_dir.glob("*.rptf")) + [
        str(out_dir / "manifest.json")
    ]
    _write_run_manifest(
        out_dir, "gen", {**vars(config), "preset": args.preset}, config.seed, [], outputs
    )
    print(out_dir / "manifest.json")
    return 0


# ---------------------------------------------------------------- score

def _add_score(sub):
    p = sub.add_parser("score", help="write the four acquisition planes for one image")
    p.add_argument("--pred", required=True, help="prediction RPTF (rank-3 f32)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=[RA, PA], default=RA)
    p.add_argument("--k", type=int, default=None)


def _cmd_score(args):
    pred = read_tensor(args.pred, expect="prediction")
    k = args.k if args.k is not None else (1 if args.mode == RA else 32)
    maps = acquisition_map(pred, RegionSpec.square(k), args.mode)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name in ("impurity", "entropy", "uncertainty", "score"):
        path = out_dir / f"{name}.rptf"
        write_tensor(path, getattr(maps, name))
        outputs.append(path)
    _write_run_manifest(
        out_dir,
        "score",
        {"pred": args.pred, "mode": args.mode, "k": k},
        None,
        [args.pred],
        outputs,
    )
    return 0


# ---------------------------------------------------------------- select

def _add_select(sub):
    p = sub.add_parser("select", help="run one budgeted selection round")
    p.add_argument("--pred", required=True, help="prediction RPTF")
    p.add_argument("--state", required=True, help="current annotation RPTF (u16)")
    p.add_argument("--labels", required=True, help="ground-truth RPTF used to annotate picks")
    p.add_argument("--mode", choices=[RA, PA], default=RA)
    p.add_argument(
        "--strategy", choices=["ripu", "rand", "ent", "sconf", "rect"], default="ripu"
    )
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--budget", required=True, help="total pixels per image, or e.g. 2.2%%")
    p.add_argument("--round", type=int, default=1, dest="round_idx")
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)


def _score_plane(strategy, pred, maps, spec, mode, seed, shape):
    if strategy in ("ripu", "rect"):
        return maps.score
    if strategy == "ent":
        return region_uncertainty(maps.entropy, spec, mode)
    if strategy == "sconf":
        return region_uncertainty(1.0 - pred.probs.max(axis=2), spec, mode)
    return np.random.default_rng(seed).random(shape)


def _cmd_select(args):
    pred = read_tensor(args.pred, expect="prediction")
    state = read_tensor(args.state)
    truth = read_tensor(args.labels)
    for name, tensor in (("state", state), ("labels", truth)):
        if not isinstance(tensor, LabelMap):
            raise ValidationError(f"--{name} file is not a label tensor")
    if not truth.is_dense():
        raise ValidationError("--labels must be a dense ground-truth map")
    if (pred.height, pred.width) != (truth.height, truth.width):
        raise ValidationError("prediction and ground truth disagree in shape")

    k = args.k if args.k is not None else (1 if args.mode == RA else 32)
    spec = RegionSpec.square(k)
    sel_spec = spec if args.strategy != "rect" else RegionSpec.rectangle(2 * k + 1, 2 * k + 1)

    total = resolve_budget(args.budget, pred.height, pred.width)
    ledger = BudgetLedger(total, args.rounds, spent=state.annotated_count())
    allowance = ledger.allowance(args.round_idx)
    if allowance < 1:
        raise ValidationError(
            f"round {args.round_idx} has no remaining allowance "
            f"(spent {ledger.spent} of {total})"
        )

    maps = None
    if args.strategy in ("ripu", "ent", "rect"):
        maps = acquisition_map(pred, spec, args.mode)
    result = run_strategy(
        args.strategy,
        pred=pred,
        maps=maps,
        state=state,
        spec=sel_spec,
        mode=args.mode,
        budget=allowance,
        seed=args.seed,
    )

    from ripu.loop import oracle_annotate

    updated = oracle_annotate(truth, result, state)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state_path = out_dir / "annotation.rptf"
    picks_path = out_dir / "picks.csv"
    write_tensor(state_path, updated)

    plane = _score_plane(
        args.strategy, pred, maps, spec, args.mode, args.seed,
        (pred.height, pred.width),
    )
    rows = []
    spent = 0
    for (i, j), cost in zip(result.picks, result.pick_costs):
        spent += cost
        rows.append([args.round_idx, i, j, repr(float(plane[i, j])), spent])
    _write_csv(picks_path, ["round", "i", "j", "score", "pixels_spent"], rows)

    if result.shortfall:
        log.info("selection exhausted candidates before the budget was spent")
    _write_run_manifest(
        out_dir,
        "select",
        {
            "pred": args.pred, "state": args.state, "labels": args.labels,
            "mode": args.mode, "strategy": args.strategy, "k": k,
            "budget": args.budget, "round": args.round_idx, "rounds": args.rounds,
        },
        args.seed,
        [args.pred, args.state, args.labels],
        [state_path, picks_path],
    )
    return 0


# ---------------------------------------------------------------- train

def _add_train(sub):
    p = sub.add_parser("train", help="run the full active-learning loop")
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=[RA, PA], default=RA)
    p.add_argument(
        "--strategy", choices=["ripu", "rand", "ent", "sconf", "rect"], default="ripu"
    )
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--budget", default="2.2%")
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--alpha1", type=float, default=0.1)
    p.add_argument("--alpha2", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--pretrain-iters", type=int, default=150)
    p.add_argument("--hidden-dim", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--source-free", action="store_true")
    p.add_argument("--out-dir", required=True)


def _loop_config(args):
    return LoopConfig(
        iterations=args.iters,
        rounds=args.rounds,
        budget=args.budget,
        mode=args.mode,
        strategy=args.strategy,
        k=args.k,
        tau=args.tau,
        alpha1=args.alpha1,
        alpha2=args.alpha2,
        lr=args.lr,
        seed=args.seed,
        source_free=args.source_free,
        pretrain_iters=args.pretrain_iters,
        hidden_dim=args.hidden_dim,
    )


def params_to_plane(params):
    """Pack weights and bias into one (C, D+1) plane, bias last column."""
    return np.hstack([params.weights, params.bias[:, None]])


def plane_to_params(plane):
    plane = np.asarray(plane, dtype=np.float64)
    return ClassifierParams(plane[:, :-1], plane[:, -1])


def _trace_rows(trace):
    return [
        [
            row.round, row.iteration,
            repr(round(row.sup_source, 12)), repr(round(row.sup_target, 12)),
            repr(round(row.consistency, 12)), repr(round(row.negative, 12)),
            repr(round(row.total, 12)),
            row.spent_total, row.shortfalls, repr(round(row.miou, 12)),
        ]
        for row in trace.rows
    ]


def _metrics_doc(report, trace=None):
    doc = {
        "miou": report.miou,
        "per_class_iou": [None if not np.isfinite(v) else float(v) for v in report.per_class_iou],
    }
    for name in ("selected_freq", "dataset_freq", "enrichment"):
        arr = getattr(report, name)
        if arr is not None:
            doc[name] = [None if not np.isfinite(v) else float(v) for v in np.asarray(arr)]
    if trace is not None:
        doc["spent_per_image"] = trace.meta.get("spent_per_image")
        doc["source_reads_after_pretrain"] = trace.meta.get("source_reads_after_pretrain")
    return doc


def _cmd_train(args):
    manifest = load_manifest(args.manifest)
    config = _loop_config(args)
    params, report, trace = run_active_loop(manifest, config, manifest_path=args.manifest)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params_path = out_dir / "params.rptf"
    trace_path = out_dir / "trace.csv"
    metrics_path = out_dir / "metrics.json"
    write_tensor(params_path, params_to_plane(params))
    _write_csv(
        trace_path,
        [
            "round", "iter", "sup_source", "sup_target", "consistency",
            "negative", "total", "spend", "shortfalls", "miou",
        ],
        _trace_rows(trace),
    )
    _atomic_json(metrics_path, _metrics_doc(report, trace))
    _write_run_manifest(
        out_dir,
        "train",
        {k: v for k, v in vars(config).items()},
        args.seed,
        [args.manifest],
        [params_path, trace_path, metrics_path],
    )
    print(f"mIoU {report.miou:.4f}")
    return 0


# ---------------------------------------------------------------- eval

def _add_eval(sub):
    p = sub.add_parser("eval", help="IoU metrics for predictions against dense labels")
    p.add_argument("--pred", action="append", default=[], help="prediction RPTF (repeatable)")
    p.add_argument("--labels", action="append", default=[], help="label RPTF (repeatable)")
    p.add_argument("--out", default=None, help="metrics JSON path (default stdout)")


def _cmd_eval(args):
    if not args.pred or len(args.pred) != len(args.labels):
        raise UsageError("eval needs matched --pred/--labels pairs")
    classes = None
    confusion = None
    for pred_path, lab_path in zip(args.pred, args.labels):
        pred = read_tensor(pred_path, expect="prediction")
        labels = read_tensor(lab_path)
        if not isinstance(labels, LabelMap):
            raise ValidationError(f"{lab_path} is not a label tensor")
        if (pred.height, pred.width) != (labels.height, labels.width):
            raise ValidationError(f"{pred_path} and {lab_path} disagree in shape")
        if classes is None:
            classes = pred.classes
            confusion = np.zeros((classes, classes), dtype=np.int64)
        elif pred.classes != classes:
            raise ValidationError("prediction files disagree in class count")
        lab = labels.labels.astype(np.int64)
        keep = lab != int(UNLABELED)
        if keep.any() and lab[keep].max() >= classes:
            raise ValidationError(
                f"{lab_path}: label {int(lab[keep].max())} out of range for "
                f"{classes} prediction classes"
            )
        hard = np.argmax(pred.probs, axis=2)
        pair = classes * lab[keep] + hard[keep]
        confusion += np.bincount(pair, minlength=classes * classes).reshape(classes, classes)

    tp = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - np.diag(confusion)
    iou = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
    doc = {
        "miou": float(np.nanmean(iou)) if np.isfinite(iou).any() else None,
        "per_class_iou": [None if not np.isfinite(v) else float(v) for v in iou],
    }
    if args.out:
        _atomic_json(args.out, doc)
        _write_run_manifest(
            Path(args.out).parent,
            "eval",
            {"pred": args.pred, "labels": args.labels},
            None,
            list(args.pred) + list(args.labels),
            [args.out],
        )
    else:
        json.dump(doc, sys.stdout, indent=2)
        print()
    return 0


# ---------------------------------------------------------------- bench

def _add_bench(sub):
    p = sub.add_parser("bench", help="compare strategies across budgets and seeds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategies", required=True, help="comma separated")
    p.add_argument("--budgets", default="2.2%", help="comma separated")
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma separated ints")
    p.add_argument("--mode", choices=[RA, PA], default=RA)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--pretrain-iters", type=int, default=150)
    p.add_argument("--source-free", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="comparison CSV path")


def _bench_cell(cell):
    manifest_path, strategy, budget, seed, base = cell
    config = LoopConfig(
        **{
            **base,
            "strategy": strategy,
            "budget": budget,
            "seed": seed,
        }
    )
    try:
        manifest = load_manifest(manifest_path)
        _, report, trace = run_active_loop(manifest, config, manifest_path=manifest_path)
        ious = [None if not np.isfinite(v) else float(v) for v in report.per_class_iou]
        return (strategy, budget, seed, "ok", report.miou,
                sum(trace.meta["spent_per_image"]), ious)
    except RipuError as exc:
        return (strategy, budget, seed, f"failed: {exc}", None, None, None)


def _cmd_bench(args):
    strategies = [s for s in args.strategies.split(",") if s]
    if not strategies:
        raise UsageError("bench needs at least one strategy")
    budgets = [b for b in args.budgets.split(",") if b]
    seeds = [int(s) for s in args.seeds.split(",")]
    manifest = load_manifest(args.manifest)  # validate before any work
    classes = manifest.classes

    base = dict(
        iterations=args.iters,
        rounds=args.rounds,
        mode=args.mode,
        k=args.k,
        lr=args.lr,
        pretrain_iters=args.pretrain_iters,
        source_free=args.source_free,
    )
    cells = [
        (args.manifest, strategy, budget, seed, base)
        for strategy in strategies
        for budget in budgets
        for seed in seeds
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_bench_cell, cells))
    else:
        results = [_bench_cell(cell) for cell in cells]

    header = ["strategy", "budget", "seed", "status", "miou", "spend"] + [
        f"iou_{c}" for c in range(classes)
    ]
    rows = []
    for strategy, budget, seed, status, miou, spend, ious in results:
        row = [strategy, budget, seed, status, _float(miou), spend if spend is not None else ""]
        row += ["" if ious is None or v is None else repr(v) for v in (ious or [None] * classes)]
        rows.append(row)

    summary = []
    for strategy in strategies:
        for budget in budgets:
            vals = [
                miou
                for s, b, _, status, miou, _, _ in results
                if s == strategy and b == budget and status == "ok" and miou is not None
            ]
            if vals:
                summary.append((strategy, budget, float(np.median(vals))))
    summary.sort(key=lambda t: -t[2])
    for strategy, budget, med in summary:
        rows.append([strategy, budget, "median", "summary", repr(med), ""] + [""] * classes)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, header, rows)
    _write_run_manifest(
        out.parent,
        "bench",
        {**base, "strategies": strategies, "budgets": budgets, "seeds": seeds},
        seeds[0] if seeds else None,
        [args.manifest],
        [out],
    )
    return 0


# ---------------------------------------------------------------- main

def build_parser():
    parser = argparse.ArgumentParser(
        prog="ripu",
        description="Region-impurity / prediction-uncertainty active learning tools",
    )
    parser.add_argument("--version", action="version", version=ripu.__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen(sub)
    _add_score(sub)
    _add_select(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_bench(sub)
    return parser


_DISPATCH = {
    "gen": _cmd_gen,
    "score": _cmd_score,
    "select": _cmd_select,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
}


def _manifest_argv(doc):
    """Reconstruct an argv list from a recorded run manifest."""
    command = doc["command"]
    config = doc["config"]
    argv = [command]

    def flag(name, value):
        if value is None:
            return []
        if isinstance(value, bool):
            return [f"--{name}"] if value else []
        if isinstance(value, (list, tuple)):
            return [f"--{name}", ",".join(str(v) for v in value)]
        return [f"--{name}", str(value)]

    if command == "gen":
        for key, value in config.items():
            argv += flag(key.replace("_", "-"), value)
        argv += flag("out-dir", doc["out_dir"])
    elif command == "score":
        argv += flag("pred", config["pred"]) + flag("mode", config["mode"])
        argv += flag("k", config["k"]) + flag("out-dir", doc["out_dir"])
    elif command == "select":
        for key in ("pred", "state", "labels", "mode", "strategy", "k", "budget", "rounds"):
            argv += flag(key, config[key])
        argv += flag("round", config["round"]) + flag("seed", doc["seed"])
        argv += flag("out-dir", doc["out_dir"])
    elif command == "train":
        rename = {"iterations": "iters"}
        skip = {"round_iters", "batch_size", "lr_power", "alpha1", "alpha2", "tau"}
        for key, value in config.items():
            if key in skip:
                continue
            argv += flag(rename.get(key, key.replace("_", "-")), value)
        argv += flag("alpha1", config["alpha1"]) + flag("alpha2", config["alpha2"])
        argv += flag("tau", config["tau"]) + flag("out-dir", doc["out_dir"])
    else:
        raise UsageError(f"cannot replay command {command!r}")
    return argv


def replay_manifest(path):
    """Re-run the command recorded in a run manifest; outputs are reproduced."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    doc.setdefault("out_dir", str(path.parent))
    return main(_manifest_argv(doc))


def main(argv=None):
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        log.info("running %s", args.command)
        return _DISPATCH[args.command](args)
    except RipuError as exc:
        print(f"error[E{exc.exit_code}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error[E4]: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
