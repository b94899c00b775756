"""Command-line entry point: ``cirdg <command> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from .cir import MaskPolicy
from .data import SplitSpec, SyntheticSpec
from .train import METHODS, TrainConfig

logger = logging.getLogger("cirdg")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _csv_list(text: str, cast=str) -> list:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise UsageError("empty value list")
    try:
        return [cast(t) for t in items]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    spec_kwargs = {}
    if args.spec:
        spec_kwargs.update(json.loads(Path(args.spec).read_text()))
    for f in fields(SyntheticSpec):
        val = getattr(args, f.name, None)
        if val is not None:
            spec_kwargs[f.name] = val
    try:
        spec = SyntheticSpec(**spec_kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from None
    out = Path(args.out)
    ds = data_mod.generate_synthetic(spec)
    data_mod.write_feature_store(ds, out)
    (out / "manifest.json").write_text(json.dumps({"synthetic_spec": spec.to_dict(), "rows": len(ds)}, indent=2, sort_keys=True))
    print(f"wrote {len(ds)} clips to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- split


def cmd_split(args) -> int:
    ds = data_mod.read_feature_store(args.data)
    try:
        spec = SplitSpec(args.scenario, args.location, args.mode, args.test_fraction, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    train_ids, test_ids = data_mod.make_split(ds, spec)
    data_mod.write_split_manifest(args.out, spec, train_ids, test_ids)
    print(f"{spec.name}: {train_ids.size} train / {test_ids.size} test -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- train


TRAIN_FLAGS = {
    "method": "method",
    "lr": "lr",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lambda1": "lambda1",
    "lambda2": "lambda2",
    "mask_policy": "mask_policy",
    "seed": "seed",
    "hidden_dim": "hidden_dim",
    "embed_dim": "embed_dim",
    "qk_dim": "qk_dim",
    "mixup_alpha": "mixup_alpha",
    "gamma1": "gamma1",
    "gamma2": "gamma2",
}


def _train_config(args, base: dict | None = None) -> TrainConfig:
    d = dict(base or {})
    for flag, key in TRAIN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            d[key] = val
    if getattr(args, "lr_decay_epochs", None) is not None:
        d["lr_decay_epochs"] = _csv_list(args.lr_decay_epochs, int) if args.lr_decay_epochs else []
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def _load_run_inputs(args):
    base: dict = {}
    data_path, split_path = args.data, args.split
    if getattr(args, "config", None):
        doc = json.loads(Path(args.config).read_text())
        base = doc.get("train", {})
        data_path = data_path or doc.get("data")
        split_path = split_path or doc.get("split_file")
    if not data_path or not split_path:
        raise UsageError("--data and --split are required (or --config from a previous run)")
    return base, data_path, split_path


def _run_one(config: TrainConfig, data_path: str, split_path: str, out: str) -> dict:
    from .train import train_run

    ds = data_mod.read_feature_store(data_path)
    spec, train_ids, test_ids, _ = data_mod.read_split_manifest(split_path)
    extra = {"data": str(data_path), "split_file": str(split_path), "split": spec.to_dict()}
    _, report = train_run(config, ds, (train_ids, test_ids), run_dir=out, extra_config=extra)
    acc = report.per_split_top1.pop("custom")
    report.per_split_top1[spec.name] = acc
    report.per_split_best_val_top1[spec.name] = report.per_split_best_val_top1.pop("custom")
    report.loss_curves[spec.name] = report.loss_curves.pop("custom")
    report.val_curves[spec.name] = report.val_curves.pop("custom")
    report.write_json(Path(out) / "report.json")
    from .evaluate import report_rows, write_summary_csv

    write_summary_csv(Path(out) / "summary.csv", report_rows(report))
    return {"split": spec.name, "method": config.method, "seed": config.seed, "top1": repr(acc)}


def cmd_train(args) -> int:
    base, data_path, split_path = _load_run_inputs(args)
    config = _train_config(args, base)
    row = _run_one(config, data_path, split_path, args.out)
    print(f"{row['split']} {row['method']} seed={row['seed']} top1={float(row['top1']):.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- sweep


SWEEPABLE = {"batch_size": int, "seed": int, "lambda1": float, "lambda2": float, "lr": float, "mask_policy": str, "method": str}


def _sweep_job(job):
    config, data_path, split_path, out = job
    try:
        return _run_one(config, data_path, split_path, out), None
    except Exception as exc:  # one failed run must not stop the sweep
        return None, f"{out}: {exc}"


def cmd_sweep(args) -> int:
    if args.param not in SWEEPABLE:
        raise UsageError(f"--param must be one of {sorted(SWEEPABLE)}")
    values = _csv_list(args.values, SWEEPABLE[args.param])
    base, data_path, split_path = _load_run_inputs(args)
    base_cfg = _train_config(args, base).to_dict()
    jobs = []
    for val in values:
        cfg = dict(base_cfg, **{args.param: val})
        if args.param == "method" and args.lr is None and "lr" not in base:
            del cfg["lr"]  # each method falls back to its own default lr
        try:
            config = TrainConfig.from_dict(cfg)
        except ValueError as exc:
            raise UsageError(f"{args.param}={val}: {exc}") from None
        jobs.append((config, data_path, split_path, str(Path(args.out) / f"{args.param}={val}")))
    Path(args.out).mkdir(parents=True, exist_ok=True)
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    rows, failures = [], 0
    for val, (row, err) in zip(values, results):
        if err is not None:
            failures += 1
            logger.error("sweep run failed: %s", err)
            continue
        rows.append(dict(row, param=args.param, value=val))
    from .evaluate import write_summary_csv

    write_summary_csv(Path(args.out) / "summary.csv", rows, extra_fields=("param", "value"))
    print(f"{len(rows)} runs ok, {failures} failed -> {Path(args.out) / 'summary.csv'}")
    return EXIT_RUNTIME if failures and not rows else EXIT_OK


# ---------------------------------------------------------------- eval / analyze


def cmd_eval(args) -> int:
    from .evaluate import RunReport, report_rows, top1, write_summary_csv
    from .train import load_checkpoint

    ds = data_mod.read_feature_store(args.data)
    spec, _, test_ids, _ = data_mod.read_split_manifest(args.split)
    state = load_checkpoint(args.checkpoint)
    method, seed = args.method, args.seed
    run_cfg = Path(args.checkpoint).with_name("config.json")
    if run_cfg.exists():
        train_doc = json.loads(run_cfg.read_text()).get("train", {})
        method = method or train_doc.get("method")
        seed = train_doc.get("seed", 0) if seed is None else seed
    report = RunReport(method=method or "unknown", seed=0 if seed is None else seed)
    report.per_split_top1[spec.name] = top1(state.model, ds, test_ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "report.json")
    write_summary_csv(out / "summary.csv", report_rows(report))
    print(f"{spec.name} top1={report.per_split_top1[spec.name]:.4f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    from .evaluate import attention_report, drop_recovery, topk_support, write_attention_csv
    from .train import load_checkpoint

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.drop_recovery:
        parts = [p.strip() for p in args.drop_recovery.split(",")]
        if len(parts) != 5:
            raise UsageError("--drop-recovery takes five comma-separated accuracies (use '-' for a missing one)")
        try:
            accs = [None if p in ("-", "") else float(p) for p in parts]
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if None in (accs[0], accs[1], accs[2], accs[4]):
            raise UsageError("only the union accuracy may be missing")
        dr = drop_recovery(*accs)
        (out / "drop_recovery.json").write_text(json.dumps(dr.to_dict(), indent=2))
        print(json.dumps(dr.to_dict()))
        return EXIT_OK
    if not (args.data and args.split and args.checkpoint):
        raise UsageError("--data, --split and --checkpoint are required for attention analysis")
    ds = data_mod.read_feature_store(args.data)
    _, train_ids, _, _ = data_mod.read_split_manifest(args.split)
    model = load_checkpoint(args.checkpoint).model
    stats = attention_report(model, ds, train_ids, args.num_batches, args.seed, args.batch_size)
    write_attention_csv(out / "attention.csv", stats)
    doc = {"attention": stats.to_dict()}
    if args.topk:
        batch = next(data_mod.batch_iter(train_ids, args.batch_size, args.seed, 0))
        query = int(batch[0]) if args.query is None else args.query
        if query not in batch:
            batch = np.concatenate([[query], batch[:-1]])
        picked, residual = topk_support(model, ds, query, batch, args.topk)
        doc["topk"] = {
            "query": ds.clip_id[query],
            "supports": [{"clip_id": ds.clip_id[i], "id": i, "weight": w} for i, w in picked],
            "residual": residual,
        }
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(f"SS={stats.ss:.3f} OS={stats.os:.3f} SL={stats.sl:.3f} OL={stats.ol:.3f} over {stats.batches} batches")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck


def cmd_gradcheck(args) -> int:
    from .checks import run_gradchecks

    results = run_gradchecks(seed=args.seed)
    worst = 0.0
    for name, err in results.items():
        print(f"{name:<28s} {err:.3e}")
        worst = max(worst, err)
    ok = worst < args.tol
    print(f"max relative error {worst:.3e} ({'ok' if ok else 'FAILED'}, tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


# ---------------------------------------------------------------- parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="feature-store directory")
    p.add_argument("--split", help="split manifest written by `cirdg split`")
    p.add_argument("--config", help="config.json of an earlier run to start from")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr-decay-epochs", help="comma list, e.g. 30,40")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--mask-policy", help="permissive, or e.g. no-same-scenario,no-other-location")
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--qk-dim", type=int)
    p.add_argument("--mixup-alpha", type=float)
    p.add_argument("--gamma1", type=float)
    p.add_argument("--gamma2", type=float)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cirdg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic scenario x location feature store")
    g.add_argument("--spec", help="JSON file with SyntheticSpec fields")
    for f in fields(SyntheticSpec):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(f.default))
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("split", help="write a held-out (scenario, location) split manifest")
    s.add_argument("--data", required=True)
    s.add_argument("--scenario", type=int, required=True)
    s.add_argument("--location", type=int, required=True)
    s.add_argument("--mode", default="exclude_both", choices=data_mod.SPLIT_MODES)
    s.add_argument("--test-fraction", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train one method on one split")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    w = sub.add_parser("sweep", help="train one run per value of a parameter")
    _add_train_flags(w)
    w.add_argument("--param", required=True)
    w.add_argument("--values", required=True)
    w.add_argument("--jobs", type=int, default=1)
    w.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval", help="top-1 accuracy of a checkpoint on a split's test set")
    e.add_argument("--data", required=True)
    e.add_argument("--split", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--method", help="default: read from the run's config.json")
    e.add_argument("--seed", type=int, help="default: read from the run's config.json")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="attention composition, top-k supports, drop recovery")
    a.add_argument("--data")
    a.add_argument("--split")
    a.add_argument("--checkpoint")
    a.add_argument("--num-batches", type=int, help="default: one pass over the training split")
    a.add_argument("--batch-size", type=int, default=128)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--topk", type=int, default=0)
    a.add_argument("--query", type=int)
    a.add_argument("--drop-recovery", help="exclude_both,with_scenario,with_location,with_union,with_pair")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable primitive")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-5)
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage and 0 after --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cirdg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
