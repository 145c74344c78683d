"""Command-line entry point: ``atdfuse {train,eval,ablate,gradcheck,params}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import kernels
from .config import ConfigError, RunConfig
from .data import SchemaError, load_dataset
from .fusion import FUSION_VARIANTS, param_count
from .model import build_model
from .tensor import make_rng
from .train import Checkpoint, TrainingDiverged, evaluate, load_model, train_run

log = logging.getLogger("atdfuse")

TASK_ALIASES = {
    "synthetic-xor": "xor_classification",
    "synthetic-product": "product_regression",
}


class UsageError(Exception):
    pass


# -- config plumbing -------------------------------------------------------------
def _parse_set(items):
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_config(args):
    """Config file (or defaults) with CLI overrides applied."""
    if getattr(args, "config", None):
        if not os.path.isfile(args.config):
            raise UsageError(f"config not found: {args.config}")
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig()
    overrides = _parse_set(getattr(args, "set", None))
    for flag, key in (("seed", "train.seed"), ("out", "train.out"), ("fusion", "model.fusion"),
                      ("modality", "model.modality"), ("epochs", "train.epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    task = getattr(args, "task", None)
    if task is not None:
        overrides["data.kind"] = "synthetic"
        overrides["data.task"] = TASK_ALIASES.get(task, task)
    return cfg.with_overrides(overrides)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def _table(headers, rows):
    widths = [max(len(str(h)), *(len(_fmt(r[i])) for r in rows)) for i, h in enumerate(headers)]
    lines = ["  ".join(str(h).ljust(w) for h, w in zip(headers, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(_fmt(v).ljust(w) for v, w in zip(r, widths)) for r in rows]
    return "\n".join(lines)


# -- commands ------------------------------------------------------------------------
def cmd_train(args):
    cfg = resolve_config(args)
    out = cfg.train.out
    os.makedirs(out, exist_ok=True)
    chash = cfg.hash()
    with open(os.path.join(out, "config.ini"), "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash = {chash}\n")
        fh.write(cfg.to_ini())

    metrics_path = os.path.join(out, "metrics.jsonl")
    with open(metrics_path, "w", encoding="utf-8") as fh:
        def on_epoch(epoch, records):
            for split, metric, value in records:
                fh.write(json.dumps({"epoch": epoch, "split": split, "metric": metric,
                                     "value": value, "config_hash": chash}) + "\n")
            fh.flush()
            summary = ", ".join(f"{s}/{m}={v:.4g}" for s, m, v in records)
            log.info("epoch %d: %s", epoch, summary)

        result = train_run(cfg, on_epoch=on_epoch)

    result.final.save(os.path.join(out, "checkpoint.npz"))
    result.best.save(os.path.join(out, "best.npz"))
    report = evaluate(result.best, result.dataset, result.splits.test) if len(result.splits.test) else {}
    summary = {
        "config_hash": chash,
        "epochs": cfg.train.epochs,
        "best_epoch": result.best_epoch,
        "initial_train_loss": result.initial_train_loss,
        "test": report,
        "kernel_backend": kernels.BACKEND,
    }
    _write_json(os.path.join(out, "summary.json"), summary)
    print(f"config_hash {chash}  best_epoch {result.best_epoch}  artifacts in {out}")
    if report:
        print(_table(["metric", "test"], [(k, v) for k, v in report.items() if isinstance(v, float)]))
    return 0


def cmd_eval(args):
    if not os.path.isfile(args.checkpoint):
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = ckpt.config
    ds, splits = load_dataset(cfg.data, cfg.train.seed)
    meta = ckpt.meta
    if (ds.schema1, ds.schema2, ds.out_dim) != (meta["schema1"], meta["schema2"], meta["out_dim"]):
        raise UsageError("checkpoint does not match the dataset schema")
    report = evaluate(load_model(ckpt), ds, splits.get(args.split))
    payload = {"config_hash": ckpt.config_hash, "split": args.split, "metrics": report}
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)),
                                   f"eval_{args.split}.json")
    _write_json(out, payload)
    print(_table(["metric", args.split], [(k, v) for k, v in report.items() if isinstance(v, float)]))
    return 0


def _ablation_cell(cfg_dict):
    cfg = RunConfig.from_dict(cfg_dict)
    try:
        result = train_run(cfg)
        report = evaluate(result.best, result.dataset, result.splits.test, retrieval=False)
        return {"config_hash": cfg.hash(), "metrics": report}
    except Exception as exc:  # a failed cell is recorded, the sweep goes on
        return {"config_hash": cfg.hash(), "error": f"{type(exc).__name__}: {exc}"}


def ablation_cells(cfg, variants, modalities, seeds):
    """(row key, cell config) pairs; unimodal rows ignore the fusion axis."""
    rows = []
    for modality in modalities:
        row_variants = variants if modality == "both" else ["none"]
        for variant in row_variants:
            overrides = {"model.modality": modality}
            if variant != "none":
                overrides["model.fusion"] = variant
            cells = [cfg.with_overrides({**overrides, "train.seed": s}) for s in seeds]
            rows.append(((variant, modality), cells))
    return rows


def run_ablation(cfg, variants, modalities, seeds, jobs=1):
    plan = ablation_cells(cfg, variants, modalities, seeds)
    flat = [c.to_dict() for _, cells in plan for c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_ablation_cell, flat))
    else:
        results = [_ablation_cell(c) for c in flat]

    rows, k = [], 0
    for (variant, modality), cells in plan:
        cell_results = results[k:k + len(cells)]
        k += len(cells)
        metrics = {}
        for r in cell_results:
            for name, value in r.get("metrics", {}).items():
                if isinstance(value, float):
                    metrics.setdefault(name, []).append(value)
        rows.append({
            "fusion": variant,
            "modality": modality,
            "seeds": [c.train.seed for c in cells],
            "config_hash": cells[0].hash(),
            "config_hashes": [r["config_hash"] for r in cell_results],
            "errors": [r["error"] for r in cell_results if "error" in r],
            "metrics": {name: {"mean": float(np.mean(v)), "std": float(np.std(v)), "values": v}
                        for name, v in metrics.items()},
        })
    return rows


def cmd_ablate(args):
    cfg = resolve_config(args)
    variants = args.variants.split(",")
    for v in variants:
        if v not in FUSION_VARIANTS:
            raise UsageError(f"unknown fusion variant {v!r}")
    modalities = args.modalities.split(",")
    for m in modalities:
        if m not in ("both", "1", "2"):
            raise UsageError(f"unknown modality {m!r}")
    seeds = ([int(s) for s in args.seed_list.split(",")] if args.seed_list
             else list(range(cfg.train.seed, cfg.train.seed + args.seeds)))
    rows = run_ablation(cfg, variants, modalities, seeds, jobs=args.jobs)

    primary = "accuracy" if cfg.data.kind == "beats_csv" or (
        cfg.data.kind == "synthetic" and cfg.data.task == "xor_classification") else "mse"
    table_rows = []
    for r in rows:
        m = r["metrics"].get(primary)
        cell = f"{m['mean']:.4f} ± {m['std']:.4f}" if m else "failed"
        table_rows.append((r["fusion"], r["modality"], cell, len(r["seeds"]), len(r["errors"]),
                           r["config_hash"]))
    print(_table(["fusion", "modality", primary, "seeds", "failures", "config_hash"], table_rows))
    os.makedirs(cfg.train.out, exist_ok=True)
    _write_json(os.path.join(cfg.train.out, "ablation.json"),
                {"config_hash": cfg.hash(), "primary_metric": primary, "rows": rows})
    return 1 if any(r["errors"] for r in rows) else 0


def cmd_gradcheck(args):
    from .checks import REGISTRY, run_all

    names = args.only.split(",") if args.only else None
    if names:
        unknown = [n for n in names if n not in REGISTRY]
        if unknown:
            raise UsageError(f"unknown check(s) {unknown}")
    results = run_all(seed=args.seed or 0, h=args.h, tol=args.tol, names=names)
    rows = [(name, "PASS" if r.passed else "FAIL", r.worst, sum(r.coords_checked))
            for name, r in results.items()]
    print(_table(["check", "result", "max_rel_error", "coords"], rows))
    failed = [name for name, r in results.items() if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed at tol {args.tol:g}, h {args.h:g}")
    return 1 if failed else 0


def params_table(cfg, variants=FUSION_VARIANTS):
    """Per-component parameter counts for each fusion variant at ``cfg``."""
    ds, _ = load_dataset(cfg.data, cfg.train.seed)
    counts = {}
    for v in variants:
        mcfg = cfg.with_overrides({"model.fusion": v}).model
        counts[v] = param_count(build_model(mcfg, ds, make_rng(0)))
    return counts


def cmd_params(args):
    cfg = resolve_config(args)
    variants = args.variants.split(",") if args.variants else list(FUSION_VARIANTS)
    counts = params_table(cfg, variants)
    components = []
    for c in counts.values():
        for k in c:
            if k != "total" and k not in components:
                components.append(k)
    rows = [(comp, *(counts[v].get(comp, 0) for v in variants)) for comp in components]
    rows.append(("fusion-only", *(counts[v].get("fusion", 0) for v in variants)))
    rows.append(("total", *(counts[v]["total"] for v in variants)))
    print(_table(["component", *variants], rows))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "params.json"),
                    {"config_hash": cfg.hash(), "counts": counts})
    return 0


# -- argument parsing -----------------------------------------------------------------
def _common(p, with_out=True):
    p.add_argument("--config", help="INI config file; defaults apply when omitted")
    p.add_argument("--seed", type=int)
    if with_out:
        p.add_argument("--out", help="output directory")
    p.add_argument("--fusion", choices=FUSION_VARIANTS)
    p.add_argument("--modality", choices=("both", "1", "2"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--task", choices=sorted(TASK_ALIASES),
                   help="shortcut for a synthetic dataset")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. --set model.d_model=16")


def build_parser():
    parser = argparse.ArgumentParser(prog="atdfuse", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + metrics log")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare fusion variants and unimodal baselines")
    _common(p)
    p.add_argument("--variants", default=",".join(FUSION_VARIANTS))
    p.add_argument("--modalities", default="both", help="comma list from both,1,2")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--seed-list", help="explicit comma-separated seeds")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--only", help="comma-separated subset of check names")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts per component and fusion variant")
    _common(p)
    p.add_argument("--variants", help="comma list; default all variants")
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SchemaError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
