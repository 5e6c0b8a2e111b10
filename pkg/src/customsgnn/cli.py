"""Batch command-line interface.

Exit codes: 0 success, 2 usage or configuration error, 3 data or state
error, 4 internal invariant violation.
"""
from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .data import TEST, DataError, load_csv, write_csv
from .evaluation import EvalReport, evaluate, export_embeddings, inductive_eval, scored_frame, sweep_inspection, write_reports_csv
from .gnn import CheckpointError
from .graph import GraphError
from .synth import SynthConfig, generate
from .training import GRAPH_GRID, VARIANTS, GraphFCModel, PipelineError, TrainConfig, TrainingError, osr_block, prepare_dataset, run_baseline, run_pipeline

log = logging.getLogger("customsgnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _parse_value(text: str):
    return yaml.safe_load(text)


def load_config(path, section: str, overrides) -> tuple[dict, dict]:
    """``(section mapping with key=value overrides applied, whole document)``."""
    doc = {}
    if path is not None:
        if not os.path.exists(path):
            raise UsageError(f"config file not found: {path}")
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise UsageError(f"{path}: expected a mapping")
    values = dict(doc.get(section, {}) or {})
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        sect, _, name = key.rpartition(".")
        if sect and sect != section:
            doc.setdefault(sect, {})[name] = _parse_value(text)
            continue
        values[name] = _parse_value(text)
    return values, doc


def _require_file(path, what: str) -> None:
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _write_manifest(path: Path, command: str, argv, config: dict, seed, inputs, outputs, started: float) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config": config,
        "config_digest": hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16],
        "seed": seed,
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": {str(p): file_digest(p) for p in outputs if os.path.isfile(p)},
        "started": dt.datetime.fromtimestamp(started, dt.timezone.utc).isoformat(),
        "finished": dt.datetime.now(dt.timezone.utc).isoformat(),
        "runtime_seconds": round(time.time() - started, 3),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _train_config(args) -> tuple[TrainConfig, dict]:
    values, _ = load_config(args.config, "train", args.set)
    if getattr(args, "variant", None):
        values["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    try:
        cfg = TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from exc
    return cfg, values


def _load_prepared(cfg: TrainConfig, path) -> tuple:
    _require_file(path, "data file")
    d = load_csv(path)
    if cfg.test_from is None or cfg.inspection_rate is None:
        raise UsageError("training config needs test_from and inspection_rate")
    return prepare_dataset(cfg, d)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    started = time.time()
    values, _ = load_config(args.config, "synth", args.set)
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        cfg = SynthConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad synth config: {exc}") from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    d = generate(cfg)
    write_csv(d, out)
    log.info("wrote %d transactions to %s", len(d), out)
    _write_manifest(Path(str(out) + ".manifest.json"), "synth", args.argv, values, cfg.seed, [], [out], started)
    return EXIT_OK


def _save_run(out: Path, params, report: EvalReport) -> list:
    out.mkdir(parents=True, exist_ok=True)
    ckpt, rep_json, rep_csv, curves = out / "checkpoint.bin", out / "report.json", out / "report.csv", out / "loss_curves.csv"
    model = GraphFCModel(params)
    model.save(ckpt)
    rep_json.write_text(report.to_json() + "\n")
    write_reports_csv([report], rep_csv)
    hist = params.meta.get("history", {})
    rows = []
    for stage in ("pretrain_loss", "finetune_loss", "valid_rec5"):
        for epoch, value in enumerate(hist.get(stage, []), start=1):
            rows.append({"series": stage, "epoch": epoch, "value": repr(float(value))})
    pd.DataFrame(rows, columns=["series", "epoch", "value"]).to_csv(curves, index=False)
    return [ckpt, rep_json, rep_csv, curves]


def cmd_train(args) -> int:
    started = time.time()
    cfg, values = _train_config(args)
    d = _load_prepared(cfg, args.data)
    params, report = run_pipeline(cfg, d)
    out = Path(args.out_dir)
    outputs = _save_run(out, params, report)
    log.info("%s: Rec@5%% %.4f", report.variant, report.metrics.get(0.05, {}).get("recall", float("nan")))
    _write_manifest(out / "manifest.json", "train", args.argv, cfg.to_dict(), cfg.seed, [args.data], outputs, started)
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.data, "data file")
    model = GraphFCModel.load(args.checkpoint)
    cfg = model.config
    d = prepare_dataset(cfg, load_csv(args.data))
    percents = [p / 100.0 for p in args.n] if args.n else list(cfg.eval_percents)
    key = args.ranking_key or cfg.ranking_key
    if args.unseen:
        report = inductive_eval(model, d, args.unseen, percents, key, seed=cfg.seed)
    else:
        test = d.split == TEST
        cls, rev = model.score(d, test)
        report = evaluate(scored_frame(d.where(test), cls, rev), percents, key, seed=cfg.seed)
        report.osr = osr_block(d)
    report.config_digest = cfg.digest()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    csv_path = out.with_suffix(".csv")
    write_reports_csv([report], csv_path)
    _write_manifest(Path(str(out) + ".manifest.json"), "eval", args.argv, cfg.to_dict(), cfg.seed, [args.checkpoint, args.data], [out, csv_path], started)
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.time()
    cfg, _ = _train_config(args)
    grid, _ = load_config(args.config, "sweep", None)
    rates = [r / 100.0 for r in args.rates] if args.rates else [float(r) for r in grid.get("rates", [0.01, 0.02, 0.05, 0.1, 0.2])]
    seeds = args.seeds if args.seeds else [int(s) for s in grid.get("seeds", [cfg.seed])]
    if not rates or not seeds:
        raise UsageError("sweep grid is empty")
    _require_file(args.data, "data file")
    if cfg.test_from is None:
        raise UsageError("training config needs test_from")
    d = prepare_dataset(cfg.replace(inspection_rate=None), load_csv(args.data))
    table = sweep_inspection(cfg, d, rates, seeds)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "sweep.csv", index=False)
    _write_manifest(out / "manifest.json", "sweep", args.argv, {**cfg.to_dict(), "rates": rates, "seeds": seeds}, cfg.seed, [args.data], [out / "sweep.csv"], started)
    return EXIT_OK if (table["error"] == "").all() else EXIT_INTERNAL


def ablation_runs(variants, graph_grid: bool) -> list[dict]:
    """Config changes for each requested run, in a fixed order."""
    runs = []
    if graph_grid:
        runs += [{"pretrain_graph": q, "finetune_graph": f} for q, f in GRAPH_GRID]
    for v in variants:
        if v == "gbdt":
            runs.append({"baseline": True})
        elif v in VARIANTS:
            runs.append({"variant": v})
        else:
            raise UsageError(f"unknown variant {v!r}")
    return runs


def cmd_ablate(args) -> int:
    started = time.time()
    cfg, _ = _train_config(args)
    grid, _ = load_config(args.config, "ablate", None)
    variants = args.variants if args.variants is not None else grid.get("variants", [])
    graph_grid = args.graph_grid or bool(grid.get("graph_grid", False))
    runs = ablation_runs(variants, graph_grid)
    if not runs:
        raise UsageError("ablation grid is empty")
    d = _load_prepared(cfg, args.data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports, outputs = [], []
    for i, change in enumerate(runs):
        if change.get("baseline"):
            rep = run_baseline(cfg, d)
        else:
            run_cfg = cfg.replace(**change)
            params, rep = run_pipeline(run_cfg, d)
            outputs += _save_run(out / f"run{i:02d}_{rep.variant.replace('[', '_').replace(']', '').replace(',', '_').replace('=', '-')}", params, rep)
        reports.append(rep)
        log.info("run %d/%d %s: Rec@5%% %.4f", i + 1, len(runs), rep.variant, rep.metrics.get(0.05, {}).get("recall", float("nan")))
    write_reports_csv(reports, out / "reports.csv")
    (out / "reports.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n")
    outputs += [out / "reports.csv", out / "reports.json"]
    _write_manifest(out / "manifest.json", "ablate", args.argv, {**cfg.to_dict(), "runs": runs}, cfg.seed, [args.data], outputs, started)
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    started = time.time()
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.data, "data file")
    model = GraphFCModel.load(args.checkpoint)
    d = prepare_dataset(model.config, load_csv(args.data))
    rows = np.flatnonzero(d.split == args.split) if args.split != "all" else None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_embeddings(model, d, rows, out)
    _write_manifest(Path(str(out) + ".manifest.json"), "export-embeddings", args.argv, model.config.to_dict(), model.config.seed, [args.checkpoint, args.data], [out], started)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="customsgnn", description="Customs fraud detection on transaction graphs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable)")
        if data:
            sp.add_argument("--data", required=True, help="transactions CSV")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    common(s, data=False)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train and evaluate one model")
    common(t)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--seed", type=int)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--n", type=float, nargs="+", help="inspection percentages, e.g. 1 5")
    e.add_argument("--ranking-key", choices=("cls", "rev", "combined"))
    e.add_argument("--unseen", choices=("importer_id", "hs_code"), help="restrict to test rows with an unseen key")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep", help="inspection-rate sweep")
    common(w)
    w.add_argument("--rates", type=float, nargs="+", help="inspection rates in percent")
    w.add_argument("--seeds", type=int, nargs="+")
    w.add_argument("--seed", type=int)
    w.add_argument("--out-dir", required=True)
    w.set_defaults(func=cmd_sweep)

    a = sub.add_parser("ablate", help="ablation variants and graph-variant grid")
    common(a)
    a.add_argument("--variants", nargs="*", help=f"any of {', '.join(VARIANTS)}, gbdt")
    a.add_argument("--graph-grid", action="store_true", help="pretrain/finetune graph combinations")
    a.add_argument("--seed", type=int)
    a.add_argument("--out-dir", required=True)
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-embeddings", help="write final-layer transaction embeddings")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--split", choices=("train", "valid", "test", "all"), default="test")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_embeddings)
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, PipelineError) and exc.__cause__ is not None:
        return _exit_code(exc.__cause__)
    if isinstance(exc, (UsageError, yaml.YAMLError)):
        return EXIT_USAGE
    if isinstance(exc, (DataError, CheckpointError, GraphError)):
        return EXIT_DATA
    return EXIT_INTERNAL


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrainingError, AssertionError) as exc:
        print(f"error: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        if code == EXIT_INTERNAL:
            log.exception("unexpected failure")
        return code


if __name__ == "__main__":
    sys.exit(main())
