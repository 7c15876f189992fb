"""Command-line driver: synth, preprocess, train, evaluate, explain, aggregate, report, timing.

Every stage reads and writes a run directory (``--workdir``)::

    events.csv labels.csv ground_truth.json feature_spec.json cohorts.json   synth
    stats.json splits.json matrices/<id>.{json,bin}                         preprocess
    model.{json,bin} train_log.csv                                           train
    auc.csv                                                                  evaluate
    attributions/<id>.<method>.{json,bin,timing.json}                        explain
    aggregates.json                                                          aggregate
    reports/*.csv reports/*.png                                              report
    timing.csv timing_summary.json timing.png                                timing

Logs go to stderr.  Exit status is 0 on success, 1 on a runtime failure and
2 on a usage error; failures print one ``error: <kind>: <message>`` line.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import aggregation as agg
from .archive import dump_json, load_json, read_matrix, write_matrix
from .attribution import METHODS, load_attributions, save_attribution
from .errors import ConfigurationError, DivergenceError, ShapeError, UndefinedMetricError
from .kshap import KshapConfig, explain_kshap
from .lbm import PRESETS, explain_lbm
from .metrics import REFERENCE_HOURS, evaluate_at_hours
from .model import ModelConfig, forward, init_model, load_model, save_model
from .pipeline import DtPatientMatrix, FeatureSpec, build_dataset, fit_normalization, \
    read_events_csv, write_events_csv
from .synth import SynthConfig, generate_cohort, split_cohort
from .timing import TimingRecord, plot_timing, timing_summary
from .train import DESK_TRAIN, train

logger = logging.getLogger("emr_attrib")

STAGES = ("synth", "split", "init", "train", "kshap")
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration


def stage_seeds(seed: int) -> dict[str, int]:
    """One independent 32-bit seed per pipeline stage, derived from ``seed``."""
    children = np.random.SeedSequence(seed).spawn(len(STAGES))
    return {s: int(c.generate_state(1)[0]) for s, c in zip(STAGES, children)}


def _overlay(base, section: dict, name: str):
    known = {f.name for f in fields(base)}
    unknown = set(section) - known
    if unknown:
        raise ConfigurationError(f"unknown {name} settings: {sorted(unknown)}")
    if "hidden_sizes" in section:
        section = {**section, "hidden_sizes": tuple(section["hidden_sizes"])}
    return replace(base, **section)


def load_overlay(path) -> dict:
    if path is None:
        return {}
    doc = load_json(path)
    allowed = {"synth", "model", "train", "lbm", "kshap"}
    if not isinstance(doc, dict) or set(doc) - allowed:
        raise ConfigurationError(f"config overlay sections must be among {sorted(allowed)}")
    return doc


def configs(args) -> dict:
    seeds = stage_seeds(args.seed)
    doc = load_overlay(args.config)
    synth = doc.get("synth", {})
    if "features" in synth:
        raise ConfigurationError("feature lists cannot be overridden from the overlay")
    return {
        "seeds": seeds,
        "synth": _overlay(SynthConfig(seed=seeds["synth"]), synth, "synth"),
        "train": _overlay(replace(DESK_TRAIN, seed=seeds["train"]), doc.get("train", {}), "train"),
        "model": doc.get("model", {}),
        "lbm": _overlay(PRESETS[getattr(args, "lbm_preset", "default") or "default"], doc.get("lbm", {}), "lbm"),
        "kshap": _overlay(KshapConfig(seed=seeds["kshap"]), doc.get("kshap", {}), "kshap"),
    }


# ---------------------------------------------------------------------------
# run-directory helpers


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing input {path}; run the earlier stage first")
    return path


def load_labels(path) -> dict[str, bool]:
    with open(_require(Path(path)), newline="") as fh:
        return {r["encounter_id"]: r["label"] == "1" for r in csv.DictReader(fh)}


def load_matrices(work: Path, ids) -> list[DtPatientMatrix]:
    out = []
    for e in ids:
        values, meta = read_matrix(_require(work / "matrices" / f"{e}.json"))
        out.append(DtPatientMatrix(e, values, meta["label"]))
    return out


def split_ids(work: Path, split: str) -> list[str]:
    splits = load_json(_require(work / "splits.json"))
    if split == "all":
        return sorted(e for s in SPLITS for e in splits[s])
    return list(splits[split])


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg) -> None:
    sc = cfg["synth"]
    if args.n_encounters:
        sc = replace(sc, n_encounters=args.n_encounters)
    table, labels, truth = generate_cohort(sc)
    work = args.workdir
    write_events_csv(work / "events.csv", table)
    with open(work / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["encounter_id", "label"])
        for e in sorted(labels):
            w.writerow([e, int(labels[e])])
    dump_json(work / "ground_truth.json", truth.to_json())
    sc.feature_spec().save(work / "feature_spec.json")
    dump_json(work / "cohorts.json", truth.cohorts)


def cmd_preprocess(args, cfg) -> None:
    work = args.workdir
    spec = FeatureSpec.load(_require(work / "feature_spec.json"))
    events = read_events_csv(_require(work / "events.csv"))
    labels = load_labels(work / "labels.csv")
    tr, va, te = split_cohort(list(labels), labels, seed=cfg["seeds"]["split"])
    dump_json(work / "splits.json", {"train": tr, "val": va, "test": te})
    stats = fit_normalization(events.select_encounters(tr), spec)
    stats.save(work / "stats.json")
    data = build_dataset(events, stats, spec, labels)
    (work / "matrices").mkdir(exist_ok=True)
    for e, d in data.items():
        write_matrix(work / "matrices" / e, d.values, spec.names, d.label, encounter_id=e)
    logger.info("preprocess: %d/%d/%d encounters, %d matrices", len(tr), len(va), len(te), len(data))


def cmd_train(args, cfg) -> None:
    work = args.workdir
    spec = FeatureSpec.load(_require(work / "feature_spec.json"))
    tcfg = cfg["train"]
    if args.epochs:
        tcfg = replace(tcfg, max_epochs=args.epochs)
    mcfg = _overlay(ModelConfig(len(spec), seed=cfg["seeds"]["init"]), cfg["model"], "model")
    params = init_model(mcfg)
    best, log = train(params, load_matrices(work, split_ids(work, "train")),
                      load_matrices(work, split_ids(work, "val")), tcfg)
    save_model(best, work / "model")
    with open(work / "train_log.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(log[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(log)
    logger.info("train: %s", best.meta)


def parse_hours(text: str) -> list[int]:
    try:
        hours = [int(h) for h in text.split(",") if h.strip()]
    except ValueError:
        raise UsageError(f"--hours expects comma-separated integers, got {text!r}")
    if not hours or 0 in hours:
        raise UsageError("--hours must be non-empty and exclude 0")
    return hours


def cmd_evaluate(args, cfg) -> None:
    work = args.workdir
    params = load_model(_require(work / "model.json"))
    rows = evaluate_at_hours(params, load_matrices(work, split_ids(work, args.split)), args.hours)
    with open(work / "auc.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour", "auc", "n_encounters"])
        for r in rows:
            w.writerow([r["hour"], f"{r['auc']:.6f}", r["n_encounters"]])
            logger.info("hour %4d  auc %.3f  n %d", r["hour"], r["auc"], r["n_encounters"])


_WORKER = {}


def _init_worker(model_path, names):
    _WORKER["params"] = load_model(model_path)
    _WORKER["names"] = names


def _explain_one(job):
    method, cfg, e, values, out_dir = job
    params = _WORKER["params"]
    if method == "lbm":
        attr = explain_lbm(params, values, cfg, e, _WORKER["names"])
    else:
        attr = explain_kshap(params, values, cfg, e, _WORKER["names"])
    save_attribution(attr, out_dir)
    return e, method, attr.timing


def worker_count(requested: int | None) -> int:
    return max(1, requested or os.cpu_count() or 1)


def cmd_explain(args, cfg) -> None:
    work = args.workdir
    spec = FeatureSpec.load(_require(work / "feature_spec.json"))
    model_path = _require(work / "model.json")
    ids = args.encounter or split_ids(work, args.split)
    methods = METHODS if args.method == "both" else (args.method,)
    out_dir = work / "attributions"
    out_dir.mkdir(exist_ok=True)
    data = load_matrices(work, ids)
    jobs = [(m, cfg[m], d.encounter_id, d.values, out_dir) for m in methods for d in data]
    n = worker_count(args.workers)
    if n == 1:
        _init_worker(model_path, spec.names)
        results = map(_explain_one, jobs)
    else:
        pool = ProcessPoolExecutor(n, initializer=_init_worker, initargs=(model_path, spec.names))
        results = pool.map(_explain_one, jobs, chunksize=4)
    unconverged = 0
    for e, m, timing in results:
        unconverged += not timing["converged"]
        logger.debug("%s %s %.2fs", e, m, timing["seconds"])
    if n > 1:
        pool.shutdown()
    logger.info("explain: %d jobs, %d not converged", len(jobs), unconverged)


def parse_window(text: str):
    try:
        e, a, b = text.rsplit(":", 2)
        return e, int(a), int(b)
    except ValueError:
        raise UsageError(f"--window expects ID:T_I:T_F, got {text!r}")


def cmd_aggregate(args, cfg) -> None:
    work = args.workdir
    spec = FeatureSpec.load(_require(work / "feature_spec.json"))
    cohorts = agg.load_cohorts(args.cohorts or _require(work / "cohorts.json"))
    doc = {"feature_order": list(spec.names), "population": {}, "cohort_average": {}, "raf": {}, "windows": {}}
    for m in METHODS:
        attrs = load_attributions(_require(work / "attributions"), m)
        if not attrs:
            logger.warning("no %s attributions; skipped", m)
            continue
        pop = agg.population_importance(list(attrs.values()))
        doc["population"][m] = {"values": pop.values.tolist(), "flagged": pop.flagged, "n": len(attrs)}
        for name, members in sorted(cohorts.items()):
            ins = [attrs[e] for e in sorted(attrs) if e in set(members)]
            outs = [attrs[e] for e in sorted(attrs) if e not in set(members)]
            if not ins or not outs:
                logger.warning("cohort %s has no explained members on one side; skipped", name)
                continue
            doc["cohort_average"].setdefault(name, {})[m] = agg.cohort_average(ins).values.tolist()
            try:
                raf = agg.relative_attribution(ins, outs)
            except UndefinedMetricError as exc:
                logger.warning("cohort %s (%s): %s", name, m, exc)
                continue
            doc["raf"].setdefault(name, {})[m] = {"values": raf.values.tolist(), **raf.sizes}
        for e, t_i, t_f in args.window or []:
            if e not in attrs:
                raise ConfigurationError(f"no {m} attribution for {e}")
            w = agg.window_average(attrs[e], t_i, t_f)
            doc["windows"].setdefault(f"{e}:{t_i}:{t_f}", {})[m] = {"values": w.values.tolist(), "flagged": w.flagged}
    dump_json(work / "aggregates.json", doc)
    logger.info("aggregate: population for %s, %d cohorts", sorted(doc["population"]), len(doc["raf"]))


def cmd_report(args, cfg) -> None:
    work = args.workdir
    spec = FeatureSpec.load(_require(work / "feature_spec.json"))
    doc = load_json(_require(work / "aggregates.json"))
    out = work / "reports"
    out.mkdir(exist_ok=True)
    names, kinds = spec.names, spec.kinds
    sections = [("population", {m: v["values"] for m, v in doc["population"].items()})]
    sections += [(f"raf_{c}", {m: v["values"] for m, v in by_m.items()}) for c, by_m in sorted(doc["raf"].items())]
    for stem, vectors in sections:
        if not vectors:
            continue
        reports = {m: agg.top_k_report(v, args.top_k, names, kinds, m) for m, v in vectors.items()}
        agg.write_report_csv(out / f"{stem}.csv", [r for rows in reports.values() for r in rows])
        union = agg.top_k_union(reports)
        with open(out / f"{stem}_union.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "kind"] + list(vectors))
            for f in union:
                j = names.index(f)
                w.writerow([f, kinds[j]] + [f"{vectors[m][j]:.10g}" for m in vectors])
        agg.plot_bars(out / f"{stem}.png", {m: np.asarray(v) for m, v in vectors.items()}, names, args.top_k,
                      stem.replace("_", " "))
    logger.info("report: %d tables in %s", len(sections), out)


def cmd_timing(args, cfg) -> None:
    work = args.workdir
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = set(methods) - {"predict", *METHODS}
    if bad:
        raise UsageError(f"unknown timing methods {sorted(bad)}")
    records = []
    if "predict" in methods:
        params = load_model(_require(work / "model.json"))
        for d in load_matrices(work, split_ids(work, args.split)):
            t0 = time.perf_counter()
            forward(params, d.values)
            records.append(TimingRecord(d.encounter_id, "predict", time.perf_counter() - t0,
                                        d.length_hours, d.values.shape[0]))
    for m in set(methods) & set(METHODS):
        for e, a in sorted(load_attributions(work / "attributions", m).items()):
            if a.timing:
                records.append(TimingRecord(e, m, a.timing["seconds"], a.timing["t_hours"],
                                            a.timing["n_features"], a.timing["converged"]))
    summary = timing_summary(records, methods)
    with open(work / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["encounter_id", "method", "seconds", "t_hours", "n_features", "converged"])
        for r in records:
            w.writerow([r.encounter_id, r.method, f"{r.seconds:.6f}", r.t_hours, r.n_features, int(r.converged)])
    dump_json(work / "timing_summary.json", summary)
    plot_timing(work / "timing.png", records, [m for m in methods if m in summary])
    for m, s in summary.items():
        logger.info("%-8s median %.4fs  IQR %.4fs  (n=%d)", m, s["median"], s["iqr"], s["n"])


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "evaluate": cmd_evaluate,
    "explain": cmd_explain, "aggregate": cmd_aggregate, "report": cmd_report, "timing": cmd_timing,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--workdir", type=Path, default=Path("run"), help="run directory (default: run)")
    common.add_argument("--seed", type=int, default=0, help="master seed, expanded per stage")
    common.add_argument("--config", type=Path, help="JSON overlay with synth/model/train/lbm/kshap sections")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="emr-attrib", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    s.add_argument("--n-encounters", type=int)

    sub.add_parser("preprocess", parents=[common], help="split, fit normalization, build dt-matrices")

    s = sub.add_parser("train", parents=[common], help="train the LSTM")
    s.add_argument("--epochs", type=int, help="override the epoch cap")

    s = sub.add_parser("evaluate", parents=[common], help="AUC at fixed hours")
    s.add_argument("--hours", type=parse_hours, default=list(REFERENCE_HOURS), help="comma-separated signed hours")
    s.add_argument("--split", choices=SPLITS + ("all",), default="test")

    s = sub.add_parser("explain", parents=[common], help="write attribution archives")
    s.add_argument("--method", choices=METHODS + ("both",), default="both")
    s.add_argument("--encounter", action="append", help="encounter id (repeatable); default: whole split")
    s.add_argument("--split", choices=SPLITS + ("all",), default="test")
    s.add_argument("--workers", type=int, help="worker processes (default: available cores)")
    s.add_argument("--lbm-preset", choices=sorted(PRESETS), default="default")

    s = sub.add_parser("aggregate", parents=[common], help="population, cohort and window summaries")
    s.add_argument("--cohorts", type=Path, help="JSON cohort -> encounter ids (default: run cohorts.json)")
    s.add_argument("--window", action="append", type=parse_window, metavar="ID:T_I:T_F")

    s = sub.add_parser("report", parents=[common], help="ranked CSV tables and bar charts")
    s.add_argument("--top-k", type=int, default=20)

    s = sub.add_parser("timing", parents=[common], help="per-encounter compute time summary")
    s.add_argument("--methods", default="predict,kshap,lbm")
    s.add_argument("--split", choices=SPLITS + ("all",), default="test")
    return p


def _fail(kind: str, msg: str, code: int) -> int:
    print(f"error: {kind}: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "top_k", 1) < 1:
            raise UsageError("--top-k must be >= 1")
        if getattr(args, "workers", None) is not None and args.workers < 1:
            raise UsageError("--workers must be >= 1")
    except UsageError as exc:
        return _fail("usage", exc, 2)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose + 1, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.workdir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, configs(args))
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except (ConfigurationError, ShapeError, UndefinedMetricError) as exc:
        return _fail(type(exc).__name__, exc, 1)
    except DivergenceError as exc:
        return _fail("DivergenceError", exc, 1)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        return _fail(type(exc).__name__, exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
