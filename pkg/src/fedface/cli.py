"""Command-line front end: ``partition -> train -> evaluate -> report``.

Each stage reads the previous stage's files, so one stored partition can
serve every algorithm being compared.  Failures print one JSON object on
stderr (``{"error": category, "message": ..., "field": ...}``) and exit
nonzero.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import CONFIG_SCHEMA, ExperimentConfig, config_hash
from .errors import ConfigError, FedFaceError, OverwriteError, PathError, ReportError
from .partitions import skew_summary
from .storage import (
    RUN_SCHEMA,
    atomic_write_text,
    file_ref,
    load_history,
    load_manifest,
    load_run_report,
    metrics_rows,
    read_json,
    resolve_ref,
    run_report_to_dict,
    save_history,
    save_manifest,
    save_table,
    sha256_file,
    write_json,
    write_rows_csv,
)

log = logging.getLogger("fedface")

EXIT_CODES = {"config": 2, "path": 3, "overwrite": 4, "report": 5}
METRICS_HEADER = ("round", "client", "metric", "value")


def _load_config(args):
    if args.config:
        cfg = ExperimentConfig.load(args.config, args.profile)
    else:
        cfg = ExperimentConfig.from_dict({}, args.profile)
    overrides = {}
    if getattr(args, "strict", None) is not None:
        overrides["strict"] = args.strict
    if getattr(args, "seed", None) is not None:
        overrides.update(seed=args.seed, num_seeds=1)
    return cfg.with_overrides(**overrides) if overrides else cfg


def _out_dir(args, cfg):
    return Path(args.out) if args.out else cfg.output_dir


def group_hash(resolved):
    """Hash of a resolved config with the seed fields left out, so every
    seed of a sweep shares one run directory."""
    r = copy.deepcopy(resolved)
    r.pop("seed", None)
    r.pop("num_seeds", None)
    return config_hash(r)


# --------------------------------------------------------------------------
# subcommands


def cmd_partition(args):
    cfg = _load_config(args)
    out = Path(args.out) if args.out else cfg.output_dir / "partition"
    manifest_path = out / "manifest.json"
    if manifest_path.exists() and not args.force:
        raise OverwriteError(f"{manifest_path} exists (use --force to overwrite)")
    table = pipeline.load_dataset(cfg)
    manifest = pipeline.make_partition(cfg, table)
    if cfg.table_path is None:
        dataset_path = save_table(out / "dataset.csv", table)
    else:
        dataset_path = cfg.table_path
    summary = skew_summary(manifest)
    save_manifest(manifest_path, manifest, dataset_path, summary)
    write_json(out / "skew.json", summary)
    print(manifest_path)
    return 0


def _run_dirs(cfg, out):
    resolved = cfg.resolved()
    base = out / "runs" / f"{cfg.run_label()}-{group_hash(resolved)[:8]}"
    return {seed: base / f"seed_{seed:04d}" for seed in cfg.seeds}


def cmd_train(args):
    cfg = _load_config(args)
    manifest_path = Path(args.manifest)
    manifest, table = load_manifest(manifest_path)
    if manifest.num_clients != cfg.raw["partition"]["num_clients"]:
        raise ConfigError(
            f"manifest has {manifest.num_clients} clients, config expects "
            f"{cfg.raw['partition']['num_clients']}", "partition.num_clients")
    dirs = _run_dirs(cfg, _out_dir(args, cfg))
    taken = [d for d in dirs.values() if (d / "run.json").exists()]
    if taken and not args.force:
        raise OverwriteError(f"{taken[0]} already holds a run (use --force to overwrite)")

    resolved = cfg.resolved()
    for seed, run_dir in dirs.items():
        history, duration = pipeline.train(cfg, manifest, table, seed)
        history_path = save_history(run_dir / "history.json", history)
        write_rows_csv(run_dir / "metrics.csv", METRICS_HEADER, metrics_rows(history))
        record = {
            "schema": RUN_SCHEMA,
            "config": resolved,
            "config_hash": config_hash(resolved),
            "label": pipeline.run_label(cfg.raw["federation"]),
            "seed": seed,
            "manifest": file_ref(manifest_path, run_dir),
            "history": file_ref(history_path, run_dir),
            "reports": None,
            "duration_seconds": duration,
        }
        write_json(run_dir / "run.json", record)
        log.info("seed %d: %d rounds in %.1fs", seed, len(history.snapshots) - 1, duration)
        print(run_dir / "run.json")
    return 0


def load_run_record(path):
    """Run record at ``path`` with its config hash checked."""
    record = read_json(path, "run record")
    if record.get("schema") != RUN_SCHEMA:
        raise PathError(f"{path}: expected schema {RUN_SCHEMA!r}")
    if config_hash(record["config"]) != record["config_hash"]:
        raise ReportError(f"{path}: config hash does not match the stored config")
    return record


def _expand(paths, filename):
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            hits = sorted(p.rglob(filename))
            if not hits:
                raise PathError(f"no {filename} under {p}")
            found += hits
        elif p.is_file():
            found.append(p)
        else:
            raise PathError(f"not found: {p}")
    return found


def cmd_evaluate(args):
    for run_path in _expand(args.runs, "run.json"):
        run_dir = run_path.parent
        record = load_run_record(run_path)
        report_path = run_dir / "report.json"
        if report_path.exists() and not args.force:
            raise OverwriteError(f"{report_path} exists (use --force to overwrite)")
        stored = dict(record["config"])
        stored.pop("schema", None)
        cfg = ExperimentConfig.from_dict(stored)
        ev = {}
        if args.tune_lr is not None:
            ev["tune_lr"] = args.tune_lr
        if args.tune_momentum is not None:
            ev["tune_momentum"] = args.tune_momentum
        if ev:
            cfg = cfg.with_overrides(evaluation=ev)
        manifest, table = load_manifest(resolve_ref(record["manifest"], run_dir, "partition manifest"))
        history = load_history(resolve_ref(record["history"], run_dir, "training history"))
        seed = int(record["seed"])
        reports = pipeline.evaluate(cfg, manifest, table, history, seed)
        doc = run_report_to_dict(reports, run_path, record["config_hash"], record["label"], seed)
        doc["evaluation"] = cfg.raw["evaluation"]
        write_json(report_path, doc)
        write_rows_csv(run_dir / "metrics.csv", METRICS_HEADER, metrics_rows(history, reports))
        record["reports"] = file_ref(report_path, run_dir)
        write_json(run_path, record)
        print(report_path)
    return 0


def cmd_report(args):
    runs = []
    for path in _expand(args.reports, "report.json"):
        header, reports = load_run_report(path)
        run_path = path.parent / header["path"]
        record = load_run_record(run_path)
        if record["config_hash"] != header["config_hash"]:
            raise ReportError(f"{path}: back-reference to {run_path} does not validate")
        runs.append((header["label"], int(header["seed"]), reports))
    summary = pipeline.summarize(runs)
    rows, deltas = pipeline.per_client_export(runs)

    far = summary["far_target"]
    text = pipeline.format_table(summary["performance"], f"TAR@FAR{far:g} (mean ± std over seeds)")
    text += "\n" + pipeline.format_table(
        summary["fairness"], "Across-client std of TAR (mean ± std over seeds; lower is fairer)")
    out = Path(args.out)
    write_json(out / "summary.json", {
        "far_target": far,
        "seeds": summary["seeds"],
        "performance": summary["performance"],
        "fairness": summary["fairness"],
        "per_client_deltas": {
            k: {**v, "deltas_percent": {str(c): d for c, d in v["deltas_percent"].items()}}
            for k, v in deltas.items()
        },
    })
    write_rows_csv(out / "per_client.csv", ("label", "client", "mean_tar", "delta_percent"), rows)
    atomic_write_text(out / "tables.md", text)
    print(text, end="")
    return 0


# --------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="fedface", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help=f"YAML/JSON experiment config ({CONFIG_SCHEMA})")
            p.add_argument("--profile", choices=("desk", "full"), help="base profile")
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("partition", help="generate the dataset table and client partition")
    common(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", help="run federated training, one run per seed")
    common(p)
    p.add_argument("--manifest", required=True, help="partition manifest.json")
    p.add_argument("--seed", type=int, help="train this single seed instead of the sweep")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--strict", dest="strict", action="store_const", const=True,
                      help="abort on any client failure")
    mode.add_argument("--lenient", dest="strict", action="store_const", const=False,
                      help="drop failing clients from the round")
    p.set_defaults(func=cmd_train, strict=None)

    p = sub.add_parser("evaluate", help="untuned/tuned reports for trained runs")
    p.add_argument("runs", nargs="+", help="run.json files or directories to search")
    p.add_argument("--force", action="store_true", help="overwrite existing reports")
    p.add_argument("--tune-lr", type=float, help="tuning learning rate (default: training lr)")
    p.add_argument("--tune-momentum", type=float, help="tuning momentum (default: training momentum)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate reports into comparison tables")
    p.add_argument("reports", nargs="+", help="report.json files or directories to search")
    p.add_argument("--out", default="report", help="output directory (default: ./report)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FedFaceError as exc:
        err = {"error": exc.category, "message": str(exc)}
        if getattr(exc, "field", None):
            err["field"] = exc.field
        print(json.dumps(err), file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)


if __name__ == "__main__":
    sys.exit(main())
