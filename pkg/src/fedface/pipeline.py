"""Experiment orchestration behind the CLI: partition, train, evaluate,
report.  Functions here take typed objects; ``cli`` handles files."""

from __future__ import annotations

import time

import numpy as np

from .errors import ConfigError, ReportError
from .federation import build_clients, run_federation, tune_client
from .metrics import evaluate_cohort, per_client_delta_report
from .partitions import (
    assign_splits,
    attribute_partition,
    equal_partition,
    generate_rules,
    generate_synthetic,
    lognormal_partition,
)
from .rng import stream
from .storage import COHORT_KEYS, load_table

ALGORITHM_NAMES = {"fedavg": "FedAvg", "hf_maml": "HF-MAML"}
HEAD_NAMES = {"global": "Global", "local": "Local", "regularized": "Regularization"}


def load_dataset(cfg):
    """The configured table, or a freshly generated synthetic one."""
    if cfg.table_path is not None:
        return load_table(cfg.table_path)
    return generate_synthetic(cfg.synthetic_spec)


def make_partition(cfg, table):
    p = cfg.raw["partition"]
    K, seed = p["num_clients"], p["seed"]
    if p["scheme"] == "equal":
        manifest = equal_partition(table.identity_ids.tolist(), K, seed)
    elif p["scheme"] == "lognormal":
        manifest = lognormal_partition(table.identity_ids.tolist(), K, p["mu"], p["sigma"], seed)
    else:
        rules = cfg.rules
        if rules is None:
            rules = generate_rules(table.attribute_names, K, p["predicates_per_rule"], seed)
        elif len(rules) != K:
            raise ConfigError(f"{len(rules)} rules for {K} clients", "partition.rules")
        manifest = attribute_partition(table, rules, p["target_size_per_client"], seed)
    return assign_splits(manifest, table, tuple(p["split_ratios"]), seed)


def model_for(cfg, table):
    return cfg.model_spec(table.features.shape[1])


def train(cfg, manifest, table, seed):
    """(history, wall-clock seconds) for one seed."""
    start = time.perf_counter()
    history = run_federation(cfg.federation_config(seed), manifest, table, model_for(cfg, table))
    return history, time.perf_counter() - start


def evaluate(cfg, manifest, table, history, seed):
    """Untuned and tuned reports for the train and holdout cohorts.

    Untuned clients embed with the final server backbone; tuned clients
    with the backbone after ``tune_batches`` SGD steps on their own data,
    starting from their stored local head (local mode) or the server head.
    """
    fed = cfg.federation_config(seed)
    ev = cfg.eval_config
    spec = model_for(cfg, table)
    final = history.final
    clients = build_clients(manifest, table, fed.head_mode)
    heads = dict(history.local_heads)
    tests = {c.client_id: c.test for c in manifest.clients}
    pool = sorted(s for c in manifest.clients for s in c.test)

    reports = {}
    for cohort, ids in (("train", fed.train_clients), ("holdout", fed.holdout_clients)):
        if not ids:
            continue
        untuned = {k: final.backbone for k in ids}
        tuned = {}
        for k in ids:
            clients[k].local_head = heads.get(k)
            params = tune_client(clients[k], final, ev.tune_batches, fed, spec, stream(seed, "tune", k),
                                 lr=ev.tune_lr, momentum=ev.tune_momentum)
            tuned[k] = params.backbone
        reports[f"untuned/{cohort}"] = evaluate_cohort(
            spec, untuned, table, tests, pool, ev, seed, cohort, False)
        reports[f"tuned/{cohort}"] = evaluate_cohort(
            spec, tuned, table, tests, pool, ev, seed, cohort, True)
    return reports


def run_label(fed_cfg):
    head = "regularized" if fed_cfg["reg_weight"] > 0 else fed_cfg["head_mode"]
    return f"{ALGORITHM_NAMES[fed_cfg['algorithm']]} - {HEAD_NAMES[head]}"


# --------------------------------------------------------------------------
# aggregation over seeds


def _mean_std(values):
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std()) if v.size > 1 else 0.0


def summarize(runs):
    """Collapse per-seed reports into comparison tables.

    ``runs`` is a list of ``(label, seed, {cohort key: EvaluationReport})``.
    Returns ``{"far_target", "performance", "fairness", "seeds"}``; each
    table maps label -> cohort key -> (mean, std) across seeds.
    """
    if not runs:
        raise ReportError("need at least one report")
    fars = {rep.far_target for _, _, reps in runs for rep in reps.values()}
    if len(fars) != 1:
        raise ReportError(f"reports mix far_target values {sorted(fars)}")
    by_label = {}
    for label, seed, reps in runs:
        by_label.setdefault(label, []).append((seed, reps))
    perf, fair, seeds = {}, {}, {}
    for label, items in sorted(by_label.items()):
        seen = [s for s, _ in items]
        if len(set(seen)) != len(seen):
            raise ReportError(f"{label}: duplicate seeds {sorted(seen)}")
        seeds[label] = sorted(seen)
        perf[label], fair[label] = {}, {}
        for key in COHORT_KEYS:
            got = [reps[key] for _, reps in items if key in reps]
            if got:
                perf[label][key] = _mean_std([r.mean for r in got])
                fair[label][key] = _mean_std([r.std for r in got])
    return {"far_target": fars.pop(), "performance": perf, "fairness": fair, "seeds": seeds}


def format_table(table, title):
    keys = [k for k in COHORT_KEYS if any(k in row for row in table.values())]
    header = ["Algorithm", *(k.replace("/", " ").replace("holdout", "test") for k in keys)]
    lines = [f"## {title}", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for label, row in table.items():
        cells = [f"{row[k][0]:.3f} ± {row[k][1]:.3f}" if k in row else "-" for k in keys]
        lines.append("| " + " | ".join([label, *cells]) + " |")
    return "\n".join(lines) + "\n"


def per_client_export(runs, cohort="tuned/train"):
    """Per-client mean TAR per label, plus HF-MAML vs FedAvg deltas.

    Rows are ``(label, client, mean_tar, delta_percent)``; the delta is
    filled for HF-MAML rows that have a FedAvg row with the same head.
    """
    means = {}
    for label, _, reps in runs:
        if cohort in reps:
            means.setdefault(label, []).append(reps[cohort])
    averaged = {label: _average_reports(reps) for label, reps in means.items()}
    rows, summaries = [], {}
    for label, rep in sorted(averaged.items()):
        delta = {}
        if label.startswith("HF-MAML"):
            base = "FedAvg" + label[len("HF-MAML"):]
            if base in averaged:
                d = per_client_delta_report(averaged[base], rep)
                delta, summaries[label] = d["deltas_percent"], d
        for c, s in zip(rep.clients, rep.scores):
            rows.append((label, c, s, delta.get(c, "")))
    return rows, summaries


def _average_reports(reports):
    """One report whose per-client scores are the seed averages."""
    first = reports[0]
    for r in reports[1:]:
        if r.clients != first.clients:
            raise ReportError("reports for one label cover different clients")
    rows = [[float(np.mean([r.scores[i] for r in reports]))] for i in range(len(first.clients))]
    return type(first)(first.cohort, first.tuned, first.far_target, list(first.clients), rows,
                       1, first.seed, first.population_std)
