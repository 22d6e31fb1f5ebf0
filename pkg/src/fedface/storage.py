"""On-disk formats.

Everything is text: canonical JSON (sorted keys, fixed indent) for
manifests, histories, run records and reports; CSV for the dataset table
and plot exports.  Parameter vectors are stored as base64 little-endian
float64 so reloads are bit-exact.  Writes go to a temp file in the target
directory and are renamed into place.
"""

from __future__ import annotations

import base64
import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import OverwriteError, PathError, ReportError
from .federation import TrainingHistory
from .metrics import EvaluationReport
from .nn import ParameterVector
from .partitions import PartitionManifest, SampleTable

DATASET_SCHEMA = "fedface.dataset/v1"
HISTORY_SCHEMA = "fedface.history/v1"
RUN_SCHEMA = "fedface.run/v1"
RUN_REPORT_SCHEMA = "fedface.run-report/v1"
COHORT_KEYS = ("untuned/train", "untuned/holdout", "tuned/train", "tuned/holdout")


# --------------------------------------------------------------------------
# primitives


def atomic_write_text(path, text, force=True):
    path = Path(path)
    if path.exists() and not force:
        raise OverwriteError(f"{path} exists (use --force to overwrite)")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + "\n"


def write_json(path, obj, force=True):
    return atomic_write_text(path, canonical_json(obj), force)


def read_json(path, what="file"):
    path = Path(path)
    if not path.is_file():
        raise PathError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ReportError(f"{path} is not valid JSON: {exc}") from None


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def encode_array(values):
    arr = np.ascontiguousarray(values, dtype="<f8")
    return base64.b64encode(arr.tobytes()).decode("ascii")


def decode_array(text):
    return np.frombuffer(base64.b64decode(text), dtype="<f8").astype(np.float64)


def file_ref(target, relative_to):
    """Path of ``target`` relative to directory ``relative_to`` plus its digest."""
    rel = os.path.relpath(Path(target).resolve(), Path(relative_to).resolve())
    return {"path": Path(rel).as_posix(), "sha256": sha256_file(target)}


def resolve_ref(ref, relative_to, what):
    path = Path(relative_to) / ref["path"]
    if not path.is_file():
        raise PathError(f"{what} not found: {path}")
    if ref.get("sha256") and sha256_file(path) != ref["sha256"]:
        raise PathError(f"{what} at {path} does not match its recorded digest")
    return path


# --------------------------------------------------------------------------
# dataset table


def save_table(path, table, force=True):
    names = list(table.attribute_names)
    d = table.features.shape[1]
    buf = io.StringIO()
    buf.write(f"# schema: {DATASET_SCHEMA}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "identity_id", *names, *(f"f{j}" for j in range(d))])
    for s in range(len(table)):
        w.writerow(
            [s, int(table.identities[s]), *table.attributes[s].tolist(),
             *(repr(float(v)) for v in table.features[s])]
        )
    return atomic_write_text(path, buf.getvalue(), force)


def load_table(path):
    path = Path(path)
    if not path.is_file():
        raise PathError(f"dataset table not found: {path}")
    with path.open(encoding="utf-8", newline="") as fh:
        first = fh.readline().strip()
        if first != f"# schema: {DATASET_SCHEMA}":
            raise PathError(f"{path}: expected schema header {DATASET_SCHEMA!r}")
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    feat = [j for j, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
    attr = list(range(2, feat[0] if feat else len(header)))
    arr = np.array(body, dtype=object)
    if arr.size == 0:
        raise PathError(f"{path}: dataset table is empty")
    return SampleTable(
        identities=arr[:, 1].astype(np.int64),
        attributes=arr[:, attr].astype(np.int8) if attr else np.zeros((len(body), 0)),
        attribute_names=tuple(header[j] for j in attr),
        features=arr[:, feat].astype(np.float64),
        sample_ids=arr[:, 0].astype(np.int64),
    )


# --------------------------------------------------------------------------
# partition manifest


def save_manifest(path, manifest, dataset_path, summary=None, force=True):
    path = Path(path)
    doc = manifest.to_dict()
    doc["dataset"] = file_ref(dataset_path, path.parent)
    if summary is not None:
        doc["summary"] = summary
    return write_json(path, doc, force)


def load_manifest(path):
    """Manifest plus the dataset table it was built from."""
    path = Path(path)
    doc = read_json(path, "partition manifest")
    manifest = PartitionManifest.from_dict(doc)
    if "dataset" not in doc:
        raise PathError(f"{path}: manifest has no dataset reference")
    table = load_table(resolve_ref(doc["dataset"], path.parent, "dataset table"))
    n = len(table)
    for c in manifest.clients:
        if any(not 0 <= s < n for s in c.samples):
            raise PathError(f"{path}: client {c.client_id} lists samples outside the dataset")
    return manifest, table


# --------------------------------------------------------------------------
# training history


def history_to_dict(history):
    first = history.snapshots[0]
    return {
        "schema": HISTORY_SCHEMA,
        "config": history.config,
        "seed": history.seed,
        "total_classes": history.total_classes,
        "backbone_len": first.backbone_len,
        "snapshots": [encode_array(p.values) for p in history.snapshots],
        "val_scores": [{str(k): v for k, v in sorted(r.items())} for r in history.val_scores],
        "drift": [{str(k): v for k, v in sorted(r.items())} for r in history.drift],
        "local_heads": {str(k): encode_array(h) for k, h in sorted(history.local_heads.items())},
    }


def history_from_dict(d):
    if d.get("schema") != HISTORY_SCHEMA:
        raise PathError(f"expected history schema {HISTORY_SCHEMA!r}")
    blen = int(d["backbone_len"])
    return TrainingHistory(
        config=d["config"],
        seed=int(d["seed"]),
        snapshots=[ParameterVector(decode_array(s), blen) for s in d["snapshots"]],
        val_scores=[{int(k): v for k, v in r.items()} for r in d["val_scores"]],
        drift=[{int(k): v for k, v in r.items()} for r in d["drift"]],
        local_heads={int(k): decode_array(h) for k, h in d["local_heads"].items()},
        total_classes=int(d["total_classes"]),
    )


def save_history(path, history, force=True):
    return write_json(path, history_to_dict(history), force)


def load_history(path):
    return history_from_dict(read_json(path, "training history"))


# --------------------------------------------------------------------------
# run records and reports


def run_report_to_dict(reports, run_path, config_hash, label, seed):
    missing = [k for k in COHORT_KEYS if k not in reports]
    if missing:
        raise ReportError(f"missing cohorts {missing}")
    return {
        "schema": RUN_REPORT_SCHEMA,
        "run": {"path": Path(run_path).name, "config_hash": config_hash, "label": label, "seed": seed},
        "cohorts": {k: reports[k].to_dict() for k in COHORT_KEYS},
    }


def load_run_report(path):
    """(header, {cohort key: EvaluationReport}) from a run report file."""
    d = read_json(path, "report")
    if d.get("schema") != RUN_REPORT_SCHEMA:
        raise ReportError(f"{path}: expected schema {RUN_REPORT_SCHEMA!r}")
    reports = {k: EvaluationReport.from_dict(v) for k, v in d["cohorts"].items()}
    return d["run"], reports


def metrics_rows(history, reports=None):
    """Long-format rows (round, client, metric, value) for plotting."""
    rows = []
    for t, scores in enumerate(history.val_scores):
        rows += [(t, k, "val_tar", v) for k, v in sorted(scores.items())]
    for t, drift in enumerate(history.drift):
        rows += [(t, k, "drift", v) for k, v in sorted(drift.items())]
    final = len(history.snapshots) - 1
    for key, rep in sorted((reports or {}).items()):
        metric = "tar_" + key.replace("/", "_")
        rows += [(final, c, metric, s) for c, s in zip(rep.clients, rep.scores)]
    return rows


def write_rows_csv(path, header, rows, force=True):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return atomic_write_text(path, buf.getvalue(), force)
