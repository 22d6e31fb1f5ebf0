"""Verification pairs, TAR@FAR, per-client reports and fairness statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EvaluationError, ReportError
from .nn import embed_backbone, rowwise_cosine
from .rng import stream

REPORT_SCHEMA = "fedface.report/v1"


@dataclass(frozen=True)
class EvalConfig:
    far_target: float = 0.1
    pairs: int = 512
    repeats: int = 5
    tune_batches: int = 5
    population_std: bool = True
    # tuning optimizer; None reuses the training lr / momentum
    tune_lr: float | None = None
    tune_momentum: float | None = None

    def __post_init__(self):
        if not 0 < self.far_target < 1:
            raise ConfigError("must lie in (0, 1)", "far_target")
        if self.pairs < 2:
            raise ConfigError("must be >= 2", "pairs")
        if self.repeats < 1:
            raise ConfigError("must be >= 1", "repeats")
        if self.tune_batches < 0:
            raise ConfigError("must be >= 0", "tune_batches")
        if self.tune_lr is not None and not self.tune_lr > 0:
            raise ConfigError("must be > 0", "tune_lr")
        if self.tune_momentum is not None and not 0 <= self.tune_momentum < 1:
            raise ConfigError("must lie in [0, 1)", "tune_momentum")


@dataclass
class VerificationPair:
    embedding_a: np.ndarray
    embedding_b: np.ndarray
    genuine: bool


@dataclass
class PairDraw:
    """Sample-id pairs; embedding happens later, per model."""

    first: np.ndarray
    second: np.ndarray
    genuine: np.ndarray

    def __len__(self):
        return self.genuine.size

    def to_pairs(self, embeddings):
        """``embeddings`` maps sample id -> vector (any indexable works)."""
        return [
            VerificationPair(embeddings[a], embeddings[b], bool(g))
            for a, b, g in zip(self.first.tolist(), self.second.tolist(), self.genuine.tolist())
        ]


def sample_verification_pairs(test_ids, pool_ids, identities, n_pairs, rng):
    """``ceil(n/2)`` genuine pairs from the client's own test set and
    ``floor(n/2)`` impostor pairs whose partner comes from ``pool_ids``.

    ``identities`` maps sample id -> identity id.  ``pool_ids`` is usually
    the union of every client's test set, own included.
    """
    test_ids = np.asarray(sorted(test_ids), dtype=np.int64)
    pool_ids = np.asarray(sorted(set(pool_ids) | set(test_ids.tolist())), dtype=np.int64)
    identities = np.asarray(identities)
    n_gen, n_imp = (n_pairs + 1) // 2, n_pairs // 2

    by_id = {}
    for s in test_ids.tolist():
        by_id.setdefault(int(identities[s]), []).append(s)
    eligible = sorted(i for i, ss in by_id.items() if len(ss) >= 2)
    if not eligible:
        raise EvaluationError("no identity with two or more test samples")

    first, second = [], []
    for i in rng.choice(len(eligible), size=n_gen).tolist():
        a, b = rng.choice(by_id[eligible[i]], size=2, replace=False).tolist()
        first.append(a)
        second.append(b)

    pool_identity = identities[pool_ids]
    for a in rng.choice(test_ids, size=n_imp).tolist():
        cands = pool_ids[pool_identity != identities[a]]
        if cands.size == 0:
            raise EvaluationError("no impostor candidates in the pool")
        first.append(a)
        second.append(int(cands[rng.integers(cands.size)]))

    genuine = np.zeros(n_gen + n_imp, dtype=bool)
    genuine[:n_gen] = True
    return PairDraw(np.asarray(first, dtype=np.int64), np.asarray(second, dtype=np.int64), genuine)


def _check_scores(genuine, impostor, far_target):
    genuine = np.asarray(genuine, dtype=np.float64).ravel()
    impostor = np.asarray(impostor, dtype=np.float64).ravel()
    if genuine.size == 0 or impostor.size == 0:
        raise EvaluationError("need at least one genuine and one impostor score")
    if not 0 < far_target < 1:
        raise EvaluationError("far_target must lie in (0, 1)")
    return genuine, impostor


def threshold_at_far(genuine, impostor, far_target):
    """Smallest observed score ``t`` whose false-accept rate
    ``mean(impostor >= t)`` stays within ``far_target`` (``inf`` if none)."""
    genuine, impostor = _check_scores(genuine, impostor, far_target)
    cands = np.unique(np.concatenate([genuine, impostor]))
    imp = np.sort(impostor)
    far = (imp.size - np.searchsorted(imp, cands, side="left")) / imp.size
    ok = np.flatnonzero(far <= far_target)
    return float(cands[ok[0]]) if ok.size else float("inf")


def tar_at_far(genuine, impostor, far_target=0.1):
    genuine, impostor = _check_scores(genuine, impostor, far_target)
    t = threshold_at_far(genuine, impostor, far_target)
    return float(np.mean(genuine >= t))


def tar_at_far_bruteforce(genuine, impostor, far_target=0.1):
    """Reference scan: best TAR over every distinct score threshold whose
    FAR is within budget.  Quadratic; for testing."""
    genuine, impostor = _check_scores(genuine, impostor, far_target)
    best = 0.0
    for t in set(genuine.tolist()) | set(impostor.tolist()):
        if np.mean(impostor >= t) <= far_target:
            best = max(best, float(np.mean(genuine >= t)))
    return best


def pair_scores(embeddings_a, embeddings_b):
    return rowwise_cosine(embeddings_a, embeddings_b)


def score_draw(spec, backbone, features, draw, far_target):
    ids = np.unique(np.concatenate([draw.first, draw.second]))
    emb = np.empty((features.shape[0], spec.embedding_dim))
    emb[ids] = embed_backbone(spec, backbone, features[ids])
    scores = pair_scores(emb[draw.first], emb[draw.second])
    return tar_at_far(scores[draw.genuine], scores[~draw.genuine], far_target)


# --------------------------------------------------------------------------
# reports


def _std(values, population):
    if len(values) < 2 and not population:
        return 0.0
    return float(np.std(values, ddof=0 if population else 1))


@dataclass
class EvaluationReport:
    cohort: str
    tuned: bool
    far_target: float
    clients: list
    repeat_scores: list  # per client, one TAR per repeat
    num_eval_repeats: int
    seed: int
    population_std: bool = True
    mean: float = field(init=False)
    std: float = field(init=False)

    def __post_init__(self):
        if len(self.clients) != len(self.repeat_scores) or not self.clients:
            raise ReportError("need one score list per client")
        for row in self.repeat_scores:
            if any(not 0.0 <= v <= 1.0 for v in row):
                raise ReportError("TAR outside [0, 1]")
        self.mean = float(np.mean(self.scores))
        self.std = _std(self.scores, self.population_std)

    @property
    def scores(self):
        return [float(np.mean(r)) for r in self.repeat_scores]

    def score_of(self, client_id):
        return self.scores[self.clients.index(client_id)]

    def to_dict(self):
        return {
            "schema": REPORT_SCHEMA,
            "cohort": self.cohort,
            "tuned": self.tuned,
            "far_target": self.far_target,
            "num_eval_repeats": self.num_eval_repeats,
            "seed": self.seed,
            "population_std": self.population_std,
            "records": [
                {"client_id": c, "repeat": r, "tar": v}
                for c, row in zip(self.clients, self.repeat_scores)
                for r, v in enumerate(row)
            ],
            "per_client": {str(c): s for c, s in zip(self.clients, self.scores)},
            "aggregate": {"mean": self.mean, "std": self.std, "num_clients": len(self.clients)},
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != REPORT_SCHEMA:
            raise ReportError(f"expected schema {REPORT_SCHEMA!r}")
        rows = {}
        for rec in d["records"]:
            rows.setdefault(int(rec["client_id"]), []).append((int(rec["repeat"]), float(rec["tar"])))
        clients = sorted(rows)
        report = cls(
            d["cohort"],
            bool(d["tuned"]),
            float(d["far_target"]),
            clients,
            [[v for _, v in sorted(rows[c])] for c in clients],
            int(d["num_eval_repeats"]),
            int(d["seed"]),
            bool(d.get("population_std", True)),
        )
        agg = d.get("aggregate", {})
        if "mean" in agg and abs(agg["mean"] - report.mean) > 1e-12:
            raise ReportError("stored mean does not match per-client records")
        if "std" in agg and abs(agg["std"] - report.std) > 1e-12:
            raise ReportError("stored std does not match per-client records")
        return report


def evaluate_cohort(spec, backbones, table, test_sets, pool, cfg, seed, cohort, tuned):
    """Average TAR@FAR over ``cfg.repeats`` pair draws for each client.

    ``backbones`` maps client id -> backbone vector used to embed that
    client's pairs (the server model, or the client's tuned model).  Pair
    draws depend only on (seed, client, repeat), so tuned and untuned
    reports score the same pairs.
    """
    clients = sorted(backbones)
    rows = []
    for k in clients:
        row = []
        for r in range(cfg.repeats):
            rng = stream(seed, "eval", k, r)
            draw = sample_verification_pairs(test_sets[k], pool, table.identities, cfg.pairs, rng)
            row.append(score_draw(spec, backbones[k], table.features, draw, cfg.far_target))
        rows.append(row)
    return EvaluationReport(
        cohort, tuned, cfg.far_target, clients, rows, cfg.repeats, int(seed), cfg.population_std
    )


def per_client_delta_report(report_a, report_b):
    """Percentage change from ``report_a`` to ``report_b`` for each client."""
    if report_a.clients != report_b.clients:
        raise ReportError("reports cover different clients")
    if report_a.cohort != report_b.cohort or report_a.far_target != report_b.far_target:
        raise ReportError("reports differ in cohort or far_target")
    a, b = report_a.scores, report_b.scores
    deltas = {}
    for c, x, y in zip(report_a.clients, a, b):
        deltas[c] = 100.0 * (y - x) / x if x > 0 else float("inf") if y > 0 else 0.0
    weakest = report_a.clients[int(np.argmin(a))]
    largest = max(deltas, key=lambda c: (deltas[c], -c))
    return {
        "deltas_percent": deltas,
        "weakest_client": weakest,
        "weakest_delta_percent": deltas[weakest],
        "largest_gain_client": largest,
        "weakest_gains_most": largest == weakest,
    }
