"""Client partition generators, the per-identity stratified split, and a
synthetic identity-cluster dataset standing in for face features.

Three schemes:

* ``equal``      - identities spread as evenly as possible over clients.
* ``lognormal``  - client identity counts proportional to lognormal draws
  (identity skew: few large clients, many small ones).
* ``attribute``  - each client owns samples matching an attribute rule
  (feature skew with roughly equal client sizes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ConfigError, EmptyRuleError, InfeasiblePartitionError
from .rng import stream

MANIFEST_SCHEMA = "fedface.partition/v1"
SPLIT_RATIOS = (0.70, 0.10, 0.20)
RULE_VALUES = ("yes", "no", "agnostic")


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_identities: int = 150
    samples_per_identity: tuple = (20, 20)
    feature_dim: int = 64
    num_binary_attributes: int = 6
    center_spread: float = 1.0
    attribute_shift: float = 1.0
    noise: float = 0.6
    attribute_prevalence: float = 0.5
    # chance that a sample's attribute differs from its identity's usual value
    attribute_flip: float = 0.1
    seed: int = 0
    attribute_names: tuple = ()

    def __post_init__(self):
        lo, hi = (int(v) for v in self.samples_per_identity)
        object.__setattr__(self, "samples_per_identity", (lo, hi))
        names = tuple(self.attribute_names) or tuple(
            f"attr{i}" for i in range(self.num_binary_attributes)
        )
        object.__setattr__(self, "attribute_names", names)
        if self.num_identities < 1:
            raise ConfigError("must be >= 1", "num_identities")
        if not 1 <= lo <= hi:
            raise ConfigError("need 1 <= min <= max", "samples_per_identity")
        if self.feature_dim < 1:
            raise ConfigError("must be >= 1", "feature_dim")
        if self.num_binary_attributes < 0 or len(names) != self.num_binary_attributes:
            raise ConfigError("must match attribute_names", "num_binary_attributes")
        for name in ("center_spread", "attribute_shift", "noise"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", name)
        for name in ("attribute_prevalence", "attribute_flip"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError("must lie in [0, 1]", name)


@dataclass
class SampleTable:
    identities: np.ndarray
    attributes: np.ndarray
    attribute_names: tuple
    features: np.ndarray
    sample_ids: np.ndarray = None

    def __post_init__(self):
        self.identities = np.asarray(self.identities, dtype=np.int64)
        n = self.identities.size
        self.attributes = np.asarray(self.attributes, dtype=np.int8).reshape(n, -1)
        self.features = np.asarray(self.features, dtype=np.float64).reshape(n, -1)
        self.attribute_names = tuple(self.attribute_names)
        if self.sample_ids is None:
            self.sample_ids = np.arange(n, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if self.attributes.shape[1] != len(self.attribute_names):
            raise ConfigError("attribute columns do not match names", "attribute_names")
        if not np.array_equal(self.sample_ids, np.arange(n)):
            raise ConfigError("sample ids must be 0..n-1 in order", "sample_ids")

    def __len__(self):
        return self.identities.size

    @property
    def identity_ids(self):
        return np.unique(self.identities)

    def samples_by_identity(self, sample_ids=None):
        ids = self.sample_ids if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
        groups = {}
        for s in ids.tolist():
            groups.setdefault(int(self.identities[s]), []).append(s)
        return groups

    def attribute_column(self, name):
        try:
            return self.attributes[:, self.attribute_names.index(name)]
        except ValueError:
            raise ConfigError(f"unknown attribute {name!r}", "rules") from None


def generate_synthetic(spec):
    """Identity clusters in feature space, shifted by attribute offsets.

    sample = identity centre + sum of offsets of set attributes + noise.
    Offsets are shared across identities, so attribute skew between
    clients becomes feature skew.
    """
    rng = stream(spec.seed, "synthetic")
    A, d = spec.num_binary_attributes, spec.feature_dim
    centres = rng.normal(0.0, spec.center_spread, size=(spec.num_identities, d))
    offsets = rng.normal(0.0, spec.attribute_shift, size=(A, d))
    base = rng.random((spec.num_identities, A)) < spec.attribute_prevalence
    lo, hi = spec.samples_per_identity
    counts = rng.integers(lo, hi + 1, size=spec.num_identities)

    identities = np.repeat(np.arange(spec.num_identities), counts)
    n = identities.size
    flips = rng.random((n, A)) < spec.attribute_flip
    attrs = (base[identities] ^ flips).astype(np.int8)
    noise = rng.normal(0.0, spec.noise, size=(n, d))
    features = centres[identities] + attrs @ offsets + noise
    return SampleTable(identities, attrs, spec.attribute_names, features)


# --------------------------------------------------------------------------
# manifests


@dataclass
class ClientPartition:
    client_id: int
    identities: list
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    @property
    def samples(self):
        return sorted(self.train + self.val + self.test)

    def to_dict(self):
        return {
            "client_id": self.client_id,
            "identities": list(self.identities),
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            int(d["client_id"]),
            [int(i) for i in d["identities"]],
            [int(i) for i in d["train"]],
            [int(i) for i in d["val"]],
            [int(i) for i in d["test"]],
        )


@dataclass
class PartitionManifest:
    scheme: str
    params: dict
    clients: list
    total_identities: int

    def __post_init__(self):
        self.check()

    @property
    def num_clients(self):
        return len(self.clients)

    def client(self, client_id):
        for c in self.clients:
            if c.client_id == client_id:
                return c
        raise KeyError(client_id)

    def check(self):
        seen_ids, seen_samples = set(), set()
        for c in self.clients:
            ids = set(c.identities)
            if ids & seen_ids:
                raise InfeasiblePartitionError(
                    f"client {c.client_id} shares identities with another client"
                )
            seen_ids |= ids
            samples = c.train + c.val + c.test
            if len(set(samples)) != len(samples) or set(samples) & seen_samples:
                raise InfeasiblePartitionError(
                    f"client {c.client_id} lists a sample more than once"
                )
            seen_samples |= set(samples)

    def to_dict(self):
        return {
            "schema": MANIFEST_SCHEMA,
            "scheme": self.scheme,
            "params": self.params,
            "total_identities": self.total_identities,
            "clients": [c.to_dict() for c in self.clients],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != MANIFEST_SCHEMA:
            raise ConfigError(f"expected schema {MANIFEST_SCHEMA!r}", "schema")
        return cls(
            d["scheme"],
            dict(d["params"]),
            [ClientPartition.from_dict(c) for c in d["clients"]],
            int(d["total_identities"]),
        )


def _largest_remainder(quotas, total):
    """Round non-negative quotas to integers summing to ``total``.

    Ties go to the lower index.
    """
    floors = [math.floor(q) for q in quotas]
    short = total - sum(floors)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - floors[i]), i))
    for i in order[:short]:
        floors[i] += 1
    return floors


def _assign_identities(identity_ids, counts, rng):
    perm = rng.permutation(np.asarray(sorted(identity_ids), dtype=np.int64))
    clients, off = [], 0
    for k, c in enumerate(counts):
        clients.append(ClientPartition(k, sorted(perm[off : off + c].tolist())))
        off += c
    return clients


def equal_partition(identity_ids, num_clients, seed):
    ids = list(identity_ids)
    N, K = len(ids), int(num_clients)
    if K < 1:
        raise ConfigError("must be >= 1", "num_clients")
    if K > N:
        raise InfeasiblePartitionError(f"{K} clients but only {N} identities")
    counts = [N // K + (1 if k < N % K else 0) for k in range(K)]
    rng = stream(seed, "partition", "equal")
    return PartitionManifest(
        "equal", {"num_clients": K, "seed": int(seed)}, _assign_identities(ids, counts, rng), N
    )


def lognormal_counts(N, K, mu, sigma, rng):
    """Identity counts ``N * S_i / sum(S)`` with ``S_i ~ lognormal(mu, sigma)``,
    rounded by largest remainder; every client keeps at least one."""
    if K < 1:
        raise ConfigError("must be >= 1", "num_clients")
    if N < K:
        raise InfeasiblePartitionError(f"{K} clients but only {N} identities")
    if sigma < 0:
        raise ConfigError("must be >= 0", "sigma")
    draws = rng.lognormal(mu, sigma, size=K)
    counts = _largest_remainder((N * draws / draws.sum()).tolist(), N)
    while min(counts) == 0:
        counts[counts.index(max(counts))] -= 1
        counts[counts.index(0)] += 1
    return counts


def lognormal_partition(identity_ids, num_clients, mu, sigma, seed):
    ids = list(identity_ids)
    rng = stream(seed, "partition", "lognormal")
    counts = lognormal_counts(len(ids), int(num_clients), mu, sigma, rng)
    params = {"num_clients": int(num_clients), "mu": float(mu), "sigma": float(sigma), "seed": int(seed)}
    return PartitionManifest("lognormal", params, _assign_identities(ids, counts, rng), len(ids))


# --------------------------------------------------------------------------
# attribute partition


@dataclass(frozen=True)
class AttributeRule:
    client_id: int
    predicates: tuple

    def __post_init__(self):
        preds = tuple((str(a), str(v)) for a, v in self.predicates)
        object.__setattr__(self, "predicates", preds)
        for _, v in preds:
            if v not in RULE_VALUES:
                raise ConfigError(f"predicate value {v!r} not in {RULE_VALUES}", "rules")
        if not any(v != "agnostic" for _, v in preds):
            raise ConfigError(f"rule for client {self.client_id} has no constraint", "rules")

    def matches(self, table):
        mask = np.ones(len(table), dtype=bool)
        for name, value in self.predicates:
            if value == "agnostic":
                continue
            col = table.attribute_column(name)
            mask &= col == (1 if value == "yes" else 0)
        return mask

    def describe(self):
        return ", ".join(f"{a}={v}" for a, v in self.predicates if v != "agnostic")

    def to_dict(self):
        return {"client_id": self.client_id, "predicates": [list(p) for p in self.predicates]}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["client_id"]), tuple(tuple(p) for p in d["predicates"]))


def _celeba_rule(k, **preds):
    return AttributeRule(k, tuple(preds.items()))


# CelebA attribute combinations for the 20-client attribute partition.
# Attributes left out are agnostic.
CELEBA_RULES = (
    _celeba_rule(0, Male="yes", Eyeglasses="yes", Wearing_Hat="no", Young="yes"),
    _celeba_rule(1, Male="yes", Eyeglasses="yes", Wearing_Hat="no", Young="no", Gray_Hair="yes"),
    _celeba_rule(2, Male="yes", Eyeglasses="yes", Wearing_Hat="no", Young="no", Chubby="yes"),
    _celeba_rule(3, Male="no", Eyeglasses="yes", Wearing_Hat="no"),
    _celeba_rule(4, Eyeglasses="no", Wearing_Hat="yes"),
    _celeba_rule(5, Male="no", Eyeglasses="no", Wearing_Hat="no", Blond_Hair="yes",
                 Oval_Face="yes", Rosy_Cheeks="yes"),
    _celeba_rule(6, Male="yes", Eyeglasses="no", Wearing_Hat="no", Goatee="yes", Bald="no",
                 Smiling="yes"),
    _celeba_rule(7, Male="yes", Eyeglasses="no", Wearing_Hat="no", Goatee="no", Bald="yes"),
    _celeba_rule(8, Male="yes", Eyeglasses="no", Wearing_Hat="no", Gray_Hair="yes", Goatee="no"),
    _celeba_rule(9, Male="yes", Eyeglasses="no", Wearing_Hat="no", Young="no", Goatee="no",
                 Bushy_Eyebrows="yes"),
    _celeba_rule(10, Male="yes", Eyeglasses="no", Wearing_Hat="no", Young="no", Black_Hair="no",
                 Goatee="no", Bushy_Eyebrows="yes"),
    _celeba_rule(11, Male="yes", Eyeglasses="no", Wearing_Hat="no", Young="no", Blond_Hair="no",
                 Goatee="no", Bushy_Eyebrows="yes"),
    _celeba_rule(12, Male="yes", Eyeglasses="no", Wearing_Hat="no", Young="yes", Brown_Hair="yes",
                 Goatee="no", Bushy_Eyebrows="yes"),
    _celeba_rule(13, Male="no", Eyeglasses="no", Wearing_Hat="no", Young="no", Oval_Face="yes",
                 Wearing_Lipstick="yes", Rosy_Cheeks="no"),
    _celeba_rule(14, Male="no", Eyeglasses="no", Wearing_Hat="no", Young="yes", Oval_Face="no",
                 Wearing_Lipstick="yes", Rosy_Cheeks="yes"),
    _celeba_rule(15, Male="yes", Eyeglasses="no", Wearing_Hat="no", Bushy_Eyebrows="no",
                 Mustache="yes"),
    _celeba_rule(16, Male="yes", Eyeglasses="no", Wearing_Hat="no", Young="yes", No_Beard="no",
                 Mustache="no", Bushy_Eyebrows="yes"),
    _celeba_rule(17, Male="yes", Eyeglasses="no", Wearing_Hat="no", Young="yes", No_Beard="no",
                 Mustache="no", Bushy_Eyebrows="no"),
    _celeba_rule(18, Male="yes", Eyeglasses="no", Wearing_Hat="no", Young="yes", Black_Hair="yes",
                 Bags_Under_Eyes="yes"),
    _celeba_rule(19, Male="no", Eyeglasses="no", Wearing_Hat="no", Young="no",
                 Bags_Under_Eyes="yes"),
)


def generate_rules(attribute_names, num_clients, predicates_per_rule, seed):
    """Distinct random rules, each fixing ``predicates_per_rule`` attributes."""
    names = list(attribute_names)
    p = int(predicates_per_rule)
    if not 1 <= p <= len(names):
        raise ConfigError(f"must lie in [1, {len(names)}]", "predicates_per_rule")
    if math.comb(len(names), p) * 2**p < num_clients:
        raise InfeasiblePartitionError("not enough distinct attribute combinations")
    rng = stream(seed, "partition", "rules")
    rules, seen = [], set()
    while len(rules) < num_clients:
        chosen = sorted(rng.choice(len(names), size=p, replace=False).tolist())
        values = rng.integers(0, 2, size=p).tolist()
        key = tuple(zip(chosen, values))
        if key in seen:
            continue
        seen.add(key)
        preds = tuple((names[a], "yes" if v else "no") for a, v in key)
        rules.append(AttributeRule(len(rules), preds))
    return rules


def attribute_partition(table, rules, target_size_per_client=None, seed=0):
    """Give each client the samples matching its rule.

    Identities are assigned whole: an identity goes to exactly one client
    and that client takes the identity's samples that match its rule.
    Identities matching several rules go to the matching client furthest
    below the target size, considering only clients that would receive at
    least half as many of the identity's samples as its best-matching rule.
    Identities with fewer options are placed first.
    """
    rules = sorted(rules, key=lambda r: r.client_id)
    if not rules:
        raise ConfigError("need at least one rule", "rules")
    masks = np.stack([r.matches(table) for r in rules])  # [K, n]
    groups = table.samples_by_identity()
    id_list = sorted(groups)
    match = np.array([[masks[k, groups[i]].sum() for k in range(len(rules))] for i in id_list])
    for k, r in enumerate(rules):
        if match[:, k].sum() == 0:
            raise EmptyRuleError(f"rule for client {r.client_id} ({r.describe()}) matches no samples")
    target = target_size_per_client
    if target is None:
        target = int(masks.any(axis=0).sum()) / len(rules)

    rng = stream(seed, "partition", "attribute")
    tiebreak = rng.random(len(id_list))
    options = (match > 0).sum(axis=1)
    order = sorted(range(len(id_list)), key=lambda j: (options[j], tiebreak[j]))
    sizes = np.zeros(len(rules), dtype=np.int64)
    owned = [[] for _ in rules]
    taken = [[] for _ in rules]
    for j in order:
        best_count = match[j].max()
        if best_count == 0:
            continue
        # only clients that take a sizeable share of this identity's images
        cands = np.flatnonzero(match[j] * 2 >= best_count)
        room = target - sizes[cands]
        best = cands[np.argmax(room)]
        if room.max() <= 0:
            continue
        i = id_list[j]
        samples = [s for s in groups[i] if masks[best, s]]
        owned[best].append(i)
        taken[best].extend(samples)
        sizes[best] += len(samples)

    clients = []
    for k, r in enumerate(rules):
        if not owned[k]:
            raise EmptyRuleError(f"rule for client {r.client_id} ({r.describe()}) received no identities")
        c = ClientPartition(r.client_id, sorted(owned[k]))
        c.train = sorted(taken[k])  # unsplit until assign_splits
        clients.append(c)
    params = {
        "rules": [r.to_dict() for r in rules],
        "target_size_per_client": float(target),
        "seed": int(seed),
    }
    return PartitionManifest("attribute", params, clients, len(table.identity_ids))


# --------------------------------------------------------------------------
# splits


def stratified_split(samples_by_identity, ratios=SPLIT_RATIOS, seed=0):
    """Per-identity train/val/test split with largest-remainder rounding.

    Identities with at least two samples always land in both train and test;
    single-sample identities go to train.
    """
    fracs = [Fraction(r).limit_denominator(10**6) for r in ratios]
    if len(fracs) != 3 or any(f < 0 for f in fracs) or sum(fracs) != 1:
        raise ConfigError("need three non-negative ratios summing to 1", "ratios")
    rng = stream(seed, "split")
    out = ([], [], [])
    for ident in sorted(samples_by_identity):
        samples = sorted(samples_by_identity[ident])
        n = len(samples)
        order = rng.permutation(n)
        if n < 2:
            counts = [n, 0, 0]
        else:
            counts = _largest_remainder([f * n for f in fracs], n)
            if counts[2] == 0:
                counts[0] -= 1
                counts[2] += 1
            if counts[0] == 0:
                donor = 1 if counts[1] > 0 else 2
                counts[donor] -= 1
                counts[0] += 1
        off = 0
        for part, c in zip(out, counts):
            part.extend(samples[i] for i in order[off : off + c])
            off += c
    return tuple(sorted(p) for p in out)


def assign_splits(manifest, table, ratios=SPLIT_RATIOS, seed=0):
    """Fill per-client train/val/test lists.

    Equal and lognormal clients take every sample of their identities;
    attribute clients split only the samples their rule selected.
    """
    clients = []
    for c in manifest.clients:
        if manifest.scheme == "attribute":
            pool = c.train + c.val + c.test
        else:
            members = np.isin(table.identities, c.identities)
            pool = table.sample_ids[members].tolist()
        groups = table.samples_by_identity(pool)
        train, val, test = stratified_split(groups, ratios, seed=_split_seed(seed, c.client_id))
        clients.append(ClientPartition(c.client_id, list(c.identities), train, val, test))
    params = dict(manifest.params)
    params["split_ratios"] = [float(r) for r in ratios]
    params["split_seed"] = int(seed)
    return PartitionManifest(manifest.scheme, params, clients, manifest.total_identities)


def _split_seed(seed, client_id):
    return int(stream(seed, "split", client_id).integers(2**31))


# --------------------------------------------------------------------------
# statistics


def gini(values):
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = x.size
    if n == 0 or x.sum() == 0:
        return 0.0
    ranks = np.arange(1, n + 1)
    return float(np.sum((2 * ranks - n - 1) * x) / (n * x.sum()))


def skew_summary(manifest):
    ids = [len(c.identities) for c in manifest.clients]
    train = [len(c.train) for c in manifest.clients]
    samples = [len(c.train) + len(c.val) + len(c.test) for c in manifest.clients]
    return {
        "scheme": manifest.scheme,
        "num_clients": manifest.num_clients,
        "identity_counts": ids,
        "sample_counts": samples,
        "train_counts": train,
        "test_counts": [len(c.test) for c in manifest.clients],
        "gini_identities": gini(ids),
        "gini_samples": gini(samples),
        "max_min_sample_ratio": (max(samples) / min(samples)) if min(samples) > 0 else None,
        "heavy_skew": gini(ids) > 0.5,
    }
