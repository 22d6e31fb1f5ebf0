"""Synchronous federated rounds: broadcast, local training (FedAvg or
HF-MAML, global or local head, optional embedding regularization),
sample-weighted aggregation, and post-hoc client tuning.

The network is simulated in-process.  Each client draws from its own
seeded stream per round, so client execution order never changes results.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import meta
from .errors import (
    ConfigError,
    EmptyClientError,
    FedFaceError,
    InitializationError,
    ProtocolError,
)
from .meta import ClientData, MomentumState, OptimizerConfig, sgd_step
from .metrics import sample_verification_pairs, score_draw
from .nn import LossConfig, ParameterVector, embed_backbone, init_backbone, init_head, rowwise_cosine
from .rng import stream

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "hf_maml")
HEAD_MODES = ("global", "local")
PROBE_SIZE = 64


@dataclass(frozen=True)
class FederationConfig:
    train_clients: tuple
    holdout_clients: tuple = ()
    rounds: int = 30
    algorithm: str = "hf_maml"
    head_mode: str = "local"
    reg_weight: float = 0.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 50
    batches_per_epoch: int = 50
    batch_size: int = 64
    seed: int = 0
    use_margin: bool = True
    # "all": the penalty enters every gradient; "inner": only HF-MAML's
    # adaptation step (FedAvg always uses it everywhere)
    reg_scope: str = "all"
    reg_reduction: str = "mean"
    strict: bool = True
    validate: bool = True
    val_pairs: int = 256
    far_target: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "train_clients", tuple(int(k) for k in self.train_clients))
        object.__setattr__(self, "holdout_clients", tuple(int(k) for k in self.holdout_clients))
        if not self.train_clients:
            raise ConfigError("need at least one training client", "train_clients")
        if set(self.train_clients) & set(self.holdout_clients):
            raise ConfigError("train and holdout clients overlap", "holdout_clients")
        if self.rounds < 0:
            raise ConfigError("must be >= 0", "rounds")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"must be one of {ALGORITHMS}", "algorithm")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"must be one of {HEAD_MODES}", "head_mode")
        if not self.reg_weight >= 0:
            raise ConfigError("must be >= 0", "reg_weight")
        for name in ("epochs", "batches_per_epoch"):
            if getattr(self, name) < 0:
                raise ConfigError("must be >= 0", name)
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "batch_size")
        if self.reg_scope not in ("all", "inner"):
            raise ConfigError("must be 'all' or 'inner'", "reg_scope")
        if not 0 < self.far_target < 1:
            raise ConfigError("must lie in (0, 1)", "far_target")

    @property
    def num_clients(self):
        return len(self.train_clients) + len(self.holdout_clients)

    def to_dict(self):
        d = asdict(self)
        d["train_clients"] = list(self.train_clients)
        d["holdout_clients"] = list(self.holdout_clients)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("optimizer"), dict):
            d["optimizer"] = OptimizerConfig(**d["optimizer"])
        return cls(**d)


@dataclass
class Client:
    client_id: int
    identities: list
    data: ClientData
    local_head: np.ndarray | None = None

    @property
    def num_train(self):
        return len(self.data)


@dataclass(frozen=True)
class RoundUpdate:
    client_id: int
    new_backbone: np.ndarray
    new_head: np.ndarray | None
    sample_count: int
    # mean (1 - cosine) between round-start and returned embeddings on a probe batch
    drift: float = 0.0

    def __post_init__(self):
        if self.sample_count < 1:
            raise ProtocolError(f"client {self.client_id} reported no samples")


@dataclass
class TrainingHistory:
    config: dict
    seed: int
    snapshots: list
    val_scores: list
    drift: list
    local_heads: dict
    total_classes: int

    @property
    def final(self):
        return self.snapshots[-1]


# --------------------------------------------------------------------------
# setup


def label_maps(manifest, head_mode):
    """identity id -> head row, per client."""
    if head_mode == "global":
        universe = sorted(i for c in manifest.clients for i in c.identities)
        rows = {i: r for r, i in enumerate(universe)}
        return {c.client_id: {i: rows[i] for i in c.identities} for c in manifest.clients}
    return {
        c.client_id: {i: r for r, i in enumerate(sorted(c.identities))} for c in manifest.clients
    }


def total_classes(manifest):
    return sum(len(c.identities) for c in manifest.clients)


def build_clients(manifest, table, head_mode, split="train"):
    maps = label_maps(manifest, head_mode)
    clients = {}
    for c in manifest.clients:
        ids = np.asarray(getattr(c, split), dtype=np.int64)
        m = maps[c.client_id]
        labels = np.asarray([m[int(i)] for i in table.identities[ids]], dtype=np.int64)
        present = np.asarray(sorted(m.values()), dtype=np.int64)
        data = ClientData(table.features[ids], labels, present)
        clients[c.client_id] = Client(c.client_id, sorted(c.identities), data)
    return clients


def init_server(spec, cfg, num_classes):
    backbone = init_backbone(spec, stream(cfg.seed, "init", "backbone"))
    if cfg.head_mode == "global":
        head = init_head(spec, stream(cfg.seed, "init", "head"), num_classes)
        return ParameterVector.join(backbone, head)
    return ParameterVector.join(backbone)


def init_local_heads(spec, cfg, clients):
    for k, client in clients.items():
        client.local_head = init_head(spec, stream(cfg.seed, "init", "client", k), len(client.identities))


# --------------------------------------------------------------------------
# protocol


def broadcast(server, clients, head_mode):
    """Round-start parameters for each listed client."""
    out = {}
    for k in sorted(clients):
        if head_mode == "global":
            out[k] = server.copy()
        else:
            head = clients[k].local_head
            if head is None:
                raise InitializationError(f"client {k} has no local head")
            out[k] = ParameterVector.join(server.backbone, head)
    return out


def _objectives(spec, cfg, received):
    plain = LossConfig(spec, cfg.use_margin)
    if cfg.reg_weight == 0:
        return plain, plain
    reg = LossConfig(spec, cfg.use_margin, cfg.reg_weight, received, cfg.reg_reduction)
    if cfg.algorithm == "hf_maml" and cfg.reg_scope == "inner":
        return reg, plain
    return reg, reg


def _probe_drift(spec, before, after, inputs):
    probe = inputs[:PROBE_SIZE]
    a = embed_backbone(spec, before, probe)
    b = embed_backbone(spec, after, probe)
    return float(np.mean(1.0 - rowwise_cosine(a, b)))


def client_round(client, received, cfg, spec, rng):
    """Local training for one client; returns what it sends to the server.

    In local head mode the trained head stays on ``client``.
    """
    if client.num_train == 0:
        raise EmptyClientError(f"client {client.client_id} has no training data")
    inner, outer = _objectives(spec, cfg, received)
    if cfg.algorithm == "fedavg":
        params = meta.local_train_fedavg(
            received, client.data, cfg.epochs, cfg.batches_per_epoch, cfg.batch_size,
            cfg.optimizer, outer, rng,
        )
    else:
        params = meta.local_train_hfmaml(
            received, client.data, cfg.epochs, cfg.batch_size, cfg.optimizer, outer, rng,
            inner_objective=inner,
        )
    drift = _probe_drift(spec, received.backbone, params.backbone, client.data.inputs)
    if cfg.head_mode == "local":
        client.local_head = params.head.copy()
        head = None
    else:
        head = params.head.copy()
    return RoundUpdate(client.client_id, params.backbone.copy(), head, client.num_train, drift)


def aggregation_weights(updates):
    total = sum(u.sample_count for u in updates)
    return [u.sample_count / total for u in updates]


def aggregate(updates):
    """Sample-size weighted mean, summed in client-id order."""
    if not updates:
        raise ProtocolError("no updates to aggregate")
    updates = sorted(updates, key=lambda u: u.client_id)
    has_head = updates[0].new_head is not None
    if any((u.new_head is not None) != has_head for u in updates):
        raise ProtocolError("updates mix head and head-less payloads")
    if any(u.new_backbone.shape != updates[0].new_backbone.shape for u in updates):
        raise ProtocolError("backbone shapes differ between updates")
    weights = aggregation_weights(updates)
    backbone = np.zeros_like(updates[0].new_backbone)
    head = np.zeros_like(updates[0].new_head) if has_head else None
    for w, u in zip(weights, updates):
        backbone += w * u.new_backbone
        if has_head:
            head += w * u.new_head
    return ParameterVector.join(backbone, head)


def validation_scores(spec, backbone, val_sets, pool, identities, features, cfg, round_index):
    scores = {}
    for k in sorted(val_sets):
        rng = stream(cfg.seed, "val", k, round_index)
        try:
            draw = sample_verification_pairs(val_sets[k], pool, identities, cfg.val_pairs, rng)
        except FedFaceError:
            continue
        scores[k] = score_draw(spec, backbone, features, draw, cfg.far_target)
    return scores


def run_federation(cfg, manifest, table, spec, execution_order=None):
    """Run ``cfg.rounds`` synchronous rounds over all training clients."""
    known = {c.client_id for c in manifest.clients}
    missing = (set(cfg.train_clients) | set(cfg.holdout_clients)) - known
    if missing:
        raise ConfigError(f"clients {sorted(missing)} not in the partition", "train_clients")
    clients = build_clients(manifest, table, cfg.head_mode)
    n_classes = total_classes(manifest)
    server = init_server(spec, cfg, n_classes)
    if cfg.head_mode == "local":
        init_local_heads(spec, cfg, clients)
    train = {k: clients[k] for k in cfg.train_clients}
    order = sorted(train) if execution_order is None else list(execution_order)
    if sorted(order) != sorted(train):
        raise ConfigError("must be a permutation of train_clients", "execution_order")

    val_sets = {k: manifest.client(k).val for k in cfg.train_clients}
    val_pool = sorted(s for c in manifest.clients for s in c.val)

    def validate(params, t):
        if not cfg.validate:
            return {}
        return validation_scores(
            spec, params.backbone, val_sets, val_pool, table.identities, table.features, cfg, t
        )

    snapshots = [server.copy()]
    val_scores = [validate(server, 0)]
    drift = [{}]
    for t in range(cfg.rounds):
        received = broadcast(server, train, cfg.head_mode)
        updates = []
        for k in order:
            rng = stream(cfg.seed, "client", k, "round", t)
            try:
                updates.append(client_round(train[k], received[k], cfg, spec, rng))
            except EmptyClientError as exc:
                log.warning("round %d: skipping client %d: %s", t, k, exc)
            except FedFaceError:
                if cfg.strict:
                    raise
                log.warning("round %d: dropping failed client %d", t, k, exc_info=True)
        server = aggregate(updates)
        snapshots.append(server.copy())
        val_scores.append(validate(server, t + 1))
        drift.append({u.client_id: u.drift for u in sorted(updates, key=lambda u: u.client_id)})

    heads = {k: c.local_head.copy() for k, c in clients.items() if c.local_head is not None}
    return TrainingHistory(cfg.to_dict(), cfg.seed, snapshots, val_scores, drift, heads, n_classes)


def tune_client(client, server, num_batches, cfg, spec, rng, head=None, lr=None, momentum=None):
    """Server backbone plus the client's head, refined by ``num_batches``
    momentum-SGD steps on the client's training data.

    ``head`` defaults to the client's local head (local mode) or the
    server head (global mode); ``lr`` and ``momentum`` default to the
    training optimizer's.
    """
    lr = cfg.optimizer.lr if lr is None else lr
    momentum = cfg.optimizer.momentum if momentum is None else momentum
    if client.num_train == 0:
        raise EmptyClientError(f"client {client.client_id} has no training data")
    if head is None:
        head = client.local_head if cfg.head_mode == "local" else server.head
    if head is None or len(head) == 0:
        raise InitializationError(f"client {client.client_id} has no head to tune")
    params = ParameterVector.join(server.backbone, head)
    objective = LossConfig(spec, cfg.use_margin)
    state = MomentumState.zeros_like(params)
    for _ in range(num_batches):
        batch = client.data.sample_batch(rng, cfg.batch_size)
        params, state = sgd_step(
            params, objective.gradient(params, batch), state, lr, momentum
        )
    return params
