"""Small MLP backbone, ArcFace head, masked cross-entropy and the
embedding-drift regularizer, with hand-written reverse-mode gradients.

Parameters live in one flat float64 vector (``ParameterVector``).  The
backbone occupies ``values[:backbone_len]`` as ``(W, b)`` pairs, one per
layer, with ``W`` stored row-major ``[out, in]``.  The head occupies the
rest as a ``[num_classes, embedding_dim]`` matrix of class centres.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError, InvalidTargetError

_SIN_FLOOR = 1e-12


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_layers: tuple = ()
    embedding_dim: int = 512
    num_classes: int = 1
    scale: float = 8.0
    margin: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(w) for w in self.hidden_layers))
        if self.input_dim < 1:
            raise ConfigError("must be >= 1", "input_dim")
        if any(w < 1 for w in self.hidden_layers):
            raise ConfigError("all widths must be >= 1", "hidden_layers")
        if self.embedding_dim < 1:
            raise ConfigError("must be >= 1", "embedding_dim")
        if self.num_classes < 1:
            raise ConfigError("must be >= 1", "num_classes")
        if not self.scale > 0:
            raise ConfigError("must be > 0", "scale")
        if not 0 <= self.margin < math.pi:
            raise ConfigError("must lie in [0, pi)", "margin")

    @property
    def layer_dims(self):
        return [self.input_dim, *self.hidden_layers, self.embedding_dim]

    @property
    def backbone_size(self):
        dims = self.layer_dims
        return sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))

    def head_size(self, num_classes=None):
        return (self.num_classes if num_classes is None else num_classes) * self.embedding_dim


class ParameterVector:
    """Flat parameter storage split into a backbone slice and a head slice."""

    __slots__ = ("values", "backbone_len")

    def __init__(self, values, backbone_len):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise ConfigError("parameter values must be a flat vector", "values")
        backbone_len = int(backbone_len)
        if not 0 <= backbone_len <= values.size:
            raise ConfigError(
                f"backbone_len {backbone_len} outside [0, {values.size}]", "backbone_len"
            )
        self.values = values
        self.backbone_len = backbone_len

    @classmethod
    def join(cls, backbone, head=None):
        backbone = np.asarray(backbone, dtype=np.float64)
        if head is None or len(head) == 0:
            return cls(backbone.copy(), backbone.size)
        return cls(np.concatenate([backbone, np.asarray(head, dtype=np.float64)]), backbone.size)

    @property
    def backbone(self):
        return self.values[: self.backbone_len]

    @property
    def head(self):
        return self.values[self.backbone_len :]

    def __len__(self):
        return self.values.size

    def copy(self):
        return ParameterVector(self.values.copy(), self.backbone_len)

    def with_values(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ConfigError(
                f"shape {values.shape} does not match {self.values.shape}", "values"
            )
        return ParameterVector(values, self.backbone_len)

    def same_layout(self, other):
        return self.backbone_len == other.backbone_len and len(self) == len(other)

    def equals(self, other):
        return self.same_layout(other) and np.array_equal(self.values, other.values)

    def __repr__(self):
        return f"ParameterVector(len={len(self)}, backbone_len={self.backbone_len})"


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    present_classes: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.present_classes = np.unique(np.asarray(self.present_classes, dtype=np.int64))
        if self.labels.size < 1:
            raise ConfigError("batch must hold at least one sample", "labels")
        if self.inputs.shape[0] != self.labels.size:
            raise ConfigError("inputs and labels disagree on batch size", "inputs")
        if not np.isin(self.labels, self.present_classes).all():
            raise InvalidTargetError("batch label outside present_classes")

    def __len__(self):
        return self.labels.size


# --------------------------------------------------------------------------
# backbone


def init_backbone(spec, rng):
    """He-normal weights, small random biases (an all-zero bias lets a dead
    ReLU layer emit an exactly-zero embedding)."""
    parts = []
    for d_in, d_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        parts.append(rng.normal(0.0, math.sqrt(2.0 / d_in), size=d_out * d_in))
        parts.append(rng.normal(0.0, 0.01, size=d_out))
    return np.concatenate(parts)


def init_head(spec, rng, num_classes=None):
    n = spec.num_classes if num_classes is None else num_classes
    return rng.normal(0.0, 1.0 / math.sqrt(spec.embedding_dim), size=n * spec.embedding_dim)


def init_params(spec, rng, num_classes=None):
    backbone = init_backbone(spec, rng)
    return ParameterVector.join(backbone, init_head(spec, rng, num_classes))


def _layers(spec, flat):
    out = []
    off = 0
    for d_in, d_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        W = flat[off : off + d_out * d_in].reshape(d_out, d_in)
        off += d_out * d_in
        out.append((W, flat[off : off + d_out]))
        off += d_out
    return out


def _check_backbone(spec, backbone_len):
    if backbone_len != spec.backbone_size:
        raise ConfigError(
            f"backbone has {backbone_len} values, model expects {spec.backbone_size}",
            "backbone_len",
        )


def _forward(spec, backbone, inputs):
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.shape[1] != spec.input_dim:
        raise ConfigError(
            f"input width {inputs.shape[1]} != input_dim {spec.input_dim}", "inputs"
        )
    layers = _layers(spec, backbone)
    acts = [inputs]
    h = inputs
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        h = h @ W.T + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, layers, acts


def _backward(spec, layers, acts, grad_out):
    grad = np.zeros(spec.backbone_size)
    glayers = _layers(spec, grad)
    g = grad_out
    last = len(layers) - 1
    for i in range(last, -1, -1):
        if i < last:
            g = g * (acts[i + 1] > 0.0)
        gW, gb = glayers[i]
        gW[...] = g.T @ acts[i]
        gb[...] = g.sum(axis=0)
        if i > 0:
            g = g @ layers[i][0]
    return grad


def embed_backbone(spec, backbone, inputs):
    backbone = np.asarray(backbone, dtype=np.float64)
    _check_backbone(spec, backbone.size)
    return _forward(spec, backbone, inputs)[0]


def forward_embedding(spec, params, inputs):
    """Embeddings ``[batch, embedding_dim]``; unnormalized."""
    _check_backbone(spec, params.backbone_len)
    return _forward(spec, params.backbone, inputs)[0]


# --------------------------------------------------------------------------
# head and losses


def _unit_rows(M, what):
    norms = np.linalg.norm(M, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"zero-norm {what}")
    return M / norms[:, None], norms


def _margin_cos(c, m):
    """cos(theta + m) as a function of c = cos(theta), and its derivative.

    Past theta > pi - m the standard fallback ``c - m*sin(m)`` is used.
    """
    sin_t = np.sqrt(np.clip(1.0 - c * c, 0.0, None))
    inside = c >= math.cos(math.pi - m)
    phi = np.where(inside, c * math.cos(m) - sin_t * math.sin(m), c - m * math.sin(m))
    dphi = np.where(
        inside, math.cos(m) + c * math.sin(m) / np.maximum(sin_t, _SIN_FLOOR), 1.0
    )
    return phi, dphi


def arcface_logits(embedding, head_weights, s, m, target=None):
    """Scaled cosine logits with an additive angular margin on ``target``.

    Without a target (inference) no margin is applied.
    """
    e = np.asarray(embedding, dtype=np.float64).reshape(1, -1)
    W = np.atleast_2d(np.asarray(head_weights, dtype=np.float64))
    if W.shape[1] != e.shape[1]:
        raise ConfigError("head width differs from embedding width", "head_weights")
    eh, _ = _unit_rows(e, "embedding")
    wh, _ = _unit_rows(W, "head row")
    cos = np.clip(wh @ eh[0], -1.0, 1.0)
    logits = s * cos
    if target is not None:
        if not 0 <= target < W.shape[0]:
            raise InvalidTargetError(f"target {target} outside [0, {W.shape[0]})")
        phi, _ = _margin_cos(cos[target], m)
        logits[target] = s * phi
    return logits


def _logsumexp(x):
    mx = x.max(axis=-1, keepdims=True)
    return (mx + np.log(np.exp(x - mx).sum(axis=-1, keepdims=True)))[..., 0]


def masked_cross_entropy(logits, target, present_classes):
    """Softmax cross-entropy restricted to ``present_classes``.

    Absent classes drop out of the normalizer, which is the same as giving
    them a logit of minus infinity.
    """
    logits = np.asarray(logits, dtype=np.float64)
    present = np.unique(np.asarray(list(present_classes), dtype=np.int64))
    if target not in set(present.tolist()):
        raise InvalidTargetError(f"target {target} is masked out")
    return float(_logsumexp(logits[present]) - logits[target])


def cosine_similarity(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def rowwise_cosine(A, B):
    Ah, _ = _unit_rows(np.atleast_2d(A), "embedding")
    Bh, _ = _unit_rows(np.atleast_2d(B), "embedding")
    return np.clip(np.sum(Ah * Bh, axis=1), -1.0, 1.0)


@dataclass(frozen=True)
class LossConfig:
    """Which loss to evaluate: plain cosine-softmax or ArcFace, with an
    optional embedding-drift penalty against a frozen reference model.

    ``reg_reduction`` is ``"mean"`` (default) or ``"sum"`` over the batch.
    """

    spec: ModelSpec
    use_margin: bool = True
    reg_weight: float = 0.0
    reference: ParameterVector | None = None
    reg_reduction: str = "mean"

    def __post_init__(self):
        if self.reg_weight < 0:
            raise ConfigError("must be >= 0", "reg_weight")
        if self.reg_reduction not in ("mean", "sum"):
            raise ConfigError("must be 'mean' or 'sum'", "reg_reduction")
        if self.reg_weight > 0 and self.reference is None:
            raise ConfigError("regularization needs a reference model", "reference")

    def without_penalty(self):
        return LossConfig(self.spec, self.use_margin)

    def loss(self, params, batch):
        return _objective(self, params, batch, want_grad=False)[0]

    def gradient(self, params, batch):
        return _objective(self, params, batch, want_grad=True)[1]

    def loss_and_gradient(self, params, batch):
        return _objective(self, params, batch, want_grad=True)


def _objective(cfg, params, batch, want_grad):
    spec = cfg.spec
    _check_backbone(spec, params.backbone_len)
    D = spec.embedding_dim
    head = params.head.reshape(-1, D)
    E, layers, acts = _forward(spec, params.backbone, batch.inputs)
    B = E.shape[0]

    present = batch.present_classes
    if present[-1] >= head.shape[0]:
        raise InvalidTargetError(
            f"class {present[-1]} outside head with {head.shape[0]} rows"
        )
    pos = np.searchsorted(present, batch.labels)
    rows = np.arange(B)

    Eh, e_norm = _unit_rows(E, "embedding")
    Wh, w_norm = _unit_rows(head[present], "head row")
    cos = np.clip(Eh @ Wh.T, -1.0, 1.0)
    logits = spec.scale * cos
    if cfg.use_margin:
        phi, dphi = _margin_cos(cos[rows, pos], spec.margin)
        logits[rows, pos] = spec.scale * phi
    lse = _logsumexp(logits)
    loss = float(np.mean(lse - logits[rows, pos]))

    reg = cfg.reg_weight > 0.0
    if reg:
        ref = cfg.reference
        if ref.backbone_len != params.backbone_len:
            raise ConfigError("reference layout differs from params", "reference")
        G = _forward(spec, ref.backbone, batch.inputs)[0]
        Gh, _ = _unit_rows(G, "reference embedding")
        sims = np.clip(np.sum(Gh * Eh, axis=1), -1.0, 1.0)
        drift = 1.0 - sims
        penalty = drift.mean() if cfg.reg_reduction == "mean" else drift.sum()
        loss = loss + cfg.reg_weight * float(penalty)

    if not want_grad:
        return loss, None

    p = np.exp(logits - lse[:, None])
    p[rows, pos] -= 1.0
    dcos = (spec.scale / B) * p
    if cfg.use_margin:
        dcos[rows, pos] *= dphi
    dEh = dcos @ Wh
    dWh = dcos.T @ Eh
    if reg:
        coef = cfg.reg_weight / B if cfg.reg_reduction == "mean" else cfg.reg_weight
        dEh -= coef * Gh
    # back through the row normalizations
    dE = (dEh - Eh * np.sum(dEh * Eh, axis=1)[:, None]) / e_norm[:, None]
    dW = (dWh - Wh * np.sum(dWh * Wh, axis=1)[:, None]) / w_norm[:, None]

    grad = np.zeros(len(params))
    grad[: params.backbone_len] = _backward(spec, layers, acts, dE)
    ghead = grad[params.backbone_len :].reshape(-1, D)
    ghead[present] = dW
    return loss, grad


def base_loss(params, batch, spec, use_margin=True):
    return LossConfig(spec, use_margin).loss(params, batch)


def regularized_loss(params, global_params, batch, C, spec, use_margin=True, reduction="mean"):
    """Base loss plus ``C * (1 - mean cosine)`` between the embeddings of
    ``params`` and of the frozen ``global_params``."""
    if not params.same_layout(global_params):
        raise ConfigError("global_params layout differs from params", "global_params")
    cfg = LossConfig(spec, use_margin, float(C), global_params if C > 0 else None, reduction)
    return cfg.loss(params, batch)


def loss_gradient(params, batch, loss_config):
    return loss_config.gradient(params, batch)


def finite_diff_gradient(params, batch, loss_config, step=1e-5):
    """Central-difference gradient estimate, one coordinate at a time."""
    if not step > 0:
        raise ConfigError("must be > 0", "step")
    base = params.values
    grad = np.empty(base.size)
    work = base.copy()
    probe = params.with_values(work)
    for i in range(base.size):
        work[i] = base[i] + step
        up = loss_config.loss(probe, batch)
        work[i] = base[i] - step
        down = loss_config.loss(probe, batch)
        work[i] = base[i]
        grad[i] = (up - down) / (2.0 * step)
    return grad
