"""Local optimizers: momentum SGD for FedAvg clients and the Hessian-free
MAML update.

All routines take an *objective*: any object with ``loss(params, batch)``
and ``gradient(params, batch)``.  ``nn.LossConfig`` is the production one;
tests plug in toy quadratics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyClientError
from .nn import Batch


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.9
    alpha: float = 0.01
    beta: float = 0.1
    delta: float = 0.001
    # apply momentum to the HF-MAML meta-update as well
    maml_momentum: bool = False

    def __post_init__(self):
        for name in ("lr", "beta", "delta"):
            if not getattr(self, name) > 0:
                raise ConfigError("must be > 0", name)
        # alpha == 0 collapses HF-MAML to SGD on D'; kept legal for that check
        if not self.alpha >= 0:
            raise ConfigError("must be >= 0", "alpha")
        if not 0 <= self.momentum < 1:
            raise ConfigError("must lie in [0, 1)", "momentum")


@dataclass(frozen=True)
class MomentumState:
    velocity: np.ndarray

    @classmethod
    def zeros_like(cls, params):
        return cls(np.zeros(len(params)))


def sgd_step(params, grad, state, lr, momentum):
    """velocity <- momentum*velocity + grad; params <- params - lr*velocity."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape or state.velocity.shape != params.values.shape:
        raise ConfigError("gradient/velocity shape does not match params", "grad")
    velocity = momentum * state.velocity + grad
    return params.with_values(params.values - lr * velocity), MomentumState(velocity)


def inner_adapt(params, batch, alpha, objective):
    """One adaptation step ``w - alpha * grad f(w, D)``."""
    return params.with_values(params.values - alpha * objective.gradient(params, batch))


def hvp_approx(params, direction, batch, delta, objective):
    """Central-difference Hessian-vector product of the loss on ``batch``."""
    if not delta > 0:
        raise ConfigError("must be > 0", "delta")
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != params.values.shape:
        raise ConfigError("direction shape does not match params", "direction")
    plus = objective.gradient(params.with_values(params.values + delta * direction), batch)
    minus = objective.gradient(params.with_values(params.values - delta * direction), batch)
    return (plus - minus) / (2.0 * delta)


def meta_gradient(params, D, D1, D2, cfg, objective, inner_objective=None):
    """``g' - alpha * H(w; D2) g'`` with ``g' = grad f(w - alpha grad F(w; D); D1)``.

    ``inner_objective`` (F) defaults to ``objective`` (f).
    """
    adapted = inner_adapt(params, D, cfg.alpha, inner_objective or objective)
    g1 = objective.gradient(adapted, D1)
    return g1 - cfg.alpha * hvp_approx(params, g1, D2, cfg.delta, objective)


def hf_maml_step(params, D, D1, D2, cfg, objective, inner_objective=None):
    """One HF-MAML meta-update, without momentum."""
    g = meta_gradient(params, D, D1, D2, cfg, objective, inner_objective)
    return params.with_values(params.values - cfg.beta * g)


# --------------------------------------------------------------------------
# client data streams


@dataclass
class ClientData:
    """One client's training samples as seen by the local optimizer.

    ``labels`` are head-row indices; ``present_classes`` the rows the client
    owns (every head row in local mode, the owned subset in global mode).
    """

    inputs: np.ndarray
    labels: np.ndarray
    present_classes: np.ndarray

    def __len__(self):
        return len(self.labels)

    def batch(self, idx):
        return Batch(self.inputs[idx], self.labels[idx], self.present_classes)

    def _require_samples(self):
        if len(self) == 0:
            raise EmptyClientError("client has no training samples")

    def sample_batch(self, rng, batch_size):
        self._require_samples()
        n = len(self)
        idx = rng.choice(n, size=batch_size, replace=n < batch_size)
        return self.batch(idx)

    def sample_triple(self, rng, batch_size):
        """Draw D, D', D''; disjoint when the client holds >= 3 batches."""
        self._require_samples()
        n = len(self)
        if n >= 3 * batch_size:
            idx = rng.choice(n, size=3 * batch_size, replace=False)
            parts = np.split(idx, 3)
        else:
            parts = [rng.choice(n, size=batch_size, replace=True) for _ in range(3)]
        return tuple(self.batch(p) for p in parts)


def local_train_fedavg(params, data, epochs, batches_per_epoch, batch_size, cfg, objective, rng):
    """``epochs * batches_per_epoch`` momentum-SGD steps from a fresh state."""
    data._require_samples()
    state = MomentumState.zeros_like(params)
    for _ in range(epochs):
        for _ in range(batches_per_epoch):
            batch = data.sample_batch(rng, batch_size)
            params, state = sgd_step(
                params, objective.gradient(params, batch), state, cfg.lr, cfg.momentum
            )
    return params


def local_train_hfmaml(params, data, epochs, batch_size, cfg, objective, rng, inner_objective=None):
    """One HF-MAML update per epoch on a freshly drawn (D, D', D'') triple."""
    data._require_samples()
    state = MomentumState.zeros_like(params)
    for _ in range(epochs):
        D, D1, D2 = data.sample_triple(rng, batch_size)
        if cfg.maml_momentum:
            g = meta_gradient(params, D, D1, D2, cfg, objective, inner_objective)
            params, state = sgd_step(params, g, state, cfg.beta, cfg.momentum)
        else:
            params = hf_maml_step(params, D, D1, D2, cfg, objective, inner_objective)
    return params
