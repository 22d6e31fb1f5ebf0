"""Shared toy objectives, small fixtures, and the acceptance summary hook."""

from __future__ import annotations

import numpy as np
import pytest

from fedface.nn import Batch, ModelSpec
from fedface.partitions import (
    SyntheticDatasetSpec,
    assign_splits,
    equal_partition,
    generate_synthetic,
)

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


# --------------------------------------------------------------------------
# toy objectives for the optimizer tests (loss/gradient on a ParameterVector)


class Quadratic:
    """0.5 w^T A w - b^T w; the batch is ignored."""

    def __init__(self, A, b=None):
        self.A = np.asarray(A, dtype=np.float64)
        self.b = np.zeros(self.A.shape[0]) if b is None else np.asarray(b, dtype=np.float64)

    def loss(self, params, batch=None):
        w = params.values
        return float(0.5 * w @ self.A @ w - self.b @ w)

    def gradient(self, params, batch=None):
        return self.A @ params.values - self.b


class Affine:
    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64)

    def loss(self, params, batch=None):
        return float(self.c @ params.values)

    def gradient(self, params, batch=None):
        return self.c.copy()


class QuadQuartic(Quadratic):
    """Quadratic plus kappa/4 * sum(w^4).  Its central-difference HVP error
    is exactly kappa * delta^2 * v^3, so halving delta quarters it."""

    def __init__(self, A, kappa):
        super().__init__(A)
        self.kappa = kappa

    def loss(self, params, batch=None):
        return super().loss(params) + self.kappa / 4 * float(np.sum(params.values**4))

    def gradient(self, params, batch=None):
        return super().gradient(params) + self.kappa * params.values**3

    def hessian(self, w):
        return self.A + np.diag(3 * self.kappa * w**2)


def random_pd(rng, n):
    M = rng.normal(size=(n, n))
    return M @ M.T + n * np.eye(n)


# --------------------------------------------------------------------------
# small model / data fixtures


def tiny_spec(input_dim=5, hidden=(4,), emb=3, scale=8.0, margin=0.5):
    return ModelSpec(input_dim=input_dim, hidden_layers=hidden, embedding_dim=emb,
                     scale=scale, margin=margin)


def random_batch(rng, spec, n=6, num_classes=4, present=None):
    present = np.arange(num_classes) if present is None else np.asarray(present)
    labels = rng.choice(present, size=n)
    return Batch(rng.normal(size=(n, spec.input_dim)), labels, present)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_world():
    """A 40-identity synthetic table split over 4 clients."""
    spec = SyntheticDatasetSpec(num_identities=40, samples_per_identity=(8, 12), feature_dim=10,
                                num_binary_attributes=3, seed=3)
    table = generate_synthetic(spec)
    manifest = assign_splits(equal_partition(table.identity_ids.tolist(), 4, seed=1), table, seed=1)
    model = ModelSpec(input_dim=10, hidden_layers=(8,), embedding_dim=6)
    return table, manifest, model
