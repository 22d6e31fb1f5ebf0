import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_batch, tiny_spec
from fedface.errors import ConfigError, DegenerateInputError, InvalidTargetError
from fedface.nn import (
    Batch,
    LossConfig,
    ModelSpec,
    ParameterVector,
    arcface_logits,
    base_loss,
    cosine_similarity,
    finite_diff_gradient,
    forward_embedding,
    init_params,
    loss_gradient,
    masked_cross_entropy,
    regularized_loss,
    rowwise_cosine,
)


def rel_error(analytic, numeric, floor=1e-8):
    """Largest per-coordinate relative error; ``floor`` keeps coordinates
    that are zero in both from dividing by zero."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def identity_params(d):
    spec = ModelSpec(input_dim=d, embedding_dim=d)
    return spec, ParameterVector.join(np.concatenate([np.eye(d).ravel(), np.zeros(d)]))


# --------------------------------------------------------------------------
# spec and containers


@pytest.mark.parametrize(
    "kwargs, field",
    [
        ({"input_dim": 0}, "input_dim"),
        ({"input_dim": 3, "embedding_dim": 0}, "embedding_dim"),
        ({"input_dim": 3, "hidden_layers": (4, 0)}, "hidden_layers"),
        ({"input_dim": 3, "scale": 0.0}, "scale"),
        ({"input_dim": 3, "margin": math.pi}, "margin"),
        ({"input_dim": 3, "margin": -0.1}, "margin"),
    ],
)
def test_model_spec_rejects_out_of_range(kwargs, field):
    with pytest.raises(ConfigError) as exc:
        ModelSpec(**kwargs)
    assert exc.value.field == field


def test_parameter_vector_slices_partition_values():
    p = ParameterVector(np.arange(7.0), 4)
    assert np.array_equal(np.concatenate([p.backbone, p.head]), p.values)
    with pytest.raises(ConfigError):
        ParameterVector(np.arange(3.0), 4)


def test_batch_rejects_label_outside_present_classes():
    with pytest.raises(InvalidTargetError):
        Batch(np.zeros((2, 3)), [0, 2], [0, 1])
    with pytest.raises(ConfigError):
        Batch(np.zeros((0, 3)), [], [0])


# --------------------------------------------------------------------------
# forward


def test_zero_weights_give_zero_embeddings(rng):
    spec = tiny_spec()
    params = ParameterVector.join(np.zeros(spec.backbone_size))
    assert np.all(forward_embedding(spec, params, rng.normal(size=(4, 5))) == 0.0)


def test_identity_layer_returns_input(rng):
    spec, params = identity_params(4)
    x = rng.normal(size=(3, 4))
    assert np.array_equal(forward_embedding(spec, params, x), x)


def test_forward_is_deterministic_and_checks_width(rng):
    spec = tiny_spec()
    params = init_params(spec, np.random.default_rng(0), 4)
    x = rng.normal(size=(5, 5))
    a = forward_embedding(spec, params, x)
    b = forward_embedding(spec, params, x)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ConfigError):
        forward_embedding(spec, params, rng.normal(size=(5, 6)))


# --------------------------------------------------------------------------
# ArcFace, cross-entropy, cosine


def test_arcface_without_margin_is_raw_cosine(rng):
    e = rng.normal(size=4)
    W = rng.normal(size=(3, 4))
    expected = [cosine_similarity(e, w) for w in W]
    assert np.allclose(arcface_logits(e, W, 1.0, 0.0, target=1), expected, atol=1e-15)


def test_arcface_parallel_target_logit():
    W = np.array([[1.0, 0.0], [0.0, 1.0]])
    logits = arcface_logits(np.array([3.0, 0.0]), W, 8.0, 0.5, target=0)
    # 8 cos(0.5) = 7.020660...
    assert logits[0] == pytest.approx(8 * math.cos(0.5), abs=1e-12)
    assert logits[0] == pytest.approx(7.02066, abs=1e-5)


@pytest.mark.parametrize("m", [0.0, 0.3, 1.2])
def test_arcface_orthogonal_non_target_logit_is_zero(m):
    W = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert arcface_logits(np.array([1.0, 0.0]), W, 8.0, m, target=0)[1] == 0.0


def test_arcface_inference_applies_no_margin():
    W = np.array([[1.0, 0.0]])
    assert arcface_logits(np.array([1.0, 0.0]), W, 8.0, 0.5)[0] == 8.0


def test_arcface_degenerate_inputs():
    with pytest.raises(DegenerateInputError):
        arcface_logits(np.zeros(2), np.eye(2), 8.0, 0.5, target=0)
    with pytest.raises(DegenerateInputError):
        arcface_logits(np.ones(2), np.array([[1.0, 0.0], [0.0, 0.0]]), 8.0, 0.5, target=0)


@settings(max_examples=60, deadline=None)
@given(
    theta=st.floats(0.01, math.pi - 1.01),
    m1=st.floats(0.0, 0.49),
    dm=st.floats(0.01, 0.5),
)
def test_margin_strictly_lowers_target_logit(theta, m1, dm):
    e = np.array([math.cos(theta), math.sin(theta)])
    W = np.array([[1.0, 0.0]])
    assert arcface_logits(e, W, 8.0, m1 + dm, 0)[0] < arcface_logits(e, W, 8.0, m1, 0)[0]


def test_margin_fallback_past_pi_minus_m():
    m = 0.5
    theta = math.pi - 0.2  # theta + m > pi
    e = np.array([math.cos(theta), math.sin(theta)])
    got = arcface_logits(e, np.array([[1.0, 0.0]]), 1.0, m, 0)[0]
    assert got == pytest.approx(math.cos(theta) - m * math.sin(m), abs=1e-12)


def test_masked_cross_entropy_examples():
    logits = np.array([2.0, 1.0, 0.0])
    assert masked_cross_entropy(logits, 0, {0}) == 0.0
    full = -math.log(math.exp(2) / sum(math.exp(v) for v in logits))
    assert masked_cross_entropy(logits, 0, {0, 1, 2}) == pytest.approx(full, abs=1e-14)
    two = -math.log(math.exp(2) / (math.exp(2) + math.exp(1)))
    assert masked_cross_entropy(logits, 0, {0, 1}) == pytest.approx(two, abs=1e-14)
    assert two == pytest.approx(0.3133, abs=5e-5)
    with pytest.raises(InvalidTargetError):
        masked_cross_entropy(logits, 2, {0, 1})


def test_cosine_examples():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    a = np.array([0.3, -1.7, 2.2])
    assert cosine_similarity(a, -a) == -1.0
    with pytest.raises(DegenerateInputError):
        cosine_similarity([0, 0], [1, 0])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3),
       st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3))
def test_cosine_bounds(a, b):
    if np.linalg.norm(a) == 0 or np.linalg.norm(b) == 0:
        return
    assert -1.0 <= cosine_similarity(a, b) <= 1.0


# --------------------------------------------------------------------------
# losses


def test_regularized_loss_examples(rng):
    spec = tiny_spec()
    params = init_params(spec, np.random.default_rng(1), 4)
    other = init_params(spec, np.random.default_rng(2), 4)
    batch = random_batch(rng, spec)
    base = base_loss(params, batch, spec)
    assert regularized_loss(params, other, batch, 0.0, spec) == base
    assert regularized_loss(params, params, batch, 3.0, spec) == pytest.approx(base, abs=1e-14)

    # a 90 degree rotation makes every embedding orthogonal to its reference
    spec2, ident = identity_params(2)
    rot = ParameterVector.join(np.concatenate([np.array([[0.0, -1.0], [1.0, 0.0]]).ravel(),
                                               np.zeros(2)]))
    head = np.array([1.0, 0.2, -0.4, 1.0])
    p = ParameterVector.join(ident.backbone, head)
    g = ParameterVector.join(rot.backbone, head)
    b2 = Batch(rng.normal(size=(5, 2)), [0, 1, 0, 1, 1], [0, 1])
    assert regularized_loss(p, g, b2, 1.0, spec2) == pytest.approx(base_loss(p, b2, spec2) + 1, abs=1e-12)


def test_regularized_loss_layout_mismatch(rng):
    spec = tiny_spec()
    params = init_params(spec, np.random.default_rng(1), 4)
    with pytest.raises(ConfigError):
        regularized_loss(params, init_params(spec, np.random.default_rng(1), 3),
                         random_batch(rng, spec), 1.0, spec)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), C=st.floats(0.0, 10.0))
def test_regularization_penalty_is_non_negative(seed, C):
    r = np.random.default_rng(seed)
    spec = tiny_spec()
    params = init_params(spec, r, 4)
    ref = init_params(spec, r, 4)
    batch = random_batch(r, spec)
    gap = regularized_loss(params, ref, batch, C, spec) - base_loss(params, batch, spec)
    assert gap >= -1e-12
    expected = C * (1 - np.mean(rowwise_cosine(forward_embedding(spec, ref, batch.inputs),
                                               forward_embedding(spec, params, batch.inputs))))
    assert gap == pytest.approx(expected, abs=1e-12)


def test_sum_reduction_scales_penalty(rng):
    spec = tiny_spec()
    params = init_params(spec, np.random.default_rng(1), 4)
    ref = init_params(spec, np.random.default_rng(2), 4)
    batch = random_batch(rng, spec, n=6)
    base = base_loss(params, batch, spec)
    mean = regularized_loss(params, ref, batch, 1.0, spec) - base
    total = regularized_loss(params, ref, batch, 1.0, spec, reduction="sum") - base
    assert total == pytest.approx(6 * mean, rel=1e-12)


# --------------------------------------------------------------------------
# gradients


LOSS_KINDS = ["plain", "arcface", "masked", "regularized"]


def make_case(seed, kind):
    r = np.random.default_rng(seed)
    spec = tiny_spec(input_dim=int(r.integers(2, 6)), hidden=tuple(r.integers(2, 6, size=r.integers(0, 3))),
                     emb=int(r.integers(2, 5)), margin=float(r.uniform(0.1, 0.8)))
    n_classes = int(r.integers(2, 6))
    params = init_params(spec, r, n_classes)
    present = np.arange(n_classes)
    if kind in ("masked", "regularized"):
        present = np.sort(r.choice(n_classes, size=max(1, n_classes - 2), replace=False))
    batch = random_batch(r, spec, n=int(r.integers(1, 8)), num_classes=n_classes, present=present)
    if kind == "plain":
        cfg = LossConfig(spec, use_margin=False)
    elif kind == "regularized":
        ref = params.with_values(params.values + r.normal(scale=0.3, size=len(params)))
        cfg = LossConfig(spec, True, float(r.uniform(0.1, 5.0)), ref)
    else:
        cfg = LossConfig(spec, True)
    return params, batch, cfg


@pytest.mark.parametrize("kind", LOSS_KINDS)
@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(kind, seed):
    params, batch, cfg = make_case(seed, kind)
    assert len(params) <= 200
    analytic = loss_gradient(params, batch, cfg)
    numeric = finite_diff_gradient(params, batch, cfg, step=1e-5)
    assert rel_error(analytic, numeric) < 1e-4


def test_zero_weight_regularization_gradient_equals_plain():
    params, batch, cfg = make_case(7, "arcface")
    reg = LossConfig(cfg.spec, True, 0.0, params)
    assert np.array_equal(cfg.gradient(params, batch), reg.gradient(params, batch))


def test_absent_head_rows_have_no_influence(rng):
    spec = tiny_spec()
    params = init_params(spec, np.random.default_rng(4), 5)
    batch = random_batch(rng, spec, num_classes=5, present=[0, 2, 3])
    cfg = LossConfig(spec)
    loss, grad = cfg.loss_and_gradient(params, batch)
    head = params.head.reshape(5, -1)
    assert np.all(grad[params.backbone_len:].reshape(5, -1)[[1, 4]] == 0.0)
    poked = params.values.copy()
    poked[params.backbone_len:].reshape(5, -1)[[1, 4]] += rng.normal(size=(2, head.shape[1]))
    moved = params.with_values(poked)
    loss2, grad2 = cfg.loss_and_gradient(moved, batch)
    assert loss2 == loss and np.array_equal(grad2, grad)


class _SeparableToy:
    """sum((w - c)^2) / 2: minimum at c."""

    def __init__(self, c):
        self.c = c

    def loss(self, params, batch):
        return 0.5 * float(np.sum((params.values - self.c) ** 2))

    def gradient(self, params, batch):
        return params.values - self.c


def test_gradient_vanishes_at_exact_minimum():
    c = np.array([0.5, -1.25, 2.0])
    toy = _SeparableToy(c)
    assert np.max(np.abs(loss_gradient(ParameterVector.join(c), None, toy))) <= 1e-10


def test_finite_difference_on_quadratic():
    toy = _SeparableToy(np.zeros(2))
    g = finite_diff_gradient(ParameterVector.join(np.array([1.0, 2.0])), None, toy, step=1e-5)
    assert np.allclose(g, [1.0, 2.0], atol=1e-9)
    with pytest.raises(ConfigError):
        finite_diff_gradient(ParameterVector.join(np.zeros(2)), None, toy, step=0.0)


class _Cubic:
    def loss(self, params, batch):
        return float(np.sum(params.values**3)) / 3.0

    def gradient(self, params, batch):
        return params.values**2


def test_finite_difference_error_is_second_order():
    # central differences are exact on quadratics, so the cubic carries the
    # O(h^2) term: error = h^2 per coordinate exactly
    w = ParameterVector.join(np.array([0.7, -1.3, 2.1]))
    toy = _Cubic()
    errs = [np.max(np.abs(finite_diff_gradient(w, None, toy, h) - toy.gradient(w, None)))
            for h in (1e-2, 5e-3)]
    assert 3.5 <= errs[0] / errs[1] <= 4.5
