import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedface.errors import ConfigError, EvaluationError, ReportError
from fedface.metrics import (
    EvalConfig,
    EvaluationReport,
    evaluate_cohort,
    per_client_delta_report,
    sample_verification_pairs,
    score_draw,
    tar_at_far,
    tar_at_far_bruteforce,
    threshold_at_far,
)
from fedface.nn import init_backbone

scores = st.lists(st.floats(-1.0, 1.0), min_size=1, max_size=60)


def report(values, **kw):
    base = dict(cohort="train", tuned=False, far_target=0.1, clients=list(range(len(values))),
                repeat_scores=[[v] for v in values], num_eval_repeats=1, seed=0)
    base.update(kw)
    return EvaluationReport(**base)


# --------------------------------------------------------------------------
# TAR@FAR


def test_perfect_separation():
    for far in (0.01, 0.1, 0.5):
        assert tar_at_far([1.0] * 5, [-1.0] * 7, far) == 1.0


def test_identical_lists_give_tar_near_far(rng):
    s = rng.normal(size=200)
    for far in (0.05, 0.1, 0.3):
        assert abs(tar_at_far(s, s, far) - far) <= 0.05


def test_worked_three_by_three_example():
    g, i = [0.9, 0.8, 0.2], [0.85, 0.1, 0.05]
    # pooled candidates: FAR(0.1) = 2/3, FAR(0.2) = 1/3 -> threshold 0.2
    assert threshold_at_far(g, i, 1 / 3) == 0.2
    assert tar_at_far(g, i, 1 / 3) == 1.0
    assert tar_at_far_bruteforce(g, i, 1 / 3) == 1.0
    # a tighter budget skips 0.85 (it accepts the 0.85 impostor)
    assert threshold_at_far(g, i, 0.2) == 0.9
    assert tar_at_far(g, i, 0.2) == pytest.approx(1 / 3)


def test_no_threshold_within_budget_gives_zero():
    # every candidate accepts at least one of the two impostors
    assert tar_at_far([0.1], [0.5, 0.5], 0.4) == 0.0


def test_tar_input_errors():
    with pytest.raises(EvaluationError):
        tar_at_far([], [0.1], 0.1)
    with pytest.raises(EvaluationError):
        tar_at_far([0.1], [0.1], 1.0)


@settings(max_examples=300, deadline=None)
@given(g=scores, i=scores, far=st.floats(0.01, 0.99))
def test_tar_matches_exhaustive_scan(g, i, far):
    assert tar_at_far(g, i, far) == tar_at_far_bruteforce(g, i, far)
    t = threshold_at_far(g, i, far)
    assert np.mean(np.asarray(i) >= t) <= far
    assert 0.0 <= tar_at_far(g, i, far) <= 1.0


@settings(max_examples=150, deadline=None)
@given(g=scores, i=scores, f1=st.floats(0.01, 0.98), df=st.floats(0.0, 0.5))
def test_tar_non_decreasing_in_far(g, i, f1, df):
    f2 = min(f1 + df, 0.99)
    assert tar_at_far(g, i, f1) <= tar_at_far(g, i, f2)


# --------------------------------------------------------------------------
# pairs


@pytest.fixture
def ids_world():
    # samples 0..11: identities 0,0,0,1,1,1,2,2,2,3,3,3
    return np.repeat(np.arange(4), 3)


def test_pair_counts_and_labels(ids_world):
    draw = sample_verification_pairs(range(6), range(12), ids_world, 10, np.random.default_rng(0))
    assert draw.genuine.sum() == 5 and (~draw.genuine).sum() == 5
    same = ids_world[draw.first] == ids_world[draw.second]
    assert np.array_equal(same, draw.genuine)
    assert np.all(draw.first != draw.second)
    odd = sample_verification_pairs(range(6), range(12), ids_world, 7, np.random.default_rng(0))
    assert odd.genuine.sum() == 4


def test_single_client_pool_draws_locally(ids_world):
    draw = sample_verification_pairs(range(6), [], ids_world, 20, np.random.default_rng(1))
    assert set(draw.second.tolist()) <= set(range(6))


def test_pair_draw_is_seeded(ids_world):
    a = sample_verification_pairs(range(6), range(12), ids_world, 16, np.random.default_rng(3))
    b = sample_verification_pairs(range(6), range(12), ids_world, 16, np.random.default_rng(3))
    assert np.array_equal(a.first, b.first) and np.array_equal(a.second, b.second)


def test_pairs_need_a_genuine_identity(ids_world):
    with pytest.raises(EvaluationError):
        sample_verification_pairs([0, 3, 6], range(12), ids_world, 4, np.random.default_rng(0))


def test_to_pairs_carries_embeddings(ids_world):
    emb = np.arange(24.0).reshape(12, 2) + 1
    draw = sample_verification_pairs(range(6), range(12), ids_world, 4, np.random.default_rng(0))
    pairs = draw.to_pairs(emb)
    assert len(pairs) == 4 and pairs[0].genuine
    assert np.array_equal(pairs[0].embedding_a, emb[draw.first[0]])


def test_tar_is_scale_invariant(small_world):
    table, manifest, spec = small_world
    backbone = init_backbone(spec, np.random.default_rng(0))
    c = manifest.clients[0]
    pool = [s for cl in manifest.clients for s in cl.test]
    draw = sample_verification_pairs(c.test, pool, table.identities, 64, np.random.default_rng(2))
    # scaling the last layer scales every embedding by the same positive factor
    scaled = backbone.copy()
    tail = spec.embedding_dim * spec.layer_dims[-2] + spec.embedding_dim
    scaled[-tail:] *= 3.7
    a = score_draw(spec, backbone, table.features, draw, 0.1)
    b = score_draw(spec, scaled, table.features, draw, 0.1)
    assert a == b


# --------------------------------------------------------------------------
# reports


def test_report_statistics():
    r = report([0.6, 0.8])
    assert r.mean == pytest.approx(0.7) and r.std == pytest.approx(0.1)
    assert report([0.7, 0.7, 0.7]).std == pytest.approx(0.0, abs=1e-15)
    assert report([0.6, 0.8], population_std=False).std == pytest.approx(np.std([0.6, 0.8], ddof=1))


def test_report_validation():
    with pytest.raises(ReportError):
        report([1.2])
    with pytest.raises(ReportError):
        report([])


def test_report_round_trip_and_integrity():
    r = report([0.61, 0.72, 0.93], repeat_scores=[[0.6, 0.62], [0.7, 0.74], [0.9, 0.96]],
               num_eval_repeats=2)
    d = r.to_dict()
    back = EvaluationReport.from_dict(d)
    assert back.to_dict() == d
    assert abs(back.mean - np.mean(back.scores)) <= 1e-12
    d["aggregate"]["mean"] += 1e-6
    with pytest.raises(ReportError):
        EvaluationReport.from_dict(d)


def test_eval_config_validation():
    with pytest.raises(ConfigError):
        EvalConfig(far_target=1.0)
    with pytest.raises(ConfigError):
        EvalConfig(repeats=0)
    with pytest.raises(ConfigError):
        EvalConfig(tune_lr=0.0)


def test_evaluate_cohort_repeats_and_determinism(small_world):
    table, manifest, spec = small_world
    bb = init_backbone(spec, np.random.default_rng(0))
    tests = {c.client_id: c.test for c in manifest.clients}
    pool = [s for c in manifest.clients for s in c.test]
    cfg = EvalConfig(pairs=64, repeats=3)
    a = evaluate_cohort(spec, {0: bb, 1: bb}, table, tests, pool, cfg, 5, "train", False)
    b = evaluate_cohort(spec, {0: bb, 1: bb}, table, tests, pool, cfg, 5, "train", False)
    assert a.to_dict() == b.to_dict()
    assert len(a.repeat_scores[0]) == 3 and a.clients == [0, 1]
    h = evaluate_cohort(spec, {2: bb, 3: bb}, table, tests, pool, cfg, 5, "holdout", False)
    assert not set(a.clients) & set(h.clients)


# --------------------------------------------------------------------------
# deltas


def test_delta_examples():
    same = per_client_delta_report(report([0.5, 0.7]), report([0.5, 0.7]))
    assert same["deltas_percent"] == {0: 0.0, 1: 0.0}
    d = per_client_delta_report(report([0.5506]), report([0.64044]))
    assert round(d["deltas_percent"][0], 1) == 16.3
    d = per_client_delta_report(report([0.5, 0.9]), report([0.55, 0.91]))
    assert d["deltas_percent"][0] == pytest.approx(10.0)
    assert d["weakest_client"] == 0 and d["weakest_gains_most"]


def test_delta_rejects_mismatch():
    with pytest.raises(ReportError):
        per_client_delta_report(report([0.5, 0.6]), report([0.5]))
    with pytest.raises(ReportError):
        per_client_delta_report(report([0.5]), report([0.5], far_target=0.01))
