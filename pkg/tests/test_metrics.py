import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from volta.calibration import reliability
from volta.errors import InvalidArgumentError
from volta.metrics import (
    NUMERIC_FIELDS,
    accuracy,
    auprc,
    auroc,
    auroc_auprc_fpr95,
    auroc_trapezoid,
    brier,
    brier_decomposition,
    detection_curves,
    ece_mce,
    efficiency,
    evaluate,
    fpr_at_tpr,
    model_size_mb,
    nll,
    risk_coverage,
    selective_risk,
)


def random_probs(seed, n=50, k=4):
    r = np.random.default_rng(seed)
    return r.dirichlet(np.full(k, 0.7), size=n), r.integers(0, k, n)


def test_scores_trivial_cases():
    p = np.eye(3)
    assert accuracy(p, [0, 1, 2]) == 1.0 and nll(p, [0, 1, 2]) == 0.0 and brier(p, [0, 1, 2]) == 0.0
    assert brier(np.full((5, 2), 0.5), [0, 1, 1, 0, 1]) == 0.5
    with pytest.raises(InvalidArgumentError):
        accuracy(np.zeros((0, 2)), [])


def test_scores_match_loops():
    p, y = random_probs(0)
    acc = sum(int(np.argmax(row) == t) for row, t in zip(p, y)) / 50
    nl = sum(-math.log(row[t]) for row, t in zip(p, y)) / 50
    br = sum(sum((row[k] - (k == t)) ** 2 for k in range(4)) for row, t in zip(p, y)) / 50
    assert accuracy(p, y) == acc
    assert nll(p, y) == pytest.approx(nl, rel=1e-13, abs=1e-13)
    assert brier(p, y) == pytest.approx(br, rel=1e-13, abs=1e-13)


@given(st.integers(0, 2**31 - 1), st.integers(2, 6), st.integers(1, 80))
def test_murphy_identity(seed, k, n):
    p, y = random_probs(seed, n, k)
    d = brier_decomposition(p, y, "murphy_binned")
    assert abs(d.unc - d.res + d.rel - brier(p, y)) <= 1e-10


@given(st.integers(0, 2**31 - 1))
def test_as_printed_res_equals_rel(seed):
    p, y = random_probs(seed)
    d = brier_decomposition(p, y, "as_printed")
    assert d.res == d.rel


def test_murphy_hand_example():
    p = np.array([[0.8, 0.2], [0.8, 0.2], [0.6, 0.4], [0.6, 0.4]])
    y = np.array([0, 1, 0, 0])
    d = brier_decomposition(p, y, "murphy_binned")
    assert d.unc == pytest.approx(0.375, abs=1e-15)
    assert d.res == pytest.approx(0.125, abs=1e-15)
    assert d.rel == pytest.approx(0.25, abs=1e-15)
    assert d.within_bin_variance == 0.0 and d.within_bin_covariance == 0.0
    assert brier(p, y) == pytest.approx(0.5, abs=1e-15)


def test_ece_examples():
    assert ece_mce(np.eye(3), [0, 1, 2]) == (0.0, 0.0)
    p = np.array([[0.8, 0.2]] * 5 + [[0.6, 0.4]] * 5)
    y = np.array([0] * 5 + [1] * 5)
    ece, mce = ece_mce(p, y)
    assert ece == pytest.approx(0.4, abs=1e-12) and mce == pytest.approx(0.6, abs=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_ece_le_mce_and_matches_bins(seed):
    p, y = random_probs(seed)
    ece, mce = ece_mce(p, y)
    assert ece <= mce + 1e-15
    bins = reliability(p.max(axis=1), p.argmax(axis=1) == y)
    assert bins.ece() == ece


def naive_aurc(correct, u):
    order = sorted(range(len(u)), key=lambda i: (u[i], i))
    risks, errs = [], 0
    for i, j in enumerate(order, start=1):
        errs += not correct[j]
        risks.append(errs / i)
    return sum(risks) / len(risks)


def test_risk_coverage_trivial_and_hand():
    _, aurc, e_aurc, sel = risk_coverage(np.ones(6, bool), np.arange(6.0))
    assert aurc == 0.0 and sel == 1.0 and e_aurc == 0.0
    _, aurc, e_aurc, _ = risk_coverage(np.zeros(4, bool), np.arange(4.0))
    assert aurc == 1.0 and e_aurc == 1.0
    ok = np.array([1, 1, 0, 1, 0], bool)
    curve, aurc, _, sel = risk_coverage(ok, np.array([0.1, 0.2, 0.3, 0.4, 0.5]))
    assert aurc == pytest.approx((0 + 0 + 1 / 3 + 1 / 4 + 2 / 5) / 5, abs=1e-15)
    assert round(aurc, 4) == 0.1967
    assert sel == pytest.approx(1 - aurc, abs=1e-15)
    np.testing.assert_allclose(curve.coverage, [0.2, 0.4, 0.6, 0.8, 1.0])


def test_aurc_all_patterns_up_to_8():
    for n in range(1, 9):
        u = np.random.default_rng(n).permutation(n).astype(float)
        for bits in itertools.product([False, True], repeat=n):
            ok = np.array(bits)
            assert risk_coverage(ok, u)[1] == pytest.approx(naive_aurc(ok, u), abs=1e-15)


def test_aurc_ties_broken_by_index():
    ok = np.array([False, True])
    assert risk_coverage(ok, np.zeros(2))[1] == pytest.approx((1 + 0.5) / 2)
    assert risk_coverage(ok[::-1], np.zeros(2))[1] == pytest.approx((0 + 0.5) / 2)


def test_perfect_ranking_minimizes_aurc():
    for bits in [(1, 0, 1, 1, 0, 0, 1, 1), (0, 0, 0, 1, 1, 1, 1, 1), (1, 1, 1, 1, 1, 1, 1, 0)]:
        ok = np.array(bits, bool)
        perfect = np.where(ok, 0.0, 1.0) + np.arange(8) * 1e-3
        best = risk_coverage(ok, perfect)[1]
        worst_gap = min(risk_coverage(ok, np.array(perm, float))[1] - best
                        for perm in itertools.permutations(range(8)))
        assert worst_gap >= -1e-15


@given(st.integers(0, 2**31 - 1))
def test_selective_risk_zero_below_min_error_uncertainty(seed):
    r = np.random.default_rng(seed)
    ok = r.random(40) < 0.7
    u = r.random(40)
    if ok.all():
        return
    t = np.nextafter(u[~ok].min(), -np.inf)
    risk, _ = selective_risk(ok, u, t)
    assert risk == 0.0


def brute_auroc(neg, pos):
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auroc_trivial():
    assert auroc([0.1, 0.2], [0.3, 0.9]) == 1.0
    assert auroc([0.5] * 4, [0.5] * 3) == 0.5
    m, _ = auroc_auprc_fpr95([0.1, 0.2], [0.3, 0.9])
    assert m.auroc == 1.0 and m.fpr95 == 0.0 and m.auprc == 1.0
    with pytest.raises(InvalidArgumentError):
        auroc([], [1.0])


def test_auroc_rank_pairwise_trapezoid():
    for seed in range(20):
        r = np.random.default_rng(seed)
        neg = np.round(r.normal(size=30), 1)
        pos = np.round(r.normal(0.8, 1, size=30), 1)
        a = auroc(neg, pos)
        assert abs(a - brute_auroc(neg, pos)) <= 1e-12
        assert abs(a - auroc_trapezoid(detection_curves(neg, pos))) <= 1e-12


def test_auprc_and_fpr95_hand():
    neg, pos = [0.1, 0.4, 0.35], [0.8, 0.3]
    c = detection_curves(neg, pos)
    # ranked: 0.8(+) 0.4(-) 0.35(-) 0.3(+) 0.1(-)
    assert auprc(c) == pytest.approx(0.5 * 1.0 + 0.5 * 0.5)
    # tpr hits 1.0 at fpr 2/3, previous point (tpr .5, fpr 2/3)
    assert fpr_at_tpr(c, 0.95) == pytest.approx(2 / 3)
    assert fpr_at_tpr(c, 0.95, interpolate=False) == pytest.approx(2 / 3)
    neg, pos = [0.0, 0.2, 0.6, 0.9], [0.1, 0.5, 0.7, 0.8]
    c = detection_curves(neg, pos)
    # tpr .75 at fpr .25 (thr .7), tpr 1.0 first at fpr .75 (thr .1): previous point tpr .75 fpr .75
    assert fpr_at_tpr(c, 0.95) == pytest.approx(0.75)


def test_efficiency_and_size():
    assert model_size_mb(1_048_576) == 4.0
    ms, mb = efficiency(lambda b: b.sum(), np.ones((10, 3)), 2**20)
    assert ms >= 0 and math.isfinite(ms) and mb == 4.0
    _, mb2 = efficiency(lambda b: b.sum(), np.ones((10, 3)), 2**20, n_batches=10)
    assert mb2 == mb


def test_evaluate_report_fields():
    p, y = random_probs(3)
    u = 1 - p.max(axis=1)
    rep = evaluate(p, y, u)
    assert rep.brier_mode == "murphy_binned"
    assert rep.paper_formulas["res"] == rep.paper_formulas["rel"]
    for name in NUMERIC_FIELDS:
        v = getattr(rep, name)
        assert v is None or math.isfinite(v)
    for name in ("accuracy", "ece", "mce", "aurc", "selective_auc"):
        assert 0.0 <= getattr(rep, name) <= 1.0
    assert set(rep.flat()) >= {"accuracy", "paper_formulas.res"}
