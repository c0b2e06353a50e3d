import csv
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from volta.baselines import (
    conformal_set,
    energy_score,
    fit_conformal,
    fit_mahalanobis,
    mahalanobis_distances,
    mahalanobis_score,
    msp_score,
    write_scores_csv,
)
from volta.core_math import l2_normalize, softmax
from volta.errors import InvalidArgumentError
from volta.model import uncertainty


def test_msp():
    assert msp_score(np.full(10, 0.1)) == pytest.approx(0.9)
    assert msp_score(np.eye(3)[1]) == 0.0


def test_msp_equals_volta_uncertainty(rng):
    protos = l2_normalize(rng.normal(size=(5, 4)))
    z = l2_normalize(rng.normal(size=(20, 4)))
    np.testing.assert_array_equal(msp_score(softmax(z @ protos.T / 0.1)), uncertainty(protos, z, 0.1))


def test_energy_examples(rng):
    assert energy_score(np.zeros(10)) == pytest.approx(-math.log(10), abs=1e-15)
    f = rng.normal(size=8)
    assert energy_score(f + 3.5) == pytest.approx(energy_score(f) - 3.5, abs=1e-12)
    for _ in range(10):
        f = rng.uniform(-30, 30, 12)
        ref = -mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(float(v))) for v in f))
        assert abs(energy_score(f) - float(ref)) <= 1e-12 * abs(float(ref))


@given(arrays(np.float64, 6, elements=st.floats(-50, 50)), st.integers(0, 5), st.floats(1e-3, 10))
def test_energy_monotone(f, i, bump):
    g = f.copy()
    g[i] += bump
    assert energy_score(g) <= energy_score(f)
    # strict decrease is only resolvable in float64 when the bumped logit
    # carries a visible share of the total mass
    if f[i] >= f.max() - 10:
        assert energy_score(g) < energy_score(f)


def test_mahalanobis_identity_case():
    r = np.random.default_rng(0)
    # two classes with exactly isotropic unit pooled covariance
    base = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    x = np.vstack([base, base + 1.0])
    y = np.repeat([0, 1], 4)
    m = fit_mahalanobis(x, y)
    cov = 0.5 * np.eye(2) + 1e-6 * np.eye(2)
    np.testing.assert_allclose(m.precision, np.linalg.inv(cov), rtol=1e-10)
    assert mahalanobis_score(m, np.array([1.0, 1.0])) == pytest.approx(0.0, abs=1e-12)
    assert r is not None


def test_mahalanobis_degenerate_within_class():
    x = np.array([[0.0, 0.0]] * 3 + [[2.0, 1.0]] * 3)
    y = np.repeat([0, 1], 3)
    m = fit_mahalanobis(x, y)
    assert np.all(np.isfinite(m.precision))
    assert mahalanobis_score(m, np.array([2.0, 1.0])) == 0.0


def test_mahalanobis_against_solve_oracle(rng):
    x = rng.normal(size=(60, 5)) @ rng.normal(size=(5, 5))
    y = np.arange(60) % 3
    m = fit_mahalanobis(x, y)
    mus = np.stack([x[y == c].mean(0) for c in range(3)])
    cov = sum(np.outer(x[i] - mus[y[i]], x[i] - mus[y[i]]) for i in range(60)) / 60 + 1e-6 * np.eye(5)
    q = rng.normal(size=(7, 5))
    ref = np.array([[(f - mu) @ np.linalg.solve(cov, f - mu) for mu in mus] for f in q])
    np.testing.assert_allclose(mahalanobis_distances(m, q), ref, rtol=1e-8)
    np.testing.assert_allclose(m.precision, m.precision.T, atol=1e-8)
    assert np.linalg.eigvalsh(m.precision).min() >= -1e-8


def test_mahalanobis_properties(rng):
    x = rng.normal(size=(90, 4))
    y = np.arange(90) % 3
    m = fit_mahalanobis(x, y)
    train_scores = mahalanobis_score(m, x)
    assert np.all(train_scores >= 0)
    far = 100 * np.abs(x).max() * np.ones(4)
    assert mahalanobis_score(m, far) > train_scores.max()
    perm = np.array([2, 0, 1])
    relabeled = fit_mahalanobis(x, perm[y])
    np.testing.assert_allclose(mahalanobis_score(relabeled, x), train_scores, rtol=1e-12)
    assert mahalanobis_score(m, m.means[1]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(InvalidArgumentError):
        fit_mahalanobis(x[:4], np.array([0, 0, 0, 1]))
    with pytest.raises(InvalidArgumentError):
        mahalanobis_score(m, np.ones(3))


def probs_with_true_scores(scores):
    s = np.asarray(scores)
    return np.stack([1 - s, s], axis=1), np.zeros(len(s), dtype=int)


def test_conformal_rank_examples():
    p, y = probs_with_true_scores(np.arange(1, 10) / 10)
    c = fit_conformal(p, y, 0.1)
    assert c.rank == 9 and c.qhat == pytest.approx(0.9)
    assert fit_conformal(p, y, 0.99).qhat == pytest.approx(0.1)
    p4, y4 = probs_with_true_scores([0.1, 0.2, 0.3, 0.4])
    assert fit_conformal(p4, y4, 0.1).qhat == 1.0
    with pytest.raises(InvalidArgumentError):
        fit_conformal(np.zeros((0, 2)), [], 0.1)


def test_conformal_sets():
    full = fit_conformal(*probs_with_true_scores([0.1] * 4), 0.1)
    mask, size = conformal_set(np.array([[0.5, 0.3, 0.2]]), full)
    assert size[0] == 3
    from volta.baselines import ConformalCalibration
    zero = ConformalCalibration(0.1, 0.0, 5, 5)
    mask, size = conformal_set(np.array([[0.0, 1.0, 0.0]]), zero)
    assert mask[0].tolist() == [False, True, False] and size[0] == 1
    mask, _ = conformal_set(np.array([[0.7, 0.2, 0.1]]), ConformalCalibration(0.1, 0.85, 9, 9))
    assert mask[0].tolist() == [True, True, False]


def test_conformal_coverage_small():
    r = np.random.default_rng(7)
    cover = []
    for _ in range(100):
        p = r.dirichlet(np.ones(4), size=200)
        y = np.array([r.choice(4, p=row) for row in p])
        c = fit_conformal(p[:100], y[:100], 0.1)
        mask, _ = conformal_set(p[100:], c)
        cover.append(mask[np.arange(100), y[100:]].mean())
    assert np.mean(cover) >= 0.9 - 3 * math.sqrt(0.09 / (100 * 100))


def test_scores_csv(tmp_path):
    write_scores_csv(tmp_path / "s.csv", {"msp": np.array([0.1, 0.2]), "energy": np.array([-1.0])})
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows == [["sample_id", "method", "score"], ["0", "msp", "0.1"], ["1", "msp", "0.2"],
                    ["0", "energy", "-1.0"]]
