"""Post-hoc uncertainty scorers that reuse a trained model's outputs.

Every score is oriented so that larger means more uncertain / more likely OOD.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .core_math import as_f64, log_sum_exp
from .errors import InvalidArgumentError

MAHALANOBIS_RIDGE = 1e-6
EIGEN_CUTOFF = 1e-10


def msp_score(probabilities) -> np.ndarray | float:
    """``1 - max_k p_k``."""
    p = np.asarray(probabilities, dtype=np.float64)
    s = 1.0 - p.max(axis=-1)
    return float(s) if np.ndim(s) == 0 else s


def energy_score(logits) -> np.ndarray | float:
    """``-logsumexp(logits)``; in-distribution inputs get lower energy."""
    lse = log_sum_exp(logits, axis=-1)
    return -lse


@dataclass(frozen=True)
class MahalanobisModel:
    means: np.ndarray      # (C, d)
    precision: np.ndarray  # (d, d)

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def fit_mahalanobis(features, labels, ridge: float = MAHALANOBIS_RIDGE) -> MahalanobisModel:
    """Class means plus the pseudo-inverse of the ridged pooled covariance.

    The pooled covariance averages centred outer products over all N samples.
    Eigenvalues below ``1e-10`` times the largest are treated as zero.
    """
    f = as_f64(features, "features")
    if f.ndim != 2:
        raise InvalidArgumentError("features must be 2-D")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (f.shape[0],):
        raise InvalidArgumentError("need one label per feature row")
    classes = np.unique(y)
    counts = np.array([np.sum(y == c) for c in classes])
    if np.any(counts < 2):
        raise InvalidArgumentError(f"every class needs >= 2 samples, got counts {counts.tolist()}")
    means = np.stack([f[y == c].mean(axis=0) for c in classes])
    centred = f - means[np.searchsorted(classes, y)]
    cov = centred.T @ centred / len(f) + ridge * np.eye(f.shape[1])
    evals, evecs = np.linalg.eigh(cov)
    keep = evals > EIGEN_CUTOFF * evals.max()
    inv = np.where(keep, 1.0 / np.where(keep, evals, 1.0), 0.0)
    precision = (evecs * inv) @ evecs.T
    precision = 0.5 * (precision + precision.T)
    return MahalanobisModel(means, precision)


def mahalanobis_distances(model: MahalanobisModel, features) -> np.ndarray:
    """Squared distances to every class mean, shape ``(n, C)``."""
    f = as_f64(features, "features")
    single = f.ndim == 1
    f = np.atleast_2d(f)
    if f.shape[1] != model.dim:
        raise InvalidArgumentError(f"feature dimension {f.shape[1]} != {model.dim}")
    diff = f[:, None, :] - model.means[None, :, :]
    d = np.einsum("ncd,de,nce->nc", diff, model.precision, diff)
    d = np.maximum(d, 0.0)
    return d[0] if single else d


def mahalanobis_score(model: MahalanobisModel, features) -> np.ndarray | float:
    d = mahalanobis_distances(model, features).min(axis=-1)
    return float(d) if np.ndim(d) == 0 else d


@dataclass(frozen=True)
class ConformalCalibration:
    alpha: float
    qhat: float
    n: int
    rank: int


def fit_conformal(probabilities, labels, alpha: float = 0.1) -> ConformalCalibration:
    """Split-conformal threshold from scores ``1 - p_true``.

    ``qhat`` is the k-th smallest score with ``k = ceil((n + 1)(1 - alpha))``;
    when ``k > n`` it saturates to 1 and every label is admitted.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise InvalidArgumentError("calibration set must be non-empty")
    if not 0 < alpha < 1:
        raise InvalidArgumentError("alpha must lie in (0, 1)")
    n = p.shape[0]
    scores = np.sort(1.0 - p[np.arange(n), y])
    # the tolerance keeps float products like 10 * 0.9 from rounding up a rank
    k = math.ceil((n + 1) * (1.0 - alpha) - 1e-9)
    qhat = 1.0 if k > n else float(scores[max(k, 1) - 1])
    return ConformalCalibration(alpha, qhat, n, k)


def conformal_set(probabilities, calib: ConformalCalibration) -> tuple[np.ndarray, np.ndarray]:
    """Boolean membership mask ``(n, K)`` and the set sizes."""
    p = np.asarray(probabilities, dtype=np.float64)
    members = (1.0 - p) <= calib.qhat
    return members, members.sum(axis=-1)


def write_scores_csv(path, scores: dict[str, np.ndarray]) -> None:
    """Per-sample scores as ``sample_id,method,score`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "method", "score"])
        for method, values in scores.items():
            for i, s in enumerate(np.asarray(values, dtype=np.float64)):
                w.writerow([i, method, repr(float(s))])
