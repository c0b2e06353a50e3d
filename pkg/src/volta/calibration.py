"""Post-hoc temperature fitting and reliability binning.

The validation NLL is convex in the inverse temperature ``beta = 1 / tau``,
so a bracketed Newton iteration on its derivative finds the unique minimizer.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from .core_math import softmax
from .errors import InvalidArgumentError

BETA_MIN = 1e-3
BETA_MAX = 1e3
N_BINS = 15


def _check_sims(similarities, labels) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(similarities, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] == 0:
        raise InvalidArgumentError("similarities must be a non-empty (n, K) array")
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError("similarities must be finite")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (a.shape[0],) or y.min() < 0 or y.max() >= a.shape[1]:
        raise InvalidArgumentError("labels must be one integer in [0, K) per row")
    return a, y


def nll_of_beta(similarities, labels, beta: float) -> tuple[float, float, float]:
    """Mean NLL at inverse temperature ``beta`` and its first two derivatives.

    The second derivative is the mean softmax-weighted variance of each
    similarity row, hence never negative.
    """
    if not beta > 0:
        raise InvalidArgumentError("beta must be positive")
    a, y = _check_sims(similarities, labels)
    logits = beta * a
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
    a_true = a[np.arange(len(y)), y]
    q = softmax(logits)
    mean_a = (q * a).sum(axis=1)
    var_a = (q * (a - mean_a[:, None]) ** 2).sum(axis=1)
    value = float(np.mean(lse - beta * a_true))
    return value, float(np.mean(mean_a - a_true)), float(np.mean(var_a))


def nll_of_beta_extended(similarities, labels, beta) -> np.ndarray:
    """Objective only, in extended precision, for an array of ``beta`` values.

    Used by the derivative-free minimizers; differences between nearby
    objective values need more than float64 resolution near the optimum.
    """
    a, y = _check_sims(similarities, labels)
    a = a.astype(np.longdouble)
    d = a - a[np.arange(len(y)), y][:, None]
    betas = np.atleast_1d(np.asarray(beta, dtype=np.longdouble))
    out = np.empty(betas.shape, dtype=np.longdouble)
    dmax = d.max(axis=1)
    for i, b in enumerate(betas):
        shift = b * dmax
        out[i] = np.mean(np.log(np.exp(b * d - shift[:, None]).sum(axis=1)) + shift)
    return out


@dataclass
class CalibrationResult:
    beta_star: float
    tau_star: float
    nll_before: float
    nll_after: float
    iterations: int
    status: str  # "converged" | "boundary" | "flat objective" | "max_iter"

    def to_dict(self) -> dict:
        return asdict(self)


def fit_temperature(similarities, labels, beta0: float = 1.0, max_iter: int = 200,
                    beta_min: float = BETA_MIN, beta_max: float = BETA_MAX) -> CalibrationResult:
    """Minimize validation NLL over ``beta`` in ``[beta_min, beta_max]``.

    Newton steps are taken while they stay inside the current sign bracket of
    the derivative; otherwise the bracket is bisected in log space. If the
    derivative keeps one sign over the whole range the corresponding endpoint
    is returned with status ``"boundary"``. ``nll_before`` is evaluated at
    ``beta0`` (the inverse of the training temperature, by convention).
    """
    a, y = _check_sims(similarities, labels)
    beta0 = float(np.clip(beta0, beta_min, beta_max))
    nll_before = nll_of_beta(a, y, beta0)[0]

    def result(beta, iters, status):
        return CalibrationResult(beta, 1.0 / beta, nll_before, nll_of_beta(a, y, beta)[0],
                                 iters, status)

    if np.all(a.max(axis=1) == a.min(axis=1)):
        return result(1.0, 0, "flat objective")
    lo, hi = beta_min, beta_max
    if nll_of_beta(a, y, hi)[1] <= 0:
        return result(hi, 0, "boundary")
    if nll_of_beta(a, y, lo)[1] >= 0:
        return result(lo, 0, "boundary")

    beta = beta0
    for it in range(1, max_iter + 1):
        _, d1, d2 = nll_of_beta(a, y, beta)
        if abs(d1) < 1e-10:
            return result(beta, it, "converged")
        if d1 > 0:
            hi = beta
        else:
            lo = beta
        if hi - lo < 1e-12:
            return result(beta, it, "converged")
        step = beta - d1 / d2 if d2 > 0 else math.nan
        beta = step if lo < step < hi else math.sqrt(lo * hi)
    return result(beta, max_iter, "max_iter")


def golden_section_beta(similarities, labels, beta_min: float = BETA_MIN,
                        beta_max: float = BETA_MAX, tol: float = 1e-13) -> float:
    """Derivative-free minimizer over ``log beta``; a cross-check for Newton."""
    a, y = _check_sims(similarities, labels)
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    lo, hi = math.log(beta_min), math.log(beta_max)
    f = lambda t: nll_of_beta_extended(a, y, math.exp(t))[0]  # noqa: E731
    c, d = hi - inv_phi * (hi - lo), lo + inv_phi * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol:
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - inv_phi * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + inv_phi * (hi - lo)
            fd = f(d)
    return math.exp(0.5 * (lo + hi))


@dataclass
class ReliabilityBins:
    """Per-bin sample count, mean confidence and accuracy over ``[0, 1]``."""

    counts: np.ndarray
    mean_confidence: np.ndarray
    accuracy: np.ndarray
    n_bins: int = N_BINS

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.n_bins + 1) / self.n_bins

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def gaps(self) -> np.ndarray:
        return np.abs(self.accuracy - self.mean_confidence)

    def ece(self) -> float:
        return float(np.sum(self.counts / self.total * self.gaps()))

    def mce(self) -> float:
        occupied = self.counts > 0
        return float(self.gaps()[occupied].max()) if occupied.any() else 0.0

    def to_csv(self, path) -> None:
        edges = self.edges
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count", "mean_conf", "accuracy"])
            for m in range(self.n_bins):
                w.writerow([repr(float(edges[m])), repr(float(edges[m + 1])), int(self.counts[m]),
                            repr(float(self.mean_confidence[m])), repr(float(self.accuracy[m]))])


def bin_index(confidences, n_bins: int = N_BINS) -> np.ndarray:
    return np.minimum(np.floor(np.asarray(confidences) * n_bins).astype(np.int64), n_bins - 1)


def reliability(confidences, correct, n_bins: int = N_BINS) -> ReliabilityBins:
    """Bin samples by confidence into right-open bins; 1.0 goes to the last bin.

    Empty bins report zero mean confidence and accuracy.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    ok = np.asarray(correct, dtype=np.float64)
    if conf.ndim != 1 or conf.shape != ok.shape or conf.size == 0:
        raise InvalidArgumentError("confidences and correctness flags must be equal-length vectors")
    if not np.all((conf >= 0) & (conf <= 1)):
        raise InvalidArgumentError("confidences must lie in [0, 1]")
    idx = bin_index(conf, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    safe = np.maximum(counts, 1)
    mean_conf = np.bincount(idx, weights=conf, minlength=n_bins) / safe
    acc = np.bincount(idx, weights=ok, minlength=n_bins) / safe
    return ReliabilityBins(counts, mean_conf, acc, n_bins)
