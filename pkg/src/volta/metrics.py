"""Evaluation metrics: proper scores, calibration error, selective prediction
and OOD detection statistics."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .calibration import N_BINS, bin_index, reliability
from .errors import InvalidArgumentError

PROB_FLOOR = 1e-300


def _probs_labels(probabilities, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise InvalidArgumentError("probabilities must be a non-empty (n, K) array")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (p.shape[0],):
        raise InvalidArgumentError("need exactly one label per probability row")
    if y.min() < 0 or y.max() >= p.shape[1]:
        raise InvalidArgumentError(f"labels must lie in [0, {p.shape[1]})")
    return p, y


def accuracy(probabilities, labels) -> float:
    p, y = _probs_labels(probabilities, labels)
    return float(np.mean(np.argmax(p, axis=1) == y))


def nll(probabilities, labels) -> float:
    p, y = _probs_labels(probabilities, labels)
    return float(-np.mean(np.log(np.maximum(p[np.arange(len(y)), y], PROB_FLOOR))))


def one_hot(labels, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def brier(probabilities, labels) -> float:
    """Squared error summed over all K entries, averaged over samples."""
    p, y = _probs_labels(probabilities, labels)
    return float(np.mean(np.sum((p - one_hot(y, p.shape[1])) ** 2, axis=1)))


@dataclass
class BrierDecomposition:
    unc: float
    res: float
    rel: float
    mode: str
    within_bin_variance: float = 0.0
    within_bin_covariance: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def brier_decomposition(probabilities, labels, mode: str = "murphy_binned",
                        n_bins: int = N_BINS) -> BrierDecomposition:
    """Split the Brier score into uncertainty, resolution and reliability.

    ``"as_printed"`` evaluates three literal formulas against the empirical
    class prior; its resolution and reliability terms are the same expression.

    ``"murphy_binned"`` groups samples into the confidence bins used for ECE.
    With per-bin mean forecast ``f_b`` and mean outcome ``o_b``::

        UNC = sum_k ybar_k (1 - ybar_k)
        RES = sum_b n_b/N |o_b - ybar|^2
        REL = sum_b n_b/N |f_b - o_b|^2 + WBV - WBC

    where WBV is the within-bin forecast variance and WBC twice the within-bin
    forecast/outcome covariance. Folding both into REL makes
    ``UNC - RES + REL`` equal the Brier score exactly; they are also reported
    separately.
    """
    p, y = _probs_labels(probabilities, labels)
    n, k = p.shape
    o = one_hot(y, k)
    ybar = o.mean(axis=0)
    if mode == "as_printed":
        unc = float(np.mean(np.sum((ybar - o) ** 2, axis=1)))
        res = float(np.mean(np.sum((ybar - p) ** 2, axis=1)))
        rel = float(np.mean(np.sum((p - ybar) ** 2, axis=1)))
        return BrierDecomposition(unc, res, rel, mode)
    if mode != "murphy_binned":
        raise InvalidArgumentError(f"unknown decomposition mode {mode!r}")
    idx = bin_index(p.max(axis=1), n_bins)
    unc = float(np.sum(ybar * (1.0 - ybar)))
    res = rel_binned = wbv = wbc = 0.0
    for b in np.unique(idx):
        sel = idx == b
        pb, ob = p[sel], o[sel]
        fbar, obar = pb.mean(axis=0), ob.mean(axis=0)
        w = sel.sum() / n
        res += w * float(np.sum((obar - ybar) ** 2))
        rel_binned += w * float(np.sum((fbar - obar) ** 2))
        dp, do = pb - fbar, ob - obar
        wbv += float(np.sum(dp * dp)) / n
        wbc += 2.0 * float(np.sum(dp * do)) / n
    return BrierDecomposition(unc, res, rel_binned + wbv - wbc, mode, wbv, wbc)


def ece_mce(probabilities, labels, n_bins: int = N_BINS) -> tuple[float, float]:
    p, y = _probs_labels(probabilities, labels)
    bins = reliability(p.max(axis=1), np.argmax(p, axis=1) == y, n_bins)
    return bins.ece(), bins.mce()


@dataclass
class RiskCoverageCurve:
    order: np.ndarray
    coverage: np.ndarray
    risk: np.ndarray

    @property
    def aurc(self) -> float:
        return float(np.mean(self.risk))

    @property
    def selective_auc(self) -> float:
        return float(np.mean(1.0 - self.risk))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["coverage", "risk"])
            for c, r in zip(self.coverage, self.risk):
                w.writerow([repr(float(c)), repr(float(r))])


def risk_coverage(correct, uncertainty) -> tuple[RiskCoverageCurve, float, float, float]:
    """Risk-coverage curve, AURC, e-AURC and selective AUC.

    Samples are accepted in ascending uncertainty, ties in original order.
    e-AURC subtracts ``err * (1 - err)`` with ``err`` the full-coverage error.
    """
    ok = np.asarray(correct, dtype=bool)
    u = np.asarray(uncertainty, dtype=np.float64)
    if ok.ndim != 1 or ok.shape != u.shape or ok.size == 0:
        raise InvalidArgumentError("correctness flags and uncertainties must be equal-length vectors")
    order = np.argsort(u, kind="stable")
    errors = np.cumsum(~ok[order])
    n = len(ok)
    counts = np.arange(1, n + 1)
    curve = RiskCoverageCurve(order, counts / n, errors / counts)
    err = errors[-1] / n
    aurc = curve.aurc
    return curve, aurc, aurc - err * (1.0 - err), curve.selective_auc


def selective_risk(correct, uncertainty, threshold: float) -> tuple[float, float]:
    """(risk, coverage) on the acceptance set ``{u <= threshold}``."""
    ok = np.asarray(correct, dtype=bool)
    accepted = np.asarray(uncertainty) <= threshold
    if not accepted.any():
        return 0.0, 0.0
    return float(np.mean(~ok[accepted])), float(np.mean(accepted))


@dataclass
class DetectionCurves:
    """ROC and precision-recall operating points, thresholds descending."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    precision: np.ndarray
    recall: np.ndarray

    def roc_to_csv(self, path) -> None:
        _write_columns(path, ("threshold", "fpr", "tpr"), (self.thresholds, self.fpr, self.tpr))

    def pr_to_csv(self, path) -> None:
        _write_columns(path, ("threshold", "precision", "recall"),
                       (self.thresholds, self.precision, self.recall))


def _write_columns(path, header, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([repr(float(v)) for v in row])


def _split_scores(id_scores, ood_scores) -> tuple[np.ndarray, np.ndarray]:
    neg = np.asarray(id_scores, dtype=np.float64).ravel()
    pos = np.asarray(ood_scores, dtype=np.float64).ravel()
    if neg.size == 0 or pos.size == 0:
        raise InvalidArgumentError("both ID and OOD score sets must be non-empty")
    if not (np.all(np.isfinite(neg)) and np.all(np.isfinite(pos))):
        raise InvalidArgumentError("scores must be finite")
    return neg, pos


def detection_curves(id_scores, ood_scores) -> DetectionCurves:
    """Operating points for thresholds at every distinct score, OOD positive."""
    neg, pos = _split_scores(id_scores, ood_scores)
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(len(pos), bool), np.zeros(len(neg), bool)])
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], is_pos[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(t)[last_of_group]
    fp = np.cumsum(~t)[last_of_group]
    thresholds = s[last_of_group]
    tpr = np.r_[0.0, tp / len(pos)]
    fpr = np.r_[0.0, fp / len(neg)]
    precision = np.r_[1.0, tp / (tp + fp)]
    return DetectionCurves(np.r_[np.inf, thresholds], fpr, tpr, precision, tpr.copy())


def auroc(id_scores, ood_scores) -> float:
    """Mann-Whitney statistic with midranks: P(ood > id) + P(tie) / 2."""
    neg, pos = _split_scores(id_scores, ood_scores)
    ranks = rankdata(np.concatenate([pos, neg]))
    n_pos, n_neg = len(pos), len(neg)
    u_stat = ranks[:n_pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def auroc_trapezoid(curves: DetectionCurves) -> float:
    return float(np.sum(np.diff(curves.fpr) * (curves.tpr[1:] + curves.tpr[:-1]) / 2.0))


def auprc(curves: DetectionCurves) -> float:
    """Average precision: precision summed over recall increments."""
    return float(np.sum(np.diff(curves.recall) * curves.precision[1:]))


def fpr_at_tpr(curves: DetectionCurves, target: float = 0.95, interpolate: bool = True) -> float:
    """FPR at the first operating point reaching ``target`` TPR.

    With ``interpolate`` the FPR is read off the straight segment joining that
    point to its predecessor.
    """
    j = int(np.argmax(curves.tpr >= target - 1e-12))
    if not interpolate or j == 0 or curves.tpr[j] == target:
        return float(curves.fpr[j])
    t0, t1 = curves.tpr[j - 1], curves.tpr[j]
    f0, f1 = curves.fpr[j - 1], curves.fpr[j]
    return float(f0 + (f1 - f0) * (target - t0) / (t1 - t0))


@dataclass
class OODMetrics:
    auroc: float
    auprc: float
    fpr95: float

    def to_dict(self) -> dict:
        return asdict(self)


def auroc_auprc_fpr95(id_scores, ood_scores) -> tuple[OODMetrics, DetectionCurves]:
    curves = detection_curves(id_scores, ood_scores)
    return OODMetrics(auroc(id_scores, ood_scores), auprc(curves), fpr_at_tpr(curves)), curves


def model_size_mb(n_parameters: int) -> float:
    return n_parameters * 4 / 2**20


def efficiency(infer, batch, n_parameters: int, n_batches: int = 5,
               batch_size: int = 256) -> tuple[float, float]:
    """(ms per sample, model size in MB) for an inference callable.

    One warm-up call precedes ``n_batches`` timed calls over consecutive
    slices of ``batch`` (recycled when shorter than needed).
    """
    x = np.asarray(batch)
    reps = math.ceil(n_batches * batch_size / len(x))
    pool = np.concatenate([x] * reps) if reps > 1 else x
    infer(pool[:batch_size])
    elapsed = 0.0
    for i in range(n_batches):
        chunk = pool[i * batch_size:(i + 1) * batch_size]
        t0 = time.perf_counter()
        infer(chunk)
        elapsed += time.perf_counter() - t0
    return 1000.0 * elapsed / (n_batches * batch_size), model_size_mb(n_parameters)


@dataclass
class MetricsReport:
    """Everything measured for one (model, dataset, seed) evaluation.

    ``auroc``/``auprc``/``fpr95`` pool all OOD sets and are ``None`` when no
    OOD data was scored; ``ms_per_sample`` is ``None`` unless timing was
    requested, keeping reports byte-reproducible by default.
    """

    accuracy: float
    nll: float
    brier: float
    brier_unc: float
    brier_res: float
    brier_rel: float
    brier_mode: str
    ece: float
    mce: float
    aurc: float
    e_aurc: float
    selective_auc: float
    auroc: float | None = None
    auprc: float | None = None
    fpr95: float | None = None
    ms_per_sample: float | None = None
    model_size_mb: float | None = None
    paper_formulas: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def flat(self) -> dict:
        out = {}
        for key, value in asdict(self).items():
            if isinstance(value, dict):
                out.update({f"{key}.{k}": v for k, v in value.items()})
            else:
                out[key] = value
        return out


NUMERIC_FIELDS = ("accuracy", "nll", "brier", "brier_unc", "brier_res", "brier_rel", "ece", "mce",
                  "aurc", "e_aurc", "selective_auc", "auroc", "auprc", "fpr95")


def evaluate(probabilities, labels, uncertainty) -> MetricsReport:
    """In-distribution metrics; OOD and efficiency fields are filled by callers."""
    p, y = _probs_labels(probabilities, labels)
    correct = np.argmax(p, axis=1) == y
    decomposition = brier_decomposition(p, y, "murphy_binned")
    printed = brier_decomposition(p, y, "as_printed")
    ece, mce = ece_mce(p, y)
    _, aurc_value, e_aurc, sel_auc = risk_coverage(correct, uncertainty)
    return MetricsReport(
        accuracy=float(correct.mean()),
        nll=nll(p, y),
        brier=brier(p, y),
        brier_unc=decomposition.unc,
        brier_res=decomposition.res,
        brier_rel=decomposition.rel,
        brier_mode=decomposition.mode,
        ece=ece,
        mce=mce,
        aurc=aurc_value,
        e_aurc=e_aurc,
        selective_auc=sel_auc,
        paper_formulas={"unc": printed.unc, "res": printed.res, "rel": printed.rel},
    )
