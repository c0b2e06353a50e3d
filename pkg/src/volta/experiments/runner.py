"""Multi-seed experiment orchestration, aggregation and report emission."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..baselines import (
    conformal_set,
    energy_score,
    fit_conformal,
    fit_mahalanobis,
    mahalanobis_score,
    msp_score,
)
from ..calibration import CalibrationResult, ReliabilityBins, fit_temperature, reliability
from ..core_math import softmax
from ..errors import ConfigError, InvalidArgumentError, VoltaError
from ..metrics import (
    DetectionCurves,
    MetricsReport,
    OODMetrics,
    RiskCoverageCurve,
    auroc_auprc_fpr95,
    efficiency,
    evaluate,
    model_size_mb,
    risk_coverage,
)
from ..model import VoltaModel, encode, predict
from ..training import VARIANTS, TrainConfig, TrainingHistory, apply_ablation, train
from .data import BlobSpec, FeatureDataset, load_features, make_blobs, split
from .stats import welch_t_test

log = logging.getLogger(__name__)

REFERENCE = "volta"
BASELINES = ("msp", "temperature_scaling", "energy", "mahalanobis", "conformal")
ID_METRICS = ("accuracy", "nll", "brier", "ece", "mce", "aurc", "e_aurc", "selective_auc")
OOD_METRICS = ("auroc", "auprc", "fpr95")


def _from_dict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except InvalidArgumentError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class SyntheticData:
    """Gaussian blobs; sizes are per class (ID) or per blob (OOD)."""

    num_classes: int = 10
    dim: int = 64
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    n_ood: int = 50
    ood_blobs: int | None = None
    separation: float = 6.0
    ood_separation: float | None = None
    std: float = 1.0
    seed: int = 0


@dataclass
class FileData:
    """Feature files on disk. Without ``val`` a stratified split of ``train`` is used."""

    train: str
    test: str
    val: str | None = None
    ood: dict[str, str] = field(default_factory=dict)
    format: str | None = None
    num_classes: int | None = None
    val_fraction: float = 0.2
    split_seed: int = 0


@dataclass
class ExperimentConfig:
    """A full multi-seed run.

    ``train`` holds :class:`~volta.training.TrainConfig` fields except ``seed``
    and ``variant``, which come from ``seeds`` and ``variants``.
    """

    data: SyntheticData | FileData
    name: str = "experiment"
    seeds: list[int] = field(default_factory=lambda: [42, 123, 456])
    train: dict = field(default_factory=dict)
    variants: list[str] = field(default_factory=lambda: ["full"])
    baselines: list[str] = field(default_factory=lambda: list(BASELINES))
    conformal_alpha: float = 0.1
    timing: bool = False
    out: str | None = None

    def __post_init__(self):
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variant(s) {bad}; expected a subset of {VARIANTS}")
        if "full" not in self.variants:
            raise ConfigError("variants must include 'full' (the reference model)")
        bad = [b for b in self.baselines if b not in BASELINES]
        if bad:
            raise ConfigError(f"unknown baseline(s) {bad}; expected a subset of {BASELINES}")
        for key in ("seed", "variant"):
            if key in self.train:
                raise ConfigError(f"train.{key} is set per run; use the top-level list instead")
        self.train_config(self.seeds[0], "full")
        if not 0 < self.conformal_alpha < 1:
            raise ConfigError("conformal_alpha must lie in (0, 1)")

    def train_config(self, seed: int, variant: str) -> TrainConfig:
        return _from_dict(TrainConfig, {**self.train, "seed": seed, "variant": variant}, "train")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        d = dict(d)
        data = d.pop("data", None)
        if not isinstance(data, dict) or len(data) != 1 or next(iter(data)) not in ("synthetic", "files"):
            raise ConfigError('"data" must be {"synthetic": {...}} or {"files": {...}}')
        kind, body = next(iter(data.items()))
        parsed = _from_dict(SyntheticData if kind == "synthetic" else FileData, body, f"data.{kind}")
        return _from_dict(cls, {**d, "data": parsed}, "experiment config")

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        kind = "synthetic" if isinstance(self.data, SyntheticData) else "files"
        d["data"] = {kind: dataclasses.asdict(self.data)}
        return d


@dataclass
class Splits:
    train: FeatureDataset
    val: FeatureDataset
    test: FeatureDataset
    ood: dict[str, FeatureDataset]

    @property
    def num_classes(self) -> int:
        return self.train.num_classes


def load_splits(config: ExperimentConfig) -> Splits:
    data = config.data
    if isinstance(data, SyntheticData):
        spec = BlobSpec(num_classes=data.num_classes, dim=data.dim,
                        samples_per_class=data.n_train + data.n_val + data.n_test,
                        separation=data.separation, std=data.std, seed=data.seed,
                        ood_samples_per_blob=data.n_ood, ood_blobs=data.ood_blobs,
                        ood_separation=data.ood_separation)
        id_set, ood_set = make_blobs(spec)
        rest, test = split(id_set, data.n_test / spec.samples_per_class, data.seed,
                           roles=("train", "test"))
        tr, va = split(rest, data.n_val / (data.n_train + data.n_val), data.seed + 1)
        return Splits(tr, va, test, {"ood": ood_set})
    fmt = data.format
    tr = load_features(data.train, fmt, data.num_classes, role="train")
    k = tr.num_classes
    if data.val is not None:
        va = load_features(data.val, fmt, k, role="val")
    else:
        tr, va = split(tr, data.val_fraction, data.split_seed)
    te = load_features(data.test, fmt, k, role="test")
    ood = {name: load_features(path, fmt, role="ood")
           for name, path in data.ood.items()}
    for ds in (va, te, *ood.values()):
        if ds.dim != tr.dim:
            raise InvalidArgumentError("all feature files must share one feature width")
    return Splits(tr, va, te, ood)


@dataclass
class MethodCurves:
    reliability: ReliabilityBins
    risk_coverage: RiskCoverageCurve
    detection: dict[str, DetectionCurves] = field(default_factory=dict)


@dataclass
class MethodResult:
    metrics: MetricsReport
    ood: dict[str, OODMetrics] = field(default_factory=dict)
    calibration: CalibrationResult | None = None
    extras: dict = field(default_factory=dict)
    curves: MethodCurves | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics.to_dict(),
            "ood": {k: v.to_dict() for k, v in self.ood.items()},
            "calibration": None if self.calibration is None else self.calibration.to_dict(),
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MethodResult":
        return cls(
            MetricsReport(**d["metrics"]),
            {k: OODMetrics(**v) for k, v in d["ood"].items()},
            None if d["calibration"] is None else CalibrationResult(**d["calibration"]),
            d.get("extras", {}),
        )


@dataclass
class SeedReport:
    seed: int
    methods: dict[str, MethodResult]
    histories: dict[str, TrainingHistory] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "methods": {k: v.to_dict() for k, v in self.methods.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "SeedReport":
        return cls(d["seed"], {k: MethodResult.from_dict(v) for k, v in d["methods"].items()})


def method_name(variant: str) -> str:
    return REFERENCE if variant == "full" else f"{REFERENCE}[{variant}]"


def _score_method(probs, labels, u_test, u_ood: dict[str, np.ndarray]) -> MethodResult:
    correct = np.argmax(probs, axis=1) == labels
    metrics = evaluate(probs, labels, u_test)
    curves = MethodCurves(reliability(probs.max(axis=1), correct),
                          risk_coverage(correct, u_test)[0])
    ood = {}
    for name, scores in u_ood.items():
        ood[name], curves.detection[name] = auroc_auprc_fpr95(u_test, scores)
    if u_ood:
        pooled, _ = auroc_auprc_fpr95(u_test, np.concatenate(list(u_ood.values())))
        metrics.auroc, metrics.auprc, metrics.fpr95 = pooled.auroc, pooled.auprc, pooled.fpr95
    return MethodResult(metrics, ood, curves=curves)


def calibrate_model(model: VoltaModel, val: FeatureDataset) -> CalibrationResult:
    """Fit ``tau_star`` on validation similarities and store it on ``model``."""
    sims = _deterministic_sims(model, val.features)
    result = fit_temperature(sims, val.labels, beta0=1.0 / model.tau)
    model.tau_star = result.tau_star
    return result


def _deterministic_sims(model: VoltaModel, x) -> np.ndarray:
    saved, model.mc_passes = model.mc_passes, 0
    try:
        return predict(model, x).similarities
    finally:
        model.mc_passes = saved


def evaluate_variant(model: VoltaModel, splits: Splits, posthoc: bool,
                     timing: bool = False) -> MethodResult:
    calib = calibrate_model(model, splits.val) if posthoc else None
    if not posthoc:
        model.tau_star = model.tau
    out = predict(model, splits.test.features)
    u_ood = {name: predict(model, ds.features).uncertainty for name, ds in splits.ood.items()}
    result = _score_method(out.probabilities, splits.test.labels, out.uncertainty, u_ood)
    result.calibration = calib
    result.metrics.model_size_mb = model_size_mb(model.n_parameters())
    if timing:
        result.metrics.ms_per_sample, _ = efficiency(lambda b: predict(model, b),
                                                     splits.test.features, model.n_parameters())
    result.extras = {"tau": model.tau, "tau_star": model.tau_star}
    return result


def evaluate_baselines(model: VoltaModel, splits: Splits, names, alpha: float) -> dict[str, MethodResult]:
    """Post-hoc scorers on top of a calibrated reference model."""
    test = predict(model, splits.test.features)
    ood_out = {name: predict(model, ds.features) for name, ds in splits.ood.items()}
    y = splits.test.labels
    results: dict[str, MethodResult] = {}
    size = model_size_mb(model.n_parameters())
    for name in names:
        probs = test.probabilities
        extras: dict = {}
        if name == "msp":
            probs = softmax(test.similarities / model.tau)
            u = msp_score(probs)
            u_ood = {k: msp_score(softmax(o.similarities / model.tau)) for k, o in ood_out.items()}
        elif name == "temperature_scaling":
            u = msp_score(probs)
            u_ood = {k: msp_score(o.probabilities) for k, o in ood_out.items()}
        elif name == "energy":
            u = energy_score(test.logits)
            u_ood = {k: energy_score(o.logits) for k, o in ood_out.items()}
        elif name == "mahalanobis":
            maha = fit_mahalanobis(encode(model, splits.train.features), splits.train.labels)
            u = mahalanobis_score(maha, test.embeddings)
            u_ood = {k: mahalanobis_score(maha, o.embeddings) for k, o in ood_out.items()}
        elif name == "conformal":
            val_probs = predict(model, splits.val.features).probabilities
            calib = fit_conformal(val_probs, splits.val.labels, alpha)
            members, sizes = conformal_set(probs, calib)
            u = sizes.astype(np.float64)
            u_ood = {k: conformal_set(o.probabilities, calib)[1].astype(np.float64)
                     for k, o in ood_out.items()}
            extras = {"alpha": alpha, "qhat": calib.qhat,
                      "coverage": float(members[np.arange(len(y)), y].mean()),
                      "mean_set_size": float(sizes.mean())}
        else:
            raise ConfigError(f"unknown baseline {name!r}")
        res = _score_method(probs, y, u, u_ood)
        res.metrics.model_size_mb = size
        res.extras = extras
        results[name] = res
    return results


def run_seed(config: ExperimentConfig, splits: Splits, seed: int) -> SeedReport:
    trained: dict[tuple, tuple[VoltaModel, TrainingHistory]] = {}
    methods: dict[str, MethodResult] = {}
    histories: dict[str, TrainingHistory] = {}
    reference_model = None
    for variant in config.variants:
        tcfg = config.train_config(seed, variant)
        eff = apply_ablation(tcfg)
        # variants that only change inference share one training run
        key = (eff.shallow, eff.learn_tau, eff.tau0)
        if key not in trained:
            log.info("seed %d: training %s", seed, variant)
            try:
                trained[key] = train(splits.train.features, splits.train.labels,
                                     splits.val.features, splits.val.labels, tcfg,
                                     num_classes=splits.num_classes)
            except VoltaError as exc:
                raise type(exc)(f"seed {seed}, variant {variant}, training: {exc}") from exc
        model, history = trained[key]
        model = model.copy()
        model.mc_passes = eff.mc_passes
        histories[variant] = history
        methods[method_name(variant)] = evaluate_variant(model, splits, eff.posthoc, config.timing)
        if variant == "full":
            reference_model = model
    methods.update(evaluate_baselines(reference_model, splits, config.baselines,
                                      config.conformal_alpha))
    return SeedReport(seed, methods, histories)


@dataclass
class ComparisonRow:
    method: str
    metric: str
    n: int
    mean: float
    std: float
    t: float | None = None
    dof: float | None = None
    p: float | None = None
    note: str = ""


def metric_names(reports: list[SeedReport]) -> list[str]:
    first = next(iter(reports[0].methods.values()))
    names = list(ID_METRICS)
    for ood_name in first.ood:
        names += [f"{m}@{ood_name}" for m in OOD_METRICS]
    return names


def _metric_value(result: MethodResult, metric: str) -> float:
    if "@" in metric:
        m, ood_name = metric.split("@", 1)
        return getattr(result.ood[ood_name], m)
    return getattr(result.metrics, metric)


def compare(reports: list[SeedReport], reference: str = REFERENCE) -> list[ComparisonRow]:
    """Mean and sample std per (method, metric) plus Welch's test against ``reference``."""
    if not reports:
        raise InvalidArgumentError("no reports to compare")
    methods = list(reports[0].methods)
    rows = []
    for method in methods:
        for metric in metric_names(reports):
            vals = np.array([_metric_value(r.methods[method], metric) for r in reports], dtype=float)
            ref = np.array([_metric_value(r.methods[reference], metric) for r in reports], dtype=float)
            std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            row = ComparisonRow(method, metric, len(vals), float(vals.mean()), std)
            if method == reference:
                row.note = "reference"
            elif len(vals) < 2:
                row.note = "n/a (single seed)"
            else:
                try:
                    w = welch_t_test(vals, ref)
                    row.t, row.dof, row.p = w.t, w.dof, w.p
                except InvalidArgumentError:
                    if vals.mean() == ref.mean():
                        row.t, row.p, row.note = 0.0, 1.0, "identical constant values"
                    else:
                        row.note = "n/a (zero variance)"
            rows.append(row)
    return rows


def run_experiment(config: ExperimentConfig) -> tuple[list[SeedReport], list[ComparisonRow]]:
    splits = load_splits(config)
    reports = [run_seed(config, splits, seed) for seed in config.seeds]
    return reports, compare(reports)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_comparison_csv(rows: list[ComparisonRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f.name for f in dataclasses.fields(ComparisonRow)])
        for r in rows:
            w.writerow([_fmt(getattr(r, f.name)) for f in dataclasses.fields(ComparisonRow)])


def write_seed_csv(report: SeedReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "method", "metric", "value"])
        for method, res in report.methods.items():
            for key, value in res.metrics.flat().items():
                w.writerow([report.seed, method, key, _fmt(value)])
            for ood_name, m in res.ood.items():
                for key, value in m.to_dict().items():
                    w.writerow([report.seed, method, f"{key}@{ood_name}", _fmt(value)])


def read_seed_csv(path) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["method"], {})[row["metric"]] = row["value"]
    return out


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def emit_reports(reports: list[SeedReport], rows: list[ComparisonRow], out_dir,
                 config: ExperimentConfig | None = None) -> Path:
    """Write per-seed JSON/CSV, curves, histories, the comparison table and a
    SHA-256 manifest. Returns the manifest path."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InvalidArgumentError(f"cannot create output directory {out}: {exc}") from None
    written: list[Path] = []
    if config is not None:
        p = out / "config.json"
        p.write_text(json.dumps(config.to_dict(), indent=2) + "\n")
        written.append(p)
    for rep in reports:
        p = out / f"seed_{rep.seed}.json"
        p.write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
        written.append(p)
        p = out / f"seed_{rep.seed}.csv"
        write_seed_csv(rep, p)
        written.append(p)
        for variant, hist in rep.histories.items():
            p = out / "history" / f"seed_{rep.seed}_{_safe(variant)}.csv"
            p.parent.mkdir(exist_ok=True)
            hist.to_csv(p)
            written.append(p)
        cdir = out / "curves" / f"seed_{rep.seed}"
        for method, res in rep.methods.items():
            if res.curves is None:
                continue
            cdir.mkdir(parents=True, exist_ok=True)
            stem = _safe(method)
            res.curves.reliability.to_csv(cdir / f"{stem}_reliability.csv")
            res.curves.risk_coverage.to_csv(cdir / f"{stem}_risk_coverage.csv")
            written += [cdir / f"{stem}_reliability.csv", cdir / f"{stem}_risk_coverage.csv"]
            for ood_name, dc in res.curves.detection.items():
                roc = cdir / f"{stem}_roc_{_safe(ood_name)}.csv"
                pr = cdir / f"{stem}_pr_{_safe(ood_name)}.csv"
                dc.roc_to_csv(roc)
                dc.pr_to_csv(pr)
                written += [roc, pr]
    p = out / "comparison.csv"
    write_comparison_csv(rows, p)
    written.append(p)
    manifest = {
        "files": [{"path": f.relative_to(out).as_posix(), "sha256": sha256_file(f)}
                  for f in sorted(written)]
    }
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2) + "\n")
    return mpath


def load_seed_reports(in_dir) -> list[SeedReport]:
    paths = sorted(Path(in_dir).glob("seed_*.json"), key=lambda p: int(p.stem.split("_")[1]))
    if not paths:
        raise InvalidArgumentError(f"no seed_*.json reports in {in_dir}")
    return [SeedReport.from_dict(json.loads(p.read_text())) for p in paths]


def is_finite_report(report: MetricsReport) -> bool:
    return all(v is None or isinstance(v, str) or math.isfinite(v)
               for k, v in report.flat().items())
