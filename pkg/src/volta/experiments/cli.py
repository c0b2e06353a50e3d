"""Prototype classifier with deterministic uncertainty, driven from feature files.

Exit codes: 0 success, 2 invalid configuration or input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from ..baselines import conformal_set, fit_conformal, fit_mahalanobis, mahalanobis_score, write_scores_csv
from ..baselines import energy_score, msp_score
from ..errors import ConfigError, DegenerateInputError, InvalidArgumentError, NumericFailure
from ..metrics import auroc_auprc_fpr95, model_size_mb
from ..model import encode, load_model, predict, save_model
from ..training import VARIANTS, TrainConfig, train
from .data import load_features, write_binary, write_csv
from .runner import (
    ExperimentConfig,
    SyntheticData,
    _from_dict,
    _score_method,
    calibrate_model,
    compare,
    emit_reports,
    load_seed_reports,
    load_splits,
    run_experiment,
    write_comparison_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("volta")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _out_dir(args) -> Path:
    if args.out is None:
        raise ConfigError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def cmd_synth(args) -> None:
    body = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        body["seed"] = args.seed
    cfg = _from_dict(SyntheticData, body, "synthetic data config")
    exp = ExperimentConfig(data=cfg, seeds=[0])
    splits = load_splits(exp)
    out = _out_dir(args)
    ext, writer = (".csv", write_csv) if args.format == "csv" else (".bin", write_binary)
    for name, ds in [("train", splits.train), ("val", splits.val), ("test", splits.test),
                     *splits.ood.items()]:
        writer(ds, out / f"{name}{ext}")
        log.info("wrote %s (%d rows)", out / f"{name}{ext}", len(ds))


def cmd_train(args) -> None:
    body = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        body["seed"] = args.seed
    if args.variant is not None:
        body["variant"] = args.variant
    if args.epochs is not None:
        body["epochs"] = args.epochs
    cfg = _from_dict(TrainConfig, body, "train config")
    tr = load_features(args.train, args.format, role="train")
    va = load_features(args.val, args.format, tr.num_classes, role="val")
    model, history = train(tr.features, tr.labels, va.features, va.labels, cfg, tr.num_classes)
    out = _out_dir(args)
    save_model(model, out / "model.json")
    history.to_csv(out / "history.csv")
    log.info("best epoch %d, val loss %.6g, tau %.6g", history.best_epoch, history.best_val_loss,
             model.tau)


def cmd_calibrate(args) -> None:
    model = load_model(args.model)
    va = load_features(args.val, args.format, model.num_classes, role="val")
    result = calibrate_model(model, va)
    out = _out_dir(args)
    save_model(model, out / "model.json")
    _dump(result.to_dict(), out / "calibration.json")
    log.info("tau* = %.6g (%s)", result.tau_star, result.status)


def cmd_evaluate(args) -> None:
    model = load_model(args.model)
    te = load_features(args.test, args.format, model.num_classes, role="test")
    o = predict(model, te.features)
    res = _score_method(o.probabilities, te.labels, o.uncertainty, {})
    res.metrics.model_size_mb = model_size_mb(model.n_parameters())
    out = _out_dir(args)
    _dump(res.metrics.to_dict(), out / "metrics.json")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in res.metrics.flat().items():
            w.writerow([k, "" if v is None else repr(float(v)) if isinstance(v, float) else v])
    res.curves.reliability.to_csv(out / "reliability.csv")
    res.curves.risk_coverage.to_csv(out / "risk_coverage.csv")
    log.info("accuracy %.4f, ece %.4f", res.metrics.accuracy, res.metrics.ece)


def cmd_ood(args) -> None:
    model = load_model(args.model)
    te = load_features(args.test, args.format, model.num_classes, role="test")
    oods = {Path(p).stem: load_features(p, args.format, role="ood") for p in args.ood}
    id_out = predict(model, te.features)
    ood_out = {k: predict(model, ds.features) for k, ds in oods.items()}
    scorers = {
        "volta": lambda o: o.uncertainty,
        "msp": lambda o: msp_score(o.probabilities),
        "energy": lambda o: energy_score(o.logits),
    }
    if args.train:
        tr = load_features(args.train, args.format, model.num_classes, role="train")
        maha = fit_mahalanobis(encode(model, tr.features), tr.labels)
        scorers["mahalanobis"] = lambda o: mahalanobis_score(maha, o.embeddings)
    if args.val:
        va = load_features(args.val, args.format, model.num_classes, role="val")
        calib = fit_conformal(predict(model, va.features).probabilities, va.labels, args.alpha)
        scorers["conformal"] = lambda o: conformal_set(o.probabilities, calib)[1].astype(float)
    out = _out_dir(args)
    summary: dict = {}
    scores_out = {}
    for method, score in scorers.items():
        s_id = score(id_out)
        scores_out[f"{method}:id"] = s_id
        summary[method] = {}
        for name, o in ood_out.items():
            s_ood = score(o)
            scores_out[f"{method}:{name}"] = s_ood
            m, curves = auroc_auprc_fpr95(s_id, s_ood)
            summary[method][name] = m.to_dict()
            curves.roc_to_csv(out / f"roc_{method}_{name}.csv")
            curves.pr_to_csv(out / f"pr_{method}_{name}.csv")
    _dump(summary, out / "ood.json")
    write_scores_csv(out / "scores.csv", scores_out)


def _experiment(args, all_variants: bool) -> ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    body = _read_json(args.config)
    if not isinstance(body, dict):
        raise ConfigError("experiment config must be a JSON object")
    if all_variants:
        body["variants"] = list(VARIANTS)
    if args.seed is not None:
        body["seeds"] = [args.seed]
    if args.out is None and body.get("out"):
        args.out = body["out"]
    return ExperimentConfig.from_dict(body)


def _run_and_emit(args, all_variants: bool) -> None:
    cfg = _experiment(args, all_variants)
    reports, rows = run_experiment(cfg)
    manifest = emit_reports(reports, rows, _out_dir(args), cfg)
    log.info("wrote %s", manifest)


def cmd_ablate(args) -> None:
    _run_and_emit(args, all_variants=True)


def cmd_report(args) -> None:
    _run_and_emit(args, all_variants=False)


def cmd_compare(args) -> None:
    reports = load_seed_reports(args.input)
    rows = compare(reports, args.reference)
    out = Path(args.out) if args.out else Path(args.input)
    out.mkdir(parents=True, exist_ok=True)
    write_comparison_csv(rows, out / "comparison.csv")
    for r in rows:
        if r.metric in ("accuracy", "ece", "aurc"):
            print(f"{r.method:32s} {r.metric:10s} {r.mean:.4f} +/- {r.std:.4f}  "
                  f"p={'' if r.p is None else f'{r.p:.3g}'} {r.note}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the RNG seed")
    common.add_argument("--config", default=None, help="JSON configuration file")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--format", choices=("binary", "csv"), default=None,
                        help="feature file format (default: from extension)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="volta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write synthetic blob features")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model on feature files")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", parents=[common], help="fit the post-hoc temperature")
    p.add_argument("--model", required=True)
    p.add_argument("--val", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("evaluate", parents=[common], help="in-distribution metrics")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ood", parents=[common], help="OOD detection metrics and scores")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--ood", required=True, action="append")
    p.add_argument("--train", help="training features, enables the Mahalanobis baseline")
    p.add_argument("--val", help="calibration features, enables the conformal baseline")
    p.add_argument("--alpha", type=float, default=0.1)
    p.set_defaults(func=cmd_ood)

    p = sub.add_parser("ablate", parents=[common], help="multi-seed run over every variant")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", parents=[common], help="multi-seed run as configured")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", parents=[common], help="aggregate stored per-seed reports")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--reference", default="volta")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except NumericFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, InvalidArgumentError, DegenerateInputError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
