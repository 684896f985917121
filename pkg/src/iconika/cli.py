"""Command-line entry point.

One binary, one subcommand per pipeline stage: ingest, indicators, train,
evaluate, correlate, fuse, agreement, serve, export. Flags mirror config
keys and win on conflict. Exit codes: 0 success, 1 validation/data error,
2 usage error. ICONIKA_LOG sets the log level.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

import numpy as np

from . import __version__
from .datamodel import DatasetError, load_dataset
from .featio import FeatureFileError
from .indicators import IndicatorError, compute_indicator_suite
from .pipeline import (
    ExperimentConfig,
    PipelineError,
    _train_suite_models,
    annotator_agreement,
    run_experiment,
)
from .service import (
    Campaign,
    CampaignConfig,
    CampaignError,
    build_assignment,
    make_server,
    read_ratings_log,
)
from .solvers import SolverError, save_model, select_lambda, train_binary_svm, train_ranking_svm, build_pairs
from .indicators import train_attribute_models, train_class_models

logger = logging.getLogger(__name__)

USAGE_ERROR = 2
DATA_ERROR = 1

_FATAL = (
    DatasetError,
    FeatureFileError,
    IndicatorError,
    PipelineError,
    CampaignError,
    SolverError,
    FileNotFoundError,
)


def _config_hash(config_obj) -> str:
    canonical = json.dumps(config_obj, sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _write_run_manifest(out: Path, subcommand: str, seed: int, config_obj) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "seed": seed,
        "config_hash": _config_hash(config_obj),
        "package_version": __version__,
        "versions": {
            "python": ".".join(str(v) for v in sys.version_info[:3]),
            "numpy": np.__version__,
        },
    }
    (out / "run_manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _load_experiment_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        config = ExperimentConfig.from_file(args.config)
    else:
        config = ExperimentConfig()
    if args.seed is not None:
        config.seed = args.seed
    if getattr(args, "lambda_grid", None):
        config.lambda_grid = [float(v) for v in args.lambda_grid.split(",")]
    if getattr(args, "objective", None):
        config.combinations = ["average", _objective(args.objective)]
    if getattr(args, "indicators", None):
        wanted = set(args.indicators.split(","))
        config.indicators = [r for r in config.indicators if r.name in wanted]
        missing = wanted - {r.name for r in config.indicators}
        if missing:
            raise PipelineError(f"config defines no indicator named {sorted(missing)}")
    return config


def _objective(flag: str) -> str:
    return {"bin": "binary", "rank": "ranking"}[flag]


def cmd_ingest(args) -> int:
    dataset = load_dataset(args.manifest)
    out = Path(args.out)
    _write_run_manifest(out, "ingest", args.seed or 0, {"manifest": str(args.manifest)})
    stats = {
        "images": len(dataset.records),
        "classes": len({r.class_id for r in dataset.records.values()}),
        "train_images": len(dataset.train_ids),
        "test_images": len(dataset.test_ids),
        "ratings": len(dataset.ratings),
        "batches": len(dataset.batches),
        "features": {name: len(fm.rows) for name, fm in dataset.features.items()},
    }
    (out / "dataset_stats.json").write_text(
        json.dumps(stats, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(json.dumps(stats, sort_keys=True))
    return 0


def cmd_indicators(args) -> int:
    config = _load_experiment_config(args)
    dataset = load_dataset(args.manifest)
    models = _train_suite_models(dataset, config)
    ids = dataset.test_ids if args.split == "test" else dataset.train_ids
    suite = compute_indicator_suite(dataset, config.indicators, models, image_ids=ids)
    out = Path(args.out)
    _write_run_manifest(out, "indicators", config.seed, config.to_json())
    payload = {
        s.indicator_name: {
            "provenance": s.provenance,
            "scores": dict(sorted(s.scores.items())),
            "missing": s.missing,
        }
        for s in suite
    }
    (out / "indicator_scores.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(f"computed {len(suite)} indicator(s) over {len(ids)} image(s)")
    return 0


def cmd_train(args) -> int:
    config = _load_experiment_config(args)
    dataset = load_dataset(args.manifest)
    out = Path(args.out)
    _write_run_manifest(out, "train", config.seed, config.to_json())
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "classes":
        models = train_class_models(
            dataset, dataset.features[args.feature], config.aux_lambda,
            epochs=config.epochs, seed=config.seed,
        )
        for class_id, model in models.items():
            save_model(model, out / f"class_{class_id:04d}.model")
        print(f"trained {len(models)} per-class model(s)")
        return 0
    if args.kind == "attributes":
        models = train_attribute_models(
            dataset, dataset.features[args.feature], config.aux_lambda,
            epochs=config.epochs, seed=config.seed,
        )
        kept = 0
        for m, model in enumerate(models):
            if model is not None:
                save_model(model, out / f"attribute_{m:04d}.model")
                kept += 1
        print(f"trained {kept} attribute model(s) ({len(models) - kept} constant)")
        return 0
    # direct iconicity predictor
    objective = _objective(args.objective or "rank")
    features = dataset.features[args.feature]
    mean_rating: dict[str, float] = {}
    counts: dict[str, int] = {}
    for rec in dataset.ratings:
        mean_rating[rec.image_id] = mean_rating.get(rec.image_id, 0.0) + rec.rating
        counts[rec.image_id] = counts.get(rec.image_id, 0) + 1
    mean_rating = {k: v / counts[k] for k, v in mean_rating.items()}
    train_ids = [i for i in dataset.train_ids if i in mean_rating and i in features.rows]
    if len(train_ids) < 2:
        raise PipelineError("need at least 2 rated train images with features")
    rows = {i: features.rows[i].astype(np.float64) for i in train_ids}
    relevant = [r for r in dataset.ratings if r.image_id in rows]
    lam = select_lambda(
        rows, relevant, dataset.batches, objective, config.lambda_grid,
        config.seed, epochs=config.epochs,
    )
    if objective == "ranking":
        pairs = build_pairs(relevant, dataset.batches)
        model = train_ranking_svm(rows, pairs, lam, epochs=config.epochs, seed=config.seed)
    else:
        y = np.array([mean_rating[i] > 1.5 for i in train_ids])
        model = train_binary_svm(
            np.stack([rows[i] for i in train_ids]), y, lam,
            epochs=config.epochs, seed=config.seed,
        )
    path = out / f"dip_{args.objective or 'rank'}.model"
    save_model(model, path)
    print(f"trained direct predictor (lambda={lam:g}) -> {path}")
    return 0


def _run_bundle(args, subcommand: str, tweak) -> int:
    config = _load_experiment_config(args)
    tweak(config)
    out = Path(args.out)
    bundle = run_experiment(args.manifest, config, out)
    _write_run_manifest(out, subcommand, config.seed, config.to_json())
    for row in bundle.indicator_rows + bundle.combination_rows:
        print(f"{row.name}\tsrc={row.src:.4f}\tp={row.p_value:.3g}\tap={row.ap:.4f}\tn={row.n}")
    if bundle.errors:
        for err in bundle.errors:
            print(f"error: {err}", file=sys.stderr)
        return DATA_ERROR
    return 0


def cmd_evaluate(args) -> int:
    def tweak(config: ExperimentConfig):
        config.combinations = []
        config.dip_objectives = []
        config.agreement_groups = None
        config.contributions = False

    return _run_bundle(args, "evaluate", tweak)


def cmd_correlate(args) -> int:
    def tweak(config: ExperimentConfig):
        config.combinations = []
        config.dip_objectives = []
        config.agreement_groups = None
        config.contributions = False

    config = _load_experiment_config(args)
    tweak(config)
    out = Path(args.out)
    bundle = run_experiment(args.manifest, config, out)
    _write_run_manifest(out, "correlate", config.seed, config.to_json())
    if bundle.correlation is not None:
        print("\t" + "\t".join(bundle.correlation.names))
        for name, row in zip(bundle.correlation.names, bundle.correlation.values):
            cells = "\t".join("-" if v is None else f"{v:.3f}" for v in row)
            print(f"{name}\t{cells}")
    return DATA_ERROR if bundle.errors else 0


def cmd_fuse(args) -> int:
    def tweak(config: ExperimentConfig):
        if args.objective:
            config.combinations = ["average", _objective(args.objective)]
        config.contributions = True

    return _run_bundle(args, "fuse", tweak)


def cmd_agreement(args) -> int:
    config = _load_experiment_config(args)
    dataset = load_dataset(args.manifest)
    if not config.agreement_groups:
        raise PipelineError("config must define agreement_groups")
    report = annotator_agreement(dataset.ratings, config.agreement_groups)
    out = Path(args.out)
    _write_run_manifest(out, "agreement", config.seed, config.to_json())
    (out / "agreement.json").write_text(
        json.dumps(report.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    for group, stat in sorted(report.group_stats.items()):
        shown = "n/a" if stat is None else f"{stat:.4f}"
        print(f"group {group}: mean pairwise SRC = {shown}")
    return 0


def cmd_serve(args) -> int:
    dataset = load_dataset(args.manifest)
    campaign_config = CampaignConfig.from_file(args.campaign)
    assignment = build_assignment(dataset, campaign_config, args.seed or 0)
    campaign = Campaign(assignment, args.log, campaign_config)
    if args.save_assignment:
        campaign.save_assignment(args.save_assignment)
    server = make_server(
        campaign,
        host=args.host,
        port=args.port,
        image_dir=args.images,
        ui_dir=args.ui,
    )
    host, port = server.server_address[:2]
    print(f"serving on http://{host}:{port}", flush=True)

    def _stop(signum, frame):
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGINT, _stop)
    signal.signal(signal.SIGTERM, _stop)
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return 0


def cmd_export(args) -> int:
    records = read_ratings_log(args.log)
    out = Path(args.out)
    _write_run_manifest(out, "export", args.seed or 0, {"log": str(args.log)})
    lines = Path(args.log).read_text(encoding="utf-8")
    (out / "ratings.jsonl").write_text(lines, encoding="utf-8")
    counts = {"0": 0, "1": 0, "2": 0}
    for rec in records:
        counts[str(rec.rating)] += 1
    summary = {"records": len(records), "by_rating": counts}
    (out / "export_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(json.dumps(summary, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iconika",
        description="Iconicity indicators, predictors, and annotation tooling.",
    )
    parser.add_argument("--version", action="version", version=f"iconika {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, manifest=True, config=True):
        if manifest:
            p.add_argument("--manifest", required=True, help="dataset manifest path")
        if config:
            p.add_argument("--config", help="experiment config path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override (default 0)")

    p = sub.add_parser("ingest", help="validate a dataset and report stats")
    common(p, config=False)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("indicators", help="compute the configured indicator suite")
    common(p)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--indicators", help="comma-separated subset of configured indicators")
    p.set_defaults(func=cmd_indicators)

    p = sub.add_parser("train", help="train DIP / per-class / attribute models")
    common(p)
    p.add_argument("--kind", choices=["dip", "classes", "attributes"], default="dip")
    p.add_argument("--feature", required=True, help="feature matrix name")
    p.add_argument("--objective", choices=["bin", "rank"])
    p.add_argument("--lambda-grid", dest="lambda_grid", help="comma-separated values")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="per-indicator SRC/p/AP table")
    common(p)
    p.add_argument("--indicators", help="comma-separated subset of configured indicators")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("correlate", help="indicator-vs-indicator SRC matrix")
    common(p)
    p.add_argument("--indicators", help="comma-separated subset of configured indicators")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("fuse", help="average and learned combinations")
    common(p)
    p.add_argument("--objective", choices=["bin", "rank"])
    p.add_argument("--lambda-grid", dest="lambda_grid", help="comma-separated values")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("agreement", help="inter-annotator agreement analysis")
    common(p)
    p.set_defaults(func=cmd_agreement)

    p = sub.add_parser("serve", help="run the annotation campaign service")
    p.add_argument("--manifest", required=True)
    p.add_argument("--campaign", required=True, help="campaign config path")
    p.add_argument("--log", required=True, help="append-only ratings log path")
    p.add_argument("--images", help="static image directory")
    p.add_argument("--ui", help="static UI bundle directory")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-assignment", help="also write the assignment table here")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("export", help="export a ratings log in dataset format")
    p.add_argument("--log", required=True, help="ratings log path")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_export)

    return parser


def run(argv=None) -> int:
    level = os.environ.get("ICONIKA_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage/help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _FATAL as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
