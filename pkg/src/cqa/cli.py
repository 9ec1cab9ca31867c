"""Command-line entry point: ``cqa gen|annotate|train|eval|suite|agreement``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from cqa import cbmlite, metrics, report, synth
from cqa.config import RunConfig, load_config
from cqa.datamodel import (
    LabeledDataset,
    atomic_write_text,
    load_concepts,
    load_dataset,
    save_concepts,
    save_dataset,
)
from cqa.errors import ConfigError, CqaError, DataError, NumericalError

log = logging.getLogger("cqa")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

DATASET_FILE = "dataset.cqa"
CONCEPTS_FILE = "concepts.cqa"
MODEL_FILE = "model.json"
REPORT_FILE = "report.json"
AGGREGATE_FILE = "aggregate.json"
GAPS_FILE = "gap_curves.csv"
RELEVANCE_FILE = "relevance.csv"
AGREEMENT_FILE = "agreement.json"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _emit(args, text: str) -> None:
    if not args.quiet:
        print(text)


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required")
    return load_config(args.config).with_seed(args.seed).resolved()


def _pick(path, out: Path, default: str) -> Path:
    p = Path(path) if path else out / default
    if not p.exists():
        raise DataError(f"{p}: no such file")
    return p


# ------------------------------------------------------------------ pipeline steps


def generate(cfg: RunConfig) -> LabeledDataset:
    return synth.generate_world(cfg.world)


def annotate(cfg: RunConfig, ds: LabeledDataset):
    if cfg.annotator is None:
        raise ConfigError("config has no 'annotator' section")
    ann = synth.simulate_annotator(ds, cfg.annotator)
    agree = metrics.annotation_agreement(ann, ds.concepts, ds.vocabulary, cfg.solver,
                                         fit_mask=ds.mask("train"))
    return ann, agree


def train(cfg: RunConfig, ds: LabeledDataset, concepts=None, jobs: int = 1):
    if concepts is None and cfg.annotator is not None:
        concepts = synth.simulate_annotator(ds, cfg.annotator)
    return cbmlite.train_cbm(ds, cfg.train, supervision=concepts, jobs=jobs)


def split_f1(model, ds: LabeledDataset, split: str) -> float | None:
    mask = ds.mask(split)
    if not mask.any():
        return None
    pred, _ = cbmlite.predict_labels(model, np.asarray(ds.features)[mask])
    return metrics.macro_f1(pred, ds.labels.values[mask], ds.m)


def evaluate(cfg: RunConfig, ds: LabeledDataset, model, jobs: int = 1):
    X = np.asarray(ds.features)
    P = cbmlite.predict_concepts(model, X)
    yhat, _ = cbmlite.predict_labels(model, X)
    meta = {"config_digest": report.config_digest(cfg.to_json()),
            "timestamps": {"evaluated": _now()}}
    return report.evaluate_model(ds, P, yhat, cfg.solver,
                                 model_name=f"{cfg.model_name}/seed-{cfg.seed}",
                                 metadata=meta, jobs=jobs)


def _metric_line(r) -> str:
    return "  ".join(f"{k}={v:.4f}" for k, v in r.metric_row().items())


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    ds = generate(cfg)
    save_dataset(ds, out / DATASET_FILE)
    prev = np.bincount(ds.labels.values, minlength=ds.m) / ds.n
    _emit(args, json.dumps({"n": ds.n, "k": ds.k, "label_prevalence": prev.tolist(),
                            "path": str(out / DATASET_FILE)}))
    return 0


def cmd_annotate(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    ds = load_dataset(_pick(args.dataset, out, DATASET_FILE))
    ann, agree = annotate(cfg, ds)
    save_concepts(ann, out / CONCEPTS_FILE)
    _emit(args, json.dumps(agree.to_json(), sort_keys=True))
    return 0


def cmd_agreement(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    ds = load_dataset(_pick(args.dataset, out, DATASET_FILE))
    ann = load_concepts(_pick(args.concepts, out, CONCEPTS_FILE))
    agree = metrics.annotation_agreement(ann, ds.concepts, ds.vocabulary, cfg.solver,
                                         fit_mask=ds.mask("train"))
    text = json.dumps(agree.to_json(), sort_keys=True)
    atomic_write_text(out / AGREEMENT_FILE, text + "\n")
    _emit(args, text)
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    ds = load_dataset(_pick(args.dataset, out, DATASET_FILE))
    concepts = load_concepts(_pick(args.concepts, out, CONCEPTS_FILE)) if args.concepts else None
    model = train(cfg, ds, concepts, jobs=args.jobs)
    cbmlite.save_model(model, out / MODEL_FILE)
    _emit(args, json.dumps({"train_f1": split_f1(model, ds, "train"),
                            "val_f1": split_f1(model, ds, "val"),
                            "path": str(out / MODEL_FILE)}))
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    out = _out_dir(args, cfg)
    ds = load_dataset(_pick(args.dataset, out, DATASET_FILE))
    model = cbmlite.load_model(_pick(args.model, out, MODEL_FILE))
    r = evaluate(cfg, ds, model, jobs=args.jobs)
    report.save_report(r, out / REPORT_FILE)
    _emit(args, _metric_line(r))
    return 0


def run_seed(cfg: RunConfig, out: Path, jobs: int = 1):
    """Full pipeline for one resolved config; writes per-seed files under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    ds = generate(cfg)
    save_dataset(ds, out / DATASET_FILE)
    concepts = None
    if cfg.annotator is not None:
        concepts, _ = annotate(cfg, ds)
        save_concepts(concepts, out / CONCEPTS_FILE)
    model = train(cfg, ds, concepts, jobs=jobs)
    cbmlite.save_model(model, out / MODEL_FILE)
    r = evaluate(cfg, ds, model, jobs=jobs)
    report.save_report(r, out / REPORT_FILE)
    report.export_relevance_heatmaps(r, out / RELEVANCE_FILE)
    return r


def cmd_suite(args) -> int:
    if not args.config:
        raise ConfigError("--config is required")
    base = load_config(args.config)
    seeds = args.seeds if args.seeds else list(base.seeds)
    if not seeds:
        if args.seed is None and base.seed is None:
            raise ConfigError("no seeds: pass --seeds, --seed, or set 'seeds' in the config")
        seeds = [args.seed if args.seed is not None else base.seed]
    out = _out_dir(args, base)
    runs = []
    for s in sorted(set(seeds)):
        cfg = base.with_seed(s).resolved()
        log.info("seed %d", s)
        r = run_seed(cfg, out / f"seed-{s}", jobs=args.jobs)
        _emit(args, f"seed {s}: {_metric_line(r)}")
        runs.append(r)
    agg = report.aggregate(runs)
    report.save_aggregate(agg, out / AGGREGATE_FILE)
    report.export_gap_curves(runs, out / GAPS_FILE)
    _emit(args, f"mean over {agg.n_runs}: {agg.table_row()}")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON file or bundled config name")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="worker threads")
    common.add_argument("--quiet", action="store_true", help="suppress stdout summaries")

    parser = argparse.ArgumentParser(prog="cqa", description="Concept quality analysis toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("annotate", parents=[common], help="simulate concept annotations")
    p.add_argument("--dataset")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("train", parents=[common], help="train a concept bottleneck model")
    p.add_argument("--dataset")
    p.add_argument("--concepts", help="annotation file to train on instead of the config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a trained model")
    p.add_argument("--dataset")
    p.add_argument("--model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("suite", parents=[common], help="full pipeline over several seeds")
    p.add_argument("--seeds", type=int, nargs="+")
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("agreement", parents=[common], help="score annotations against truth")
    p.add_argument("--dataset")
    p.add_argument("--concepts")
    p.set_defaults(func=cmd_agreement)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except CqaError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
