"""
Command-line surface.

    python cli.py train     --series F [--adjacency F] --horizon H [--config F] [--missing-rate R] [--seed S]
    python cli.py eval      --checkpoint F --series F
    python cli.py forecast  --checkpoint F --series F --out F
    python cli.py graph     --checkpoint F --series F --out F
    python cli.py synth     (--config F | --preset NAME) --out-dir D
    python cli.py gradcheck [--zero-drive]
    python cli.py repeat    --series F [--adjacency F] --seeds 0,1,2,3,4
    python cli.py ablate    --series F [--adjacency F] --variants full,static_graph --seeds 0,1,2

Config files are KEY=VALUE lines named after TrainConfig (or SynthConfig)
fields. Flags given on the command line win over the file.
Exit status is 2 on any engine error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Type

import pandas as pd
from dotenv import dotenv_values
from pydantic import BaseModel, ValidationError

import config
from data.presets import SYNTH_PRESETS, synth_config
from models.schemas import SynthConfig, TrainConfig
from services.checkpoint import load_checkpoint, save_checkpoint
from services.data_pipeline import EpidemicDataset, generate_synthetic, load_csv, save_csv
from services.errors import ConfigError, EarthError, TrainingAborted
from services.trainer import (
    evaluate, evaluate_repeats, fit, forecast, gradcheck, learned_graph, run_ablation,
)

logger = logging.getLogger("earth.cli")

DEFAULT_CHECKPOINT = "earth.ckpt"

# flag dest → TrainConfig field
TRAIN_OVERRIDES = (
    "horizon", "missing_rate", "seed", "epochs", "batch_size", "lr", "hidden", "window",
    "n_heads", "top_k", "solver", "substeps", "loss", "query", "drift", "variant", "workers",
    "grad_clip",
)


# ── Config files ─────────────────────────────────────────────────────────────

def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def read_config_file(path) -> Dict[str, object]:
    """KEY=VALUE pairs; keys are lower-cased, values parsed as JSON where possible."""
    if not Path(path).exists():
        raise ConfigError(f"config file not found: {path}")
    return {
        key.strip().lower(): _parse_value(value.strip())
        for key, value in dotenv_values(path).items()
        if value is not None
    }


def build_config(model: Type[BaseModel], file_values: Dict[str, object], overrides: Dict[str, object]):
    merged = dict(file_values)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return model.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(f"invalid {model.__name__}: {exc}") from exc


def train_config(args) -> TrainConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {name: getattr(args, name, None) for name in TRAIN_OVERRIDES}
    return build_config(TrainConfig, file_values, overrides)


def _int_list(text: str) -> List[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def _str_list(text: str) -> List[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


# ── Datasets ─────────────────────────────────────────────────────────────────

def dataset_from_args(args, cfg: TrainConfig) -> EpidemicDataset:
    if args.preset:
        return generate_synthetic(synth_config(args.preset), cfg.train_ratio, cfg.val_ratio)
    if not args.series:
        raise ConfigError("give --series (with optional --adjacency) or --preset")
    return load_csv(args.series, args.adjacency, train_ratio=cfg.train_ratio, val_ratio=cfg.val_ratio)


def _write_metrics(path: Optional[str], records) -> None:
    if not path:
        return
    with open(path, "a", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.model_dump_json() + "\n")


# ── Subcommands ──────────────────────────────────────────────────────────────

def cmd_train(args) -> int:
    cfg = train_config(args)
    ds  = dataset_from_args(args, cfg)
    out = args.out or config.CHECKPOINT_PATH or DEFAULT_CHECKPOINT
    try:
        run = fit(ds, cfg, cache_dir=config.CACHE_DIR)
    except TrainingAborted as exc:
        if exc.checkpoint is not None:
            save_checkpoint(exc.checkpoint, out)
            logger.warning("training aborted, best checkpoint epoch=%d saved to %s", exc.checkpoint.epoch, out)
        raise
    save_checkpoint(run.checkpoint, out)
    record = evaluate(run.checkpoint, ds)
    _write_metrics(args.metrics_out, [record])
    print(record.model_dump_json(indent=2))
    return 0


def _dataset_for_checkpoint(args, ckpt) -> EpidemicDataset:
    cfg = ckpt.config
    return load_csv(
        args.series, train_ratio=cfg.train_ratio, val_ratio=cfg.val_ratio, adjacency=ckpt.graph.A,
    )


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = _dataset_for_checkpoint(args, ckpt)
    record = evaluate(ckpt, ds, split=args.split, missing_rate=args.missing_rate)
    _write_metrics(args.metrics_out, [record])
    print(record.model_dump_json(indent=2))
    return 0


def cmd_forecast(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = _dataset_for_checkpoint(args, ckpt)
    values = forecast(ckpt, ds)
    frame = pd.DataFrame({"region": ds.region_names, "forecast": values})
    frame.to_csv(args.out, index=False, float_format="%.10g")
    logger.info("forecast written path=%s horizon=%d regions=%d", args.out, ckpt.config.horizon, len(values))
    return 0


def cmd_graph(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = _dataset_for_checkpoint(args, ckpt)
    weights = learned_graph(ckpt, ds)
    frame = pd.DataFrame(weights, index=ds.region_names, columns=ds.region_names)
    frame.to_csv(args.out, index_label="region", float_format="%.10g")
    logger.info("graph written path=%s variant=%s regions=%d", args.out, ckpt.config.variant, len(frame))
    return 0


def cmd_synth(args) -> int:
    if args.preset:
        cfg = synth_config(args.preset)
    elif args.config:
        cfg = build_config(SynthConfig, read_config_file(args.config), {})
    else:
        raise ConfigError(f"give --config or --preset (one of {sorted(SYNTH_PRESETS)})")
    ds = generate_synthetic(cfg)
    series_path, adjacency_path = save_csv(ds, args.out_dir)
    print(json.dumps({"series": str(series_path), "adjacency": str(adjacency_path)}))
    return 0


def cmd_gradcheck(args) -> int:
    report = gradcheck(zero_drive=args.zero_drive, seed=args.seed or 0)
    print(report.model_dump_json(indent=2))
    return 0 if report.passed else 1


def cmd_repeat(args) -> int:
    cfg = train_config(args)
    ds  = dataset_from_args(args, cfg)
    seeds = _int_list(args.seeds) if args.seeds else None
    summary = evaluate_repeats(ds, cfg, seeds, cache_dir=config.CACHE_DIR)
    _write_metrics(args.metrics_out, summary.records)
    print(summary.model_dump_json(indent=2, exclude={"records"}))
    return 0


def cmd_ablate(args) -> int:
    cfg = train_config(args)
    ds  = dataset_from_args(args, cfg)
    seeds = _int_list(args.seeds) if args.seeds else None
    summaries = run_ablation(ds, cfg, _str_list(args.variants), seeds, cache_dir=config.CACHE_DIR)
    _write_metrics(args.metrics_out, [r for s in summaries for r in s.records])
    print(json.dumps([s.model_dump(exclude={"records"}) for s in summaries], indent=2))
    return 0


# ── Parser ───────────────────────────────────────────────────────────────────

def _add_dataset_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--series", help="series CSV (header = region names)")
    p.add_argument("--adjacency", help="edge list CSV with header src,dst")
    p.add_argument("--preset", choices=sorted(SYNTH_PRESETS), help="use a synthetic preset instead of CSV files")


def _add_train_args(p: argparse.ArgumentParser) -> None:
    _add_dataset_args(p)
    p.add_argument("--config", help="KEY=VALUE file of TrainConfig fields")
    p.add_argument("--horizon", type=int)
    p.add_argument("--missing-rate", dest="missing_rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--n-heads", dest="n_heads", type=int)
    p.add_argument("--top-k", dest="top_k", type=int)
    p.add_argument("--solver", choices=("euler", "rk4"))
    p.add_argument("--substeps", type=int)
    p.add_argument("--loss", choices=("mse", "mae"))
    p.add_argument("--query", choices=("z", "h"))
    p.add_argument("--drift", choices=("modulation", "pure"))
    p.add_argument("--variant", choices=sorted(config.VARIANTS))
    p.add_argument("--workers", type=int)
    p.add_argument("--grad-clip", dest="grad_clip", type=float, help="global gradient-norm cap")
    p.add_argument("--metrics-out", dest="metrics_out", help="append JSON-lines metric records here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="earth", description="Epidemic-aware neural ODE forecasting")
    parser.add_argument("--log-level", dest="log_level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    _add_train_args(p)
    p.add_argument("--out", help="checkpoint path (default $EARTH_CHECKPOINT or earth.ckpt)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--series", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--missing-rate", dest="missing_rate", type=float)
    p.add_argument("--metrics-out", dest="metrics_out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forecast", help="forecast past the end of a series")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--series", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("graph", help="write the learned transmission matrix E(T) as a region×region CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--series", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("synth", help="write a synthetic networked-SIR dataset")
    p.add_argument("--config", help="KEY=VALUE file of SynthConfig fields")
    p.add_argument("--preset", choices=sorted(SYNTH_PRESETS))
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="compare tape gradients with finite differences")
    p.add_argument("--zero-drive", dest="zero_drive", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("repeat", help="train and evaluate once per seed")
    _add_train_args(p)
    p.add_argument("--seeds", help="comma-separated seeds (default 0..repeats-1)")
    p.set_defaults(func=cmd_repeat)

    p = sub.add_parser("ablate", help="compare model variants over seeds")
    _add_train_args(p)
    p.add_argument("--variants", default=",".join(config.VARIANTS))
    p.add_argument("--seeds")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    config.configure_logging(args.log_level)
    try:
        return args.func(args)
    except (EarthError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
