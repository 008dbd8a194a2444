"""Command line: gen-data, train, eval, gradcheck, visualize.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from divtok.config import ConfigError, ModelConfig, RunConfig, TrainConfig, parse_config, with_overrides
from divtok.data import DatasetFormatError, make_split, read_dataset, write_dataset
from divtok.gradcheck import check_model_gradients, micro_config
from divtok.model import CheckpointError, load_checkpoint, save_checkpoint
from divtok.train import (
    METRICS_HEADER,
    TrainingDiverged,
    TrainingState,
    evaluate,
    load_optimizer,
    sampler_seed,
    save_optimizer,
    train,
)
from divtok.visualize import export_attention_maps

log = logging.getLogger("divtok")

GRADCHECK_TOL = 1e-5
CHECKPOINT = "model.dtok"
OPTIMIZER = "model.dopt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int, help="model seed (gen-data: base example seed)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="divtok", description="Diversity-regularized vision-language tokenization at desk scale.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic DTDS dataset")
    g.add_argument("--mode", choices=["image", "video"], required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--split", choices=["train", "val", "test"], default="train")

    t = sub.add_parser("train", parents=[common], help="train and write checkpoint + metrics.tsv")
    t.add_argument("--train-data", type=Path, help="DTDS file (default: generated from the config)")
    t.add_argument("--val-data", type=Path, help="DTDS file (default: generated from the config)")
    t.add_argument("--checkpoint", type=Path, help="resume from this checkpoint (and its .dopt sidecar)")
    t.add_argument("--steps", type=int, help="override the configured step count")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, help="DTDS file (default: generated test split)")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the whole model")

    v = sub.add_parser("visualize", parents=[common], help="export attention maps as PGM/PPM")
    v.add_argument("--checkpoint", type=Path, required=True)
    v.add_argument("--data", type=Path, help="DTDS file (default: generated test split)")
    v.add_argument("--index", type=int, default=0, help="example index within the dataset")
    return p


def load_run_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    if args.seed is not None and args.command != "gen-data":
        cfg = with_overrides(cfg, seed=args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = args.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset(cfg: RunConfig, path: Path | None, split: str, count: int):
    if path is not None:
        examples = read_dataset(path)
    else:
        examples = make_split(cfg.model.mode, split, count, cfg.train.data_seed, **_gen_kwargs(cfg.model, cfg.train))
    if not examples:
        raise ValueError(f"{split} dataset is empty")
    if examples[0].is_video != (cfg.model.mode == "video"):
        raise ConfigError(f"dataset does not match mode {cfg.model.mode}")
    return examples


def _gen_kwargs(mc: ModelConfig, tc: TrainConfig) -> dict:
    if mc.mode == "image":
        return {"grid": tc.grid, "image_size": mc.image_size}
    return {"frames": mc.frames, "image_size": mc.video_size}


def _write_config(path: Path, cfg: RunConfig) -> None:
    lines = []
    for section in (cfg.model, cfg.train):
        for f in fields(section):
            value = getattr(section, f.name)
            key = "lambda" if f.name == "lam" else f.name
            lines.append(f"{key} = {'auto' if value is None else value}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_gen_data(args) -> int:
    cfg = parse_config(args.config) if args.config else RunConfig()
    mc = with_overrides(cfg, mode=args.mode).model
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    examples = make_split(args.mode, args.split, args.count, args.seed or 0, **_gen_kwargs(mc, cfg.train))
    path = _out_dir(args) / f"{args.mode}_{args.split}.dtds"
    write_dataset(path, examples, args.mode)
    print(f"wrote {len(examples)} examples to {path}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    if args.steps is not None:
        cfg = with_overrides(cfg, steps=args.steps)
    out = _out_dir(args)
    train_set = _dataset(cfg, args.train_data, "train", cfg.train.train_count)
    val_set = _dataset(cfg, args.val_data, "val", cfg.train.val_count)
    state = None
    dtype = np.dtype(cfg.train.dtype)
    if args.checkpoint is not None:
        params = load_checkpoint(args.checkpoint, cfg.model, dtype)
        sidecar = args.checkpoint.with_suffix(".dopt")
        state = load_optimizer(sidecar, params) if sidecar.exists() else TrainingState.fresh(params, sampler_seed(cfg.model.seed))
    print(METRICS_HEADER, flush=True)
    metrics = out / "metrics.tsv"
    with metrics.open("w", encoding="utf-8") as fh:
        fh.write(METRICS_HEADER + "\n")

        def on_eval(step, report):
            row = report.row(step)
            print(row, flush=True)
            fh.write(row + "\n")
            fh.flush()

        try:
            state, _ = train(cfg, train_set, val_set, state=state, on_eval=on_eval)
        except TrainingDiverged as e:
            save_checkpoint(out / CHECKPOINT, e.last_good.params)
            save_optimizer(out / OPTIMIZER, e.last_good)
            raise
    save_checkpoint(out / CHECKPOINT, state.params)
    save_optimizer(out / OPTIMIZER, state)
    _write_config(out / "config.cfg", cfg)
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    params = load_checkpoint(args.checkpoint, cfg.model, np.dtype(cfg.train.dtype))
    sidecar = args.checkpoint.with_suffix(".dopt")
    step = load_optimizer(sidecar, params).step if sidecar.exists() else 0
    data = _dataset(cfg, args.data, "test", cfg.train.test_count)
    report = evaluate(cfg, params, data)
    print(METRICS_HEADER)
    print(report.row(step))
    if args.out is not None:
        (_out_dir(args) / "metrics.tsv").write_text(f"{METRICS_HEADER}\n{report.row(step)}\n", encoding="utf-8")
    return 0


def cmd_gradcheck(args) -> int:
    mc = load_run_config(args).model if args.config else micro_config(seed=args.seed or 0)
    result = check_model_gradients(mc)
    print(f"max relative error {result.max_rel_err:.3e} ({result.worst})")
    if args.out is not None:
        lines = [f"{k}\t{v:.6e}" for k, v in result.per_param.items()]
        (_out_dir(args) / "gradcheck.tsv").write_text("param\trel_err\n" + "\n".join(lines) + "\n", encoding="utf-8")
    return 0 if result.max_rel_err <= GRADCHECK_TOL else 2


def cmd_visualize(args) -> int:
    cfg = load_run_config(args)
    params = load_checkpoint(args.checkpoint, cfg.model, np.dtype(cfg.train.dtype))
    data = _dataset(cfg, args.data, "test", max(cfg.train.test_count, args.index + 1))
    if not 0 <= args.index < len(data):
        raise UsageError(f"--index {args.index} out of range for {len(data)} examples")
    ex = data[args.index]
    written = export_attention_maps(cfg.model, params, ex, _out_dir(args))
    print(f"question: {ex.question}\nanswer: {ex.answer}\nwrote {len(written)} files to {_out_dir(args)}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "visualize": cmd_visualize,
}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"divtok {args.command}: {e}", file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"divtok {args.command}: config error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, CheckpointError, DatasetFormatError, TrainingDiverged, FloatingPointError) as e:
        print(f"divtok {args.command}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
