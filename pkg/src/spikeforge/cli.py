"""``spikeforge`` command-line driver.

Exit codes: 0 success, 1 usage or config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import atomic_write, load_dataset, save_dataset
from .metrics import evaluate, format_kv, format_report
from .pipeline import generate, make_splits, stage_ann, stage_convert, stage_hybrid

logger = logging.getLogger("spikeforge")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _positive(kind):
    def parse(text):
        value = kind(text)
        if not value > 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return value
    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spikeforge", description="Hybrid ANN-SNN co-training pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help, config=True, inp=False, out=True):
        p = sub.add_parser(name, help=help)
        if config:
            p.add_argument("--config", type=Path, help="run config file")
        if inp:
            p.add_argument("--in", dest="inp", type=Path, required=True, action="append",
                           help="input checkpoint")
        if out:
            p.add_argument("--out", type=Path, required=True, help="output path")
        p.add_argument("--seed", type=int, help="override the config seed")
        return p

    p = add("gen-data", "generate a synthetic dataset file")
    p.add_argument("--task", choices=("locnet", "cae"), help="override the config task")
    p = add("train-ann", "stage 1: train the rate-based network")
    p.add_argument("--data", type=Path, help="dataset file instead of generating one")
    p = add("convert", "stage 2: swap rate neurons for spiking ones", inp=True)
    p.add_argument("--scale", type=_positive(float), help="post-training scale factor")
    p.add_argument("--synapse", type=_positive(float), help="synaptic time constant (s)")
    p = add("finetune", "stage 3: hybrid spiking/smooth fine-tuning", inp=True)
    p.add_argument("--data", type=Path, help="dataset file instead of generating one")
    p = add("eval", "evaluate checkpoints on the test split", inp=True)
    p.add_argument("--data", type=Path, help="dataset file instead of generating one")
    return parser


def _config(args, task: str | None = None) -> RunConfig:
    if getattr(args, "config", None) is not None:
        cfg = load_config(args.config)
        if task is not None and task != cfg.task:
            raise ConfigError(f"config task {cfg.task!r} does not match {task!r}",
                              source=str(args.config))
    else:
        cfg = RunConfig.defaults(task or "locnet")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _single_input(args) -> Path:
    if len(args.inp) != 1:
        raise UsageError(f"{args.command} takes exactly one --in")
    return args.inp[0]


def _data(args):
    return load_dataset(args.data) if getattr(args, "data", None) else None


def _write_history(path: Path, history) -> None:
    lines = []
    for h in history:
        val = h.get("val_loss")
        lines.append(f"{h['epoch']} {h['train_loss']!r} {'nan' if val is None else repr(val)}")
    atomic_write(path, ("\n".join(lines) + "\n").encode())


def history_path(out: Path) -> Path:
    return out.with_name(out.name + ".history")


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    if args.task and args.task != cfg.task:
        cfg = RunConfig.defaults(args.task, cfg.seed)
    save_dataset(args.out, generate(replace(cfg, data=replace(cfg.data, cache_dir=None))))
    return EXIT_OK


def cmd_train_ann(args) -> int:
    cfg = _config(args)
    splits = make_splits(cfg, _data(args))
    net, history = stage_ann(cfg, splits)
    save_checkpoint(args.out, net)
    _write_history(history_path(args.out), history)
    return EXIT_OK


def cmd_convert(args) -> int:
    src = load_checkpoint(_single_input(args))
    cfg = _config(args, src.task)
    save_checkpoint(args.out, stage_convert(cfg, src, args.synapse, args.scale))
    return EXIT_OK


def cmd_finetune(args) -> int:
    src = load_checkpoint(_single_input(args))
    cfg = _config(args, src.task)
    splits = make_splits(cfg, _data(args))
    net, history = stage_hybrid(cfg, splits, src)
    save_checkpoint(args.out, net)
    _write_history(history_path(args.out), history)
    return EXIT_OK


def cmd_eval(args) -> int:
    nets = [load_checkpoint(p) for p in args.inp]
    tasks = {n.task for n in nets}
    if len(tasks) != 1:
        raise ValueError("checkpoints belong to different tasks")
    cfg = _config(args, tasks.pop())
    test = make_splits(cfg, _data(args)).test
    reports = [evaluate(n, test, cfg.eval_sim(), n.stage) for n in nets]
    text = format_report(reports)
    atomic_write(args.out, text.encode())
    atomic_write(args.out.with_name(args.out.name + ".kv"), format_kv(reports).encode())
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train-ann": cmd_train_ann, "convert": cmd_convert,
            "finetune": cmd_finetune, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"spikeforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"spikeforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"spikeforge: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
