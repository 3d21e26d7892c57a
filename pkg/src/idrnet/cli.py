"""Command line entry point: ``idrnet <subcommand> [--config PATH] [--seed N] [--out DIR] [--checkpoint PATH]``.

Exit codes: 0 success, 1 usage error, 2 verification failure, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, parse_config
from .scenes import RuleError, SceneRule, dump_split, make_dataset
from .train import CompatibilityError

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_ABORT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _overrides(pairs):
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args):
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    text = Path(args.config).read_text() if args.config else ""
    return parse_config(text + "\n" + "\n".join(f"{k} = {v}" for k, v in overrides.items()))


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    from .train import Trainer, TrainingAborted, write_report

    cfg = _config(args)
    out = _out(args, "runs/train")
    (out / "config.txt").write_text(cfg.dumps())
    ckpt = out / "checkpoint"
    trainer = Trainer(cfg, out)
    trainer.save(ckpt)
    try:
        while trainer.iteration < cfg.iterations:
            trainer.step()
            if cfg.eval_every and trainer.iteration % cfg.eval_every == 0:
                trainer.save(ckpt)
    except TrainingAborted as exc:
        saved = json.loads((ckpt / "manifest.json").read_text())["meta"]["iteration"]
        print(f"aborted: {exc}; last good checkpoint (iteration {saved}) kept at {ckpt}", file=sys.stderr)
        return EXIT_ABORT
    trainer.save(ckpt)
    report = trainer.evaluate()
    write_report(out / "report.csv", report, cfg.num_classes)
    print(f"trained {cfg.iterations} iterations, val mIoU {report.mean:.4f}")
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .train import Trainer, class_names, write_report

    if not args.checkpoint:
        raise UsageError("evaluate needs --checkpoint")
    cfg = _config(args) if args.config else None
    trainer = Trainer.from_checkpoint(args.checkpoint, config=cfg)
    report = trainer.evaluate(args.split)
    out = _out(args, str(Path(args.checkpoint).parent))
    write_report(out / f"report_{args.split}.csv", report, trainer.config.num_classes)
    for name, iou in zip(class_names(trainer.config.num_classes), report.per_class()):
        print(f"{name:>14s}  {'n/a' if iou is None else f'{float(iou):.4f}'}")
    print(f"{'mIoU':>14s}  {float(report.mean):.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .train import ablate

    cfg = _config(args)
    out = _out(args, "runs/ablate")
    table = ablate(cfg, args.toggles, out)
    for row in table:
        on = [k for k, v in row.items() if v == "x"] or ["baseline"]
        print(f"{'+'.join(on):<40s} mIoU {float(row['mIoU']):.4f}  counts [{row['deletion_counts']}]")
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .train import class_names, inspect_relations

    if not args.checkpoint:
        raise UsageError("inspect-relations needs --checkpoint")
    out = _out(args, str(Path(args.checkpoint).parent / "relations"))
    try:
        summary = inspect_relations(args.checkpoint, out)
    except AssertionError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    k = int(round((summary.storage_entries / 2) ** 0.5))
    names = class_names(k)
    print(f"relation storage: {summary.storage_entries} entries (2*K^2 with K={k})")
    print("top off-diagonal M_r_mean entries:")
    for i, j, v in summary.top_pairs:
        print(f"  {names[i]:>14s} <- {names[j]:<14s} {v:+.6f}")
    for path in summary.files:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    outcomes = run_gradcheck(seed=args.seed or 0, eps=args.eps)
    for o in outcomes:
        print(f"{'PASS' if o.passed else 'FAIL'}  {o.name:<30s} {o.max_rel_error:.3e}  ({o.where})")
    failed = [o.name for o in outcomes if not o.passed]
    if failed:
        print(f"{len(failed)} check(s) at or above {TOLERANCE:g}: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_generate(args) -> int:
    from .train import Streams

    cfg = _config(args)
    out = _out(args, "data")
    streams = Streams.from_seed(cfg.seed)
    rules = (SceneRule(cue_prob=cfg.cue_prob),)
    for split, count, master in (("train", cfg.train_size, streams.train_seed), ("val", cfg.val_size, streams.val_seed)):
        samples = make_dataset(count, rules, cfg.num_classes, cfg.height, cfg.width, master)
        dump_split(out / split, samples, rules)
        print(f"wrote {count} {split} scenes to {out / split}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "inspect-relations": cmd_inspect,
    "gradcheck": cmd_gradcheck,
    "generate-data": cmd_generate,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--checkpoint", help="checkpoint directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="idrnet", description="Intervention-driven relation segmentation at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train a model and save a checkpoint")
    p = sub.add_parser("evaluate", parents=[common], help="per-class IoU and mIoU of a checkpoint")
    p.add_argument("--split", choices=("val", "train"), default="val")
    p = sub.add_parser("ablate", parents=[common], help="run the ablation toggle grid")
    p.add_argument("toggles", nargs="*", metavar="TOGGLE",
                   help="IE-Orthogonal IE-DL M_r_mean M_r_var BD RD")
    sub.add_parser("inspect-relations", parents=[common], help="export relation matrices of a checkpoint")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every operator")
    p.add_argument("--eps", type=float, default=1e-5)
    sub.add_parser("generate-data", parents=[common], help="dump the synthetic train/val splits")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, RuleError, CompatibilityError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # anything else is a runtime abort
        logging.getLogger(__name__).debug("abort", exc_info=True)
        print(f"aborted: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
