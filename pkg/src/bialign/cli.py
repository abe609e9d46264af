"""Command-line entry points.

Subcommands: gen-data, train, eval, ablate, gradcheck, dump-visuals.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, load_config
from .data import SceneSpec, generate_dataset, load_sample
from .gradcheck import TOLERANCE, run_checks
from .netpbm import PnmError
from .optim import NumericError
from .train import ablate, dump_visuals, evaluate, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="bialign", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic train/val dataset")
    p.add_argument("--out", required=True, help="dataset root directory")
    p.add_argument("--count", type=int, required=True, help="number of training samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--size", default="64x64", help="canvas as HxW")
    p.add_argument("--val-count", type=int, default=None,
                   help="validation samples (default: max(1, count // 4))")

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True, help="flat `key = value` config file")
    p.add_argument("--out", required=True, help="checkpoint output path")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")

    p = sub.add_parser("ablate", help="train the six ablation configurations")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output text table path")
    p.add_argument("--iters", type=int, default=120)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference checks of the backward rules")
    p.add_argument("--op", default=None, help="check a single op by name")

    p = sub.add_parser("dump-visuals", help="render prediction/flow/gate/indicator images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True, help="sample prefix, e.g. data/train/00000")
    p.add_argument("--out", required=True)
    return parser


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"--size must be HxW, got {text!r}") from exc
    return h, w


def _cmd_gen_data(args) -> int:
    h, w = _parse_size(args.size)
    spec = SceneSpec(num_classes=args.classes, canvas=(h, w))
    val_count = args.val_count if args.val_count is not None else max(1, args.count // 4)
    generate_dataset(args.out, spec, args.count, val_count, args.seed)
    print(f"wrote {args.count} train and {val_count} val samples under {args.out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    model_cfg, train_cfg = load_config(args.config)
    result = train(model_cfg, train_cfg, args.data, ckpt_path=args.out, log=print)
    metrics_path = args.out + ".metrics.csv"
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(result.metrics_rows) + "\n")
    print(f"final loss {result.final_loss:.6f}; checkpoint {args.out}; metrics {metrics_path}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    report = evaluate(args.ckpt, args.data, args.split)
    print(report.text())
    return EXIT_OK


def _cmd_ablate(args) -> int:
    from .optim import TrainConfig

    train_cfg = TrainConfig(
        total_iters=args.iters, batch_size=args.batch_size, seed=args.seed, eval_every=0
    )
    result = ablate(args.data, base_train_cfg=train_cfg, log=print)
    table = result.text()
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    print(table)
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    names = [args.op] if args.op else None
    try:
        results = run_checks(names)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return EXIT_USAGE
    width = max(len(name) for name, _ in results)
    failed = False
    for name, err in results:
        status = "ok" if err <= TOLERANCE else "FAIL"
        failed |= err > TOLERANCE
        print(f"{name.ljust(width)}  {err:.3e}  {status}")
    return EXIT_NUMERIC if failed else EXIT_OK


def _cmd_dump_visuals(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    sample = load_sample(args.sample)
    written = dump_visuals(ckpt, sample, args.out)
    for path in written:
        print(path)
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "dump-visuals": _cmd_dump_visuals,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, PnmError, CheckpointError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
