"""Command line interface: ``polyneuron {fetch,train,eval,gradcheck,export-curves}``.

Errors are reported on stderr as one JSON object ``{"error": code, "message": ...}``;
usage errors exit with status 2, other failures with 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from polyneuron import data, gradcheck, train
from polyneuron.exceptions import PolyNeuronError, UsageError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text):
    try:
        return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# flag -> (TrainConfig field, argparse kwargs)
TRAIN_FLAGS = {
    "--benchmark": ("benchmark", {"choices": sorted(train.BENCHMARKS)}),
    "--activation": ("activation", {"choices": ["relu", "swish", "apl", "polyneuron", "polyneuron-r"]}),
    "--sharing": ("sharing", {"choices": ["channel", "layer"]}),
    "--epochs": ("epochs", {"type": int}),
    "--lr": ("lr", {"type": float}),
    "--lr-drops": ("lr_drops", {"type": _int_list}),
    "--batch-size": ("batch_size", {"type": int}),
    "--weight-decay": ("weight_decay", {"type": float}),
    "--lambda-prod": ("lambda_prod", {"type": float}),
    "--lambda-sum": ("lambda_sum", {"type": float}),
    "--control-points": ("s", {"type": int}),
    "--rbf-order": ("k", {"type": int}),
    "--data-dir": ("data_dir", {}),
    "--out-dir": ("out_dir", {}),
    "--train-subset": ("train_subset", {"type": int}),
    "--test-subset": ("test_subset", {"type": int}),
    "--max-steps-per-epoch": ("max_steps_per_epoch", {"type": int}),
    "--export-interval": ("export_interval", {"type": int}),
    "--export-units": ("export_units", {"type": int}),
    "--flip-axis": ("flip_axis", {"choices": ["vertical", "horizontal"]}),
}
TRAIN_SWITCHES = {
    "--desk-scale": ("desk_scale", True),
    "--no-augment": ("augment", False),
    "--no-flip": ("flip", False),
    "--no-strict-data": ("strict_data", False),
}


def build_parser():
    parser = _Parser(prog="polyneuron", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="seed for all randomness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fetch", help="download a dataset")
    p.add_argument("dataset", choices=["mnist", "cifar10"])
    p.add_argument("--dest", default=None, help="target directory (default: $POLYNEURON_DATA or ./data)")
    p.add_argument("--mirror", action="append", default=None, help="base URL; repeatable")
    p.add_argument(
        "--checksum", action="append", default=[], metavar="FILE=ALGO:HEX",
        help="expected digest for a downloaded file; repeatable",
    )

    p = sub.add_parser("train", help="train a benchmark network")
    p.add_argument("--config", help="key = value config file")
    for flag, (_, kwargs) in TRAIN_FLAGS.items():
        p.add_argument(flag, default=None, **kwargs)
    for flag in TRAIN_SWITCHES:
        p.add_argument(flag, action="store_true", default=None)

    p = sub.add_parser("eval", help="error rate of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--data-dir", default=None)

    p = sub.add_parser("gradcheck", help="run the finite-difference suites")
    p.add_argument("--suite", choices=["all", *gradcheck.SUITES], default="all")

    p = sub.add_parser("export-curves", help="write activation curves of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True, help="JSONL file to append to")
    p.add_argument("--units", type=int, default=4, help="units per activation layer")
    return parser


def _train_config(args):
    values = train.load_config_file(args.config) if args.config else {}
    for flag, (name, _) in TRAIN_FLAGS.items():
        v = getattr(args, flag[2:].replace("-", "_"))
        if v is not None:
            values[name] = v
    for flag, (name, value) in TRAIN_SWITCHES.items():
        if getattr(args, flag[2:].replace("-", "_")):
            values[name] = value
    if args.seed is not None:
        values["seed"] = args.seed
    return train.TrainConfig.from_dict(values)


def _parse_checksums(items):
    out = {}
    for item in items:
        try:
            name, spec = item.split("=", 1)
            algo, digest = spec.split(":", 1)
        except ValueError:
            raise UsageError(f"bad --checksum {item!r}; expected FILE=ALGO:HEX") from None
        out[name] = (algo.lower(), digest.lower())
    return out


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "fetch":
        dest = args.dest or train.TrainConfig().resolved_data_dir()
        path = data.fetch(args.dataset, dest, args.mirror, _parse_checksums(args.checksum))
        print(json.dumps({"dataset": args.dataset, "path": str(path)}))
    elif args.command == "train":
        cfg = _train_config(args)
        reports, ckpt = train.run_training(cfg)
        print(json.dumps({"final": reports[-1].to_dict(), "checkpoint": str(ckpt)}))
    elif args.command == "eval":
        err = train.evaluate(args.checkpoint, args.split, data_dir=args.data_dir)
        print(json.dumps({"split": args.split, "error": err}))
    elif args.command == "gradcheck":
        seed = 0 if args.seed is None else args.seed
        suites = tuple(gradcheck.SUITES) if args.suite == "all" else (args.suite,)
        results = gradcheck.run_all(seed, suites)
        for r in results:
            print(r.line())
        return 0 if all(r.ok for r in results) else 1
    elif args.command == "export-curves":
        _, trainer, epoch = train.load_checkpoint(args.checkpoint)
        records = train.export_curves(trainer.model, epoch, args.out, args.units)
        print(json.dumps({"records": len(records), "epoch": epoch, "path": args.out}))
    return 0


def main(argv=None):
    try:
        return run(argv)
    except PolyNeuronError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return exc.exit_status
    except OSError as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
