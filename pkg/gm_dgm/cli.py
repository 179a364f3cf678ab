"""
Command-line entry point

Usage:
    python -m gm_dgm train --config configs/mnist_semiunsup.cfg [--model m2|gmdgm] [--out DIR] [--seed N] [--repeats N]
    python -m gm_dgm train --resume data/runs/mnist_semiunsup
    python -m gm_dgm eval --config configs/mnist_semiunsup.cfg --checkpoint DIR/run_00/checkpoints/best [--out DIR]
    python -m gm_dgm selftest [--seed N]

Exit codes: 0 on success, 2 for configuration or parse errors, 1 for any other failure.
"""

import argparse
import os
import sys

from .errors import ConfigurationError, GmDgmError, ParseError
from .models import ModelKind
from .utils import set_quiet, status


def _overrides(args):
    return {
        "model": getattr(args, "model", None),
        "out_dir": getattr(args, "out", None),
        "seed": getattr(args, "seed", None),
        "repeats": getattr(args, "repeats", None),
    }


def cmd_train(args):
    from .config import load_config
    from .experiment import resume_experiment, run_experiment

    if args.resume:
        resume_experiment(args.resume, {"repeats": args.repeats})
        return 0
    if not args.config:
        raise ConfigurationError("train needs --config or --resume", field="config")
    cfg = load_config(args.config, _overrides(args))
    status(f"🚀 Training {cfg.model.value} ({cfg.repeats} run(s)) -> {cfg.out_dir}")
    run_experiment(cfg)
    return 0


def cmd_eval(args):
    from .config import load_config
    from .experiment import evaluate_checkpoint

    overrides = _overrides(args)
    out_dir = overrides.pop("out_dir") or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "eval")
    cfg = load_config(args.config, overrides)
    expected = ModelKind(args.model) if args.model else cfg.model
    evaluate_checkpoint(cfg, args.checkpoint, out_dir, expected_kind=expected)
    status(f"✅ Evaluation written to {out_dir}")
    return 0


def cmd_selftest(args):
    from .selftest import print_selftest, run_selftest

    return 0 if print_selftest(run_selftest(args.seed)) else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="gm_dgm", description="Semi-unsupervised learning with M2 and GM-DGM")
    parser.add_argument("--quiet", action="store_true", help="suppress status lines")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="train one or more runs from a config")
    train.add_argument("--config", help="experiment config (key=value file)")
    train.add_argument("--model", choices=[k.value for k in ModelKind], help="override the model kind")
    train.add_argument("--out", help="override the output directory")
    train.add_argument("--seed", type=int, help="override the base seed")
    train.add_argument("--repeats", type=int, help="number of runs (seed_i = seed + i)")
    train.add_argument("--resume", metavar="RUN_DIR", help="continue the runs of an experiment directory")
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("eval", help="evaluate a checkpoint on the config's test set")
    evaluate.add_argument("--config", required=True, help="config the checkpoint was trained with")
    evaluate.add_argument("--checkpoint", required=True, help="checkpoint stem or .manifest path")
    evaluate.add_argument("--model", choices=[k.value for k in ModelKind], help="expected model kind")
    evaluate.add_argument("--out", help="report directory (default: <checkpoint dir>/eval)")
    evaluate.set_defaults(handler=cmd_eval)

    selftest = commands.add_parser("selftest", help="run the fast invariant checks")
    selftest.add_argument("--seed", type=int, default=0)
    selftest.set_defaults(handler=cmd_selftest)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    set_quiet(args.quiet)
    try:
        return args.handler(args)
    except (ConfigurationError, ParseError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return 2
    except (GmDgmError, OSError) as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
