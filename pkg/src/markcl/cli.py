"""Command-line entry point: ``markcl <subcommand> ...``."""
import argparse
import json
import os
import sys

from . import __version__
from .checkpoint import atomic_write, load_checkpoint
from .config import parse_config, reference_text
from .errors import ConfigError, MarkError
from .runner import ablate, analyze, canonical_json, run


def _overrides(cfg, args):
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["scenario.seeds"] = (args.seed,)
    if getattr(args, "out", None) is not None:
        changes["run.out"] = args.out
    if getattr(args, "threads", None) is not None:
        changes["run.threads"] = args.threads
    return cfg.override(**changes) if changes else cfg


def _log(msg):
    print(msg, file=sys.stderr)


def cmd_train(args):
    cfg = _overrides(parse_config(args.config), args)
    agg = run(cfg, log=_log)
    print(f"acc {agg['acc']['mean']:.4f} +- {agg['acc']['std']:.4f}  "
          f"bwt {agg['bwt']['mean']:+.4f} +- {agg['bwt']['std']:.4f}  -> {cfg['run.out']}")


def cmd_ablate(args):
    cfg = _overrides(parse_config(args.config), args)
    table = ablate(cfg, log=_log)
    print(f"{'variant':<15} {'acc':>16} {'bwt':>17}")
    for row in table:
        print(f"{row['variant']:<15} {row['acc']['mean']:>8.4f} +- {row['acc']['std']:.4f} "
              f"{row['bwt']['mean']:>+8.4f} +- {row['bwt']['std']:.4f}")


def cmd_analyze(args):
    cfg = _overrides(parse_config(args.config), args)
    report = analyze(args.kind, args.checkpoint, cfg)
    text = canonical_json(report)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    atomic_write(os.path.join(out_dir, f"analysis_{args.kind}.json"), text.encode())
    sys.stdout.write(text)


def cmd_inspect(args):
    tensors = load_checkpoint(args.checkpoint)
    width = max((len(n) for n in tensors), default=0)
    for name, arr in tensors.items():
        print(f"{name:<{width}}  {'x'.join(str(d) for d in arr.shape) or 'scalar'}")
    print(f"{len(tensors)} tensors, {sum(a.size for a in tensors.values())} values")


def cmd_reference(args):
    sys.stdout.write(reference_text())


def build_parser():
    parser = argparse.ArgumentParser(prog="markcl", description="Continual learning with a metalearned, masked knowledge base.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p):
        p.add_argument("--seed", type=int, help="run a single seed instead of scenario.seeds")
        p.add_argument("--out", help="output directory (overrides run.out)")
        p.add_argument("--threads", type=int, help="parallel KB copies (overrides run.threads)")

    p = sub.add_parser("train", help="train the configured variant for every seed")
    p.add_argument("config")
    run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train all six variants on shared seeds")
    p.add_argument("config")
    run_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", help="analyze a saved model")
    p.add_argument("kind", choices=["critical", "updates", "retrain"])
    p.add_argument("checkpoint")
    p.add_argument("config")
    run_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("inspect", help="list the tensors in a checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("config-reference", help="print every config key with its default")
    p.set_defaults(func=cmd_reference)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"markcl: config error: {exc}", file=sys.stderr)
        return 2
    except MarkError as exc:
        print(f"markcl: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"markcl: error: {exc.filename or ''}: {exc.strerror}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
