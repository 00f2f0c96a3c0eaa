"""``superct`` command-line entry point."""
from __future__ import annotations

import argparse
import logging
import os
import sys

from . import config as config_mod
from . import experiment as ex
from .metrics import summary_table

log = logging.getLogger("superct")


def _common(p):
    p.add_argument("--config", required=True, help="experiment TOML file")
    p.add_argument("--out", help="output directory (default: out_dir from the config)")
    p.add_argument("--seed", type=int, help="master seed, unsigned 64-bit")
    p.add_argument("--threads", type=int, help="worker threads (fallback: $SUPERCT_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="superct", description="Low-dose CT reconstruction experiments")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("simulate", help="generate phantoms, sinograms and weights"))
    _common(sub.add_parser("learn-transforms", help="learn the union of sparsifying transforms"))
    p = sub.add_parser("reconstruct", help="reconstruct the stored test sinograms")
    _common(p)
    p.add_argument("--method", required=True, choices=ex.RECON_METHODS)
    p = sub.add_parser("train", help="train a denoiser or a SUPER model")
    _common(p)
    p.add_argument("--method", required=True, choices=ex.TRAIN_METHODS)
    _common(sub.add_parser("sweep-lambda", help="train parallel SUPER for every candidate lambda"))
    p = sub.add_parser("evaluate", help="metric table over reconstructions")
    _common(p)
    p.add_argument("--method", action="append", choices=ex.RECON_METHODS,
                   help="restrict to these methods (repeatable)")
    p.add_argument("--pred", help="compare this image directory ...")
    p.add_argument("--ref", help="... against same-named images here")
    _common(sub.add_parser("run-all", help="every step in order"))
    p = sub.add_parser("default-config", help="print the default configuration")
    p.add_argument("--out", help="write to this file instead of stdout")
    return ap


def _threads(arg):
    if arg is not None:
        return arg
    env = os.environ.get("SUPERCT_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise config_mod.ConfigError(f"SUPERCT_THREADS: not an integer: {env!r}") from None
    return None


def _load(args):
    cfg = config_mod.load(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    threads = _threads(args.threads)
    if threads is not None:
        over["threads"] = threads
    if args.out:
        over["out_dir"] = args.out
    if over:
        cfg = config_mod.from_dict({**cfg.to_dict(), **over})
    return cfg


def run(args) -> int:
    if args.command == "default-config":
        text = config_mod.ExperimentConfig().to_toml()
        if args.out:
            with open(args.out, "w") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
        return 0
    cfg = _load(args)
    out = cfg.out_dir
    cmd = args.command
    if cmd == "simulate":
        ex.simulate(cfg, out)
    elif cmd == "learn-transforms":
        ex.learn_transforms(cfg, out)
    elif cmd == "reconstruct":
        _, rep = ex.reconstruct(cfg, out, args.method)
        print(summary_table([rep]))
    elif cmd == "train":
        ex.train(cfg, out, args.method)
    elif cmd == "sweep-lambda":
        res = ex.sweep(cfg, out)
        print(f"best lambda {res.best}")
    elif cmd == "evaluate":
        if args.pred or args.ref:
            if not (args.pred and args.ref):
                raise ex.PipelineError("--pred and --ref go together")
            reports = [ex.evaluate_dirs(args.pred, args.ref)]
        else:
            reports = ex.evaluate(cfg, out, args.method)
        print(summary_table(reports))
    elif cmd == "run-all":
        print(summary_table(ex.run_all(cfg, out)))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ex.PipelineError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
