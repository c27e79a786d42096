"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import build, default_config, load_config, validate
from .errors import ConfigError, DataError, DivergenceError, NumericalError, StructuralError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4

log = logging.getLogger("mmvarnet")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads for batch gradients")
    common.add_argument("--out-dir", help="artifact directory (overrides paths.out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mmvarnet", description="Multimodal variational SSH mapping")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="synthesize truth, SST and masks")
    sub.add_parser("baseline-oi", parents=[common], help="OI reconstruction of the test block")
    t = sub.add_parser("train", parents=[common], help="train the learned models")
    t.add_argument("--model", choices=[*pipeline.MODELS, "all"], default="all")
    r = sub.add_parser("reconstruct", parents=[common], help="reconstruct the test block")
    r.add_argument("--model", choices=[*pipeline.MODELS, "all"], default="all")
    e = sub.add_parser("evaluate", parents=[common], help="score reconstructions")
    e.add_argument("--recon", action="append", default=[], metavar="NAME=FILE",
                   help="reconstruction file (repeatable); defaults to every recon_*.fstk")
    e.add_argument("--truth", help="truth file when the reconstruction carries none")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of all operators")
    g.add_argument("--size", type=int, default=8, help="grid size of the check fixtures")
    f = sub.add_parser("features", parents=[common], help="dump learned SST feature maps")
    f.add_argument("--window", type=int, default=0, help="test window index")
    sub.add_parser("config", parents=[common], help="print the validated config with defaults")
    sub.add_parser("all", parents=[common], help="run every stage in sequence")
    return p


def _models(arg: str) -> tuple[str, ...]:
    return pipeline.MODELS if arg == "all" else (arg,)


def _experiment(args):
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg["seed"] = args.seed
        cfg = validate(cfg)
    return cfg, build(cfg)


def _recon_args(run, items: list[str]) -> dict[str, Path]:
    if not items:
        return pipeline.default_recons(run)
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        if not Path(path).exists():
            raise DataError(f"reconstruction file {path} not found")
        out[name] = Path(path)
    return out


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg, exp = _experiment(args)
        if args.command == "config":
            print(json.dumps(cfg, indent=2, sort_keys=True))
            return EXIT_OK
        if args.command == "gradcheck":
            from .diagnostics import gradcheck_report
            rows = gradcheck_report(exp, size=args.size)
            worst = 0.0
            for name, err, tol in rows:
                print(f"{name:<28s} {err:10.3e}  {'ok' if err < tol else 'FAIL'}")
                worst = max(worst, err / tol)
            return EXIT_OK if worst < 1 else EXIT_DIVERGENCE
        r = pipeline.open_run(exp, args.out_dir)
        cmd = args.command
        if cmd == "generate":
            pipeline.generate(r)
        elif cmd == "baseline-oi":
            pipeline.baseline_oi(r)
        elif cmd == "train":
            pipeline.train(r, _models(args.model), args.threads)
        elif cmd == "reconstruct":
            pipeline.reconstruct(r, _models(args.model))
        elif cmd == "evaluate":
            truth = Path(args.truth) if args.truth else None
            if truth is not None and not truth.exists():
                raise DataError(f"truth file {truth} not found")
            print(pipeline.table(pipeline.evaluate_files(r, _recon_args(r, args.recon), truth)))
        elif cmd == "features":
            pipeline.features(r, args.window)
        elif cmd == "all":
            print(pipeline.table(pipeline.run_all(r, args.threads)))
        return EXIT_OK
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, StructuralError, OSError) as exc:
        print(json.dumps({"error": "data", "message": str(exc)}), file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, NumericalError) as exc:
        print(json.dumps({"error": "numerical", "message": str(exc)}), file=sys.stderr)
        return EXIT_DIVERGENCE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
