"""``flow-align`` command line entry point."""

from __future__ import annotations

import argparse
import json
import os
import sys

from .config import PRESETS, STAGES, ExperimentConfig, TokenizeConfig, apply_preset, load_config
from .errors import ConfigurationError, DependencyError, DivergenceError
from .runner import OUT_ENV, run_stage

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS")
EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_DIVERGED = 0, 1, 2, 3, 4


def build_parser():
    p = argparse.ArgumentParser(prog="flow-align", description="Toy flow-matching alignment experiments.")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("prompts", nargs="*", help="prompts to segment (tokenize stage only)")
    p.add_argument("--config", help="experiment config JSON; defaults are used when omitted")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help=f"output root (default: ${OUT_ENV} or ./runs)")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--deterministic", action="store_true", help="force single-threaded numerics")
    return p


def resolve_config(args):
    """Defaults, then the config file, then ``--preset``, then explicit flags."""
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    cfg.stage = args.stage
    if args.preset:
        apply_preset(cfg, args.preset)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    if args.prompts:
        if args.stage != "tokenize":
            raise ConfigurationError("positional prompts are only accepted by the tokenize stage")
        cfg.tokenize = TokenizeConfig(list(args.prompts))
    return cfg


def _pin_threads(argv):
    """Re-exec with single-threaded BLAS unless the environment already pins it."""
    if all(os.environ.get(v) == "1" for v in THREAD_VARS):
        return
    env = dict(os.environ, **{v: "1" for v in THREAD_VARS})
    os.execve(sys.executable, [sys.executable, "-m", "flow_align.cli", *argv], env)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    if args.deterministic:
        _pin_threads(argv)
    try:
        result = run_stage(resolve_config(args))
    except ConfigurationError as exc:
        print(f"flow-align: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"flow-align: missing dependency: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except DivergenceError as exc:
        print(f"flow-align: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    if result.stage == "tokenize":
        for spans in result.summary["spans"]:
            print(json.dumps(spans, ensure_ascii=False))
    else:
        print(json.dumps({"stage": result.stage, "exit_status": result.exit_status,
                          "artifacts": result.artifacts}, indent=2))
    return result.exit_status


if __name__ == "__main__":
    sys.exit(main())
