#!/usr/bin/env python3
"""Run the full experiment pipeline into one output directory.

Produces every CSV/JSON artifact the plotting layer consumes: asymptotic
approximations, threshold sweeps with shifted curves, the actor-critic
gradient profile, a Q-learning training run with policy extraction, the
policy comparison, and the replica diagnostics.

Usage:
    python scripts/run_pipeline.py --out results [--config cfg.yaml]
                                   [--workers 2] [--paper-scale] [--skip-diagnose]
"""

import argparse
import sys
import time

from qcdrl.cli import main as cli_main


def run(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="results")
    parser.add_argument("--config", default=None)
    parser.add_argument("--workers", type=int, default=2)
    parser.add_argument("--paper-scale", action="store_true")
    parser.add_argument("--skip-diagnose", action="store_true",
                        help="skip the replica diagnostics (the slow step)")
    args = parser.parse_args(argv)

    commands = ["approx", "sweep", "train-ac", "profile-ac", "train-q", "eval-policy"]
    if not args.skip_diagnose:
        commands.append("diagnose")
    common = ["--out", args.out, "--workers", str(args.workers)]
    if args.config:
        common += ["--config", args.config]
    if args.paper_scale:
        common += ["--paper-scale"]
    for cmd in commands:
        t0 = time.time()
        print(f"== {cmd}")
        code = cli_main([cmd] + common)
        print(f"   done in {time.time() - t0:.1f}s (exit {code})")
        if code != 0:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run())
