"""Run the bundled experiment configs through the CLI.

Each config in ``scripts/configs`` writes to ``<out>/<config stem>``.  The
training configs (train_score, train_iresnet, compare, girsanov) take
minutes to tens of minutes on one core.

Usage:
    python scripts/run_experiments.py                  # every config
    python scripts/run_experiments.py converge_gmm1d   # selected stems
"""

import argparse
import sys
import time
from pathlib import Path

from vpflow.cli import run

CONFIG_DIR = Path(__file__).resolve().parent / "configs"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("names", nargs="*", help="config stems to run (default: all)")
    parser.add_argument("--out", default="runs", help="root output directory")
    parser.add_argument("--seed", type=int, default=None, help="override every config seed")
    args = parser.parse_args(argv)

    configs = sorted(CONFIG_DIR.glob("*.json"))
    if args.names:
        by_stem = {c.stem: c for c in configs}
        missing = [n for n in args.names if n not in by_stem]
        if missing:
            parser.error(f"unknown configs {missing}; choose from {sorted(by_stem)}")
        configs = [by_stem[n] for n in args.names]

    worst = 0
    for cfg in configs:
        start = time.perf_counter()
        code = run(cfg, str(Path(args.out) / cfg.stem), args.seed)
        print(f"{cfg.stem:<28} exit {code}  {time.perf_counter() - start:8.1f} s", flush=True)
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
