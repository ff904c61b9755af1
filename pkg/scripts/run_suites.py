"""Run every reproduction suite into one directory and print a summary table.

    python3 scripts/run_suites.py --out runs/ [--only sparsity,knockout]

Trained models are cached under ``<out>/models`` and reused across suites.
"""

import argparse
import sys
from pathlib import Path

from calcheads.experiments import SUITES, run_suite


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--only", help="comma list of suites")
    args = ap.parse_args(argv)
    names = args.only.split(",") if args.only else list(SUITES)
    root = Path(args.out)
    results = [run_suite(n, root / n, root / "models") for n in names]
    print()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.suite}")
    return 0 if all(r.passed for r in results) else 3


if __name__ == "__main__":
    sys.exit(main())
