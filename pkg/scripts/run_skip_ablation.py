"""Routing ablation: skip-only baseline vs no-skip vs replace vs both.

Usage:
    python scripts/run_skip_ablation.py [--seeds 0,1,2,3,4] [--jobs 2]
                                        [--out-dir runs/skip]

Writes the aggregate CSV, the rendered table, and per-run attention
uniformity summaries under --out-dir.
"""

import sys

from stageroute.cli import main

if __name__ == "__main__":
    argv = ["ablate", "--suite", "skip", "--out-dir", "runs/skip"]
    argv += sys.argv[1:]
    sys.exit(main(argv))
