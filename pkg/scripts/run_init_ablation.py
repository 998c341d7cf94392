"""Pseudo-query initialization ablation: zero, random normal, Kaiming
uniform, Xavier uniform (routing fixed to both/full).

Usage:
    python scripts/run_init_ablation.py [--seeds 0,1,2,3,4] [--jobs 2]
                                        [--out-dir runs/init]
"""

import sys

from stageroute.cli import main

if __name__ == "__main__":
    argv = ["ablate", "--suite", "init", "--out-dir", "runs/init"]
    argv += sys.argv[1:]
    sys.exit(main(argv))
