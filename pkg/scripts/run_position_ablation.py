"""Application-position ablation under replace routing: none, encoder only,
decoder only, full.

Usage:
    python scripts/run_position_ablation.py [--seeds 0,1,2,3,4] [--jobs 2]
                                            [--out-dir runs/position]
"""

import sys

from stageroute.cli import main

if __name__ == "__main__":
    argv = ["ablate", "--suite", "position", "--out-dir", "runs/position"]
    argv += sys.argv[1:]
    sys.exit(main(argv))
