"""Finite-difference gradient check of every differentiable operation plus
the end-to-end tiny backbone. Nonzero exit on any failure.

Usage:
    python scripts/run_gradcheck.py [--tolerance 1e-4]
"""

import sys

from stageroute.cli import main

if __name__ == "__main__":
    sys.exit(main(["gradcheck"] + sys.argv[1:]))
