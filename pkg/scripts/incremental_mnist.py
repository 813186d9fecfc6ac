"""Class-incremental MNIST run with a jointly trained baseline.

    python scripts/incremental_mnist.py [--config scripts/configs/incremental_mnist.cfg] [extra CLI flags]
"""
import argparse
import sys
from pathlib import Path

from emstdp.cli import main

HERE = Path(__file__).resolve().parent

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(HERE / "configs" / "incremental_mnist.cfg"))
    args, extra = ap.parse_known_args()
    sys.exit(main(["incremental", "--config", args.config, "--baseline", *extra]))
