"""Train DFA, FA and the real-valued oracle at desk scale and print the accuracies.

    python scripts/desk_mnist.py [--config scripts/configs/desk_mnist.cfg] [extra CLI flags]
"""
import argparse
import sys
from pathlib import Path

from emstdp.cli import main
from emstdp.config import load_config
from emstdp.experiment import read_metrics

HERE = Path(__file__).resolve().parent


def last_accuracy(path: Path) -> str:
    rows = read_metrics(path)
    return rows[-1]["accuracy"] if rows else "n/a"


def run():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(HERE / "configs" / "desk_mnist.cfg"))
    args, extra = ap.parse_known_args()
    out = Path(load_config(args.config).out_dir)
    jobs = [
        ("DFA", ["train", "--feedback-mode", "DFA", "--out-dir", str(out / "dfa")], out / "dfa" / "metrics.csv"),
        ("FA", ["train", "--feedback-mode", "FA", "--out-dir", str(out / "fa")], out / "fa" / "metrics.csv"),
        ("oracle", ["oracle-train", "--out-dir", str(out / "oracle")], out / "oracle" / "oracle_metrics.csv"),
    ]
    for name, argv, metrics in jobs:
        print(f"== {name}", flush=True)
        rc = main([argv[0], "--config", args.config, *argv[1:], *extra])
        if rc:
            return rc
    for name, _, metrics in jobs:
        print(f"{name:7s} test accuracy {last_accuracy(metrics)}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
