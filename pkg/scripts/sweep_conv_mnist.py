"""Core count and step cost of the convolutional MNIST network across neurons-per-core values."""
import sys

from emstdp.cli import main

if __name__ == "__main__":
    sys.exit(main(["sweep", "--structure", "28x28x1-5x5k16c2s-3x3k8c2s-100d-10d",
                   "--l-m-list", "1,2,5,10,20,50", "--out-dir", "runs/sweep", *sys.argv[1:]]))
