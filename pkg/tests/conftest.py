import os
from pathlib import Path

import numpy as np
import pytest

from emstdp.data import write_idx

MNIST_DIR = Path(os.environ.get("EMSTDP_MNIST", "/root/data/mnist"))
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def mnist_paths() -> dict[str, str] | None:
    paths = {k: MNIST_DIR / v for k, v in MNIST_FILES.items()}
    if not all(p.exists() for p in paths.values()):
        return None
    return {k: str(p) for k, p in paths.items()}


@pytest.fixture
def mnist():
    paths = mnist_paths()
    if paths is None:
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR} (set EMSTDP_MNIST)")
    return paths


def synthetic_images(n: int, classes: int, side: int, seed: int):
    """Class c lights up its own horizontal band, plus noise."""
    r = np.random.default_rng(seed)
    y = np.arange(n) % classes
    r.shuffle(y)
    x = r.integers(0, 40, (n, side, side))
    band = side // classes
    for i, c in enumerate(y):
        x[i, c * band:(c + 1) * band, :] += 200
    return np.clip(x, 0, 255).astype(np.uint8), y.astype(np.uint8)


@pytest.fixture
def tiny_idx(tmp_path):
    """Small IDX train/test pair: 8x8 images, 4 classes."""
    out = {}
    for split, n, seed in (("train", 240, 0), ("test", 80, 1)):
        x, y = synthetic_images(n, 4, 8, seed)
        write_idx(tmp_path / f"{split}-images", x)
        write_idx(tmp_path / f"{split}-labels", y)
        out[f"{split}_images"] = str(tmp_path / f"{split}-images")
        out[f"{split}_labels"] = str(tmp_path / f"{split}-labels")
    return out


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for the acceptance summary and print it."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(name: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
