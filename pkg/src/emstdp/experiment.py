"""Training, evaluation and the incremental class-learning protocol."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_conv_kernels
from .config import RunConfig
from .data import DatasetError, load_dataset, quantize_input
from .network import BuiltNetwork, Sample, build_network, output_counts_batch, train_sample
from .oracle import FpNetwork, apply_deltas, fp_emstdp_step, fp_forward
from .plasticity import LearningParams

METRICS_VERSION = 1
METRICS_COLUMNS = ("stage", "epoch", "round", "step", "samples_seen", "accuracy", "per_class",
                   "update_norm", "cores_used")


@dataclass
class Dataset:
    x: np.ndarray  # (N, n_in) quantized to [0, T]
    y: np.ndarray  # (N,)

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


def load_split(cfg: RunConfig, which: str) -> Dataset:
    images = getattr(cfg, f"{which}_images")
    labels = getattr(cfg, f"{which}_labels")
    if not images:
        raise DatasetError(f"no {which} dataset configured ({which}_images is empty)")
    x, y = load_dataset(images, labels or None)
    n = getattr(cfg, f"n_{which}")
    if n:
        x, y = x[:n], y[:n]
    if len(y) == 0:
        raise DatasetError(f"{which} set is empty")
    return Dataset(quantize_input(x.reshape(len(x), -1), cfg.T), np.asarray(y, dtype=np.int64))


def make_network(cfg: RunConfig) -> BuiltNetwork:
    spec = cfg.spec()
    kernels = load_conv_kernels(cfg.conv_checkpoint, spec) if cfg.conv_checkpoint else None
    return build_network(spec, cfg.seed, cfg.build_params(), conv_kernels=kernels)


# -- evaluation -------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    per_class: dict[int, float]
    n: int

    def per_class_text(self) -> str:
        return ";".join(f"{c}:{a:.4f}" for c, a in sorted(self.per_class.items()))


def evaluate(net: BuiltNetwork, data: Dataset, classes: Sequence[int] | None = None) -> EvalResult:
    """Phase-1 inference. With ``classes`` only those test samples count and
    the prediction is the argmax over those output neurons."""
    if len(data) == 0:
        raise DatasetError("cannot evaluate on an empty set")
    keep = np.ones(len(data), dtype=bool) if classes is None else np.isin(data.y, classes)
    if not keep.any():
        raise DatasetError("no test samples of the requested classes")
    x, y = data.x[keep], data.y[keep]
    counts = output_counts_batch(net, x)
    return _score(counts, y, classes)


def fp_evaluate(fp: FpNetwork, data: Dataset, classes: Sequence[int] | None = None) -> EvalResult:
    """Same scoring as ``evaluate`` with the real-valued forward pass."""
    if len(data) == 0:
        raise DatasetError("cannot evaluate on an empty set")
    keep = np.ones(len(data), dtype=bool) if classes is None else np.isin(data.y, classes)
    return _score(fp_forward(fp, data.x[keep].astype(np.float64))[-1], data.y[keep], classes)


def _score(counts: np.ndarray, y: np.ndarray, classes=None) -> EvalResult:
    if classes is not None:
        cls = np.asarray(sorted(classes))
        pred = cls[np.argmax(counts[:, cls], axis=1)]
    else:
        pred = np.argmax(counts, axis=1)
    per = {int(c): float(np.mean(pred[y == c] == c)) for c in np.unique(y)}
    return EvalResult(float(np.mean(pred == y)), per, int(len(y)))


# -- metrics ------------------------------------------------------------------------

class MetricsWriter:
    """Deterministic metrics CSV; wall-clock goes to a separate timing file."""

    def __init__(self, path, timing_path=None):
        self.path, self.timing_path = path, timing_path
        self._t0 = time.perf_counter()
        with open(path, "w", newline="") as f:
            f.write(f"# emstdp metrics format {METRICS_VERSION}\n")
            csv.writer(f).writerow(METRICS_COLUMNS)
        if timing_path:
            with open(timing_path, "w", newline="") as f:
                csv.writer(f).writerow(("stage", "epoch", "round", "step", "wall_clock_s"))

    def write(self, stage: str, ev: EvalResult | None, samples_seen: int, epoch="", round_="", step="",
              update_norm: float = 0.0, cores_used: int | str = ""):
        row = (stage, epoch, round_, step, samples_seen,
               f"{ev.accuracy:.6f}" if ev else "", ev.per_class_text() if ev else "",
               f"{update_norm:.6f}", cores_used)
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(row)
        if self.timing_path:
            with open(self.timing_path, "a", newline="") as f:
                csv.writer(f).writerow((stage, epoch, round_, step, f"{time.perf_counter() - self._t0:.3f}"))


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        lines = [l for l in f if not l.startswith("#")]
    return list(csv.DictReader(lines))


# -- training -----------------------------------------------------------------------

def epoch_order(seed: int, epoch: int, n: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, 7919, epoch]).permutation(n)


def train_pass(net: BuiltNetwork, data: Dataset, lp: LearningParams, order: Sequence[int] | None = None,
               class_mask: np.ndarray | None = None) -> float:
    """One pass of online training; returns the mean weight-change norm per sample."""
    order = range(len(data)) if order is None else order
    total, n = 0.0, 0
    for i in order:
        m = train_sample(net, Sample(data.x[i], int(data.y[i])), lp, class_mask)
        total += sum(m.weight_change.values())
        n += 1
    return total / max(n, 1)


def train_epochs(net: BuiltNetwork, train: Dataset, lp: LearningParams, epochs: int, seed: int,
                 shuffle: bool = True, test: Dataset | None = None,
                 on_epoch: Callable[[int, float, EvalResult | None], None] | None = None) -> list[EvalResult]:
    results = []
    for e in range(epochs):
        norm = train_pass(net, train, lp, epoch_order(seed, e, len(train), shuffle))
        ev = evaluate(net, test) if test is not None else None
        if ev is not None:
            results.append(ev)
        if on_epoch:
            on_epoch(e, norm, ev)
    return results


def fp_train_epochs(fp: FpNetwork, train: Dataset, eta: float, epochs: int, seed: int, shuffle: bool = True,
                    test: Dataset | None = None,
                    on_epoch: Callable[[int, float, EvalResult | None], None] | None = None) -> list[EvalResult]:
    """Online real-valued training with the engine's sample order."""
    results = []
    for e in range(epochs):
        total = 0.0
        for i in epoch_order(seed, e, len(train), shuffle):
            d = fp_emstdp_step(fp, train.x[i], int(train.y[i]), eta)
            apply_deltas(fp, d)
            total += sum(float(np.linalg.norm(v)) for v in d.values())
        ev = fp_evaluate(fp, test) if test is not None else None
        if ev is not None:
            results.append(ev)
        if on_epoch:
            on_epoch(e, total / max(len(train), 1), ev)
    return results


# -- incremental protocol ----------------------------------------------------------------

@dataclass(frozen=True)
class IncrementalSchedule:
    initial: tuple[int, ...]
    increments: tuple[tuple[int, ...], ...]
    chunks: int = 5
    step1_eta_factor: Fraction = Fraction(1, 4)
    rehearsal_noise: float = 0.0

    def __post_init__(self):
        seen = list(self.initial)
        for inc in self.increments:
            seen += list(inc)
        if len(set(seen)) != len(seen):
            raise ValueError("classes must be disjoint across the initial set and increments")
        if self.chunks < 1:
            raise ValueError("chunks must be positive")

    @property
    def classes(self) -> list[int]:
        return list(self.initial) + [c for inc in self.increments for c in inc]

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "IncrementalSchedule":
        init, incs = cfg.increment_groups()
        return cls(tuple(init), tuple(tuple(i) for i in incs), cfg.chunks, Fraction(cfg.step1_eta_factor),
                   cfg.rehearsal_noise)


def chunk_partition(y: np.ndarray, classes: Sequence[int], chunks: int,
                    per_class_chunk: int = 0) -> dict[int, list[np.ndarray]]:
    """Split each class's sample indices, in dataset order, into ``chunks`` parts.

    With ``per_class_chunk`` only the first ``chunks * per_class_chunk``
    samples of each class are used, ``per_class_chunk`` per chunk.
    """
    out = {}
    for c in classes:
        idx = np.flatnonzero(y == c)
        if per_class_chunk:
            need = chunks * per_class_chunk
            if len(idx) < need:
                raise DatasetError(f"class {c} has {len(idx)} samples, need {need}")
            idx = idx[:need]
        if len(idx) < chunks:
            raise DatasetError(f"class {c} has fewer samples than chunks")
        out[int(c)] = list(np.array_split(idx, chunks))
    return out


def rehearsal_sample(rng: np.random.Generator, pool: dict[int, np.ndarray], size: int) -> np.ndarray:
    """``size`` indices drawn without replacement, split as evenly as possible over the old classes."""
    classes = sorted(pool)
    base, extra = divmod(size, len(classes))
    picks = []
    for k, c in enumerate(classes):
        n = base + (1 if k < extra else 0)
        src = pool[c]
        picks.append(rng.choice(src, size=n, replace=n > len(src)))
    return np.concatenate(picks)


@dataclass
class RoundRecord:
    increment: int
    round: int
    step: int
    observed: list[int]
    accuracy: float
    per_class: dict[int, float]
    rehearsal_counts: dict[int, int] = field(default_factory=dict)


def _noisy(data: Dataset, idx: np.ndarray, rng: np.random.Generator, sigma: float, T: int) -> Dataset:
    d = data.subset(idx)
    if sigma <= 0:
        return d
    x = d.x + np.rint(rng.normal(0.0, sigma, d.x.shape)).astype(np.int64)
    return Dataset(np.clip(x, 0, T), d.y)


def run_incremental(net: BuiltNetwork, train: Dataset, test: Dataset, sched: IncrementalSchedule,
                    lp: LearningParams, seed: int, pretrain_epochs: int = 1, per_class_chunk: int = 0,
                    log: Callable[[RoundRecord], None] | None = None) -> tuple[float, list[RoundRecord]]:
    """Pretrain on the initial classes, then add each increment over ``chunks`` rounds.

    Step 1 of a round trains on the new classes' chunk with the old classes'
    output neurons disabled (no target, frozen rows) and a reduced rate.
    Step 2 trains on the same chunk plus an equal number of old-class
    samples. Output neurons of classes not yet observed stay disabled
    throughout. Returns the accuracy after pretraining and one record per step.
    """
    C = net.spec.num_classes
    parts = chunk_partition(train.y, sched.classes, sched.chunks, per_class_chunk)
    rng = np.random.default_rng([seed, 4243])
    observed = list(sched.initial)
    mask = np.zeros(C, dtype=np.int64)
    mask[observed] = 1
    pre_idx = np.concatenate([np.concatenate(parts[c]) for c in observed])
    pre = train.subset(pre_idx)
    for e in range(pretrain_epochs):
        train_pass(net, pre, lp, epoch_order(seed, e, len(pre)), mask)
    base = evaluate(net, test, observed)
    records = []
    lp1 = LearningParams(lp.eta * sched.step1_eta_factor, lp.weight_min, lp.weight_max, lp.rounding)
    for k, new in enumerate(sched.increments, start=1):
        old = list(observed)
        pool = {c: np.concatenate(parts[c]) for c in old}
        observed = old + list(new)
        for r in range(sched.chunks):
            new_idx = np.concatenate([parts[c][r] for c in new])
            # step 1: new classes only, old classifier neurons disabled
            m1 = np.zeros(C, dtype=np.int64)
            m1[list(new)] = 1
            d1 = train.subset(new_idx)
            train_pass(net, d1, lp1, rng.permutation(len(d1)), m1)
            ev = evaluate(net, test, observed)
            rec = RoundRecord(k, r + 1, 1, list(observed), ev.accuracy, ev.per_class)
            records.append(rec)
            if log:
                log(rec)
            # step 2: the new chunk plus an equal-size rehearsal sample of old classes
            reh = rehearsal_sample(rng, pool, len(new_idx))
            mix = np.concatenate([new_idx, reh])
            d2 = _noisy(train, mix, rng, sched.rehearsal_noise, net.T) if sched.rehearsal_noise else train.subset(mix)
            m2 = np.zeros(C, dtype=np.int64)
            m2[observed] = 1
            train_pass(net, d2, lp, rng.permutation(len(d2)), m2)
            ev = evaluate(net, test, observed)
            counts = {c: int(np.sum(train.y[reh] == c)) for c in old}
            rec = RoundRecord(k, r + 1, 2, list(observed), ev.accuracy, ev.per_class, counts)
            records.append(rec)
            if log:
                log(rec)
    return base.accuracy, records
