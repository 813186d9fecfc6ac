"""Integer compartment dynamics for the simulated substrate.

Everything here runs on integers. A compartment holds a synaptic drive
current ``u`` and a membrane potential ``v``; per step

    u' = u * current_decay + weighted_input
    v' = v * voltage_decay + u' + bias

and the compartment fires when ``v' >= threshold``. The integrate-and-fire
configuration used throughout the network is ``voltage_decay=1`` and
``current_decay=0``.

The scalar API (``step_compartment`` and friends) is the reference; the
``Population`` class applies the same arithmetic to whole layers with numpy.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable

import numpy as np

# Potentials are held in a 32-bit signed register.
POTENTIAL_LIMIT = 2**31

RESET_MODES = ("subtract", "zero")


class PotentialOverflow(ArithmeticError):
    """Membrane potential left the signed register range.

    This means the weights or threshold are mis-scaled for the layer.
    """


def _as_fraction(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x).limit_denominator(1 << 12)


@dataclass(frozen=True)
class CompartmentConfig:
    threshold: int = 64
    voltage_decay: Fraction = Fraction(1)
    current_decay: Fraction = Fraction(0)
    bias: int = 0
    lower_clamp: int | None = None
    reset: str = "subtract"

    def __post_init__(self):
        if int(self.threshold) != self.threshold or self.threshold <= 0:
            raise ValueError(f"threshold must be a positive integer, got {self.threshold}")
        object.__setattr__(self, "voltage_decay", _as_fraction(self.voltage_decay))
        object.__setattr__(self, "current_decay", _as_fraction(self.current_decay))
        for name in ("voltage_decay", "current_decay"):
            d = getattr(self, name)
            if not 0 <= d <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {d}")
        if self.reset not in RESET_MODES:
            raise ValueError(f"reset must be one of {RESET_MODES}, got {self.reset!r}")

    @property
    def is_if(self) -> bool:
        return self.voltage_decay == 1 and self.current_decay == 0


IF_CONFIG = CompartmentConfig()


@dataclass(frozen=True)
class CompartmentState:
    v: int = 0
    u: int = 0
    spiked: bool = False


def _decay(x: int, d: Fraction) -> int:
    # truncation toward zero, as a fixed-point multiplier would do
    if d == 1:
        return x
    if d == 0:
        return 0
    p = x * d.numerator
    q = abs(p) // d.denominator
    return q if p >= 0 else -q


def _check(v: int):
    if not -POTENTIAL_LIMIT <= v < POTENTIAL_LIMIT:
        raise PotentialOverflow(f"membrane potential {v} outside 32-bit range")


def integrate(state: CompartmentState, cfg: CompartmentConfig, weighted_input: int) -> CompartmentState:
    """Sub-threshold update only; no firing decision."""
    u = _decay(state.u, cfg.current_decay) + int(weighted_input)
    v = _decay(state.v, cfg.voltage_decay) + u + cfg.bias
    _check(u)
    _check(v)
    return CompartmentState(v=v, u=u, spiked=False)


def _fire(state: CompartmentState, cfg: CompartmentConfig, allowed: bool) -> CompartmentState:
    v = state.v
    spiked = allowed and v >= cfg.threshold
    if spiked:
        v = v - cfg.threshold if cfg.reset == "subtract" else 0
    if cfg.lower_clamp is not None and v < cfg.lower_clamp:
        v = cfg.lower_clamp
    return CompartmentState(v=v, u=state.u, spiked=spiked)


def step_compartment(state: CompartmentState, cfg: CompartmentConfig, weighted_input: int) -> CompartmentState:
    """Advance one compartment by one time step."""
    return _fire(integrate(state, cfg, weighted_input), cfg, True)


def spike_count_activation(u_accum: int, threshold: int) -> int:
    """Spike count produced by an accumulated potential: floor(u/theta), never negative."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    return max(0, u_accum // threshold)


@dataclass
class TwoCompartmentNeuron:
    """Error-path neuron: a soma plus an auxiliary compartment that can veto firing.

    In ``and_gate`` mode the auxiliary compartment counts spikes of the paired
    forward neuron during phase 1 and is active once it has seen one.
    """

    soma: CompartmentState = field(default_factory=CompartmentState)
    auxiliary: CompartmentState = field(default_factory=CompartmentState)
    gate_mode: str = "and_gate"
    cfg: CompartmentConfig = IF_CONFIG

    @property
    def auxiliary_active(self) -> bool:
        return self.auxiliary.v >= 1

    def observe_forward(self, spiked: bool):
        if spiked:
            self.auxiliary = replace(self.auxiliary, v=self.auxiliary.v + 1)

    def step(self, weighted_input: int) -> bool:
        self.soma = integrate(self.soma, self.cfg, weighted_input)
        allowed = gated_fire(self) if self.gate_mode == "and_gate" else self.soma.v >= self.cfg.threshold
        self.soma = _fire(self.soma, self.cfg, allowed)
        return self.soma.spiked


def gated_fire(n: TwoCompartmentNeuron) -> bool:
    """True iff the soma is at threshold and the auxiliary compartment is active."""
    return n.soma.v >= n.cfg.threshold and n.auxiliary_active


@dataclass
class PhaseTraces:
    """Per-neuron spike counters split by phase.

    ``h`` counts phase-1 spikes, ``h_hat`` phase-2 spikes and ``z`` both;
    ``pre_frozen`` is the presynaptic trace as seen by outgoing synapses.
    """

    h: np.ndarray
    h_hat: np.ndarray
    z: np.ndarray
    pre_frozen: np.ndarray
    pre_window: str = "phase1"

    @classmethod
    def zeros(cls, n: int, pre_window: str = "phase1") -> "PhaseTraces":
        if pre_window not in ("phase1", "both"):
            raise ValueError(f"unknown pre-trace window {pre_window!r}")
        z = lambda: np.zeros(n, dtype=np.int64)  # noqa: E731
        return cls(z(), z(), z(), z(), pre_window)

    def record(self, spikes: np.ndarray, phase: int):
        s = spikes.astype(np.int64)
        if phase == 1:
            self.h += s
            self.pre_frozen += s
        else:
            self.h_hat += s
            if self.pre_window == "both":
                self.pre_frozen += s
        self.z += s

    def record_counts(self, counts: np.ndarray, phase: int):
        """Add whole-phase spike counts at once (same effect as per-step ``record``)."""
        c = np.asarray(counts, dtype=np.int64)
        if phase == 1:
            self.h += c
            self.pre_frozen += c
        else:
            self.h_hat += c
            if self.pre_window == "both":
                self.pre_frozen += c
        self.z += c

    def reset(self):
        for a in (self.h, self.h_hat, self.z, self.pre_frozen):
            a[:] = 0


class Population:
    """A layer of identically configured compartments, stepped together.

    ``v`` and ``u`` may carry a leading batch axis; all arithmetic is integer.
    With ``strict`` set, the potential range is checked every step; callers
    that can bound the potential for a whole phase clear it.
    """

    def __init__(self, n: int, cfg: CompartmentConfig = IF_CONFIG, bias=None, batch: int | None = None):
        self.n = n
        self.cfg = cfg
        shape = (n,) if batch is None else (batch, n)
        self.v = np.zeros(shape, dtype=np.int64)
        self.u = np.zeros(shape, dtype=np.int64)
        self.bias = bias
        self.spiked = np.zeros(shape, dtype=bool)
        self.strict = True
        self._if = cfg.is_if
        self._theta = int(cfg.threshold)
        self._subtract = cfg.reset == "subtract"

    @property
    def bias(self) -> np.ndarray:
        return self._bias

    @bias.setter
    def bias(self, b):
        self._bias = np.zeros(self.n, dtype=np.int64) if b is None else np.asarray(b, dtype=np.int64)
        self._has_bias = bool(self._bias.any())

    def potential_bound(self, max_drive: int, T: int) -> int:
        """Largest |v| reachable in T steps when no step's |drive| exceeds ``max_drive``."""
        return (int(np.abs(self.v).max(initial=0)) + T * (max_drive + int(np.abs(self._bias).max(initial=0)))
                + self._theta)

    @staticmethod
    def _decay(x: np.ndarray, d: Fraction) -> np.ndarray:
        if d == 1:
            return x
        if d == 0:
            return np.zeros_like(x)
        p = x * d.numerator
        return np.sign(p) * (np.abs(p) // d.denominator)

    def step(self, drive, gate: np.ndarray | None = None) -> np.ndarray:
        cfg = self.cfg
        v = self.v
        if self._if:
            self.u[...] = drive
            v += self.u
            if self._has_bias:
                v += self._bias
        else:
            self.u = self._decay(self.u, cfg.current_decay) + np.asarray(drive, dtype=np.int64)
            v = self.v = self._decay(v, cfg.voltage_decay) + self.u + self.bias
        fired = v >= self._theta
        if gate is not None:
            fired &= gate
        if self._subtract:
            np.subtract(v, self._theta, out=v, where=fired)
        else:
            v[fired] = 0
        if cfg.lower_clamp is not None:
            np.maximum(v, cfg.lower_clamp, out=v)
        if self.strict and v.size and (v.max() >= POTENTIAL_LIMIT or v.min() < -POTENTIAL_LIMIT):
            raise PotentialOverflow("membrane potential outside 32-bit range")
        self.spiked = fired
        return fired

    def run(self, drive: np.ndarray | None, T: int) -> np.ndarray:
        """Step T times with per-step ``drive`` (T, ..., n); returns the (T, ..., n) raster.

        Ungated integrate-and-fire populations take a tight loop; the result is
        identical to calling ``step`` T times.
        """
        raster = np.zeros((T,) + self.v.shape, dtype=bool)
        if not (self._if and self.cfg.lower_clamp is None and self._subtract):
            for t in range(T):
                raster[t] = self.step(0 if drive is None else drive[t])
            return raster
        if self.strict:
            peak = 0 if drive is None else int(np.abs(drive).max(initial=0))
            if self.potential_bound(peak, T) >= POTENTIAL_LIMIT:
                for t in range(T):
                    raster[t] = self.step(0 if drive is None else drive[t])
                return raster
        v, th, b = self.v, self._theta, self._bias
        if drive is None and b.min(initial=0) >= 0 and b.max(initial=0) <= th \
                and v.min(initial=0) >= 0 and v.max(initial=0) < th:
            # bias-only drive fires at most once per step: spikes up to step k
            # number floor((v0 + k*b) / theta)
            k = np.arange(T + 1, dtype=np.int64).reshape((T + 1,) + (1,) * v.ndim)
            cum = (v + k * b) // th
            raster[...] = np.diff(cum, axis=0) > 0
            v += T * b - cum[-1] * th
            self.spiked = raster[-1].copy()
            return raster
        has_bias = self._has_bias
        for t in range(T):
            if drive is not None:
                v += drive[t]
            if has_bias:
                v += b
            f = raster[t]
            np.greater_equal(v, th, out=f)
            np.subtract(v, th, out=v, where=f)
        if drive is not None:
            self.u[...] = drive[-1]
        self.spiked = raster[-1].copy()
        return raster

    def reset(self):
        self.v[...] = 0
        self.u[...] = 0
        self.spiked[...] = False


def reset_all(populations: Iterable[Population], traces: Iterable[PhaseTraces] = ()):
    """Zero every potential, drive current and phase counter."""
    for p in populations:
        p.reset()
    for t in traces:
        t.reset()
