"""Local learning rules in sum-of-products form and weight commitment.

A rule is ``z := z + sum_i S_i * prod_j (V_ij + C_ij)`` where each ``V_ij``
is a synapse-local quantity (pre trace, post trace, tag, weight) or the
constant one. The two-phase update only needs the post trace of phase 2
(``h_hat``), the tag ``Z = h + h_hat`` and the pre trace frozen at the phase
boundary, so it can be evaluated at the end of the second phase without
keeping phase-1 state around.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .neuron import PhaseTraces

WEIGHT_MIN, WEIGHT_MAX = -128, 127


class Var(str, Enum):
    PRE_TRACE = "pre_trace"
    POST_TRACE = "post_trace"
    TAG = "tag"
    WEIGHT = "weight"
    ONE = "constant_one"


class RuleConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Factor:
    var: Var
    const: int = 0


@dataclass(frozen=True)
class Term:
    scale: Fraction
    factors: tuple[Factor, ...]


@dataclass(frozen=True)
class SumOfProductsRule:
    terms: tuple[Term, ...]

    def __post_init__(self):
        if not self.terms:
            raise RuleConfigError("a rule needs at least one term")
        for t in self.terms:
            if not t.factors:
                raise RuleConfigError("every term needs at least one factor")

    @classmethod
    def of(cls, *terms: tuple) -> "SumOfProductsRule":
        """Build from ``(scale, [(var, const), ...])`` tuples."""
        return cls(tuple(
            Term(Fraction(s), tuple(Factor(Var(v), int(c)) for v, c in fs)) for s, fs in terms
        ))


@dataclass(frozen=True)
class LearningParams:
    eta: Fraction = Fraction(1, 8)
    weight_min: int = WEIGHT_MIN
    weight_max: int = WEIGHT_MAX
    rounding: str = "stochastic"

    def __post_init__(self):
        eta = Fraction(self.eta)
        object.__setattr__(self, "eta", eta)
        if eta < 0:
            raise ValueError("eta must be non-negative")
        # dyadic: eta = m / 2**k, so integer products stay exact in binary
        if eta and eta.denominator & (eta.denominator - 1):
            raise ValueError(f"eta must be dyadic (m/2^k), got {eta}")
        if self.weight_min >= self.weight_max:
            raise ValueError("weight_min must be below weight_max")
        if self.rounding not in ("stochastic", "nearest"):
            raise ValueError(f"unknown rounding mode {self.rounding!r}")


def emstdp_rule(eta) -> SumOfProductsRule:
    """dw = 2*eta*post*pre - eta*tag*pre."""
    eta = Fraction(eta)
    return SumOfProductsRule.of(
        (2 * eta, [(Var.POST_TRACE, 0), (Var.PRE_TRACE, 0)]),
        (-eta, [(Var.TAG, 0), (Var.PRE_TRACE, 0)]),
    )


def eval_sum_of_products(rule: SumOfProductsRule, bindings: Mapping):
    """Evaluate a rule.

    With integer bindings the result is an exact ``Fraction``; numpy array
    bindings broadcast against each other and give a float array (exact for
    dyadic scales and moderate magnitudes).
    """
    vals = {Var(k): v for k, v in bindings.items()}
    vals.setdefault(Var.ONE, 1)
    vector = any(isinstance(v, np.ndarray) for v in vals.values())
    total = 0 if vector else Fraction(0)
    for term in rule.terms:
        prod = 1
        for f in term.factors:
            if f.var not in vals:
                raise RuleConfigError(f"variable {f.var.value!r} is not bound")
            prod = prod * (vals[f.var] + f.const)
        total = total + (float(term.scale) if vector else term.scale) * prod
    return total


def emstdp_weight_delta(traces: PhaseTraces, pre_frozen, params: LearningParams):
    """Weight change of the synapses into ``traces``' neuron(s), read at t = 2T.

    Scalars give a ``Fraction``; arrays give an ``(n_post, n_pre)`` matrix.
    """
    rule = emstdp_rule(params.eta)
    h_hat, z = traces.h_hat, traces.z
    if np.ndim(h_hat) == 0 and np.ndim(pre_frozen) == 0:
        return eval_sum_of_products(rule, {
            Var.POST_TRACE: int(h_hat), Var.TAG: int(z), Var.PRE_TRACE: int(pre_frozen),
        })
    return eval_sum_of_products(rule, {
        Var.POST_TRACE: np.asarray(h_hat, dtype=np.float64)[:, None],
        Var.TAG: np.asarray(z, dtype=np.float64)[:, None],
        Var.PRE_TRACE: np.asarray(pre_frozen, dtype=np.float64)[None, :],
    })


# -- rounding ---------------------------------------------------------------

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def counter_uniform(key: Sequence[int], counters: np.ndarray) -> np.ndarray:
    """Uniform [0, 1) draws addressed by ``(key, counter)``.

    Each value depends only on its own key and counter, so the order in which
    synapses are processed cannot change the result.
    """
    k = np.uint64(0)
    for part in key:
        k = _splitmix64(np.asarray(k ^ np.uint64(int(part) & 0xFFFFFFFFFFFFFFFF)))
    x = _splitmix64(np.asarray(counters, dtype=np.uint64) ^ k)
    return (x >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def round_weights(x: np.ndarray, params: LearningParams, key: Sequence[int] = (0,), index=None) -> np.ndarray:
    if params.rounding == "nearest":
        r = np.rint(x)  # half to even
    else:
        lo = np.floor(x)
        frac = x - lo
        if index is None:
            index = np.arange(x.size, dtype=np.uint64).reshape(x.shape)
        r = lo + (counter_uniform(key, index) < frac)
    return np.clip(r, params.weight_min, params.weight_max).astype(np.int64)


@dataclass(frozen=True)
class SynapseRecord:
    weight: int
    src: int
    dst: int
    tag_z: int = 0
    plastic: bool = True


def commit_updates(synapses: Sequence[SynapseRecord], deltas: Sequence, params: LearningParams,
                   key: Sequence[int] = (0,)) -> list[SynapseRecord]:
    """Apply one delta per plastic synapse, round, clip and clear the tags."""
    plastic = [i for i, s in enumerate(synapses) if s.plastic]
    if len(deltas) != len(plastic):
        raise ValueError(f"expected {len(plastic)} deltas, got {len(deltas)}")
    out = list(synapses)
    if not plastic:
        return out
    x = np.array([synapses[i].weight + float(d) for i, d in zip(plastic, deltas)])
    w = round_weights(x, params, key, np.asarray(plastic, dtype=np.uint64))
    for i, wi in zip(plastic, w):
        out[i] = replace(synapses[i], weight=int(wi), tag_z=0)
    return out


def commit_layer(weights: np.ndarray, delta: np.ndarray, params: LearningParams,
                 key: Sequence[int] = (0,), row_mask: np.ndarray | None = None) -> np.ndarray:
    """Matrix form of ``commit_updates`` for a dense weight block.

    Only rows with a nonzero delta are touched; ``row_mask`` freezes whole
    postsynaptic neurons.
    """
    rows = np.flatnonzero(np.any(delta != 0, axis=1))
    if row_mask is not None:
        rows = rows[np.asarray(row_mask, dtype=bool)[rows]]
    if rows.size == 0:
        return weights
    out = weights.copy()
    n_pre = weights.shape[1]
    idx = (rows[:, None].astype(np.uint64) * np.uint64(n_pre)
           + np.arange(n_pre, dtype=np.uint64)[None, :])
    out[rows] = round_weights(weights[rows] + delta[rows], params, key, idx)
    return out
