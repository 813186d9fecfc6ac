"""Greedy layer-by-layer placement of compartments onto bounded cores.

The network is viewed as groups of compartments: the forward layers, the
label neurons, the loss pair and (under FA) one error pair per hidden
trainable layer. Every group is cut into consecutive blocks of ``l_m``
compartments, one block per core, with no core shared between groups.
Error-path groups use the ``l_m`` of the forward layer they serve.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .network import BuiltNetwork

DEFAULT_K0 = 8


class MappingError(ValueError):
    """The network (or one neuron of it) does not fit the core constraints."""


@dataclass(frozen=True)
class CoreConstraints:
    max_compartments_per_core: int = 1024
    max_synapses_per_core: int = 1_000_000
    max_fanin_per_core: int = 4096  # distinct presynaptic compartments
    max_fanout_per_core: int = 1_000_000  # outgoing synapses

    def __post_init__(self):
        for k, v in vars(self).items():
            if int(v) != v or v < 1:
                raise ValueError(f"{k} must be a positive integer, got {v}")


@dataclass(frozen=True)
class Group:
    name: str
    size: int
    layer: int  # forward layer whose l_m policy applies
    offset: int  # first global compartment id


@dataclass(frozen=True)
class Connection:
    src: str
    dst: str
    adjacency: sparse.csr_matrix  # (n_src, n_dst), one entry per synapse


def build_adjacency(mask) -> sparse.csr_matrix:
    """Adjacency of a layer pair from a (n_src, n_dst) connectivity mask or weight block.

    Rows index presynaptic neurons, so row sums are fan-outs and column sums
    fan-ins.
    """
    return sparse.csr_matrix(np.asarray(mask) != 0, dtype=np.int8)


def _groups_and_connections(net: BuiltNetwork) -> tuple[list[Group], list[Connection]]:
    spec = net.spec
    L = len(net.layers) - 1
    C = spec.num_classes
    sizes: list[tuple[str, int, int]] = [(f"layer{l}", layer.size, l) for l, layer in enumerate(net.layers)]
    conns: list[tuple[str, str, object]] = []
    for l in range(1, L + 1):
        layer = net.layers[l]
        # structural connectivity: plastic weights can move away from zero
        m = layer.mask if layer.mask is not None else np.ones(layer.weights.shape, dtype=bool)
        conns.append((f"layer{l - 1}", f"layer{l}", m.T))
    if net.trainable:
        eye = sparse.identity(C, dtype=np.int8, format="csr")
        sizes += [("label", C, L), ("loss_pos", C, L), ("loss_neg", C, L)]
        for ch in ("loss_pos", "loss_neg"):
            conns += [("label", ch, eye), (f"layer{L}", ch, eye), (ch, f"layer{L}", eye)]
        up_pos, up_neg = "loss_pos", "loss_neg"
        for e in net.error_layers:
            pos, neg = f"err{e.index}_pos", f"err{e.index}_neg"
            sizes += [(pos, e.size, e.index), (neg, e.size, e.index)]
            B = e.feedback.T  # (upstream, n)
            eye = sparse.identity(e.size, dtype=np.int8, format="csr")
            for dst in (pos, neg):
                conns += [(up_pos, dst, B), (up_neg, dst, B),  # cross-connected +-B
                          (f"layer{e.index}", dst, eye),  # gate input to the auxiliary compartment
                          (dst, f"layer{e.index}", eye)]  # injection
            up_pos, up_neg = pos, neg
        for l, B in sorted(net.dfa_feedback.items()):
            for ch in ("loss_pos", "loss_neg"):
                conns.append((ch, f"layer{l}", B.T))
    groups, off = [], 0
    for name, n, l in sizes:
        groups.append(Group(name, n, l, off))
        off += n
    return groups, [Connection(s, d, build_adjacency(a) if not sparse.issparse(a) else a.tocsr())
                    for s, d, a in conns]


def network_groups(net: BuiltNetwork) -> list[Group]:
    return _groups_and_connections(net)[0]


def error_path_compartments(net: BuiltNetwork) -> int:
    """Compartments on the error path: the loss pair plus any FA error pairs."""
    return sum(g.size for g in network_groups(net) if g.name.startswith(("loss", "err")))


@dataclass
class _GroupStats:
    """Per-compartment tallies of one group, used to size its cores."""

    fanin: np.ndarray  # incoming synapses per compartment
    fanout: np.ndarray  # outgoing synapses per compartment
    sources: sparse.csr_matrix | None  # (n, total compartments) presynaptic indicator


def _group_stats(groups: list[Group], conns: list[Connection]) -> dict[str, _GroupStats]:
    by_name = {g.name: g for g in groups}
    total = sum(g.size for g in groups)
    stats = {g.name: _GroupStats(np.zeros(g.size, np.int64), np.zeros(g.size, np.int64), None)
             for g in groups}
    incoming: dict[str, list] = {g.name: [] for g in groups}
    for c in conns:
        a = c.adjacency
        stats[c.src].fanout += np.asarray(a.sum(axis=1)).ravel().astype(np.int64)
        stats[c.dst].fanin += np.asarray(a.sum(axis=0)).ravel().astype(np.int64)
        src = by_name[c.src]
        # place the block's presynaptic columns at their global ids
        at = a.T.tocoo()
        incoming[c.dst].append(sparse.csr_matrix(
            (np.ones(at.nnz, np.int8), (at.row, at.col + src.offset)), shape=(by_name[c.dst].size, total)))
    for g in groups:
        if incoming[g.name]:
            s = incoming[g.name][0]
            for m in incoming[g.name][1:]:
                s = s + m
            stats[g.name].sources = s.tocsr()
    return stats


def _block_tallies(st: _GroupStats, n: int, l_m: int) -> tuple[np.ndarray, ...]:
    starts = np.arange(0, n, l_m)
    comps = np.diff(np.append(starts, n))
    syn_in = np.add.reduceat(st.fanin, starts) if n else np.zeros(0, np.int64)
    syn_out = np.add.reduceat(st.fanout, starts) if n else np.zeros(0, np.int64)
    if st.sources is None:
        distinct = np.zeros(len(starts), np.int64)
    else:
        distinct = np.array([st.sources[s:s + l_m].sum(axis=0).astype(bool).sum() for s in starts],
                            dtype=np.int64)
    return comps, syn_in, syn_out, distinct


def _violations(tallies, c: CoreConstraints) -> list[str]:
    comps, syn_in, syn_out, distinct = tallies
    out = []
    for name, vals, cap in (("compartments", comps, c.max_compartments_per_core),
                            ("synapses", syn_in, c.max_synapses_per_core),
                            ("fan-in", distinct, c.max_fanin_per_core),
                            ("fan-out", syn_out, c.max_fanout_per_core)):
        if vals.size and vals.max() > cap:
            out.append(f"{name} {int(vals.max())} > {cap}")
    return out


def neurons_per_core(net: BuiltNetwork, layer: int, constraints: CoreConstraints = CoreConstraints(),
                     requested: int | None = None) -> int:
    """Largest l_m (up to ``requested``) at which every group using ``layer``'s policy fits."""
    groups, conns = _groups_and_connections(net)
    stats = _group_stats(groups, conns)
    mine = [g for g in groups if g.layer == layer]
    if not mine:
        raise MappingError(f"no compartments belong to layer {layer}")
    cap = constraints.max_compartments_per_core
    if requested is not None:
        cap = min(cap, int(requested))
    for g in mine:
        bad = _violations(_block_tallies(stats[g.name], g.size, 1), constraints)
        if bad:
            raise MappingError(f"{g.name}: a single compartment is unmappable ({'; '.join(bad)})")
    for l_m in range(cap, 0, -1):
        if all(not _violations(_block_tallies(stats[g.name], g.size, l_m), constraints) for g in mine):
            return l_m
    raise MappingError(f"layer {layer} is unmappable")  # pragma: no cover - l_m=1 was checked


@dataclass
class CoreMap:
    assignments: np.ndarray  # compartment id -> core id
    compartments: np.ndarray  # per-core tallies
    synapses_in: np.ndarray
    synapses_out: np.ndarray
    fanin: np.ndarray
    l_m: dict[int, int]  # forward layer -> neurons per core
    groups: list[Group] = field(default_factory=list)

    @property
    def cores_used(self) -> int:
        return int(len(self.compartments))

    def validate(self, constraints: CoreConstraints):
        counts = np.bincount(self.assignments, minlength=self.cores_used)
        if not np.array_equal(counts, self.compartments):
            raise MappingError("core tallies disagree with the assignment table")
        bad = _violations((self.compartments, self.synapses_in, self.synapses_out, self.fanin), constraints)
        if bad:
            raise MappingError("; ".join(bad))


def _resolve_l_m(net: BuiltNetwork, per_layer_l_m) -> dict[int, int]:
    n = len(net.layers)
    if isinstance(per_layer_l_m, int):
        return {l: per_layer_l_m for l in range(n)}
    if isinstance(per_layer_l_m, dict):
        return {l: int(per_layer_l_m[l]) for l in range(n)}
    vals = list(per_layer_l_m)
    if len(vals) != n:
        raise ValueError(f"need one l_m per layer ({n}), got {len(vals)}")
    return {l: int(v) for l, v in enumerate(vals)}


def map_network(net: BuiltNetwork, constraints: CoreConstraints = CoreConstraints(),
                per_layer_l_m: int | Sequence[int] | dict = 1) -> CoreMap:
    """Place every compartment; raises ``MappingError`` if any core breaks a bound."""
    l_m = _resolve_l_m(net, per_layer_l_m)
    if min(l_m.values()) < 1:
        raise ValueError("l_m must be positive")
    groups, conns = _groups_and_connections(net)
    stats = _group_stats(groups, conns)
    assign = np.empty(sum(g.size for g in groups), dtype=np.int64)
    tallies = [[], [], [], []]
    core = 0
    for g in groups:
        k = l_m[g.layer]
        t = _block_tallies(stats[g.name], g.size, k)
        bad = _violations(t, constraints)
        if bad:
            raise MappingError(f"{g.name} at l_m={k}: {'; '.join(bad)}")
        ids = np.arange(g.size)
        assign[g.offset:g.offset + g.size] = core + ids // k
        core += math.ceil(g.size / k)
        for acc, v in zip(tallies, t):
            acc.append(v)
    cat = [np.concatenate(v) if v else np.zeros(0, np.int64) for v in tallies]
    cmap = CoreMap(assign, cat[0], cat[1], cat[2], cat[3], l_m, groups)
    cmap.validate(constraints)
    return cmap


@dataclass(frozen=True)
class CostProxy:
    l_m: int
    cores_used: int
    steps_per_sample: int
    energy_proxy: int
    mode: str
    feasible: bool = True


def serialization_factor(cmap: CoreMap, k0: int = DEFAULT_K0) -> int:
    """Time-multiplexing slowdown: the busiest core updates k0 compartments per step."""
    busiest = int(cmap.compartments.max(initial=0))
    return max(1, math.ceil(busiest / k0))


def sweep_neurons_per_core(net: BuiltNetwork, constraints: CoreConstraints = CoreConstraints(),
                           l_m_list: Iterable[int] = (1, 2, 5, 10, 20, 50),
                           k0: int = DEFAULT_K0) -> list[CostProxy]:
    rows = []
    for k in l_m_list:
        try:
            cmap = map_network(net, constraints, int(k))
        except MappingError:
            rows.append(CostProxy(int(k), 0, 0, 0, net.spec.feedback_mode, feasible=False))
            continue
        steps = 2 * net.T * serialization_factor(cmap, k0)
        rows.append(CostProxy(int(k), cmap.cores_used, steps, cmap.cores_used * steps, net.spec.feedback_mode))
    return rows


SWEEP_COLUMNS = ("l_m", "cores_used", "steps_per_sample", "energy_proxy", "mode", "feasible")


def write_sweep_csv(rows: Sequence[CostProxy], path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r.l_m, r.cores_used, r.steps_per_sample, r.energy_proxy, r.mode, int(r.feasible)])


def write_coremap_csv(cmap: CoreMap, path):
    """One row per core: group, first compartment id and the four tallies."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("core", "group", "first_compartment", "compartments", "synapses_in", "synapses_out", "fanin"))
        first = np.searchsorted(cmap.assignments, np.arange(cmap.cores_used))
        owner = {}
        for g in cmap.groups:
            for c in np.unique(cmap.assignments[g.offset:g.offset + g.size]):
                owner[int(c)] = g.name
        for c in range(cmap.cores_used):
            w.writerow((c, owner.get(c, ""), int(first[c]), int(cmap.compartments[c]),
                        int(cmap.synapses_in[c]), int(cmap.synapses_out[c]), int(cmap.fanin[c])))
