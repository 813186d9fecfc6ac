import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emstdp.mapper import (
    CoreConstraints,
    MappingError,
    build_adjacency,
    error_path_compartments,
    map_network,
    network_groups,
    neurons_per_core,
    serialization_factor,
    sweep_neurons_per_core,
    write_coremap_csv,
    write_sweep_csv,
)
from emstdp.network import build_network, conv_matrix
from emstdp.structure import parse_structure

CONV_NET = "28x28x1-5x5k16c2s-3x3k8c2s-100d-10d"


def net_of(structure, mode="DFA", seed=0):
    return build_network(parse_structure(structure, mode), seed)


def test_dense_adjacency():
    a = build_adjacency(np.ones((100, 10)))
    assert a.nnz == 1000
    assert np.all(np.asarray(a.sum(axis=1)).ravel() == 10)


def test_conv_adjacency_fanin():
    spec = parse_structure("28x28x1-5x5k16c2s-10d")
    _, mask = conv_matrix((28, 28, 1), spec.layers[1], np.ones((5, 5, 1, 16), dtype=np.int64))
    a = build_adjacency(mask.T)
    assert np.all(np.asarray(a.sum(axis=0)).ravel() == 25)


def test_unconnected_adjacency_is_empty():
    assert build_adjacency(np.zeros((4, 3))).nnz == 0


def test_constraints_must_be_positive():
    with pytest.raises(ValueError):
        CoreConstraints(max_compartments_per_core=0)


def test_neurons_per_core_is_capped_by_compartments():
    net = net_of("28x28x1-100d-10d")
    # 10**6 // 784 = 1275 synapse-wise, so the compartment cap binds
    assert neurons_per_core(net, 1) == 1024
    assert neurons_per_core(net, 1, requested=10) == 10


def test_requested_ten_gives_ten_hidden_cores():
    cmap = map_network(net_of("28x28x1-100d-10d"), per_layer_l_m=10)
    hidden = [g for g in cmap.groups if g.name == "layer1"][0]
    assert len(np.unique(cmap.assignments[hidden.offset:hidden.offset + hidden.size])) == 10


def test_unmappable_single_neuron():
    net = net_of("28x28x1-100d-10d")
    with pytest.raises(MappingError):
        neurons_per_core(net, 1, CoreConstraints(max_synapses_per_core=500))
    with pytest.raises(MappingError):
        map_network(net, CoreConstraints(max_synapses_per_core=500))


def test_error_path_counts():
    assert error_path_compartments(net_of(CONV_NET, "DFA")) == 2 * 10
    assert error_path_compartments(net_of(CONV_NET, "FA")) == 2 * (100 + 10)


def test_core_count_arithmetic_784_100_10():
    net = net_of("28x28x1-100d-10d", "DFA")
    cmap = map_network(net, per_layer_l_m=10)
    # forward 79 + 10 + 1, then label and the loss pair, one core each
    assert cmap.cores_used == 79 + 10 + 1 + 3
    fa = map_network(net_of("28x28x1-100d-10d", "FA"), per_layer_l_m=10)
    assert fa.cores_used == 79 + 10 + 1 + 3 + 2 * 10


def test_l_m_one_uses_one_core_per_compartment():
    net = net_of("16x1x1-8d-4d", "FA")
    cmap = map_network(net, per_layer_l_m=1)
    assert cmap.cores_used == sum(g.size for g in network_groups(net))


def test_mapping_is_deterministic():
    net = net_of("16x1x1-8d-4d", "FA")
    a, b = map_network(net, per_layer_l_m=3), map_network(net, per_layer_l_m=3)
    assert np.array_equal(a.assignments, b.assignments)
    assert np.array_equal(a.synapses_in, b.synapses_in)


def test_per_layer_l_m_length_checked():
    with pytest.raises(ValueError):
        map_network(net_of("16x1x1-8d-4d"), per_layer_l_m=[1, 2])
    with pytest.raises(ValueError):
        map_network(net_of("16x1x1-8d-4d"), per_layer_l_m=0)


@st.composite
def specs(draw):
    w = draw(st.integers(4, 12))
    c = draw(st.integers(1, 2))
    tokens = [f"{w}x{w}x{c}"]
    if draw(st.booleans()):
        k = draw(st.integers(1, 3))
        tokens.append(f"{k}x{k}k{draw(st.integers(1, 4))}c{draw(st.integers(1, 2))}s")
    for _ in range(draw(st.integers(0, 2))):
        tokens.append(f"{draw(st.integers(1, 40))}d")
    tokens.append(f"{draw(st.integers(2, 10))}d")
    return "-".join(tokens), draw(st.sampled_from(["FA", "DFA"]))


@settings(max_examples=25, deadline=None)
@given(specs(), st.integers(1, 30), st.integers(0, 100))
def test_maps_respect_bounds_and_assign_once(spec, l_m, seed):
    structure, mode = spec
    net = net_of(structure, mode, seed)
    cons = CoreConstraints(max_compartments_per_core=32, max_synapses_per_core=4000, max_fanin_per_core=600,
                           max_fanout_per_core=5000)
    try:
        cmap = map_network(net, cons, l_m)
    except MappingError:
        return
    total = sum(g.size for g in network_groups(net))
    assert len(cmap.assignments) == total
    assert cmap.compartments.sum() == total
    assert np.array_equal(np.bincount(cmap.assignments), cmap.compartments)
    assert cmap.compartments.max() <= cons.max_compartments_per_core
    assert cmap.synapses_in.max() <= cons.max_synapses_per_core
    assert cmap.fanin.max() <= cons.max_fanin_per_core
    assert cmap.synapses_out.max() <= cons.max_fanout_per_core


@settings(max_examples=15, deadline=None)
@given(specs())
def test_sweep_monotone(spec):
    rows = sweep_neurons_per_core(net_of(*spec), l_m_list=(1, 2, 5, 10, 20, 50))
    ok = [r for r in rows if r.feasible]
    assert all(b.cores_used <= a.cores_used for a, b in zip(ok, ok[1:]))
    assert all(b.steps_per_sample >= a.steps_per_sample for a, b in zip(ok, ok[1:]))
    assert all(r.energy_proxy == r.cores_used * r.steps_per_sample for r in ok)


def test_dfa_never_uses_more_cores_than_fa():
    for k in (1, 2, 5, 10, 20, 50):
        d = sweep_neurons_per_core(net_of(CONV_NET, "DFA"), l_m_list=[k])[0]
        f = sweep_neurons_per_core(net_of(CONV_NET, "FA"), l_m_list=[k])[0]
        assert d.cores_used <= f.cores_used


def test_infeasible_l_m_is_marked():
    rows = sweep_neurons_per_core(net_of("16x1x1-8d-4d"), CoreConstraints(max_compartments_per_core=4),
                                  l_m_list=[2, 8])
    assert rows[0].feasible and not rows[1].feasible


def test_serialization_factor():
    cmap = map_network(net_of("16x1x1-8d-4d"), per_layer_l_m=17)
    assert serialization_factor(cmap) == 2
    assert serialization_factor(map_network(net_of("16x1x1-8d-4d"), per_layer_l_m=1)) == 1


def test_csv_outputs(tmp_path):
    net = net_of("16x1x1-8d-4d")
    rows = sweep_neurons_per_core(net, l_m_list=(1, 2, 5, 10, 20, 50))
    write_sweep_csv(rows, tmp_path / "s.csv")
    with open(tmp_path / "s.csv") as f:
        got = list(csv.reader(f))
    assert got[0] == ["l_m", "cores_used", "steps_per_sample", "energy_proxy", "mode", "feasible"]
    assert len(got) == 7
    cmap = map_network(net, per_layer_l_m=4)
    write_coremap_csv(cmap, tmp_path / "c.csv")
    with open(tmp_path / "c.csv") as f:
        assert len(list(csv.reader(f))) == cmap.cores_used + 1
