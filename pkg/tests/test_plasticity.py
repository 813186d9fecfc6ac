from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emstdp.neuron import PhaseTraces
from emstdp.plasticity import (
    LearningParams,
    RuleConfigError,
    SumOfProductsRule,
    SynapseRecord,
    Var,
    commit_layer,
    commit_updates,
    counter_uniform,
    emstdp_rule,
    emstdp_weight_delta,
    eval_sum_of_products,
    round_weights,
)

ETA = Fraction(1, 8)


def traces(h_hat, h):
    tr = PhaseTraces.zeros(1)
    tr.h[:] = h
    tr.h_hat[:] = h_hat
    tr.z[:] = h + h_hat
    return tr


def scalar_delta(h_hat, h, pre, eta=ETA):
    tr = traces(h_hat, h)
    return emstdp_weight_delta(
        type(tr)(tr.h[0], tr.h_hat[0], tr.z[0], tr.pre_frozen[0]), pre, LearningParams(eta=eta))


def test_single_term_rule():
    rule = SumOfProductsRule.of((1, [(Var.PRE_TRACE, 0)]))
    assert eval_sum_of_products(rule, {Var.PRE_TRACE: 5}) == 5


def test_constant_only_rule():
    rule = SumOfProductsRule.of((-2, [(Var.ONE, 2)]))
    assert eval_sum_of_products(rule, {}) == -6


def test_emstdp_rule_value():
    r = eval_sum_of_products(emstdp_rule(ETA), {Var.POST_TRACE: 5, Var.TAG: 8, Var.PRE_TRACE: 4})
    assert r == 1


def test_unbound_variable_is_a_config_error():
    with pytest.raises(RuleConfigError):
        eval_sum_of_products(emstdp_rule(ETA), {Var.POST_TRACE: 5})


def test_rule_needs_terms_and_factors():
    with pytest.raises(RuleConfigError):
        SumOfProductsRule(())
    with pytest.raises(RuleConfigError):
        SumOfProductsRule.of((1, []))


@pytest.mark.parametrize("h_hat, h, pre, want", [(5, 3, 4, 1), (7, 7, 9, 0), (9, 2, 0, 0)])
def test_weight_delta_examples(h_hat, h, pre, want):
    assert scalar_delta(h_hat, h, pre) == want


def test_tag_form_equals_error_form_exhaustively():
    g = np.arange(65)
    hh, h, pre = np.meshgrid(g, g, g, indexing="ij")
    # exact in integer units of eta = 1/8
    tag_form = 2 * hh * pre - (hh + h) * pre
    assert np.array_equal(tag_form, (hh - h) * pre)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 64), st.integers(0, 64), st.integers(0, 64), st.integers(0, 6))
def test_tag_form_is_exact_for_dyadic_rates(h_hat, h, pre, k):
    eta = Fraction(1, 2**k)
    assert scalar_delta(h_hat, h, pre, eta) == eta * (h_hat - h) * pre


@settings(max_examples=50, deadline=None)
@given(st.integers(-50, 50), st.integers(-50, 50), st.integers(-50, 50), st.integers(-50, 50))
def test_rule_is_linear_in_each_factor(a, b, c, d):
    rule = emstdp_rule(ETA)
    f = lambda p: eval_sum_of_products(rule, {Var.POST_TRACE: a, Var.TAG: b, Var.PRE_TRACE: p})  # noqa: E731
    assert f(c + d) - f(c) == f(d) - f(0)


def test_matrix_delta_matches_scalars():
    rng = np.random.default_rng(0)
    tr = PhaseTraces.zeros(4)
    tr.h[:] = rng.integers(0, 65, 4)
    tr.h_hat[:] = rng.integers(0, 65, 4)
    tr.z[:] = tr.h + tr.h_hat
    pre = rng.integers(0, 65, 6)
    d = emstdp_weight_delta(tr, pre, LearningParams())
    want = np.outer(tr.h_hat - tr.h, pre) / 8
    assert np.array_equal(d, want)


def test_learning_params_validation():
    with pytest.raises(ValueError):
        LearningParams(eta=Fraction(1, 3))
    with pytest.raises(ValueError):
        LearningParams(eta=-1)
    with pytest.raises(ValueError):
        LearningParams(weight_min=5, weight_max=5)
    with pytest.raises(ValueError):
        LearningParams(rounding="down")


def test_commit_saturates_and_clears_tags():
    syn = [SynapseRecord(127, 0, 0, tag_z=9), SynapseRecord(10, 1, 0, tag_z=3)]
    out = commit_updates(syn, [1, -3.0], LearningParams())
    assert [s.weight for s in out] == [127, 7]
    assert all(s.tag_z == 0 for s in out)


def test_nearest_rounding_is_half_to_even():
    p = LearningParams(rounding="nearest")
    out = commit_updates([SynapseRecord(10, 0, 0), SynapseRecord(11, 0, 1)], [0.5, 0.5], p)
    assert [s.weight for s in out] == [10, 12]


def test_non_plastic_synapses_untouched():
    syn = [SynapseRecord(5, 0, 0, tag_z=2, plastic=False), SynapseRecord(5, 1, 0)]
    out = commit_updates(syn, [2], LearningParams())
    assert out[0] == syn[0] and out[1].weight == 7
    with pytest.raises(ValueError):
        commit_updates(syn, [1, 2], LearningParams())


def test_stochastic_rounding_is_unbiased():
    x = np.full(20000, 3.25)
    r = round_weights(x, LearningParams(), key=(1, 2))
    assert set(np.unique(r)) == {3, 4}
    assert abs(r.mean() - 3.25) < 0.02


def test_counter_uniform_depends_only_on_key_and_counter():
    c = np.arange(100, dtype=np.uint64)
    a = counter_uniform((7, 1), c)
    b = counter_uniform((7, 1), c[::-1])[::-1]
    assert np.array_equal(a, b)
    assert not np.array_equal(a, counter_uniform((7, 2), c))
    assert a.min() >= 0 and a.max() < 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_commit_layer_keeps_weights_in_range(seed):
    rng = np.random.default_rng(seed)
    w = rng.integers(-128, 128, (5, 7))
    delta = rng.normal(0, 200, (5, 7))
    out = commit_layer(w, delta, LearningParams(), (seed,))
    assert out.min() >= -128 and out.max() <= 127


def test_commit_layer_row_mask_freezes_rows():
    w = np.zeros((3, 4), dtype=np.int64)
    delta = np.full((3, 4), 2.0)
    for mask in (np.array([1, 0, 1]), np.array([True, False, True])):
        out = commit_layer(w, delta, LearningParams(), (0,), mask)
        assert out[1].tolist() == [0] * 4
        assert out[0].tolist() == [2] * 4 and out[2].tolist() == [2] * 4
