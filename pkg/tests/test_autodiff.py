"""Tests for the tensor engine: forward oracles, backward vs finite differences."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import rrg.autodiff as ad
from rrg.autodiff import OPS, Tape, Tensor, grad_check
from rrg.errors import ContractError, DimensionError, NumericError, StateError

from .oracles import (
    causal_conv1d_oracle,
    finite_difference,
    matmul_oracle,
    selective_scan_oracle,
)


def weighted(t, w):
    # Asymmetric scalarization so transposed/misrouted gradients cannot cancel.
    return ad.sum_all(ad.mul(t, ad.constant(w)))


# ---------------------------------------------------------------------------
# Forward oracles
# ---------------------------------------------------------------------------


def test_matmul_matches_triple_loop(rng):
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 3))
    got = ad.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, matmul_oracle(a, b), atol=1e-12)


def test_linear_matches_manual(rng):
    x = rng.standard_normal((4, 6))
    w = rng.standard_normal((3, 6))
    b = rng.standard_normal(3)
    got = ad.linear(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, x @ w.T + b, atol=1e-12)


def test_causal_conv1d_matches_loop_oracle(rng):
    x = rng.standard_normal((9, 4))
    w = rng.standard_normal((4, 3))
    got = ad.causal_conv1d(Tensor(x), Tensor(w)).data
    np.testing.assert_allclose(got, causal_conv1d_oracle(x, w), atol=1e-12)


def test_causal_conv1d_first_position_sees_only_itself(rng):
    x = rng.standard_normal((5, 2))
    w = rng.standard_normal((2, 4))
    out = ad.causal_conv1d(Tensor(x), Tensor(w)).data
    np.testing.assert_allclose(out[0], x[0] * w[:, -1], atol=1e-12)


def test_selective_scan_matches_loop_oracle(rng):
    x = rng.standard_normal((6, 3))
    dt = rng.uniform(0.05, 0.5, size=(6, 3))
    a = -rng.uniform(0.1, 1.0, size=(3, 4))
    b = rng.standard_normal((6, 4))
    c = rng.standard_normal((6, 4))
    d = rng.standard_normal(3)
    got = ad.selective_scan(Tensor(x), Tensor(dt), Tensor(a), Tensor(b), Tensor(c), Tensor(d)).data
    want = selective_scan_oracle(x, dt, a, b, c, d)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_selective_scan_rejects_nonpositive_dt(rng):
    x = rng.standard_normal((3, 2))
    dt = np.full((3, 2), 0.1)
    dt[1, 0] = 0.0
    args = (Tensor(x), Tensor(dt), Tensor(-np.ones((2, 2))),
            Tensor(np.ones((3, 2))), Tensor(np.ones((3, 2))), Tensor(np.ones(2)))
    with pytest.raises(ContractError):
        ad.selective_scan(*args)


def test_softmax_is_stable_for_huge_logits():
    out = ad.softmax(Tensor([[1000.0, 0.0]])).data
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)


def test_softplus_spot_values():
    out = ad.softplus(Tensor([0.0, 30.0])).data
    assert out[0] == pytest.approx(math.log(2.0), abs=1e-15)
    assert out[1] == 30.0  # linear regime is exact


def test_layer_norm_standardizes():
    x = Tensor([[1.0, 3.0]])
    out = ad.layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12).data
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-5)


def test_silu_spot_values():
    out = ad.silu(Tensor([0.0, 100.0])).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(100.0, abs=1e-12)


def test_embedding_gathers_rows(rng):
    w = rng.standard_normal((5, 3))
    ids = np.array([3, 0, 3])
    out = ad.embedding(Tensor(w), ids).data
    np.testing.assert_array_equal(out, w[ids])


def test_select_columns_picks_per_row(rng):
    x = rng.standard_normal((3, 4))
    ids = np.array([1, 3, 0])
    out = ad.select_columns(Tensor(x), ids).data
    np.testing.assert_array_equal(out, x[np.arange(3), ids])


# ---------------------------------------------------------------------------
# Backward vs finite differences, one case per registered op
# ---------------------------------------------------------------------------


def case_matmul(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    w = rng.standard_normal((3, 2))
    return lambda: weighted(ad.matmul(a, b), w), [a, b]


def case_linear(rng):
    x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    wt = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    bias = Tensor(rng.standard_normal(3), requires_grad=True)
    w = rng.standard_normal((4, 3))
    return lambda: weighted(ad.linear(x, wt, bias), w), [x, wt, bias]


def case_transpose(rng):
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    w = rng.standard_normal((5, 3))
    return lambda: weighted(ad.transpose(x), w), [x]


def case_add(rng):
    a = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    w = rng.standard_normal((3, 3))
    return lambda: weighted(ad.add(a, b), w), [a, b]


def case_sub(rng):
    a = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal(1), requires_grad=True)  # scalar broadcast
    w = rng.standard_normal((2, 4))
    return lambda: weighted(ad.sub(a, b), w), [a, b]


def case_mul(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal(1), requires_grad=True)  # scalar broadcast
    w = rng.standard_normal((3, 4))
    return lambda: weighted(ad.mul(a, b), w), [a, b]


def case_neg(rng):
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    w = rng.standard_normal((2, 3))
    return lambda: weighted(ad.neg(a), w), [a]


def case_mul_scalar(rng):
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    w = rng.standard_normal((2, 3))
    return lambda: weighted(ad.mul_scalar(a, 0.37), w), [a]


def case_tanh(rng):
    a = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    w = rng.standard_normal((3, 3))
    return lambda: weighted(ad.tanh(a), w), [a]


def case_exp(rng):
    a = Tensor(rng.standard_normal((3, 3)) * 0.5, requires_grad=True)
    w = rng.standard_normal((3, 3))
    return lambda: weighted(ad.exp(a), w), [a]


def case_silu(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = rng.standard_normal((3, 4))
    return lambda: weighted(ad.silu(a), w), [a]


def case_softplus(rng):
    a = Tensor(rng.standard_normal((3, 4)) * 3.0, requires_grad=True)
    w = rng.standard_normal((3, 4))
    return lambda: weighted(ad.softplus(a), w), [a]


def case_softmax(rng):
    a = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    w = rng.standard_normal((3, 5))
    return lambda: weighted(ad.softmax(a), w), [a]


def case_log_softmax(rng):
    a = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    w = rng.standard_normal((3, 5))
    return lambda: weighted(ad.log_softmax(a), w), [a]


def case_layer_norm(rng):
    x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    gain = Tensor(rng.standard_normal(6), requires_grad=True)
    bias = Tensor(rng.standard_normal(6), requires_grad=True)
    w = rng.standard_normal((4, 6))
    return lambda: weighted(ad.layer_norm(x, gain, bias), w), [x, gain, bias]


def case_slice_rows(rng):
    x = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    w = rng.standard_normal((3, 3))
    return lambda: weighted(ad.slice_rows(x, 1, 4), w), [x]


def case_slice_cols(rng):
    x = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
    w = rng.standard_normal((3, 2))
    return lambda: weighted(ad.slice_cols(x, 2, 4), w), [x]


def case_concat_rows(rng):
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    w = rng.standard_normal((5, 3))
    return lambda: weighted(ad.concat_rows([a, b]), w), [a, b]


def case_concat_cols(rng):
    a = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = rng.standard_normal((3, 6))
    return lambda: weighted(ad.concat_cols([a, b]), w), [a, b]


def case_add_cols(rng):
    y = Tensor(rng.standard_normal((4, 8)), requires_grad=True)
    delta = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    w = rng.standard_normal((4, 8))
    return lambda: weighted(ad.add_cols(y, delta, 2), w), [y, delta]


def case_reverse_rows(rng):
    x = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    w = rng.standard_normal((5, 3))
    return lambda: weighted(ad.reverse_rows(x), w), [x]


def case_scale_rows(rng):
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    s = Tensor(rng.standard_normal((4, 1)), requires_grad=True)
    w = rng.standard_normal((4, 3))
    return lambda: weighted(ad.scale_rows(x, s), w), [x, s]


def case_embedding(rng):
    wt = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    ids = np.array([0, 2, 2, 4])  # repeats exercise scatter-add
    w = rng.standard_normal((4, 3))
    return lambda: weighted(ad.embedding(wt, ids), w), [wt]


def case_select_columns(rng):
    x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    ids = np.array([1, 0, 4, 4])
    w = rng.standard_normal(4)
    return lambda: weighted(ad.select_columns(x, ids), w), [x]


def case_causal_conv1d(rng):
    x = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
    wk = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = rng.standard_normal((6, 3))
    return lambda: weighted(ad.causal_conv1d(x, wk), w), [x, wk]


def case_selective_scan(rng):
    x = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
    dt = Tensor(rng.uniform(0.05, 0.5, size=(5, 3)), requires_grad=True)
    a = Tensor(-rng.uniform(0.1, 1.0, size=(3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    c = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    d = Tensor(rng.standard_normal(3), requires_grad=True)
    w = rng.standard_normal((5, 3))
    return lambda: weighted(ad.selective_scan(x, dt, a, b, c, d), w), [x, dt, a, b, c, d]


def case_sum_all(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    return lambda: ad.sum_all(ad.mul(x, x)), [x]


def case_mean_all(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    return lambda: ad.mean_all(ad.mul(x, x)), [x]


GRAD_CASES = {
    name[5:]: fn for name, fn in list(globals().items()) if name.startswith("case_")
}


def test_every_op_has_a_gradient_case():
    assert set(GRAD_CASES) == OPS


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("op", sorted(OPS))
def test_backward_matches_finite_differences(op, seed):
    f, params = GRAD_CASES[op](np.random.default_rng(seed))
    assert grad_check(f, params) < 1e-4


def test_analytic_grads_match_external_finite_differences(rng):
    # Same comparison, but with the independent oracle doing the differencing.
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = rng.standard_normal((3, 4))

    def f():
        return weighted(ad.silu(x), w)

    with Tape() as tape:
        out = f()
    tape.backward(out)
    (numeric,) = finite_difference(lambda: f().item(), [x.data])
    np.testing.assert_allclose(x.grad, numeric, atol=1e-7)


# ---------------------------------------------------------------------------
# grad_check validates itself on a known-analytic case
# ---------------------------------------------------------------------------


def test_grad_check_on_quadratic_is_tiny(rng):
    x = Tensor(rng.standard_normal(8), requires_grad=True)
    assert grad_check(lambda: ad.sum_all(ad.mul(x, x)), [x]) < 1e-9


def test_grad_check_rejects_nonscalar(rng):
    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    with pytest.raises(ContractError):
        grad_check(lambda: ad.mul(x, x), [x])


def test_grad_check_rejects_frozen_params(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=False)
    with pytest.raises(ContractError):
        grad_check(lambda: ad.sum_all(x), [x])


def test_grad_check_sampling_subsets_coordinates(rng):
    x = Tensor(rng.standard_normal(50), requires_grad=True)
    assert grad_check(lambda: ad.sum_all(ad.mul(x, x)), [x], sample=5) < 1e-9


# ---------------------------------------------------------------------------
# Tape semantics
# ---------------------------------------------------------------------------


def test_reused_input_accumulates_gradient(rng):
    a = Tensor(rng.standard_normal(5), requires_grad=True)
    with Tape() as tape:
        out = ad.sum_all(ad.mul(a, a))
    tape.backward(out)
    np.testing.assert_allclose(a.grad, 2 * a.data, atol=1e-12)


def test_backward_twice_raises():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = ad.sum_all(a)
    tape.backward(out)
    with pytest.raises(StateError):
        tape.backward(out)


def test_backward_requires_scalar():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = ad.mul(a, a)
    with pytest.raises(ContractError):
        tape.backward(out)


def test_grad_accumulates_across_tapes():
    a = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            out = ad.sum_all(a)
        tape.backward(out)
    np.testing.assert_array_equal(a.grad, [2.0, 2.0])
    a.zero_grad()
    assert a.grad is None


def test_no_tape_means_no_recording():
    a = Tensor([1.0], requires_grad=True)
    out = ad.mul(a, a)
    assert out._node is None
    with pytest.raises(StateError):
        out.backward()


def test_frozen_tensor_gets_no_grad():
    a = Tensor([1.0, 2.0], requires_grad=True)
    frozen = Tensor([3.0, 4.0], requires_grad=False)
    with Tape() as tape:
        out = ad.sum_all(ad.mul(a, frozen))
    tape.backward(out)
    assert frozen.grad is None
    np.testing.assert_array_equal(a.grad, frozen.data)


def test_cross_tape_output_is_a_leaf_downstream():
    a = Tensor([2.0], requires_grad=True)
    with Tape() as t1:
        mid = ad.mul(a, a)
    with Tape() as t2:
        out = ad.sum_all(ad.mul(mid, Tensor([3.0])))
    t2.backward(out)
    assert a.grad is None  # t2 does not reach through t1's graph
    np.testing.assert_array_equal(mid.grad, [3.0])


def test_backward_scales_linearly(rng):
    x = Tensor(rng.standard_normal(6), requires_grad=True)
    with Tape() as tape:
        out = ad.sum_all(ad.tanh(x))
    tape.backward(out)
    g1 = x.grad.copy()
    x.zero_grad()
    with Tape() as tape:
        out = ad.mul_scalar(ad.sum_all(ad.tanh(x)), 2.0)
    tape.backward(out)
    np.testing.assert_allclose(x.grad, 2 * g1, atol=1e-12)


# ---------------------------------------------------------------------------
# Error contracts
# ---------------------------------------------------------------------------


def test_nonfinite_output_raises():
    with pytest.raises(NumericError):
        ad.exp(Tensor([1000.0]))


@pytest.mark.parametrize(
    "build",
    [
        lambda: ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))),
        lambda: ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))),
        lambda: ad.slice_rows(Tensor(np.ones((2, 3))), 0, 5),
        lambda: ad.concat_rows([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))]),
        lambda: ad.scale_rows(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 1)))),
        lambda: ad.causal_conv1d(Tensor(np.ones((4, 2))), Tensor(np.ones((3, 2)))),
    ],
)
def test_shape_mismatches_raise(build):
    with pytest.raises(DimensionError):
        build()


def test_embedding_rejects_out_of_range_ids():
    with pytest.raises(ContractError):
        ad.embedding(Tensor(np.ones((3, 2))), np.array([0, 3]))


def test_item_requires_single_element():
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).item()


# ---------------------------------------------------------------------------
# Determinism and properties
# ---------------------------------------------------------------------------


def test_forward_and_backward_are_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        with Tape() as tape:
            out = ad.sum_all(ad.tanh(ad.matmul(x, w)))
        tape.backward(out)
        return out.data.copy(), x.grad.copy(), w.grad.copy()

    first, second = run(), run()
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 6))
def test_softmax_rows_sum_to_one(seed, n, d):
    x = np.random.default_rng(seed).standard_normal((n, d)) * 10
    out = ad.softmax(Tensor(x)).data
    np.testing.assert_allclose(out.sum(axis=1), np.ones(n), atol=1e-12)
    assert (out >= 0).all()


@settings(deadline=None, max_examples=25)
@given(st.integers(0, 2**32 - 1), st.integers(1, 7), st.integers(1, 4), st.integers(1, 5))
def test_selective_scan_equals_oracle_on_random_shapes(seed, length, channels, states):
    r = np.random.default_rng(seed)
    x = r.standard_normal((length, channels))
    dt = r.uniform(0.01, 1.0, size=(length, channels))
    a = -r.uniform(0.05, 2.0, size=(channels, states))
    b = r.standard_normal((length, states))
    c = r.standard_normal((length, states))
    d = r.standard_normal(channels)
    got = ad.selective_scan(Tensor(x), Tensor(dt), Tensor(a), Tensor(b), Tensor(c), Tensor(d)).data
    np.testing.assert_allclose(got, selective_scan_oracle(x, dt, a, b, c, d), atol=1e-10)
