import math

import numpy as np
import pytest

from capsem import tensor as T
from capsem.errors import DomainError, ShapeError


def test_contract_dot_product():
    out = T.contract(T.tensor([1.0, 2.0]), T.tensor([3.0, 4.0]), "i,i->")
    assert out.item() == 11.0


def test_contract_elementwise_product():
    out = T.contract(T.tensor([1.0, 2.0]), T.tensor([3.0, 4.0]), "i,i->i")
    np.testing.assert_array_equal(out.data, [3.0, 8.0])


def test_contract_matches_nested_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 2, 4))
    b = rng.normal(size=(3, 4, 5))
    out = T.contract(T.tensor(a), T.tensor(b), "icd,idh->ich")

    expected = np.zeros((3, 2, 5))
    for i in range(3):
        for c in range(2):
            for h in range(5):
                for d in range(4):
                    expected[i, c, h] += a[i, c, d] * b[i, d, h]
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_contract_equals_unsqueeze_multiply_sum():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(4, 3, 5))
    out = T.contract(T.tensor(a), T.tensor(b), "ij,ijk->jk")
    expected = (a[:, :, None] * b).sum(axis=0)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_contract_broadcasts_shared_kept_index():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(1, 3))
    b = rng.normal(size=(5, 3, 2))
    out = T.contract(T.tensor(a), T.tensor(b), "ij,ijk->ik")
    expected = np.einsum("ij,ijk->ik", np.broadcast_to(a, (5, 3)), b)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_contract_extent_mismatch_names_index():
    a = T.tensor(np.ones((2, 3)))
    b = T.tensor(np.ones((4, 5)))
    with pytest.raises(ShapeError, match="'i'"):
        T.contract(a, b, "ij,ik->jk")


def test_add_broadcasts():
    out = T.add(T.tensor([[1.0], [2.0]]), T.tensor([10.0, 20.0]))
    np.testing.assert_array_equal(out.data, [[11.0, 21.0], [12.0, 22.0]])


def test_add_rejects_incompatible_shapes():
    with pytest.raises(ShapeError):
        T.add(T.tensor(np.ones(3)), T.tensor(np.ones(4)))


def test_logistic_and_swish_at_zero():
    assert T.logistic(T.tensor(0.0)).item() == 0.5
    assert T.swish(T.tensor(0.0)).item() == 0.0


def test_softplus_saturates_without_overflow():
    assert T.softplus(T.tensor(1000.0)).item() == 1000.0
    assert T.softplus(T.tensor(-1000.0)).item() == 0.0


def test_div_by_zero_is_domain_error():
    with pytest.raises(DomainError):
        T.div(T.tensor(1.0), T.tensor(0.0))


def test_log_of_nonpositive_is_domain_error():
    with pytest.raises(DomainError):
        T.log(T.tensor([1.0, 0.0]))


def test_logsumexp_of_two_zeros():
    out = T.logsumexp(T.tensor([0.0, 0.0]))
    assert out.item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_logsumexp_large_inputs_stay_finite():
    out = T.logsumexp(T.tensor([1000.0, 1000.0]))
    assert np.isfinite(out.item())
    assert out.item() == pytest.approx(1000.0 + math.log(2.0), abs=1e-9)


def test_logsumexp_finite_for_finite_inputs():
    rng = np.random.default_rng(3)
    for scale in (1.0, 100.0, 700.0):
        x = rng.normal(scale=scale, size=(6, 7))
        out = T.logsumexp(T.tensor(x), axes=1)
        assert np.all(np.isfinite(out.data))


def test_reduce_sum_matches_loop_oracle():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 5))
    out = T.reduce_sum(T.tensor(x), axes=1)
    expected = np.zeros(4)
    for i in range(4):
        for j in range(5):
            expected[i] += x[i, j]
    np.testing.assert_allclose(out.data, expected, atol=1e-14)


def test_softmax_symmetry():
    out = T.softmax(T.tensor([0.0, 0.0]), axis=0)
    np.testing.assert_array_equal(out.data, [0.5, 0.5])


def test_softmax_shift_invariance():
    rng = np.random.default_rng(5)
    x = rng.normal(size=7)
    a = T.softmax(T.tensor(x), axis=0).data
    b = T.softmax(T.tensor(x + 123.4), axis=0).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_softmax_matches_direct_formula_oracle():
    x = np.array([1.0, 2.0, 3.0])
    out = T.softmax(T.tensor(x), axis=0).data
    expected = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(out, expected, atol=1e-12)
    assert out.sum() == pytest.approx(1.0, abs=1e-12)


def test_backward_square():
    tape = T.Tape()
    x = tape.leaf(3.0)
    y = T.square(x)
    grads = T.backward(tape, y)
    assert grads[x.node] == pytest.approx(6.0)


def test_backward_logistic():
    tape = T.Tape()
    x = tape.leaf(0.0)
    grads = T.backward(tape, T.logistic(x))
    assert grads[x.node] == pytest.approx(0.25)


def test_backward_fanout_accumulates():
    tape = T.Tape()
    x = tape.leaf(2.0)
    y = T.add(T.mul(x, x), x)  # d/dx (x^2 + x) = 2x + 1
    grads = T.backward(tape, y)
    assert grads[x.node] == pytest.approx(5.0)


def test_backward_requires_scalar_loss():
    tape = T.Tape()
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        T.backward(tape, T.square(x))


def test_backward_composite_matches_finite_differences():
    # mixes contract, elementwise, and reductions in one graph
    rng = np.random.default_rng(6)
    w = rng.normal(size=(3, 4))

    def f(wt):
        x = T.tensor(rng_x)
        h = T.contract(x, wt, "bi,ij->bj")
        h = T.swish(h)
        z = T.logsumexp(h, axes=1)
        return T.reduce_mean(T.square(z))

    rng_x = rng.normal(size=(5, 3))
    err = T.grad_check(f, w, step=1e-5)
    assert err <= 1e-5


def test_grad_check_sum_of_squares():
    err = T.grad_check(lambda x: T.reduce_sum(T.square(x)),
                       np.array([1.0, -2.0, 3.0]))
    assert err <= 1e-9


def test_grad_check_constant_function():
    err = T.grad_check(lambda x: T.tensor(7.0), np.array([1.0, 2.0]))
    assert err == 0.0


def test_grad_check_rejects_nonscalar():
    with pytest.raises(ValueError, match="scalar"):
        T.grad_check(lambda x: T.square(x), np.array([1.0, 2.0]))


def test_contract_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    b = rng.normal(size=(3, 4, 5))

    # gradient w.r.t. the first operand, including a broadcast axis
    for a_shape, spec in [((3, 4), "ij,ijk->ik"),
                          ((1, 4), "ij,ijk->ik"),
                          ((4, 2), "jd,ijk->di")]:
        a = rng.normal(size=a_shape)

        def f(at):
            out = T.contract(at, T.tensor(b), spec)
            return T.reduce_sum(T.mul(out, out))

        assert T.grad_check(f, a) <= 1e-6, spec

    # gradient w.r.t. the second operand
    a_fixed = rng.normal(size=(3, 4))

    def g(bt):
        out = T.contract(T.tensor(a_fixed), bt, "ij,ijk->k")
        return T.reduce_sum(T.square(out))

    assert T.grad_check(g, b) <= 1e-6


def test_contract_gradients_cover_one_sided_and_broadcast_indexes():
    rng = np.random.default_rng(17)
    cases = [
        # an index summed over on one operand only (absent elsewhere)
        ((3, 4), (4,), "ij,j->j"),
        ((3, 4), (4,), "ij,j->"),
        ((2, 3), (5,), "ij,k->ik"),
        # output-kept broadcast on the second operand
        ((4, 3, 2), (1, 2), "ijk,ik->ij"),
    ]
    for a_shape, b_shape, spec in cases:
        a = rng.normal(size=a_shape)
        b = rng.normal(size=b_shape)

        def fa(at):
            return T.reduce_sum(T.square(T.contract(at, T.tensor(b), spec)))

        def fb(bt):
            return T.reduce_sum(T.square(T.contract(T.tensor(a), bt, spec)))

        assert T.grad_check(fa, a) <= 1e-6, f"{spec} wrt A"
        assert T.grad_check(fb, b) <= 1e-6, f"{spec} wrt B"


def test_reduce_max_keepdims_gradient():
    def f(x):
        kept = T.reduce_max(x, axes=1, keepdims=True)
        return T.reduce_sum(T.square(T.sub(x, kept)))

    x = np.array([[1.0, 5.0, 2.0], [4.0, -1.0, 0.0]])
    assert T.grad_check(f, x) <= 1e-6


def test_reduce_max_gradient_splits_ties():
    tape = T.Tape()
    x = tape.leaf([1.0, 3.0, 3.0])
    grads = T.backward(tape, T.reduce_max(x))
    np.testing.assert_allclose(grads[x.node], [0.0, 0.5, 0.5])


def test_reshape_round_trip_gradient():
    def f(x):
        y = T.reshape(x, (3, 2))
        return T.reduce_sum(T.square(y))

    assert T.grad_check(f, np.arange(6.0)) <= 1e-8


def test_tape_replay_is_bit_identical():
    rng = np.random.default_rng(8)
    x0 = rng.normal(size=(4, 3))
    w0 = rng.normal(size=(3, 3))

    def run():
        tape = T.Tape()
        w = tape.leaf(w0)
        h = T.contract(T.tensor(x0), w, "bi,ij->bj")
        loss = T.reduce_mean(T.square(T.logistic(h)))
        grads = T.backward(tape, loss)
        return loss.item(), grads[w.node].copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(g1, g2)


def test_float32_mode_is_opt_in():
    T.set_default_dtype(np.float32)
    try:
        x = T.tensor([1.0, 2.0])
        assert x.dtype == np.float32
        y = T.add(x, 1.0)
        assert y.dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)
    assert T.tensor([1.0]).dtype == np.float64


def test_mixing_tapes_is_an_error():
    t1, t2 = T.Tape(), T.Tape()
    a = t1.leaf(1.0)
    b = t2.leaf(2.0)
    with pytest.raises(ValueError, match="tapes"):
        T.add(a, b)
