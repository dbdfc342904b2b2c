import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from canguard import autodiff as ad
from canguard.autodiff import NumericalInstabilityError, Parameter, ShapeError, Tensor

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_matmul_identity():
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_relu_values():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_tanh_zero():
    assert np.all(ad.tanh(Tensor(np.zeros((3, 4)))).data == 0)


def test_linear_form_gradient():
    w = Parameter(np.array([1.0, 2.0]), "w")
    x = Tensor([3.0, 4.0])
    ad.backward(ad.sum(ad.mul(w, x)))
    np.testing.assert_array_equal(w.grad, [3, 4])


def test_quadratic_gradient():
    w = Parameter(np.array([1.0, -2.0]), "w")
    ad.backward(ad.sum(ad.square(w)))
    np.testing.assert_array_equal(w.grad, [2, -4])


def test_gradient_check_quadratic():
    assert ad.gradient_check(lambda x: ad.sum(ad.square(x)), np.array([1.0, 2.0, 3.0]), 1e-5) < 1e-6


def test_gradient_check_constant():
    err = ad.gradient_check(lambda x: ad.sum(ad.mul_const(x, np.zeros(3))), np.array([1.0, 2.0, 3.0]))
    assert err == 0.0


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)|\(4,\).*\(2, 3\)"):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_non_finite_raises():
    with pytest.raises(NumericalInstabilityError):
        ad.exp(Tensor([1000.0]))
    with pytest.raises(NumericalInstabilityError):
        Tensor([np.nan])


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        ad.backward(ad.relu(Tensor(np.ones(3), requires_grad=True)))


def test_leading_batch_broadcast_gradient():
    b = Parameter(np.zeros(3), "b")
    x = Tensor(np.ones((4, 5, 3)))
    ad.backward(ad.sum(ad.add(x, b)))
    np.testing.assert_array_equal(b.grad, [20, 20, 20])


def test_no_grad_builds_no_tape():
    w = Parameter(np.ones(2), "w")
    with ad.no_grad():
        out = ad.mul(w, w)
    assert not out.requires_grad


def test_leaf_gradients_accumulate():
    w = Parameter(np.array([1.0, 2.0]), "w")
    ad.backward(ad.sum(w))
    ad.backward(ad.sum(w))
    np.testing.assert_array_equal(w.grad, [2, 2])
    w.zero_grad()
    np.testing.assert_array_equal(w.grad, [0, 0])


def test_parameter_rejects_negative_l2():
    with pytest.raises(ValueError):
        Parameter(np.ones(2), "w", l2_coefficient=-1.0)


def test_forward_op_registry():
    out = ad.forward_op("relu", Tensor([-1.0, 3.0]))
    np.testing.assert_array_equal(out.data, [0, 3])
    with pytest.raises(ValueError):
        ad.forward_op("no-such-op", Tensor([1.0]))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=3, max_side=6), elements=finite))
def test_softmax_rows_normalised(x):
    p = ad.softmax(Tensor(x), axis=-1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_tape_replay_is_bit_identical(seed):
    def run():
        rng = np.random.default_rng(seed)
        w = Parameter(rng.normal(size=(4, 3)), "w")
        x = Tensor(rng.normal(size=(5, 4)))
        y = ad.softmax(ad.tanh(ad.matmul(x, w)))
        loss = ad.sum(ad.log(y))
        ad.backward(loss)
        return loss.data.copy(), w.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


# Every differentiable op against central differences, 100 seeded trials each.
def _op_cases():
    def weighted(shape, fn):
        def make(rng):
            W = rng.normal(size=shape)
            return (lambda x: ad.sum(ad.mul_const(fn(x), W))), rng.normal(size=(3, 4))
        return make

    def binary(fn):
        def make(rng):
            o = Tensor(rng.normal(size=(3, 4)))
            W = rng.normal(size=(3, 4))
            return (lambda x: ad.sum(ad.mul_const(fn(x, o), W))), rng.normal(size=(3, 4))
        return make

    def matmul_case(rng):
        w = Tensor(rng.normal(size=(4, 2)))
        return (lambda x: ad.sum(ad.square(ad.matmul(x, w)))), rng.normal(size=(3, 4))

    def matmul_rhs(rng):
        a = Tensor(rng.normal(size=(2, 3, 4)))
        return (lambda w: ad.sum(ad.square(ad.matmul(a, w)))), rng.normal(size=(4, 2))

    def log_case(rng):
        W = rng.normal(size=(3, 4))
        return (lambda x: ad.sum(ad.mul_const(ad.log(x), W))), rng.uniform(0.5, 2.0, size=(3, 4))

    def relu_case(rng):
        W = rng.normal(size=(3, 4))
        x = rng.normal(size=(3, 4))
        x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
        return (lambda t: ad.sum(ad.mul_const(ad.relu(t), W))), x

    return {
        "add": binary(ad.add), "sub": binary(ad.sub), "mul": binary(ad.mul),
        "scale": weighted((3, 4), lambda x: ad.scale(x, 1.7)),
        "one_minus": weighted((3, 4), ad.one_minus),
        "relu": relu_case, "tanh": weighted((3, 4), ad.tanh), "sigmoid": weighted((3, 4), ad.sigmoid),
        "exp": weighted((3, 4), ad.exp), "log": log_case, "square": weighted((3, 4), ad.square),
        "sum_axis": weighted((3,), lambda x: ad.sum(x, axis=1)),
        "mean": weighted((4,), lambda x: ad.mean(x, axis=0)),
        "softmax": weighted((3, 4), ad.softmax),
        "matmul": matmul_case, "matmul_rhs": matmul_rhs,
        "reshape": weighted((2, 6), lambda x: ad.reshape(x, (2, 6))),
        "concat": weighted((3, 8), lambda x: ad.concat([x, ad.tanh(x)], axis=-1)),
        "stack": weighted((3, 2, 4), lambda x: ad.stack([x, ad.square(x)], axis=1)),
        "take": weighted((3,), lambda x: ad.take(x, 2, axis=1)),
        "flip": weighted((3, 4), lambda x: ad.flip(x, axis=1)),
        "time_weighted_sum": weighted((3, 2), lambda x: ad.time_weighted_sum(
            ad.softmax(x), Tensor(np.arange(24.0).reshape(3, 4, 2) / 10))),
    }


@pytest.mark.parametrize("name", sorted(_op_cases()))
def test_op_gradients_100_trials(name):
    make = _op_cases()[name]
    worst = 0.0
    for trial in range(100):
        f, x = make(np.random.default_rng(trial))
        worst = max(worst, ad.gradient_check(f, x, 1e-5))
    assert worst < 1e-4, f"{name}: {worst}"


def test_weighted_nll_gradient():
    for trial in range(100):
        rng = np.random.default_rng(trial)
        targets = rng.integers(0, 4, size=5)
        w = rng.uniform(0.5, 3.0, size=5)
        err = ad.gradient_check(lambda x: ad.weighted_nll(ad.softmax(x), targets, w), rng.normal(size=(5, 4)))
        assert err < 1e-4
