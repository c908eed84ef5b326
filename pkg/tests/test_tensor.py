import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esrt.errors import ShapeError, TapeError
from esrt.tensor import (
    GradTape,
    Tensor,
    abs_,
    add,
    backward,
    concat,
    elementwise,
    gelu,
    layer_norm,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    sub,
    sum_,
    take,
    transpose,
)

from conftest import leaf, op_grad_error


def test_elementwise_examples():
    a = Tensor([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(sub(a, a).data, [0, 0, 0])
    np.testing.assert_array_equal(mul(Tensor([2.0, 3.0]), 0.0).data, [0, 0])
    np.testing.assert_array_equal(add(Tensor([1.0, 2.0]), Tensor([3.0, 5.0])).data, [4, 7])
    np.testing.assert_array_equal(elementwise("scale", Tensor([1.0, -2.0]), 3).data, [3, -6])


def test_per_channel_and_scalar_broadcast():
    x = Tensor(np.ones((2, 3, 4, 4)))
    gate = Tensor(np.arange(3.0).reshape(1, 3, 1, 1))
    out = mul(x, gate)
    assert out.shape == (2, 3, 4, 4)
    np.testing.assert_array_equal(out.data[1, 2], 2.0)
    assert mul(x, Tensor(2.0)).shape == x.shape


@pytest.mark.parametrize("other", [(3, 4, 4), (2, 3, 4, 1), (1, 1, 4, 4), (2, 2, 1, 1)])
def test_general_broadcast_rejected(other):
    with pytest.raises(ShapeError):
        add(Tensor(np.ones((2, 3, 4, 4))), Tensor(np.ones(other)))


def test_matmul_examples():
    x = Tensor(np.random.default_rng(0).standard_normal((1, 1, 3, 3)))
    eye = Tensor(np.eye(3).reshape(1, 1, 3, 3))
    np.testing.assert_allclose(matmul(eye, x).data, x.data)
    out = matmul(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), Tensor([[[[1.0], [1.0]]]]))
    np.testing.assert_array_equal(out.data.reshape(-1), [3, 7])
    assert not matmul(Tensor(np.zeros((1, 1, 2, 3))), x).data.any()


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((1, 2, 3, 4))), Tensor(np.ones((1, 2, 5, 2))))
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((1, 2, 3, 4))), Tensor(np.ones((2, 2, 4, 2))))


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)
    np.testing.assert_allclose(softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-7)
    x = np.random.default_rng(3).standard_normal((4, 7))
    np.testing.assert_allclose(softmax(Tensor(x)).data, softmax(Tensor(x + 123.0)).data, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30))
def test_softmax_rows_sum_to_one(values):
    y = softmax(Tensor(np.array(values)), axis=-1).data
    assert abs(y.sum() - 1.0) < 1e-6
    assert np.all(y > 0) and np.all(y <= 1)


def test_layer_norm_examples():
    ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_allclose(layer_norm(Tensor([1.0, 3.0]), ones, zeros).data, [-1, 1], atol=1e-5)
    np.testing.assert_array_equal(layer_norm(Tensor([5.0, 5.0]), ones, zeros).data, [0, 0])
    beta = Tensor([0.3, -0.7])
    np.testing.assert_allclose(layer_norm(Tensor([1.0, 9.0]), zeros, beta).data, beta.data)


def test_layer_norm_moments(rng):
    c = 24
    x = Tensor(rng.standard_normal((5, 7, c)) * 3 + 2, dtype=np.float64)
    y = layer_norm(x, Tensor(np.ones(c)), Tensor(np.zeros(c))).data
    assert np.abs(y.mean(axis=-1)).max() < 1e-5
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-5)


def test_backward_examples():
    x = Tensor([1.0, 2.0], requires_grad=True, name="x")
    with GradTape() as tape:
        y = sum_(x)
    np.testing.assert_array_equal(backward(y, tape)["x"].data, [1, 1])
    with GradTape() as tape:
        y = sum_(mul(x, x))
    np.testing.assert_array_equal(backward(y, tape)["x"].data, [2, 4])


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True, name="x")
    with GradTape() as tape:
        y = mul(x, x)
    with pytest.raises(ShapeError):
        backward(y, tape)
    other = sum_(x)  # recorded on no tape
    with pytest.raises(TapeError):
        backward(other, tape)


def test_unreached_leaf_gets_zeros():
    x = Tensor([1.0, 2.0], requires_grad=True, name="x")
    z = Tensor([5.0], requires_grad=True, name="z")
    with GradTape() as tape:
        y = sum_(x)
        sum_(z)
    g = backward(y, tape)
    np.testing.assert_array_equal(g["z"].data, [0])


def test_gradient_linearity(rng):
    x = leaf(rng, (3, 4), "x")
    w1, w2 = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 4)))

    def grad_of(fn):
        with GradTape() as tape:
            out = fn()
        return backward(out, tape)["x"].data

    g1 = grad_of(lambda: sum_(mul(gelu(x), w1)))
    g2 = grad_of(lambda: sum_(mul(gelu(x), w2)))
    g12 = grad_of(lambda: add(sum_(mul(gelu(x), w1)), sum_(mul(gelu(x), w2))))
    np.testing.assert_allclose(g12, g1 + g2, rtol=1e-12)


def test_tape_replay_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = leaf(rng, (2, 8, 6), "x")
        w = leaf(rng, (2, 6, 5), "w")
        with GradTape() as tape:
            y = sum_(softmax(matmul(x, w), axis=-1))
        g = backward(y, tape)
        return g["x"].data, g["w"].data

    a, b = run(), run()
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


def test_no_tape_means_no_recording():
    x = Tensor([1.0], requires_grad=True)
    y = mul(x, x)
    assert not y.requires_grad


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_debug_mode_catches_nonfinite(monkeypatch):
    import esrt.tensor as T

    monkeypatch.setattr(T, "_DEBUG", True)
    with pytest.raises(FloatingPointError):
        scale(Tensor([1e300]), 1e300)


# Finite-difference checks for every differentiable op, 20 seeds each.
SEEDS = range(20)


def _ln(rng):
    c = 6
    return (lambda x, g, b: layer_norm(x, g, b),
            [leaf(rng, (3, c), "x"), leaf(rng, (c,), "g"), leaf(rng, (c,), "b")])


OP_CASES = {
    "add": lambda r: (add, [leaf(r, (2, 3, 2, 2), "a"), leaf(r, (2, 3, 2, 2), "b")]),
    "add_channel": lambda r: (add, [leaf(r, (2, 3, 2, 2), "a"), leaf(r, (1, 3, 1, 1), "b")]),
    "sub": lambda r: (sub, [leaf(r, (4, 3), "a"), leaf(r, (4, 3), "b")]),
    "mul": lambda r: (mul, [leaf(r, (4, 3), "a"), leaf(r, (4, 3), "b")]),
    "mul_scalar_tensor": lambda r: (mul, [leaf(r, (2, 3, 2), "a"), leaf(r, (), "b")]),
    "mul_channel": lambda r: (mul, [leaf(r, (2, 3, 2, 2), "a"), leaf(r, (2, 3, 1, 1), "b")]),
    "scale": lambda r: (lambda a: scale(a, -1.7), [leaf(r, (5,), "a")]),
    "abs": lambda r: (abs_, [leaf(r, (6,), "a")]),
    "relu": lambda r: (relu, [leaf(r, (6, 2), "a")]),
    "sigmoid": lambda r: (sigmoid, [leaf(r, (6, 2), "a")]),
    "gelu": lambda r: (gelu, [leaf(r, (6, 2), "a")]),
    "mean": lambda r: (lambda a: mean(a, axis=(2, 3), keepdims=True), [leaf(r, (2, 3, 2, 2), "a")]),
    "sum": lambda r: (sum_, [leaf(r, (3, 2), "a")]),
    "matmul": lambda r: (matmul, [leaf(r, (2, 2, 3, 4), "a"), leaf(r, (2, 2, 4, 2), "b")]),
    "softmax": lambda r: (lambda a: softmax(a, axis=-1), [leaf(r, (3, 5), "a")]),
    "layer_norm": _ln,
    "reshape_transpose": lambda r: (lambda a: transpose(reshape(a, (3, 2, 2)), (2, 0, 1)),
                                    [leaf(r, (6, 2), "a")]),
    "concat": lambda r: (lambda a, b: concat([a, b], axis=1), [leaf(r, (2, 3), "a"), leaf(r, (2, 1), "b")]),
    "slice": lambda r: (lambda a: a[:, 1:3], [leaf(r, (2, 4), "a")]),
    "take": lambda r: (lambda a: take(a, [0, 2, 2, 1], axis=1), [leaf(r, (2, 3), "a")]),
}


@pytest.mark.parametrize("op", sorted(OP_CASES))
@pytest.mark.parametrize("seed", SEEDS)
def test_op_gradients(op, seed):
    fn, leaves = OP_CASES[op](np.random.default_rng(seed))
    assert op_grad_error(fn, leaves, seed) < 1e-4
