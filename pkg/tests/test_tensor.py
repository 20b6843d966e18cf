import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from markov_unlearn import tensor as T


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def check_op(op, *shapes, seed=0, positive=False, tol=1e-6):
    """Compare autodiff of sum(op(*inputs) * R) with central differences on every input."""
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    out_shape = op(*[T.Tensor(x) for x in xs]).shape
    r = rng.normal(size=out_shape)

    leaves = [T.Tensor(x.copy(), requires_grad=True) for x in xs]
    with T.Tape() as tape:
        loss = T.sum(T.mul(op(*leaves), r))
    T.backward(tape, loss)
    for k, x in enumerate(xs):
        def f(v, k=k):
            args = [T.Tensor(v if j == k else xs[j]) for j in range(len(xs))]
            return float((op(*args).data * r).sum())
        num = numeric_grad(f, x.copy())
        np.testing.assert_allclose(leaves[k].grad, num, rtol=tol, atol=tol)


@pytest.mark.parametrize("name,op,shapes", [
    ("add", T.add, [(3, 4), (4,)]),
    ("sub", T.sub, [(2, 3), (2, 1)]),
    ("mul", T.mul, [(3, 4), (3, 4)]),
    ("scale", lambda a: T.scale(a, -2.5), [(5,)]),
    ("sigmoid", T.sigmoid, [(4, 3)]),
    ("softplus", T.softplus, [(4, 3)]),
    ("gelu", T.gelu, [(4, 3)]),
    ("matmul2d", T.matmul, [(3, 4), (4, 2)]),
    ("matmul_batched", T.matmul, [(2, 3, 4), (2, 4, 5)]),
    ("matmul_weight", T.matmul, [(2, 3, 4), (4, 5)]),
    ("reshape", lambda a: T.reshape(a, (6, 2)), [(3, 4)]),
    ("transpose", lambda a: T.transpose(a, (2, 0, 1)), [(2, 3, 4)]),
    ("concat", lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    ("sum_axis", lambda a: T.sum(a, axis=1, keepdims=True), [(3, 4)]),
    ("mean", lambda a: T.mean(a, axis=0), [(3, 4)]),
    ("softmax", lambda a: T.softmax(a, axis=-1), [(3, 5)]),
    ("log_softmax", lambda a: T.log_softmax(a, axis=-1), [(3, 5)]),
    ("layer_norm", T.layer_norm, [(2, 3, 6), (6,), (6,)]),
    ("masked_softmax", lambda a: T.softmax(T.causal_masked_fill(a), axis=-1), [(2, 4, 4)]),
])
def test_op_gradients(name, op, shapes):
    check_op(op, *shapes)


def test_embedding_and_gather_gradients():
    rng = np.random.default_rng(1)
    table = rng.normal(size=(5, 3))
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    r = rng.normal(size=(2, 3, 3))
    leaf = T.Tensor(table.copy(), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(T.mul(T.embedding(leaf, ids), r))
    T.backward(tape, loss)
    num = numeric_grad(lambda v: float((v[ids] * r).sum()), table.copy())
    np.testing.assert_allclose(leaf.grad, num, atol=1e-7)

    x = rng.normal(size=(2, 3, 4))
    idx = np.array([[0, 3, 1], [2, 2, 0]])
    leaf = T.Tensor(x.copy(), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(T.gather(leaf, idx, axis=-1))
    T.backward(tape, loss)
    expected = np.zeros_like(x)
    np.put_along_axis(expected, idx[..., None], 1.0, axis=-1)
    np.testing.assert_array_equal(leaf.grad, expected)


def test_shared_subexpression_accumulates():
    x = T.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(x, x)
        loss = T.sum(T.add(y, T.scale(x, 3.0)))
    T.backward(tape, loss)
    np.testing.assert_allclose(x.grad, 2 * x.data + 3)


def test_backward_accumulates_across_calls():
    x = T.Tensor(np.array([2.0]), requires_grad=True)
    for _ in range(2):
        with T.Tape() as tape:
            loss = T.sum(T.scale(x, 4.0))
        T.backward(tape, loss)
    assert x.grad[0] == 8.0


def test_backward_rejects_non_scalar_and_foreign_loss():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.scale(x, 2.0)
    with pytest.raises(T.ShapeError):
        T.backward(tape, y)
    with T.Tape() as other:
        z = T.sum(T.scale(x, 2.0))
    with pytest.raises(ValueError):
        T.backward(tape, z)


def test_no_grad_records_nothing():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        with T.no_grad():
            T.sum(T.scale(x, 2.0))
    assert len(tape) == 0


def test_shape_mismatch_raises():
    with pytest.raises(T.ShapeError):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4,))))


def test_softplus_and_sigmoid_values():
    z = np.array([-1000.0, -1.0, 0.0, 1.0, 1000.0])
    sp = T.softplus(T.Tensor(z)).data
    np.testing.assert_allclose(sp[1:4], [math.log1p(math.exp(-1)), math.log(2), 1 + math.log1p(math.exp(-1))])
    assert sp[0] == 0.0 and sp[4] == 1000.0
    sg = T.sigmoid(T.Tensor(z)).data
    np.testing.assert_allclose(sg[1:4], [1 / (1 + math.e), 0.5, 1 / (1 + math.exp(-1))])
    assert sg[0] == 0.0 and sg[4] == 1.0


def test_softplus_gradient_in_saturated_regions():
    x = T.Tensor(np.array([-800.0, 800.0]), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(T.softplus(x))
    T.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 7), elements=finite), st.floats(-1e4, 1e4))
def test_log_softmax_shift_invariant_and_normalised(x, c):
    a = T.log_softmax(T.Tensor(x)).data
    b = T.log_softmax(T.Tensor(x + c)).data
    np.testing.assert_allclose(a, b, atol=1e-8)
    np.testing.assert_allclose(np.exp(a).sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (20,), elements=st.floats(-1e6, 1e6)))
def test_softplus_bounds(z):
    sp = T.softplus(T.Tensor(z)).data
    assert np.all(np.isfinite(sp))
    assert np.all(sp >= np.maximum(z, 0.0))
    assert np.all(sp <= np.maximum(z, 0.0) + math.log(2) + 1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 5, 5), elements=finite))
def test_causal_softmax_puts_no_mass_on_future(x):
    p = T.softmax(T.causal_masked_fill(T.Tensor(x)), axis=-1).data
    assert np.all(np.triu(p, k=1) == 0.0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_random_composite_gradients(seed):
    check_op(lambda a, b: T.log_softmax(T.gelu(T.matmul(a, b)), axis=-1), (3, 4), (4, 5), seed=seed, tol=1e-5)
