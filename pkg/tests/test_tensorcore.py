from decimal import Decimal, getcontext

import numpy as np
import pytest

from latentaug import tensorcore as tc
from latentaug.tensorcore import Tensor
from oracles import numeric_grad, rel_err


def _positive(shape):
    return lambda r: r.uniform(0.5, 2.0, size=shape)


def _normal(shape):
    return lambda r: r.standard_normal(shape)


# name -> (input makers, function of tensors returning a tensor)
OPS = {
    "add": ([_normal((3, 4)), _normal((3, 4))], lambda a, b: a + b),
    "broadcast_add": ([_normal((3, 4)), _normal((4,))], lambda a, b: a + b),
    "sub": ([_normal((3, 4)), _normal((1, 4))], lambda a, b: a - b),
    "mul": ([_normal((3, 4)), _normal((3, 4))], lambda a, b: a * b),
    "div": ([_normal((3, 4)), _positive((3, 4))], lambda a, b: a / b),
    "neg": ([_normal((5,))], lambda a: -a),
    "square": ([_normal((2, 3))], tc.square),
    "exp": ([_normal((2, 3))], tc.exp),
    "log": ([_positive((2, 3))], tc.log),
    "tanh": ([_normal((2, 3))], tc.tanh),
    "sigmoid": ([_normal((2, 3))], tc.sigmoid),
    "gelu": ([_normal((3, 5))], tc.gelu),
    "matmul": ([_normal((3, 4)), _normal((4, 2))], tc.matmul),
    "batched_matmul": ([_normal((2, 3, 4)), _normal((4, 5))], tc.matmul),
    "transpose": ([_normal((2, 3, 4))], lambda a: tc.transpose(a, (2, 0, 1))),
    "swapaxes": ([_normal((2, 3, 4))], lambda a: tc.swapaxes(a, 0, 2)),
    "reshape": ([_normal((2, 6))], lambda a: tc.reshape(a, (3, 4))),
    "slice": ([_normal((4, 5))], lambda a: a[1:3, ::2]),
    "fancy_index": ([_normal((4, 3))], lambda a: a[np.array([0, 2, 2])]),
    "concat": ([_normal((2, 3)), _normal((4, 3))], lambda a, b: tc.concat([a, b], axis=0)),
    "sum_axis": ([_normal((3, 4))], lambda a: tc.sum(a, axis=1)),
    "mean_keepdims": ([_normal((3, 4))], lambda a: tc.mean(a, axis=0, keepdims=True)),
    "softmax": ([_normal((3, 5))], lambda a: tc.softmax(a, axis=-1)),
    "log_softmax": ([_normal((3, 5))], lambda a: tc.log_softmax(a, axis=-1)),
    "layer_norm": ([_normal((4, 8)), _normal((8,)), _normal((8,))], tc.layer_norm),
    "l2_norm": ([_normal((3, 6))], lambda a: tc.l2_norm(a, axis=1)),
}


def _check_op(fn, makers, seed):
    r = np.random.default_rng(seed)
    arrays = [m(r) for m in makers]
    # a fixed random projection turns any output into a scalar with non-trivial upstream gradient
    w = None

    def scalar(*ts):
        nonlocal w
        out = fn(*ts)
        if w is None:
            w = np.random.default_rng(seed + 99).standard_normal(out.shape)
        return tc.sum(out * Tensor(w))

    leaves = [tc.parameter(a.copy()) for a in arrays]
    tc.backward(scalar(*leaves))
    worst = 0.0
    for leaf, a in zip(leaves, arrays):
        with tc.no_grad():
            num = numeric_grad(lambda: scalar(*[Tensor(x) for x in arrays]).item(), a, eps=1e-5)
        worst = max(worst, rel_err(leaf.grad, num))
    return worst


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradients_match_finite_differences(name):
    makers, fn = OPS[name]
    worst = max(_check_op(fn, makers, seed) for seed in range(20))
    assert worst <= 1e-4, f"{name}: relative error {worst:.2e}"


def test_matmul_examples():
    b = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(b)).data, b)
    out = Tensor([[1.0, 0], [0, 0]]) @ Tensor([[0.0, 0], [0, 1]])
    assert np.array_equal(out.data, np.zeros((2, 2)))


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(tc.DimensionError, match=r"\(3, 4\).*\(5, 2\)"):
        tc.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((5, 2))))


def test_matmul_backward_formula(rng):
    a, b = tc.parameter(rng.standard_normal((3, 4))), tc.parameter(rng.standard_normal((4, 2)))
    g = rng.standard_normal((3, 2))
    tc.backward(tc.sum((a @ b) * Tensor(g)))
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-14)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-14)


def test_softmax_examples():
    np.testing.assert_allclose(tc.softmax(Tensor([0.0, 0, 0])).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    np.testing.assert_allclose(tc.softmax(Tensor([1000.0, 0, 0])).data, [1, 0, 0], rtol=0, atol=1e-12)
    getcontext().prec = 50
    exps = [Decimal(v).exp() for v in (1, 2, 3)]
    ref = [float(e / sum(exps)) for e in exps]
    np.testing.assert_allclose(tc.softmax(Tensor([1.0, 2, 3])).data, ref, rtol=1e-15)


def test_softmax_rows_sum_to_one(rng):
    for _ in range(20):
        out = tc.softmax(Tensor(rng.standard_normal((6, 9)) * 10), axis=-1).data
        assert np.all(out > 0)
        assert np.max(np.abs(out.sum(axis=-1) - 1)) <= 1e-12


def test_layer_norm_examples(rng):
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    assert np.array_equal(tc.layer_norm(Tensor(np.full((1, 4), 7.0)), g, b).data, np.zeros((1, 4)))
    out = tc.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1, 1]], atol=1e-10)
    for _ in range(20):
        x = rng.standard_normal((5, 16)) * 3 + 2
        y = tc.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-12).data
        assert np.max(np.abs(y.mean(axis=1))) <= 1e-10
        assert np.max(np.abs(y.var(axis=1) - 1)) <= 1e-6


def test_backward_examples():
    x = tc.parameter(np.ones((2, 3)))
    tc.backward(tc.sum(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))
    s = tc.parameter(3.0)
    tc.backward(s * s)
    assert s.grad == 6.0


def test_backward_rejects_non_scalar_and_replay():
    x = tc.parameter(np.ones(3))
    with pytest.raises(tc.ContractError):
        tc.backward(x * 2.0)
    loss = tc.sum(x * x)
    tc.backward(loss)
    with pytest.raises(tc.TapeStateError):
        tc.backward(loss)


def test_shared_subexpression_accumulates(rng):
    x = tc.parameter(rng.standard_normal(4))
    y = x * 2.0
    tc.backward(tc.sum(y * y + y))
    np.testing.assert_allclose(x.grad, 8 * x.data + 2)


def test_no_grad_records_nothing():
    x = tc.parameter(np.ones((1, 3)))
    before = tc.tape_stats()["nodes"]
    with tc.no_grad():
        y = tc.tanh(x @ Tensor(np.ones((3, 2))))
    assert tc.tape_stats()["nodes"] == before
    assert not y.requires_grad


def test_deterministic_bitwise(rng):
    x = rng.standard_normal((8, 16))
    a = tc.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    b = tc.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert a.tobytes() == b.tobytes()


def test_float32_stays_float32():
    x = Tensor(np.ones((2, 3), dtype=np.float32))
    w = Tensor(np.ones((3, 2), dtype=np.float32))
    with tc.no_grad():
        out = tc.gelu(x @ w * 0.5 + 1.0)
    assert out.dtype == np.float32


def test_l2_norm_subgradient_at_zero():
    x = tc.parameter(np.zeros((1, 3)))
    tc.backward(tc.sum(tc.l2_norm(x, axis=1)))
    assert np.all(np.isfinite(x.grad))
