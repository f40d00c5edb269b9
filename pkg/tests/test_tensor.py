import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from met import tensor as T
from met.tensor import Tensor
from oracles import central_diff, gelu_ref, layer_norm_ref, matmul_loops, rel_err, softmax_ref

finite = st.floats(-5, 5, allow_nan=False, width=64)


def leaf(x, name="x"):
    return Tensor(np.array(x, dtype=float), requires_grad=True, name=name)


# --- matmul ---------------------------------------------------------------

def test_matmul_identity():
    a = np.random.default_rng(0).standard_normal((4, 4))
    assert np.array_equal(T.matmul(Tensor(a), Tensor(np.eye(4))).data, a)


def test_matmul_hand_case():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    assert out.data.tolist() == [[3.0], [7.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b),
                               rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_matmul_loops_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (m, k)), rng.uniform(-1, 1, (k, n))
    assert rel_err(T.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b)) <= 1e-10


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_counts_macs():
    with T.count_macs() as c:
        T.matmul(Tensor(np.ones((6, 4))), Tensor(np.ones((4, 4))))
    assert c.total == 6 * 4 * 4


# --- layer norm -------------------------------------------------------------

def test_layer_norm_constant_row():
    out = T.layer_norm(Tensor(np.full((1, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.full(5, 0.7)))
    np.testing.assert_array_equal(out.data, np.full((1, 5), 0.7))


def test_layer_norm_fixed_point():
    x = np.array([[1.0, -1.0, 1.0, -1.0]])
    out = T.layer_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=1e-12)
    np.testing.assert_allclose(out.data, x, atol=1e-6)


def test_layer_norm_scalar_oracle():
    rng = np.random.default_rng(2)
    x, g, b = rng.standard_normal((3, 9)), rng.standard_normal(9), rng.standard_normal(9)
    out = T.layer_norm(Tensor(x), Tensor(g), Tensor(b))
    np.testing.assert_allclose(out.data, layer_norm_ref(x, g, b), rtol=0, atol=1e-12)


# --- softmax ------------------------------------------------------------------

def test_softmax_symmetric():
    assert T.softmax_rows(Tensor([[0.0, 0.0]])).data.tolist() == [[0.5, 0.5]]


def test_softmax_oracle():
    z = np.random.default_rng(3).standard_normal((4, 6))
    np.testing.assert_allclose(T.softmax_rows(Tensor(z)).data, softmax_ref(z), rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite),
       st.floats(-50, 50))
def test_softmax_rows_properties(z, c):
    p = T.softmax_rows(Tensor(z)).data
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(T.softmax_rows(Tensor(z + c)).data, p, atol=1e-12)


# --- gelu ---------------------------------------------------------------------

def test_gelu_points():
    assert T.gelu(Tensor(0.0)).item() == 0.0
    assert abs(T.gelu(Tensor(10.0)).item() - 10.0) < 1e-6
    assert abs(T.gelu(Tensor(1.0)).item() - 0.8413447460685429) < 1e-12


def test_gelu_erf_oracle():
    x = np.linspace(-4, 4, 33)
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, gelu_ref(x), rtol=0, atol=1e-13)


# --- backward -----------------------------------------------------------------

def test_grad_of_sum_is_ones():
    x = leaf(np.arange(5.0))
    g = T.backward(T.tsum(x))
    np.testing.assert_array_equal(g["x"], np.ones(5))


def test_grad_of_quadratic():
    v = np.array([1.0, -2.0, 0.5])
    x = leaf(v)
    g = T.backward(T.tsum(x * x))
    np.testing.assert_array_equal(g["x"], 2 * v)


def test_backward_rejects_non_scalar():
    with pytest.raises(T.RankError):
        T.backward(leaf(np.ones(3)) * 2.0)


def test_backward_fills_grad_buffers_with_matching_shape():
    x = leaf(np.ones((2, 3)))
    T.backward(T.tsum(x * x))
    assert x.grad.shape == x.shape


def test_shared_input_accumulates_once_per_use():
    x = leaf(np.array([3.0]))
    y = x * x + x * 2.0 + x
    g = T.backward(T.tsum(y))
    assert g["x"].tolist() == [2 * 3.0 + 3.0]


def _composite_loss(params, inputs):
    w1, w2, w3, g, b = params
    h = T.gelu(T.matmul(inputs, w1))
    h = T.layer_norm(h, g, b)
    h = T.softmax_rows(T.matmul(h, w2))
    h = T.matmul(T.exp(h * 0.5), w3)
    return T.tsum(T.sqrt(h * h + 1.0)) + T.cross_entropy(h, np.array([0, 1, 1, 0]))


def test_three_layer_composite_matches_finite_differences():
    rng = np.random.default_rng(4)
    shapes = [(5, 6), (6, 4), (4, 2), (6,), (6,)]
    names = ["w1", "w2", "w3", "g", "b"]
    params = [leaf(rng.standard_normal(s), n) for s, n in zip(shapes, names)]
    x = Tensor(rng.standard_normal((4, 5)))
    grads = T.backward(_composite_loss(params, x))
    for p in params:
        num = central_diff(lambda: _composite_loss(params, x).item(), p.data, 1e-4)
        assert rel_err(grads[p.name], num) <= 1e-4, p.name


OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "matmul": lambda a, b: T.matmul(a, T.transpose(b)),
    "concat": lambda a, b: T.concat([a, b * 2.0], axis=1),
    "stack": lambda a, b: T.stack([a, b], axis=0) * 1.5,
    "getitem": lambda a, b: T.getitem(a, (slice(None), np.array([0, 0, 2]))) * b[:, :3],
    "mean": lambda a, b: T.mean(a * b, axis=1),
    "reshape": lambda a, b: T.reshape(a, (-1,)) * T.reshape(b, (-1,)),
    "gelu": lambda a, b: T.gelu(a) * b,
    "exp": lambda a, b: T.exp(a * 0.3) + b,
    "sqrt": lambda a, b: T.sqrt(a * a + 0.5) * b,
    "softmax": lambda a, b: T.softmax_rows(a) * b,
    "layer_norm": lambda a, b: T.layer_norm(a, b[0], b[1]),
}


@pytest.mark.parametrize("op", sorted(OPS))
@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_every_op_matches_finite_differences(op, seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng.uniform(-1, 1, (3, 4)), "a")
    b = leaf(rng.uniform(-1, 1, (3, 4)), "b")
    weights = rng.standard_normal(OPS[op](a, b).shape)

    def loss():
        return T.tsum(OPS[op](a, b) * weights)

    grads = T.backward(loss())
    for t in (a, b):
        num = central_diff(lambda: loss().item(), t.data, 1e-4)
        assert rel_err(grads.get(t.name, np.zeros_like(num)), num) <= 1e-4, t.name


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_ops_stay_finite(x):
    t = Tensor(x)
    outs = [T.gelu(t), T.softmax_rows(t), T.layer_norm(t, Tensor(np.ones(4)), Tensor(np.zeros(4))),
            T.exp(t), T.cross_entropy(t, np.array([0, 1, 3]))]
    assert all(np.isfinite(o.data).all() for o in outs)


# --- detach -------------------------------------------------------------------

def test_detach_preserves_values():
    x = leaf(np.random.default_rng(5).standard_normal(4))
    assert np.array_equal(T.detach(x).data, x.data)


def test_detach_blocks_gradient():
    x = leaf(np.ones(3))
    assert T.backward(T.tsum(T.detach(x))) == {}


def test_detach_keeps_one_live_path():
    v = np.random.default_rng(6).standard_normal(4)
    x = leaf(v.copy())

    def loss():
        return T.tsum(x * T.detach(x))

    g = T.backward(loss())["x"]
    np.testing.assert_array_equal(g, v)
    # finite differences on the live path only: the detached copy is held fixed
    frozen = Tensor(v.copy())
    num = central_diff(lambda: T.tsum(x * frozen).item(), x.data)
    assert rel_err(g, num) <= 1e-8


def test_no_grad_records_nothing():
    x = leaf(np.ones(2))
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad


# --- cosine -------------------------------------------------------------------

def test_cosine_cases():
    u = np.array([1.0, 2.0, 3.0])
    assert abs(T.cosine_sim(u, u) - 1.0) < 1e-15
    assert T.cosine_sim([1.0, 0.0], [0.0, 5.0]) == 0.0
    a, b = np.random.default_rng(7).standard_normal((2, 16))
    ref = sum(a * b) / math.sqrt(sum(a * a)) / math.sqrt(sum(b * b))
    assert abs(T.cosine_sim(a, b) - ref) < 1e-12


def test_cosine_zero_vector_raises():
    with pytest.raises(T.DegenerateVectorError):
        T.cosine_sim([0.0, 0.0], [1.0, 0.0])


# --- parameters ---------------------------------------------------------------

def test_parameter_names_its_tensor():
    p = T.parameter("layer.w", np.zeros((2, 2)), trainable=False)
    assert p.tensor.name == "layer.w" and not p.tensor.requires_grad
    q = T.parameter("layer.v", np.zeros(3), trainable=True)
    assert q.tensor.requires_grad and q.size == 3


def test_frozen_parameter_gets_no_gradient():
    frozen = T.parameter("f", np.ones(3), trainable=False)
    live = T.parameter("l", np.ones(3), trainable=True)
    g = T.backward(T.tsum(frozen.tensor * live.tensor))
    assert set(g) == {"l"}
