import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import erf, log_softmax as sp_log_softmax, softmax as sp_softmax

from promptforge import tensor as T
from promptforge.tensor import Op, ShapeError

from conftest import numeric_grad

rng = np.random.default_rng(1234)
finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def check_grad(build, *arrays, tol=1e-6):
    """Backprop through sum(w * build(*leaves)) against central differences."""
    leaves = [T.variable(a.copy()) for a in arrays]
    out = build(*leaves)
    w = np.random.default_rng(7).standard_normal(out.shape)
    loss = T.sum_(T.mul(out, T.constant(w)))
    T.backward(loss)
    for leaf in leaves:
        def f():
            with T.no_grad():
                return float((build(*[T.constant(l.value) for l in leaves]).value * w).sum())
        num = numeric_grad(f, leaf.value)
        err = np.abs(leaf.grad - num) / np.maximum(1.0, np.maximum(np.abs(leaf.grad), np.abs(num)))
        assert err.max() < tol, (build, err.max())


# --- forward values ----------------------------------------------------

def test_matmul_example():
    out = T.constant([[1.0, 2], [3, 4]]) @ T.constant([[5.0, 6], [7, 8]])
    np.testing.assert_array_equal(out.value, [[19, 22], [43, 50]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((2, 3))))


def test_add_broadcast_and_mismatch():
    out = T.constant(np.ones((2, 3))) + T.constant(np.arange(3.0))
    np.testing.assert_array_equal(out.value, [[1, 2, 3], [1, 2, 3]])
    with pytest.raises(ShapeError):
        T.add(T.constant(np.ones((2, 3))), T.constant(np.ones(2)))


def test_softmax_uniform_and_large_logits():
    np.testing.assert_allclose(T.softmax(T.constant([0.0, 0.0])).value, [0.5, 0.5])
    p = T.softmax(T.constant([1000.0, 0.0])).value
    assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0)


def test_softmax_temperature_matches_scipy():
    z = rng.standard_normal(6)
    np.testing.assert_allclose(T.softmax(T.constant(z), temperature=0.3).value,
                               sp_softmax(z / 0.3), rtol=1e-13)


def test_softmax_mask_gives_exact_zero():
    p = T.softmax(T.constant([1.0, 2.0, 3.0]), mask=np.array([True, False, True])).value
    assert p[1] == 0.0
    np.testing.assert_allclose(p[[0, 2]], sp_softmax([1.0, 3.0]))


def test_log_softmax_matches_scipy():
    z = rng.standard_normal((3, 5)) * 10
    np.testing.assert_allclose(T.log_softmax(T.constant(z)).value, sp_log_softmax(z, axis=-1),
                               rtol=1e-12, atol=1e-12)


def test_gelu_is_exact_erf_form():
    x = np.linspace(-4, 4, 17)
    np.testing.assert_allclose(T.gelu(T.constant(x)).value, 0.5 * x * (1 + erf(x / np.sqrt(2))),
                               rtol=1e-15)


def test_layer_norm_oracle():
    x = rng.standard_normal((4, 6))
    g, b = rng.standard_normal(6), rng.standard_normal(6)
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * g + b
    np.testing.assert_allclose(T.layer_norm(T.constant(x), T.constant(g), T.constant(b)).value,
                               ref, rtol=1e-12)


def test_layer_norm_constant_row_is_finite():
    out = T.layer_norm(T.constant(np.full((1, 4), 3.0)), T.constant(np.ones(4)), T.constant(np.zeros(4)))
    np.testing.assert_array_equal(out.value, np.zeros((1, 4)))


def test_l2_normalize_zero_vector_rejected():
    with pytest.raises(ValueError):
        T.l2_normalize(T.constant(np.zeros(3)))


def test_embedding_gather_and_scatter_add():
    table = T.variable(np.arange(12.0).reshape(4, 3))
    out = T.embedding(table, np.array([2, 0, 2]))
    np.testing.assert_array_equal(out.value, table.value[[2, 0, 2]])
    T.backward(T.sum_(out))
    np.testing.assert_array_equal(table.grad, [[1, 1, 1], [0, 0, 0], [2, 2, 2], [0, 0, 0]])


def test_cross_entropy_value():
    logp = T.log_softmax(T.constant([0.0, 0.0, 0.0, 0.0]))
    assert T.cross_entropy_from_log_probs(logp, 2).item() == pytest.approx(np.log(4))


def test_attention_matches_numpy():
    q, k, v = (rng.standard_normal((2, 5, 4)) for _ in range(3))
    mask = np.array([True, True, True, False, False])
    s = q @ k.transpose(0, 2, 1) / 2.0
    s = np.where(mask, s, -np.inf)
    ref = sp_softmax(s, axis=-1) @ v
    out = T.attention(T.constant(q), T.constant(k), T.constant(v), mask=mask)
    np.testing.assert_allclose(out.value, ref, rtol=1e-12)


def test_empty_tensor_rejected():
    with pytest.raises(ShapeError):
        T.constant(np.zeros((0, 3)))


def test_non_finite_result_raises():
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        T.constant([1e200]) * T.constant([1e200])
    with pytest.raises(ValueError):
        T.log(T.constant([0.0]))


def test_forward_op_dispatch():
    a, b = T.constant([[1.0, 2.0]]), T.constant([[3.0], [4.0]])
    assert T.forward_op(Op.MATMUL, a, b).item() == 11.0
    assert T.forward_op("relu", T.constant([-1.0, 2.0])).value.tolist() == [0.0, 2.0]
    with pytest.raises(ValueError):
        T.forward_op("conv3d", a)


def test_backward_needs_scalar():
    with pytest.raises(ShapeError):
        T.backward(T.variable(np.ones(3)) * 2.0)


# --- gradients -----------------------------------------------------------

A = rng.standard_normal((3, 4))
B = rng.standard_normal((4, 5))
V = rng.standard_normal(4)

GRAD_CASES = {
    "matmul": (lambda a, b: a @ b, A, B),
    "matmul_vec": (lambda a, v: a @ v, A, V),
    "batched_matmul": (lambda a, b: a @ b, rng.standard_normal((2, 3, 4)), B),
    "add_broadcast": (lambda a, v: a + v, A, V),
    "mul": (lambda a, b: a * b, A, A + 1),
    "scale": (lambda a: T.scale(a, -2.5), A),
    "log": (lambda a: T.log(a), np.abs(A) + 0.5),
    "concat": (lambda a, b: T.concat([a, b], axis=0), A, rng.standard_normal((2, 4))),
    "slice": (lambda a: T.slice_axis(a, 1, 1, 3), A),
    "transpose": (lambda a: T.transpose(a), A),
    "reshape": (lambda a: T.reshape(a, (2, 6)), A),
    "broadcast_to": (lambda v: T.broadcast_to(v, (3, 4)), V),
    "sum_axis": (lambda a: T.sum_(a, axis=0), A),
    "mean": (lambda a: T.mean(a, axis=1, keepdims=True), A),
    "relu": (lambda a: T.relu(a), A + 0.05),
    "gelu": (lambda a: T.gelu(a), A),
    "softmax": (lambda a: T.softmax(a, axis=-1, temperature=0.7), A),
    "softmax_masked": (lambda a: T.softmax(a, mask=np.array([True, False, True, True])), A),
    "log_softmax": (lambda a: T.log_softmax(a, temperature=0.5), A),
    "layer_norm": (lambda a, g, b: T.layer_norm(a, g, b), A, V + 1, V),
    "l2_normalize": (lambda a: T.l2_normalize(a), A),
    "embedding": (lambda t: T.embedding(t, np.array([1, 1, 2])), A),
    "cross_entropy": (lambda v: T.cross_entropy_from_log_probs(T.log_softmax(v), 1), V),
    "attention": (lambda q, k, v: T.attention(q, k, v, mask=np.array([True, True, False])),
                  rng.standard_normal((3, 2)), rng.standard_normal((3, 2)), rng.standard_normal((3, 2))),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_op_gradient_matches_finite_differences(name):
    build, *inputs = GRAD_CASES[name]
    check_grad(build, *inputs)


def test_fan_out_accumulates():
    x = T.variable(np.array([1.5, -2.0]))
    y = x * x + x * 3.0
    T.backward(T.sum_(y))
    np.testing.assert_allclose(x.grad, 2 * x.value + 3)


def test_leaf_gradients_accumulate_across_backward_calls():
    x = T.variable(np.array([1.0, 2.0]))
    loss = T.sum_(x * x)
    T.backward(loss)
    T.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * 2 * x.value)


def test_no_grad_builds_no_graph():
    x = T.variable(np.ones(2))
    with T.no_grad():
        y = T.sum_(x * 2.0)
    assert not y.requires_grad
    T.backward(y)
    assert x.grad is None


def test_forward_backward_deterministic():
    def run():
        x = T.variable(A.copy())
        loss = T.sum_(T.softmax(T.gelu(x @ B), axis=-1) * T.constant(B[0]))
        T.backward(loss)
        return loss.value.tobytes(), x.grad.tobytes()
    assert run() == run()


# --- properties ----------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite),
       st.floats(0.05, 5.0))
def test_softmax_rows_sum_to_one(z, temp):
    p = T.softmax(T.constant(z * 20), axis=-1, temperature=temp).value
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_l2_normalize_unit_norm(z):
    if np.any(np.linalg.norm(z, axis=-1) < 1e-6):
        return
    y = T.l2_normalize(T.constant(z)).value
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=finite), st.floats(-3, 3))
def test_softmax_shift_invariant(z, c):
    np.testing.assert_allclose(T.softmax(T.constant(z)).value, T.softmax(T.constant(z + c)).value,
                               atol=1e-12)
