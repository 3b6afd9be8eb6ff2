import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rcdgcn import tensor as tn
from rcdgcn.tensor import Tensor

from conftest import assert_grads_match


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def T(x, grad=False):
    return Tensor(np.asarray(x, dtype=float), requires_grad=grad)


# ------------------------------------------------------------------ matmul


def test_matmul_identity_and_projector():
    m = [[1, 2], [3, 4]]
    np.testing.assert_array_equal(tn.matmul(T(np.eye(2)), T(m)).data, m)
    np.testing.assert_array_equal(tn.matmul(T([[1, 0], [0, 0]]), T([[5, 6], [7, 8]])).data, [[5, 6], [0, 0]])


def test_matmul_matches_triple_loop(rng):
    for _ in range(100):
        m, k, n = rng.integers(1, 7, 3)
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        assert np.max(np.abs(tn.matmul(T(a), T(b)).data - triple_loop(a, b))) <= 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(tn.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        tn.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_matmul_gradients(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ta, tb = T(a, True), T(b, True)
    y = tn.matmul(ta, tb)
    g = rng.normal(size=(3, 2))
    tn.backward(tn.tsum(tn.mul(y, T(g))))
    np.testing.assert_allclose(ta.grad, g @ b.T, atol=1e-12)
    np.testing.assert_allclose(tb.grad, a.T @ g, atol=1e-12)


def test_bmm_matches_per_slice_oracle(rng):
    a, b = rng.normal(size=(3, 2, 4, 5)), rng.normal(size=(3, 2, 5, 2))
    out = tn.bmm(T(a), T(b)).data
    for i in range(3):
        for j in range(2):
            np.testing.assert_allclose(out[i, j], triple_loop(a[i, j], b[i, j]), atol=1e-12)


# ------------------------------------------------------------- elementwise


def test_elementwise_zero_inputs():
    assert tn.elementwise("tanh", T(0.0)).item() == 0.0
    assert tn.elementwise("sigmoid", T(0.0)).item() == 0.5
    np.testing.assert_array_equal(tn.elementwise("mul", T([1, 2, 3]), T([0, 0, 0])).data, [0, 0, 0])


def test_tanh_gradient_at_point_seven():
    x = T([0.7], True)
    tn.backward(tn.tsum(tn.tanh(x)))
    fd = (np.tanh(0.7 + 1e-5) - np.tanh(0.7 - 1e-5)) / 2e-5
    assert abs(x.grad[0] - fd) / abs(fd) <= 1e-6


def test_sigmoid_large_inputs_stay_finite():
    y = tn.sigmoid(T([-800.0, 0.0, 800.0])).data
    np.testing.assert_allclose(y, [0.0, 0.5, 1.0])


def test_no_implicit_broadcasting():
    with pytest.raises(tn.DimensionError):
        tn.add(T(np.ones((2, 3))), T(np.ones(3)))
    with pytest.raises(tn.DimensionError):
        tn.mul(T(np.ones((2, 1))), T(np.ones((2, 3))))


def test_scalar_and_zero_d_operands_broadcast():
    x = T([1.0, 2.0], True)
    c = T(3.0, True)
    y = tn.add(tn.mul(x, c), 1.0)
    np.testing.assert_array_equal(y.data, [4.0, 7.0])
    tn.backward(tn.tsum(y))
    np.testing.assert_array_equal(x.grad, [3.0, 3.0])
    assert c.grad == pytest.approx(3.0)


def test_unknown_elementwise_op():
    with pytest.raises(ValueError):
        tn.elementwise("cosh", T(1.0))


def test_zero_sized_dimension_rejected():
    with pytest.raises(tn.DimensionError):
        Tensor(np.ones((0, 3)))


def test_non_finite_forward_raises():
    with pytest.raises(tn.NonFiniteError):
        tn.exp(T([1000.0]))


# ---------------------------------------------------- finite-difference checks

PRIMITIVES = {
    "add": (lambda a, b: tn.tsum(tn.square(tn.add(a, b))), 2),
    "sub": (lambda a, b: tn.tsum(tn.square(tn.sub(a, b))), 2),
    "mul": (lambda a, b: tn.tsum(tn.mul(a, b)), 2),
    "tanh": (lambda a: tn.tsum(tn.tanh(a)), 1),
    "sigmoid": (lambda a: tn.tsum(tn.sigmoid(a)), 1),
    "exp": (lambda a: tn.tsum(tn.exp(a)), 1),
    "square": (lambda a: tn.mean(tn.square(a)), 1),
    "relu": (lambda a: tn.tsum(tn.mul(tn.relu(a), a)), 1),
    "reshape": (lambda a: tn.tsum(tn.square(tn.reshape(a, (3, 4))[1:])), 1),
    "transpose": (lambda a: tn.tsum(tn.mul(tn.transpose(a, (1, 0)), tn.transpose(a, (1, 0)))), 1),
    "getitem": (lambda a: tn.tsum(tn.square(a[1:, ::2])), 1),
    "concat": (lambda a, b: tn.tsum(tn.square(tn.concat([a, b], axis=1))), 2),
    "shift": (lambda a: tn.tsum(tn.square(tn.shift(a, 2, axis=1))), 1),
    "linear": (lambda a, b: tn.tsum(tn.tanh(tn.linear(a, tn.transpose(b, (1, 0))))), 2),
    "outer_add": (lambda a, b: tn.tsum(tn.square(tn.outer_add(a, b))), 2),
    "tsum_axis": (lambda a: tn.tsum(tn.square(tn.tsum(a, axis=0))), 1),
    "mean_axis": (lambda a: tn.tsum(tn.square(tn.mean(a, axis=1, keepdims=True))), 1),
    "softmax": (lambda a: tn.tsum(tn.mul(tn.softmax_masked(a, np.eye(3, 4) + np.eye(3, 4, 1) > 0), a)), 1),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name, rng):
    fn, arity = PRIMITIVES[name]
    arrays = [rng.normal(size=(3, 4)) for _ in range(arity)]
    if name == "relu":  # keep clear of the kink
        arrays[0] = np.where(np.abs(arrays[0]) < 0.1, 0.5, arrays[0])
    assert_grads_match(fn, arrays)


def test_bmm_and_add_bias_gradients(rng):
    assert_grads_match(lambda a, b: tn.tsum(tn.tanh(tn.bmm(a, b))),
                       [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))])
    assert_grads_match(lambda x, b: tn.tsum(tn.square(tn.add_bias(x, tn.reshape(b, (4,))))),
                       [rng.normal(size=(2, 3, 4)), rng.normal(size=(1, 4))])


@given(hnp.arrays(np.float64, (2, 5), elements=st.floats(-3, 3)))
def test_tanh_sigmoid_gradient_property(x):
    assert_grads_match(lambda a: tn.tsum(tn.mul(tn.tanh(a), tn.sigmoid(a))), [x])


# -------------------------------------------------------------------- softmax


def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(tn.softmax_masked(T([0, 0, 0]), [True] * 3).data, [1 / 3] * 3, atol=1e-15)
    y = tn.softmax_masked(T([5.0, -1000.0]), [True, True]).data
    assert y[0] == pytest.approx(1.0) and y[1] < 1e-300 and np.isfinite(y).all()


def test_softmax_masked_entry_matches_hand_value():
    y = tn.softmax_masked(T([1.0, 2.0, 3.0]), [True, False, True]).data
    want = np.array([np.e, 0.0, np.e ** 3]) / (np.e + np.e ** 3)
    np.testing.assert_allclose(y, want, rtol=1e-14)
    assert y[1] == 0.0


def test_softmax_degenerate_mask():
    with pytest.raises(tn.DegenerateMaskError):
        tn.softmax_masked(T([1.0, 2.0]), [False, False])
    y = tn.softmax_masked(T([[1.0, 2.0], [3.0, 4.0]]), [[False, False], [True, True]], allow_empty_rows=True)
    np.testing.assert_array_equal(y.data[0], [0.0, 0.0])


@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-50, 50)),
       hnp.arrays(bool, (4, 6)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(scores, mask, c):
    mask[:, 0] = True
    y = tn.softmax_masked(T(scores), mask).data
    assert np.all(np.abs(y.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(y[~mask] == 0.0)
    y2 = tn.softmax_masked(T(scores + c), mask).data
    np.testing.assert_allclose(y2, y, atol=1e-12)


# ------------------------------------------------------------------ backward


def test_backward_linear_and_quadratic():
    w = T([1.0, 2.0, 3.0], True)
    tn.backward(tn.tsum(w))
    np.testing.assert_array_equal(w.grad, [1, 1, 1])
    w = T([1.0, 2.0, 3.0], True)
    tn.backward(tn.tsum(tn.mul(w, w)))
    np.testing.assert_array_equal(w.grad, [2, 4, 6])


def test_backward_needs_scalar_loss():
    with pytest.raises(tn.RankError):
        tn.backward(tn.tanh(T([1.0, 2.0], True)))


def test_backward_twice_is_an_error():
    w = T([1.0, 2.0], True)
    loss = tn.tsum(tn.square(w))
    tn.backward(loss)
    with pytest.raises(tn.GraphConsumedError):
        tn.backward(loss)


def test_empty_tape_is_an_error():
    with pytest.raises(RuntimeError):
        tn.backward(tn.tsum(T([1.0, 2.0])))


def test_diamond_graph_sums_path_gradients(rng):
    # w feeds two branches that meet again
    def build(w):
        a = tn.tanh(w)
        b = tn.mul(w, w)
        return tn.tsum(tn.mul(a, b))

    assert_grads_match(build, [rng.normal(size=5)])
    w = T([0.3], True)
    tn.backward(build(w))
    x = 0.3
    assert w.grad[0] == pytest.approx((1 - np.tanh(x) ** 2) * x * x + np.tanh(x) * 2 * x, rel=1e-13)


def test_tape_order_is_topological():
    w = T([1.0], True)
    a = tn.tanh(w)
    loss = tn.tsum(tn.mul(a, tn.exp(a)))
    tape = tn.ComputationTape(loss)
    pos = {id(n): k for k, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]
    assert tape.nodes[-1] is loss


def test_gradients_accumulate_until_zeroed():
    w = T([2.0], True)
    tn.backward(tn.tsum(tn.scale(w, 3.0)))
    tn.backward(tn.tsum(tn.scale(w, 3.0)))
    assert w.grad[0] == 6.0
    tn.zero_grads([w])
    assert w.grad is None


def test_no_grad_builds_no_graph_and_is_thread_local():
    w = T([1.0], True)
    seen = {}

    def worker():
        seen["other"] = tn.tanh(w).requires_grad

    with tn.no_grad():
        inside = tn.tanh(w)
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert not inside.requires_grad and inside._parents == ()
    assert seen["other"] is True
    assert tn.tanh(w).requires_grad


def test_independent_tapes_on_threads(rng):
    data = [rng.normal(size=(4, 4)) for _ in range(4)]
    results = [None] * 4

    def run(k):
        w = T(data[k], True)
        tn.backward(tn.tsum(tn.square(tn.tanh(w))))
        results[k] = w.grad

    threads = [threading.Thread(target=run, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k in range(4):
        th = np.tanh(data[k])
        np.testing.assert_allclose(results[k], 2 * th * (1 - th ** 2), atol=1e-14)


def test_getitem_rejects_fancy_indexing():
    with pytest.raises(TypeError):
        T([1.0, 2.0, 3.0])[[0, 2]]


def test_shift_semantics():
    x = T(np.arange(1.0, 6.0))
    np.testing.assert_array_equal(tn.shift(x, 2, 0).data, [0, 0, 1, 2, 3])
    np.testing.assert_array_equal(tn.shift(x, 9, 0).data, np.zeros(5))
    with pytest.raises(ValueError):
        tn.shift(x, -1, 0)
