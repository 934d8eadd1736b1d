import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geomattn import tensor as T
from geomattn.tensor import DimensionError, NonFiniteError, Tensor


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(np.eye(2), m).data, m)

    def test_selector_row(self):
        out = T.matmul([[1.0, 0.0]], [[2.5], [-7.0]])
        np.testing.assert_array_equal(out.data, [[2.5]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(T.matmul(a, b).data, naive_matmul(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_backward_rules(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        g = rng.normal(size=(3, 2))
        T.sum(T.mul(T.matmul(a, b), g)).backward()
        np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)


class TestSoftmaxRows:
    def test_symmetric(self):
        np.testing.assert_allclose(T.softmax_rows([[0.0, 0.0]]).data, [[0.5, 0.5]])

    def test_log3(self):
        out = T.softmax_rows([[0.0, math.log(3.0)]]).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)

    def test_large_values_shift(self):
        np.testing.assert_allclose(T.softmax_rows([[1000.0, 1000.0]]).data, [[0.5, 0.5]])

    def test_non_finite_input(self):
        with pytest.raises(NonFiniteError):
            T.softmax_rows([[np.nan, 0.0]])

    def test_rows_stochastic_random(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            n = int(rng.integers(1, 12))
            m = rng.uniform(-1e3, 1e3, size=(n, n)).astype(np.float32)
            y = T.softmax_rows(m).data
            assert (y >= 0).all()
            np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(
        arrays(np.float64, (4, 5), elements=st.floats(-50, 50)),
        arrays(np.float64, (4,), elements=st.floats(-50, 50)),
    )
    def test_shift_invariance(self, m, c):
        a = T.softmax_rows(m).data
        b = T.softmax_rows(m + c[:, None]).data
        np.testing.assert_allclose(a, b, atol=1e-6)


class TestLeakyRelu:
    @pytest.mark.parametrize("x,expected", [(2.0, 2.0), (-3.0, -0.03), (0.0, 0.0)])
    def test_values(self, x, expected):
        assert T.leaky_relu([x], 0.01).data[0] == pytest.approx(expected, abs=1e-15)

    def test_kink_uses_negative_slope(self):
        x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
        T.sum(T.leaky_relu(x, 0.1)).backward()
        np.testing.assert_allclose(x.grad, [0.1, 1.0, 0.1])

    def test_slope_range(self):
        with pytest.raises(ValueError):
            T.leaky_relu([1.0], 1.5)


class TestL2Normalize:
    def test_three_four(self):
        np.testing.assert_allclose(T.l2_normalize_rows([[3.0, 4.0]]).data, [[0.6, 0.8]])

    def test_unit_unchanged(self):
        v = np.array([[0.0, 1.0, 0.0]])
        np.testing.assert_array_equal(T.l2_normalize_rows(v).data, v)

    def test_zero_row(self):
        out = T.l2_normalize_rows(np.zeros((1, 3)), eps=1e-12).data
        np.testing.assert_array_equal(out, np.zeros((1, 3)))

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (6, 4), elements=st.floats(-1e3, 1e3)))
    def test_unit_norm(self, m):
        out = T.l2_normalize_rows(m).data
        norms = np.linalg.norm(m, axis=1)
        big = norms >= 1e-12
        np.testing.assert_allclose(np.linalg.norm(out[big], axis=1), 1.0, atol=1e-6)


class TestNeighborhoodMax:
    def test_single_slot_identity(self):
        v = np.arange(6.0).reshape(3, 1, 2)
        np.testing.assert_array_equal(T.neighborhood_max(v).data, v[:, 0, :])

    def test_ties_go_to_slot_zero(self):
        v = Tensor(np.full((2, 3, 2), 4.0), requires_grad=True)
        out = T.neighborhood_max(v)
        np.testing.assert_array_equal(out.data, np.full((2, 2), 4.0))
        T.sum(out).backward()
        assert (v.grad[:, 0, :] == 1).all() and (v.grad[:, 1:, :] == 0).all()

    def test_max_and_gradcheck(self):
        v = np.array([[[1.0, 1.0], [5.0, 5.0], [3.0, 3.0]]])
        assert (T.neighborhood_max(v).data == 5.0).all()
        err = T.gradcheck(lambda t: T.neighborhood_max(t), v)
        assert err < 1e-8

    def test_empty(self):
        with pytest.raises(DimensionError):
            T.neighborhood_max(np.zeros((2, 0, 3)))

    def test_graph_shape_checked(self):
        with pytest.raises(DimensionError):
            T.neighborhood_max(np.zeros((2, 3, 1)), np.zeros((2, 2), dtype=int))


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(5.0), requires_grad=True)
        T.sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones(5))

    def test_square_norm(self):
        x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        T.sum(T.square(x)).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_non_scalar_seed(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(DimensionError):
            T.backward(T.scale(x, 2.0))

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
        y = T.add(x, x)
        T.sum(T.mul(y, x)).backward()  # 2x^2
        np.testing.assert_allclose(x.grad, 4 * x.data)

    def test_no_grad(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with T.no_grad():
            y = T.matmul(x, x)
        assert not y.requires_grad


class TestGradcheck:
    def test_matmul_sum(self):
        rng = np.random.default_rng(3)
        b = rng.normal(size=(4, 3))
        assert T.gradcheck(lambda t: T.matmul(t, b), rng.normal(size=(2, 4))) < 1e-6

    def test_softmax_weighted_sum(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(3, 3))
        err = T.gradcheck(lambda t: T.mul(T.softmax_rows(t), w), rng.normal(size=(3, 3)))
        assert err < 1e-6

    def test_leaky_away_from_zero(self):
        x = np.array([0.7, -1.3, 2.2, -0.4])
        assert T.gradcheck(lambda t: T.leaky_relu(t, 0.01), x) < 1e-8

    def test_non_finite_raises(self):
        with pytest.raises(NonFiniteError):
            T.gradcheck(lambda t: T.scale(t, np.inf), np.ones(2))


def _primitive_cases(rng):
    w3 = rng.normal(size=(4, 3))
    w4 = rng.normal(size=(4, 4))
    w42 = rng.normal(size=(4, 2))
    w46 = rng.normal(size=(4, 6))
    w423 = rng.normal(size=(4, 2, 3))
    idx = np.array([[1, 2], [0, 3], [3, 1], [2, 0]])
    yield "add", lambda t: T.mul(T.add(t, t), w3), rng.normal(size=(4, 3))
    yield "sub", lambda t: T.mul(T.sub(t, T.scale(t, 0.3)), w3), rng.normal(size=(4, 3))
    yield "add_bias", lambda t: T.mul(T.add_bias(np.ones((4, 3)), t), w3), rng.normal(size=3)
    yield "l2_normalize", lambda t: T.mul(T.l2_normalize_rows(t), w3), rng.normal(size=(4, 3))
    yield "softmax", lambda t: T.mul(T.softmax_rows(t), w4), rng.normal(size=(4, 4))
    yield "gather", lambda t: T.mul(T.gather_rows(t, idx), w423), rng.normal(
        size=(4, 3)
    )
    yield "take_along", lambda t: T.mul(T.take_along_rows(t, idx), w42), (
        rng.normal(size=(4, 4))
    )
    yield "concat", lambda t: T.mul(T.concat([t, T.square(t)]), w46), (
        rng.normal(size=(4, 3))
    )
    yield "row_dot", lambda t: T.row_dot(t, T.square(t)), rng.normal(size=(4, 3))
    yield "pairwise", lambda t: T.mul(T.pairwise_distance(t), w4), rng.normal(size=(4, 3))
    yield "reduce_max", lambda t: T.mul(T.reduce_max_rows(t), w3[:1]), rng.normal(size=(4, 3))
    yield "broadcast", lambda t: T.mul(T.broadcast_rows(t, 4), w3), rng.normal(size=(1, 3))
    yield "scale_slots", lambda t: T.scale_slots(w423, t), rng.normal(
        size=(4, 2)
    )
    yield "mean", lambda t: T.mean(T.square(t)), rng.normal(size=(5,))
    yield "bce", lambda t: T.bce_with_logits(t, [0, 1, 1, 0, 1]), rng.normal(size=5) * 3


@pytest.mark.parametrize("case", list(_primitive_cases(np.random.default_rng(5))), ids=lambda c: c[0])
def test_every_primitive_passes_gradcheck(case):
    _, build, x = case
    assert T.gradcheck(build, x, h=1e-5) < 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(-1e3, 1e3)))
def test_primitives_finite_for_bounded_inputs(m):
    T.softmax_rows(T.pairwise_distance(m))
    T.l2_normalize_rows(m)
    T.leaky_relu(m)
    T.bce_with_logits(m[:, 0], np.ones(5))
