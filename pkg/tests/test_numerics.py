import math

import mpmath
import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from storyseq.errors import ConfigError, DegenerateBatchError, DimensionError, NonFiniteError
from storyseq.numerics import (Tape, Tensor, add, concat, cross_entropy, dropout, gradcheck,
                               make_rng, matmul, mul, reshape, sigmoid, softmax, stack, sum_all,
                               tanh)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for q in range(k):
                s += a[i, q] * b[q, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        out = matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        npt.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_selector_row(self):
        out = matmul(Tensor([[1, 0], [0, 0]]), Tensor([[5, 6], [7, 8]]))
        npt.assert_array_equal(out.data, [[5, 6], [0, 0]])

    def test_against_triple_loop(self, rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        npt.assert_allclose(matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b), rtol=0, atol=1e-12)

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_backward(self, rng):
        a, b = Tensor(rng.standard_normal((3, 4)), True), Tensor(rng.standard_normal((4, 2)), True)
        g = rng.standard_normal((3, 2))
        with Tape() as tape:
            loss = sum_all(mul(matmul(a, b), Tensor(g)))
        da, db = tape.gradient(loss, [a, b])
        npt.assert_allclose(da, g @ b.data.T, atol=1e-14)
        npt.assert_allclose(db, a.data.T @ g, atol=1e-14)

    @given(arrays(np.int64, (3, 3), elements=st.integers(-100, 100)))
    def test_identity_is_exact_for_integers(self, a):
        eye = Tensor(np.eye(3))
        npt.assert_array_equal(matmul(eye, Tensor(a)).data, a)
        npt.assert_array_equal(matmul(Tensor(a), eye).data, a)


class TestElementwise:
    def test_sigmoid_tanh_at_zero(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5
        assert tanh(Tensor(0.0)).item() == 0.0

    def test_sigmoid_gradient_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        with Tape() as tape:
            y = sum_all(sigmoid(x))
        (g,) = tape.gradient(y, [x])
        assert g[0] == 0.25
        h = 1e-5
        fd = (1 / (1 + math.exp(-h)) - 1 / (1 + math.exp(h))) / (2 * h)
        assert abs(g[0] - fd) < 1e-8

    def test_sigmoid_extremes_are_finite(self):
        out = sigmoid(Tensor([-1000.0, 1000.0])).data
        npt.assert_array_equal(out, [0.0, 1.0])

    def test_bias_broadcast_over_batch(self):
        x = Tensor(np.ones((3, 2)), requires_grad=True)
        b = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            loss = sum_all(add(x, b))
        gx, gb = tape.gradient(loss, [x, b])
        npt.assert_array_equal(gx, np.ones((3, 2)))
        npt.assert_array_equal(gb, [3.0, 3.0])

    def test_broadcast_incompatible(self):
        with pytest.raises(DimensionError):
            add(Tensor(np.ones((3, 2))), Tensor(np.ones(3)))
        with pytest.raises(DimensionError):
            mul(Tensor(np.ones((3, 2))), Tensor(np.ones((2, 3))))

    @pytest.mark.parametrize("fn", [sigmoid, tanh])
    def test_gradcheck_activations(self, fn, rng):
        x = Tensor(rng.standard_normal((2, 4)))
        assert gradcheck(lambda p: sum_all(mul(fn(p["x"]), p["x"])), {"x": x}) < 1e-6


class TestSoftmax:
    def test_uniform(self):
        npt.assert_allclose(softmax(Tensor([[1.0, 1.0, 1.0]])).data, [[1 / 3] * 3], rtol=0, atol=1e-15)

    def test_no_overflow(self):
        p = softmax(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(p))
        assert p[0, 0] == pytest.approx(1.0) and p[0, 1] == pytest.approx(0.0, abs=1e-300)

    def test_against_extended_precision(self, rng):
        row = rng.standard_normal(7) * 3
        mpmath.mp.dps = 40
        es = [mpmath.e ** mpmath.mpf(float(v)) for v in row]
        want = [float(e / mpmath.fsum(es)) for e in es]
        npt.assert_allclose(softmax(Tensor(row[None])).data[0], want, rtol=0, atol=1e-12)

    @given(arrays(np.float64, (3, 5), elements=st.floats(-700, 700)))
    def test_rows_sum_to_one(self, logits):
        p = softmax(Tensor(logits)).data
        assert np.all(p >= 0)
        npt.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-9)

    def test_gradcheck(self, rng):
        w = Tensor(rng.standard_normal((3, 4)))
        assert gradcheck(lambda p: sum_all(mul(softmax(p["w"]), Tensor(np.arange(12.0).reshape(3, 4)))),
                         {"w": w}) < 1e-6


class TestCrossEntropy:
    def test_perfect_prediction(self):
        assert cross_entropy(Tensor([[0.0, 1.0]]), [1], [1]).item() == 0.0

    def test_uniform_v4(self):
        loss = cross_entropy(Tensor(np.full((1, 4), 0.25)), [2], [1]).item()
        assert loss == pytest.approx(1.386294, abs=1e-6)
        assert loss == pytest.approx(math.log(4), abs=1e-15)

    def test_masked_row_ignored(self):
        probs = Tensor([[0.2, 0.8], [0.9, 0.1]])
        both = cross_entropy(probs, [1, 1], [1, 0]).item()
        single = cross_entropy(Tensor([[0.2, 0.8]]), [1], [1]).item()
        assert both == single

    def test_floor(self):
        assert cross_entropy(Tensor([[1.0, 0.0]]), [1], [1]).item() == pytest.approx(-math.log(1e-12))

    def test_all_zero_mask(self):
        with pytest.raises(DegenerateBatchError):
            cross_entropy(Tensor([[0.5, 0.5]]), [0], [0])

    def test_gradcheck_through_softmax(self, rng):
        logits = Tensor(rng.standard_normal((4, 5)))
        mask = [1, 1, 0, 1]
        assert gradcheck(lambda p: cross_entropy(softmax(p["l"]), [0, 3, 2, 4], mask), {"l": logits}) < 1e-6


class TestConcat:
    def test_values(self):
        npt.assert_array_equal(concat(Tensor([[1.0, 2.0]]), Tensor([[3.0]])).data, [[1, 2, 3]])

    def test_widths(self):
        assert concat(Tensor(np.zeros((2, 1024))), Tensor(np.zeros((2, 512)))).shape == (2, 1536)

    def test_backward_split(self):
        a, b = Tensor(np.zeros((3, 2)), True), Tensor(np.zeros((3, 1)), True)
        with Tape() as tape:
            loss = sum_all(concat(a, b))
        da, db = tape.gradient(loss, [a, b])
        npt.assert_array_equal(da, np.ones((3, 2)))
        npt.assert_array_equal(db, np.ones((3, 1)))

    def test_routes_to_exactly_one_source(self, rng):
        a, b = Tensor(rng.standard_normal((2, 3)), True), Tensor(rng.standard_normal((2, 2)), True)
        w = rng.standard_normal((2, 5))
        with Tape() as tape:
            loss = sum_all(mul(concat(a, b), Tensor(w)))
        da, db = tape.gradient(loss, [a, b])
        npt.assert_array_equal(da, w[:, :3])
        npt.assert_array_equal(db, w[:, 3:])

    def test_batch_mismatch(self):
        with pytest.raises(DimensionError):
            concat(Tensor(np.zeros((2, 1))), Tensor(np.zeros((3, 1))))


class TestDropout:
    def test_rate_zero_is_identity(self):
        x = Tensor(np.arange(6.0))
        assert dropout(x, 0.0, make_rng(0), training=True) is x

    def test_inference_is_identity(self):
        x = Tensor(np.arange(6.0))
        out = dropout(x, 0.5, make_rng(0), training=False)
        npt.assert_array_equal(out.data, x.data)

    def test_statistics(self):
        x = Tensor(np.ones(100_000))
        out = dropout(x, 0.5, make_rng(11), training=True).data
        assert abs((out != 0).mean() - 0.5) <= 0.01
        assert abs(out.mean() - 1.0) <= 0.02
        assert set(np.unique(out)) == {0.0, 2.0}

    @pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
    def test_bad_rate(self, rate):
        with pytest.raises(ConfigError):
            dropout(Tensor([1.0]), rate, make_rng(0), training=True)

    def test_seeded(self):
        x = Tensor(np.ones(50))
        a = dropout(x, 0.3, make_rng(5), True).data
        b = dropout(x, 0.3, make_rng(5), True).data
        npt.assert_array_equal(a, b)


class TestTapeAndGradcheck:
    def test_linear_exact(self, rng):
        x = rng.standard_normal((4, 1))
        w = Tensor(rng.standard_normal((1, 4)))
        # no truncation error for a linear map, so a wide step only shrinks roundoff
        err = gradcheck(lambda p: sum_all(matmul(p["w"], Tensor(x))), {"w": w}, eps=1e-2)
        assert err < 1e-10

    def test_unrelated_source_gets_zeros(self):
        a, b = Tensor([1.0], True), Tensor([2.0, 3.0], True)
        with Tape() as tape:
            loss = sum_all(mul(a, a))
        ga, gb = tape.gradient(loss, [a, b])
        npt.assert_array_equal(ga, [2.0])
        npt.assert_array_equal(gb, [0.0, 0.0])

    def test_fan_out_accumulates(self):
        a = Tensor([3.0], True)
        with Tape() as tape:
            loss = sum_all(add(mul(a, 2.0), mul(a, 5.0)))
        (g,) = tape.gradient(loss, [a])
        assert g[0] == 7.0

    def test_no_recording_outside_tape(self):
        a = Tensor([1.0], True)
        with Tape() as tape:
            pass
        sigmoid(a)
        assert len(tape) == 0

    def test_stack_and_reshape_backward(self, rng):
        xs = {f"x{i}": Tensor(rng.standard_normal((2, 3))) for i in range(3)}
        w = Tensor(rng.standard_normal((3, 2, 3)))

        def f(p):
            s = stack([p["x0"], p["x1"], p["x2"]], axis=0)
            return sum_all(mul(reshape(s, (3, 2, 3)), w))

        assert gradcheck(f, xs) < 1e-8

    def test_non_finite(self):
        assert not Tensor([np.nan]).is_finite()
        with pytest.raises(NonFiniteError):
            Tensor([np.inf]).check_finite()
        with pytest.raises(NonFiniteError):
            gradcheck(lambda p: sum_all(mul(p["x"], np.inf)), {"x": Tensor([1.0])})

    def test_sampling_is_seeded(self, rng):
        x = Tensor(rng.standard_normal((10, 10)))
        f = lambda p: sum_all(tanh(p["x"]))  # noqa: E731
        a = gradcheck(f, {"x": x}, samples=5, rng=make_rng(3))
        b = gradcheck(f, {"x": x}, samples=5, rng=make_rng(3))
        assert a == b


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 4), elements=finite))
def test_tensors_are_immutable(values):
    t = Tensor(values)
    with pytest.raises(ValueError):
        t.data[0, 0] = 1.0
