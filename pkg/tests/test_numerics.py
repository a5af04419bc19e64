import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from satgrad.numerics import (
    HistogramSpec,
    NonFiniteError,
    PrecisionMode,
    as_matrix,
    cross_entropy,
    is_saturated_loss,
    kurtosis,
    magnitude_histogram,
    matmul,
    relu,
    sigmoid,
    sign,
    softmax_stable,
    softmax_xent_grad,
    validate_finite,
)


def triple_loop(a, b):
    """Textbook product, accumulating in the operands' own scalar type."""
    scalar = a.dtype.type
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = scalar(0)
            for k in range(a.shape[1]):
                acc = scalar(acc + scalar(a[i, k] * b[k, j]))
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        m = np.arange(9, dtype=np.float64).reshape(3, 3) / 7
        assert np.array_equal(matmul(np.eye(3), m), m)

    def test_hand_example(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[1.0], [1.0]])
        assert matmul(a, b).tolist() == [[3.0], [7.0]]

    @pytest.mark.parametrize("dtype", [np.float64, np.float32])
    def test_matches_triple_loop_5x4x3(self, dtype):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((5, 4)).astype(dtype)
        b = rng.standard_normal((4, 3)).astype(dtype)
        assert np.array_equal(matmul(a, b), triple_loop(a, b))

    def test_bitwise_on_random_8x8(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            a = rng.standard_normal((8, 8)) * 10.0 ** rng.integers(-5, 5)
            b = rng.standard_normal((8, 8))
            assert matmul(a, b).tobytes() == triple_loop(a, b).tobytes()

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_precision_mismatch(self):
        with pytest.raises(TypeError):
            matmul(np.ones((2, 2)), np.ones((2, 2), dtype=np.float32))


class TestMatrixHelpers:
    def test_as_matrix_promotes_vector(self):
        assert as_matrix([1, 2, 3]).shape == (1, 3)

    def test_as_matrix_rejects_empty(self):
        with pytest.raises(ValueError):
            as_matrix(np.zeros((0, 3)))

    def test_as_matrix_precision(self):
        assert as_matrix([[1.0]], PrecisionMode.BINARY32).dtype == np.float32

    def test_validate_finite(self):
        validate_finite(np.ones((2, 2)))
        with pytest.raises(NonFiniteError):
            validate_finite(np.array([[1.0, np.nan]]))
        with pytest.raises(NonFiniteError):
            validate_finite(np.array([[np.inf]]))

    def test_precision_parse(self):
        assert PrecisionMode.parse("binary32") is PrecisionMode.BINARY32
        assert PrecisionMode.parse("64") is PrecisionMode.BINARY64
        with pytest.raises(ValueError):
            PrecisionMode.parse("binary16")


class TestSigmoid:
    @pytest.mark.parametrize("gain", [1e-6, 0.5, 1.0, 3.0, 1e4])
    def test_zero_is_half(self, gain):
        assert sigmoid(0.0, gain) == 0.5

    def test_gain_identity(self):
        assert sigmoid(3.0, 0.5) == sigmoid(1.5, 1.0)
        assert sigmoid(-8.0, 0.25) == sigmoid(-2.0, 1.0)

    def test_exact_saturation_threshold_binary64(self):
        # linear scan oracle: smallest grid point k * 0.001 giving exactly 1.0
        k = 36000
        while sigmoid(np.float64(k * 0.001)) != 1.0:
            k += 1
        assert k == 36737
        assert sigmoid(36.736) < 1.0

    def test_exact_saturation_threshold_binary32(self):
        assert sigmoid(np.float32(16.636)) == 1.0
        assert sigmoid(np.float32(16.635)) < 1.0

    def test_saturates_to_exact_zero(self):
        with np.errstate(all="raise"):
            assert sigmoid(-800.0) == 0.0
        assert sigmoid(-700.0) > 0.0

    def test_monotone(self):
        z = np.linspace(-50, 50, 2001)
        assert np.all(np.diff(sigmoid(z)) >= 0)

    def test_rejects_nonpositive_gain(self):
        with pytest.raises(ValueError):
            sigmoid(1.0, 0.0)

    def test_preserves_float32(self):
        assert sigmoid(np.ones(3, dtype=np.float32)).dtype == np.float32

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(-2**20, 2**20), st.integers(-12, 4))
    def test_gain_identity_property(self, zi, ge):
        # z = zi / 2**10 and gain = 2**ge make gain * z exact
        z = zi / 1024.0
        gain = 2.0 ** ge
        assert sigmoid(z, gain) == sigmoid(gain * z, 1.0)


class TestRelu:
    def test_examples(self):
        assert relu(-3.2) == 0.0
        assert relu(0.0) == 0.0
        assert relu(5.5) == 5.5

    def test_negative_zero_gives_positive_zero(self):
        assert math.copysign(1.0, float(relu(-0.0))) == 1.0


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax_stable(np.full(10, 3.3)), 0.1, rtol=0, atol=1e-15)

    def test_analytic(self):
        p = softmax_stable([0.0, math.log(2.0)])
        assert p == pytest.approx([1 / 3, 2 / 3], abs=1e-15)

    def test_no_overflow(self):
        with np.errstate(over="raise", invalid="raise"):
            p = softmax_stable(np.array([1000.0, 0.0]))
        assert p.tolist() == [1.0, 0.0]

    def test_empty(self):
        with pytest.raises(ValueError):
            softmax_stable([])

    def test_rowwise(self):
        p = softmax_stable(np.array([[0.0, 0.0], [1000.0, 0.0]]))
        assert p.tolist() == [[0.5, 0.5], [1.0, 0.0]]

    def test_sums_to_one_random(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            z = rng.standard_normal(10) * 10.0 ** rng.uniform(-2, 4)
            p = softmax_stable(z)
            assert np.all((p >= 0) & (p <= 1))
            assert abs(p.sum() - 1) <= 1e-12

    def test_sums_to_one_binary32(self):
        rng = np.random.default_rng(12)
        z = (rng.standard_normal((1000, 10)) * 1e4).astype(np.float32)
        p = softmax_stable(z)
        assert p.dtype == np.float32
        assert np.all(np.abs(p.sum(axis=1) - 1) <= 1e-5)


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy(np.full(10, 0.1), 4) == pytest.approx(math.log(10), abs=1e-12)

    def test_certain(self):
        assert cross_entropy(np.array([0.0, 1.0]), 1) == 0.0

    def test_zero_probability_is_flagged(self):
        loss = cross_entropy(np.array([1.0, 0.0]), 1)
        assert is_saturated_loss(loss)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(np.full(3, 1 / 3), 3)

    def test_fused_gradient_matches_finite_differences(self):
        logits = np.array([1.0, 2.0, 3.0])
        h = 1e-5

        def f(z):
            return cross_entropy(softmax_stable(z), 0)

        fd = np.array([(f(logits + h * e) - f(logits - h * e)) / (2 * h) for e in np.eye(3)])
        g = softmax_xent_grad(logits, 0)
        assert np.max(np.abs(g - fd) / np.abs(fd)) < 1e-6


class TestSign:
    def test_zeros(self):
        assert sign(0.0) == 0
        assert sign(-0.0) == 0
        assert math.copysign(1.0, float(sign(-0.0))) == 1.0

    def test_values(self):
        assert sign(1e-300) == 1
        assert sign(5e-324) == 1
        assert sign(-3.7) == -1

    def test_nan(self):
        with pytest.raises(ValueError):
            sign(float("nan"))

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(allow_nan=False), min_size=1, max_size=50))
    def test_zero_in_zero_out(self, xs):
        x = np.array(xs)
        s = sign(x)
        assert np.all(s[x == 0] == 0)
        assert np.all(np.abs(s[x != 0]) == 1)


class TestKurtosis:
    def test_rademacher(self):
        assert kurtosis([1, -1] * 50) == pytest.approx(1.0, abs=1e-15)

    def test_normal(self):
        x = np.random.default_rng(0).standard_normal(100_000)
        # moment oracle computed independently of the implementation
        d = x - x.mean()
        oracle = np.mean(d**4) / np.mean(d**2) ** 2
        assert kurtosis(x) == pytest.approx(oracle, rel=1e-12)
        assert abs(kurtosis(x) - 3.0) < 0.1

    def test_constant(self):
        with pytest.raises(ValueError):
            kurtosis([2.0] * 10)

    def test_too_few(self):
        with pytest.raises(ValueError):
            kurtosis([1.0, 2.0, 3.0])


class TestMagnitudeHistogram:
    def test_example(self):
        h = magnitude_histogram([0.0, -0.0, 1e-20])
        assert h.exact_zero_count == 2
        assert h.counts.sum() == 1
        (idx,) = np.flatnonzero(h.counts)
        lo, hi = h.edges[idx], h.edges[idx + 1]
        assert -21 <= lo and hi <= -19
        assert lo <= -20 < hi

    def test_all_zero(self):
        h = magnitude_histogram(np.zeros(17))
        assert h.exact_zero_count == 17
        assert h.counts.sum() == 0

    def test_subnormal_binned(self):
        h = magnitude_histogram([5e-324])
        assert h.counts[0] == 0 and h.counts.sum() == 1
        (idx,) = np.flatnonzero(h.counts)
        assert h.edges[idx] == -324.0

    def test_default_edges(self):
        spec = HistogramSpec()
        assert spec.edges[0] == -330 and spec.edges[-1] == 10
        assert len(spec.edges) == 341

    def test_edges_must_increase(self):
        with pytest.raises(ValueError):
            HistogramSpec((0.0, 0.0, 1.0))

    def test_rejects_nonfinite(self):
        with pytest.raises(NonFiniteError):
            magnitude_histogram([np.inf])

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False), max_size=100))
    def test_partition(self, xs):
        h = magnitude_histogram(xs)
        assert h.exact_zero_count + int(h.counts.sum()) == len(xs)
        assert h.exact_zero_count == sum(1 for x in xs if x == 0)
