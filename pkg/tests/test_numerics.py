import numpy as np
import pytest

from prunecd.numerics import (
    GELU_COEF,
    Matrix,
    Vector,
    causal_mask,
    gelu,
    gelu_array,
    layer_norm,
    log_softmax_array,
    matmul,
    softmax,
    softmax_array,
)


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop float64 oracle."""
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += float(a[i, k]) * float(b[k, j])
    return out


class TestMatmul:
    def test_identity(self):
        eye = Matrix(np.eye(2, dtype=np.float32))
        b = Matrix(np.array([[1, 2], [3, 4]], dtype=np.float32))
        np.testing.assert_array_equal(matmul(eye, b).data, b.data)

    def test_row_times_column(self):
        a = Matrix(np.array([[1.0, 2.0]]))
        b = Matrix(np.array([[3.0], [4.0]]))
        np.testing.assert_allclose(matmul(a, b).data, [[11.0]])

    def test_against_naive_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(5, 7)).astype(np.float32)
        b = rng.normal(size=(7, 3)).astype(np.float32)
        got = matmul(Matrix(a), Matrix(b)).data
        np.testing.assert_allclose(got, naive_matmul(a, b), atol=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            matmul(Matrix(np.zeros((2, 3))), Matrix(np.zeros((2, 3))))

    def test_associativity_against_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            dims = rng.integers(1, 9, size=4)
            a = rng.normal(size=(dims[0], dims[1])).astype(np.float32)
            b = rng.normal(size=(dims[1], dims[2])).astype(np.float32)
            c = rng.normal(size=(dims[2], dims[3])).astype(np.float32)
            left = matmul(matmul(Matrix(a), Matrix(b)), Matrix(c)).data
            right = matmul(Matrix(a), matmul(Matrix(b), Matrix(c))).data
            oracle = naive_matmul(naive_matmul(a, b), c)
            np.testing.assert_allclose(left, oracle, atol=1e-5)
            np.testing.assert_allclose(right, oracle, atol=1e-5)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        a = Matrix(rng.normal(size=(16, 16)).astype(np.float32))
        b = Matrix(rng.normal(size=(16, 16)).astype(np.float32))
        first = matmul(a, b).data
        second = matmul(a, b).data
        assert np.array_equal(first, second)


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax(Vector(np.array([0.0, 0.0]))).data, [0.5, 0.5])

    def test_max_subtraction_stability(self):
        out = softmax(Vector(np.array([1000.0, 1000.0]))).data
        np.testing.assert_allclose(out, [0.5, 0.5])
        assert np.isfinite(out).all()

    def test_against_high_precision_oracle(self):
        x = np.array([1.0, 2.0, 3.0])
        expected = np.exp(x.astype(np.float64))
        expected /= expected.sum()
        np.testing.assert_allclose(softmax(Vector(x)).data, expected, atol=1e-7)

    def test_empty_vector(self):
        with pytest.raises(ValueError, match="empty"):
            softmax(Vector(np.array([])))

    def test_probability_vector_property(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            v = rng.normal(scale=10, size=rng.integers(1, 40))
            out = softmax(Vector(v)).data
            assert (out >= 0).all()
            assert abs(out.sum() - 1.0) < 1e-6

    def test_shift_invariance(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            v = rng.normal(size=12)
            c = rng.normal(scale=50)
            a = softmax(Vector(v)).data
            b = softmax(Vector(v + c)).data
            np.testing.assert_allclose(a, b, atol=1e-6)

    def test_argmax_preserved(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            v = rng.normal(size=30)
            out = softmax(Vector(v)).data
            assert int(np.argmax(out)) == int(np.argmax(v))

    def test_deterministic(self):
        v = Vector(np.random.default_rng(6).normal(size=64))
        assert np.array_equal(softmax(v).data, softmax(v).data)


class TestLayerNorm:
    def test_constant_input_maps_to_zero(self):
        v = Vector(np.full(8, 3.25))
        out = layer_norm(v, Vector(np.ones(8)), Vector(np.zeros(8)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_unit_variance_case(self):
        out = layer_norm(
            Vector(np.array([1.0, -1.0])), Vector(np.ones(2)), Vector(np.zeros(2))
        )
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-2)

    def test_against_float64_oracle(self):
        rng = np.random.default_rng(7)
        v = rng.normal(size=33)
        gain = rng.normal(size=33)
        bias = rng.normal(size=33)
        eps = 1e-5
        expected = (v - v.mean()) / np.sqrt(v.var() + eps) * gain + bias
        got = layer_norm(Vector(v), Vector(gain), Vector(bias), eps).data
        np.testing.assert_allclose(got, expected, atol=1e-6)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            layer_norm(Vector(np.zeros(3)), Vector(np.zeros(2)), Vector(np.zeros(3)))


class TestGelu:
    def test_zero(self):
        assert gelu(Vector(np.array([0.0]))).data[0] == 0.0

    def test_large_positive_asymptote(self):
        out = gelu(Vector(np.array([12.0]))).data[0]
        np.testing.assert_allclose(out, 12.0, atol=1e-5)

    def test_reference_value_at_one(self):
        # float64 evaluation of the tanh form, frozen
        np.testing.assert_allclose(
            gelu(Vector(np.array([1.0]))).data[0], 0.8411919906082768, atol=1e-6
        )

    def test_coefficient_documented(self):
        assert abs(GELU_COEF - np.sqrt(2.0 / np.pi)) < 1e-12

    def test_deterministic(self):
        x = np.random.default_rng(8).normal(size=128)
        assert np.array_equal(gelu_array(x), gelu_array(x))


class TestCausalMask:
    def test_square(self):
        m = causal_mask(3, 3)
        assert m[0, 1] == -np.inf and m[0, 2] == -np.inf and m[1, 2] == -np.inf
        assert m[0, 0] == 0 and m[2, 0] == 0 and m[2, 2] == 0

    def test_with_past(self):
        m = causal_mask(1, 5)
        assert (m == 0).all()

    def test_rejects_more_queries_than_keys(self):
        with pytest.raises(ValueError):
            causal_mask(4, 2)


class TestArrayHelpers:
    def test_log_softmax_matches_log_of_softmax(self):
        rng = np.random.default_rng(9)
        x = rng.normal(scale=5, size=(4, 17))
        ls = log_softmax_array(x)
        np.testing.assert_allclose(np.exp(ls).sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(
            ls, np.log(softmax_array(x).astype(np.float64)), atol=1e-6
        )

    def test_vector_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            Vector(np.array([1.0, np.nan]))

    def test_matrix_rejects_wrong_rank(self):
        with pytest.raises(ValueError, match="2-D"):
            Matrix(np.zeros(4))
