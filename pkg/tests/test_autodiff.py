import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from emoloc import autodiff as ad
from emoloc.autodiff import Tape, Tensor, backward, finite_diff_check
from emoloc.errors import ConfigError, ContractError, DimensionError, PreconditionError


def rand(rng, *shape):
    return rng.uniform(-1, 1, size=shape)


# ---------------------------------------------------------------- oracles


def affine_oracle(x, W, b):
    a, k = x.shape
    c = W.shape[0]
    out = np.zeros((a, c))
    for i in range(a):
        for j in range(c):
            s = b[j]
            for t in range(k):
                s += x[i, t] * W[j, t]
            out[i, j] = s
    return out


def conv_oracle(x, K, b):
    """Explicit sliding window with zero padding (k - 1) / 2 and stride 2."""
    T, d_in = x.shape
    d_out, k, _ = K.shape
    pad = (k - 1) // 2
    out = np.zeros((T // 2, d_out))
    for t in range(T // 2):
        for o in range(d_out):
            s = b[o]
            for j in range(k):
                src = 2 * t + j - pad
                if 0 <= src < T:
                    for c in range(d_in):
                        s += x[src, c] * K[o, j, c]
            out[t, o] = s
    return out


def softmax_oracle(x):
    out = np.zeros_like(x)
    for i, row in enumerate(x):
        e = [np.exp(v - max(row)) for v in row]
        out[i] = [v / sum(e) for v in e]
    return out


# ---------------------------------------------------------------- affine


def test_affine_zero_weight():
    out = ad.affine(np.array([[1.0, 2.0]]), np.zeros((1, 2)), np.array([3.0]))
    np.testing.assert_array_equal(out.value, [[3.0]])


def test_affine_identity():
    out = ad.affine(np.eye(2), np.eye(2), np.zeros(2))
    np.testing.assert_array_equal(out.value, np.eye(2))


def test_affine_matches_triple_loop():
    rng = np.random.default_rng(0)
    x, W, b = rand(rng, 3, 4), rand(rng, 5, 4), rand(rng, 5)
    np.testing.assert_allclose(ad.affine(x, W, b).value, affine_oracle(x, W, b), rtol=0, atol=1e-12)


def test_affine_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(5, 3\)"):
        ad.affine(np.zeros((3, 4)), np.zeros((5, 3)), np.zeros(5))


# ---------------------------------------------------------------- conv


def test_conv_identity_tap():
    out = ad.conv1d_stride2(np.ones((4, 1)), np.array([[[0.0], [1.0], [0.0]]]), np.zeros(1))
    np.testing.assert_array_equal(out.value, [[1.0], [1.0]])


def test_conv_zero_kernel():
    rng = np.random.default_rng(1)
    out = ad.conv1d_stride2(rand(rng, 6, 3), np.zeros((3, 3, 3)), np.zeros(3))
    np.testing.assert_array_equal(out.value, np.zeros((3, 3)))


def test_conv_matches_sliding_window():
    rng = np.random.default_rng(2)
    x, K, b = rand(rng, 8, 3), rand(rng, 3, 3, 3), rand(rng, 3)
    np.testing.assert_allclose(ad.conv1d_stride2(x, K, b).value, conv_oracle(x, K, b), atol=1e-12)


def test_conv_wider_kernel_matches_oracle():
    rng = np.random.default_rng(3)
    x, K, b = rand(rng, 10, 2), rand(rng, 4, 5, 2), rand(rng, 4)
    np.testing.assert_allclose(ad.conv1d_stride2(x, K, b).value, conv_oracle(x, K, b), atol=1e-12)


def test_conv_rejects_odd_length_and_even_kernel():
    with pytest.raises(PreconditionError):
        ad.conv1d_stride2(np.zeros((5, 1)), np.zeros((1, 3, 1)), np.zeros(1))
    with pytest.raises(ConfigError):
        ad.conv1d_stride2(np.zeros((4, 1)), np.zeros((1, 2, 1)), np.zeros(1))


@given(st.integers(1, 40))
def test_conv_halves_every_even_length(half):
    out = ad.conv1d_stride2(np.ones((2 * half, 2)), np.ones((2, 3, 2)), np.zeros(2))
    assert out.shape == (half, 2)


# ---------------------------------------------------------------- softmax


def test_softmax_uniform_row():
    np.testing.assert_array_equal(ad.softmax_rows(np.zeros((1, 2))).value, [[0.5, 0.5]])


def test_softmax_large_logits_stable():
    p = ad.softmax_rows(np.array([[1000.0, 0.0]])).value
    assert np.all(np.isfinite(p))
    assert p[0, 0] == pytest.approx(1.0) and p[0, 1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_matches_naive():
    rng = np.random.default_rng(4)
    x = rand(rng, 4, 6) * 5
    p = ad.softmax_rows(x).value
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(p, softmax_oracle(x), atol=1e-12)


def test_softmax_mask_drops_columns():
    x = np.array([[1.0, 2.0, 50.0]])
    p = ad.softmax_rows(x, np.array([[True, True, False]])).value
    assert p[0, 2] == 0.0
    np.testing.assert_allclose(p[0, :2], softmax_oracle(x[:, :2])[0], atol=1e-15)


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_softmax_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    x = rand(rng, 3, 7) * 4
    perm = rng.permutation(7)
    p = ad.softmax_rows(x).value
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(ad.softmax_rows(x[:, perm]).value, p[:, perm], atol=1e-15)


# ---------------------------------------------------------------- elementwise


def test_sigmoid_zero():
    assert ad.sigmoid(np.zeros(1)).value[0] == 0.5


def test_sq_euclidean_self_is_zero():
    x = np.random.default_rng(5).normal(size=(3, 2))
    assert ad.sq_euclidean(x, x).item() == 0.0


def test_relu_pointwise():
    x = np.random.default_rng(6).normal(size=(5, 5))
    np.testing.assert_array_equal(ad.relu(x).value, np.maximum(0, x))


def test_relu_subgradient_at_zero_is_zero():
    tape = Tape()
    x = tape.param(np.zeros(3))
    g = backward(tape, ad.sum_all(ad.relu(x)))
    np.testing.assert_array_equal(g[x.node], np.zeros(3))


def test_elementwise_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.add(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(DimensionError):
        ad.sq_euclidean(np.zeros(2), np.zeros(3))


def test_concat_slice_and_max_pool_values():
    a = np.arange(6.0).reshape(3, 2)
    b = -np.arange(3.0).reshape(3, 1)
    np.testing.assert_array_equal(ad.concat_last_dim(a, b).value, np.hstack([a, b]))
    np.testing.assert_array_equal(ad.slice_rows(a, 1, 3).value, a[1:3])
    np.testing.assert_array_equal(ad.max_pool_rows(a).value, [[4.0, 5.0]])


def test_cosine_zero_vector_scores_zero():
    out = ad.cosine_rows(np.zeros((1, 3)), np.ones((2, 3)))
    np.testing.assert_array_equal(out.value, [[0.0, 0.0]])


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    tape = Tape()
    x = tape.param(np.random.default_rng(7).normal(size=(2, 3)))
    g = backward(tape, ad.sum_all(x))
    np.testing.assert_array_equal(g[x.node], np.ones((2, 3)))


def test_backward_quadratic():
    tape = Tape()
    xv = np.array([[1.0, -2.0], [0.5, 3.0]])
    x = tape.param(xv)
    g = backward(tape, ad.sq_euclidean(x, np.zeros((2, 2))))
    np.testing.assert_array_equal(g[x.node], 2 * xv)


def test_backward_accumulates_fan_out():
    tape = Tape()
    x = tape.param(np.array([1.0, 2.0, 3.0]))
    # x used on two paths: sum(x * x) + sum(x)
    loss = ad.add(ad.sum_all(ad.mul(x, x)), ad.sum_all(x))
    g = backward(tape, loss)
    np.testing.assert_array_equal(g[x.node], 2 * np.array([1.0, 2.0, 3.0]) + 1)


def test_backward_rejects_non_scalar():
    tape = Tape()
    x = tape.param(np.ones(3))
    with pytest.raises(ContractError):
        backward(tape, ad.scale(x, 2.0))


def test_backward_rejects_constant_loss():
    with pytest.raises(ContractError):
        backward(Tape(), ad.sum_all(np.ones(2)))


def test_param_snapshots_value():
    arr = np.ones(2)
    tape = Tape()
    x = tape.param(arr)
    arr[0] = 5.0
    assert x.value[0] == 1.0


def test_tape_is_topologically_ordered():
    tape = Tape()
    x = tape.param(np.ones((2, 2)))
    ad.sum_all(ad.softmax_rows(ad.matmul(x, x)))
    for i, inputs in enumerate(tape.inputs):
        assert all(j < i for j in inputs)


def test_mixing_tapes_is_an_error():
    a = Tape().param(np.ones(2))
    b = Tape().param(np.ones(2))
    with pytest.raises(ContractError):
        ad.add(a, b)


def test_constants_fold_eagerly():
    out = ad.relu(ad.affine(np.ones((2, 2)), np.ones((2, 2)), np.zeros(2)))
    assert out.node is None


# ---------------------------------------------------------------- finite differences


def test_fd_quadratic():
    err = finite_diff_check(lambda p: ad.sum_all(ad.square(p["p"])), {"p": np.array([1.0, 2.0, 3.0])})
    assert err < 1e-9


def test_fd_constant_function():
    err = finite_diff_check(lambda p: Tensor(np.array(4.0)), {"p": np.array([1.0, 2.0])})
    assert err == 0.0


PRIMITIVES = {
    "affine": (lambda p: ad.affine(p["x"], p["W"], p["b"]), {"x": (3, 4), "W": (2, 4), "b": (2,)}),
    "matmul": (lambda p: ad.matmul(p["a"], p["b"]), {"a": (3, 2), "b": (2, 4)}),
    "matmul_nt": (lambda p: ad.matmul_nt(p["a"], p["b"]), {"a": (3, 2), "b": (4, 2)}),
    "conv": (lambda p: ad.conv1d_stride2(p["x"], p["K"], p["b"]), {"x": (6, 2), "K": (3, 3, 2), "b": (3,)}),
    "softmax": (lambda p: ad.softmax_rows(p["x"]), {"x": (3, 4)}),
    "softmax_masked": (
        lambda p: ad.softmax_rows(p["x"], np.array([[True, False, True, True]])), {"x": (3, 4)}
    ),
    "add": (lambda p: ad.add(p["a"], p["b"]), {"a": (2, 3), "b": (2, 3)}),
    "sub": (lambda p: ad.sub(p["a"], p["b"]), {"a": (2, 3), "b": (2, 3)}),
    "mul": (lambda p: ad.mul(p["a"], p["b"]), {"a": (2, 3), "b": (2, 3)}),
    "sigmoid": (lambda p: ad.sigmoid(p["x"]), {"x": (2, 3)}),
    "relu": (lambda p: ad.relu(p["x"]), {"x": (2, 3)}),
    "concat": (lambda p: ad.concat_last_dim(p["a"], p["b"]), {"a": (2, 3), "b": (2, 1)}),
    "slice_rows": (lambda p: ad.slice_rows(p["x"], 1, 3), {"x": (4, 2)}),
    "column": (lambda p: ad.column(p["x"], 1), {"x": (4, 3)}),
    "sq_euclidean": (lambda p: ad.sq_euclidean(p["a"], p["b"]), {"a": (2, 3), "b": (2, 3)}),
    "max_pool_rows": (lambda p: ad.max_pool_rows(p["x"]), {"x": (4, 3)}),
    "row_norms": (lambda p: ad.row_norms(p["x"]), {"x": (3, 4)}),
    "cosine": (lambda p: ad.cosine_rows(p["a"], p["B"]), {"a": (1, 4), "B": (3, 4)}),
    "log": (lambda p: ad.log(ad.add_scalar(ad.square(p["x"]), 0.5)), {"x": (2, 3)}),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    op, shapes = PRIMITIVES[name]
    for seed in range(100):
        rng = np.random.default_rng(seed)
        params = {k: rand(rng, *s) for k, s in shapes.items()}
        # random linear read-out makes the scalar depend on every output entry
        probe = rand(rng, *op({k: Tensor(v) for k, v in params.items()}).shape)

        def f(p):
            return ad.sum_all(ad.mul(op(p), probe))

        assert finite_diff_check(f, params) < 1e-4, f"{name} seed {seed}"
