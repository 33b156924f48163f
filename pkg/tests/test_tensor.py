import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynpool.errors import DimensionError
from dynpool.gradcheck import fd_gradient, max_rel_err
from dynpool.tensor import (Tensor, concat, cross_entropy, embedding_lookup,
                            maxpool_grid, mha_attend, relu, rmsnorm, silu, softmax)


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((eye @ a).data, a.data)


def test_matmul_hand_value():
    # [[1,2]] @ [[3],[4]] = [[1*3 + 2*4]] = [[11]]
    out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    assert out.data.shape == (1, 1)
    assert out.data[0, 0] == 11.0


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        Tensor([[1.0, 2.0]]) @ Tensor([[1.0, 2.0]])
    with pytest.raises(DimensionError):
        Tensor([1.0, 2.0]) @ Tensor([[1.0], [2.0]])


def test_matmul_backward_matches_finite_differences():
    rng = np.random.default_rng(7)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

    def loss():
        return (a @ b).sum()

    loss().backward()
    for t in (a, b):
        numeric = fd_gradient(lambda: loss().item(), t)
        assert max_rel_err(t.grad, numeric) < 1e-6
        t.zero_grad()


@pytest.mark.parametrize("x,expected", [
    ([0.0, 0.0, 0.0], [1 / 3, 1 / 3, 1 / 3]),
    ([1000.0, 1000.0], [0.5, 0.5]),               # must not overflow
    ([0.0, np.log(3.0)], [0.25, 0.75]),
])
def test_softmax_values(x, expected):
    out = softmax(Tensor(x))
    np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-15)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 5))
    a = softmax(Tensor(x), axis=-1).data
    b = softmax(Tensor(x + 123.456), axis=-1).data
    np.testing.assert_allclose(a, b, atol=1e-12)


@given(st.integers(1, 4), st.integers(1, 8), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).normal(scale=5.0, size=(rows, cols))
    out = softmax(Tensor(x), axis=-1)
    assert np.all(out.data > 0)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_empty_axis_rejected():
    with pytest.raises(DimensionError):
        softmax(Tensor(np.zeros((2, 0))))


def test_maxpool_single_window():
    out = maxpool_grid(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)), (2, 2))
    assert out.data.shape == (1, 1, 1)
    assert out.data[0, 0, 0] == 4.0


def test_maxpool_row_kernel():
    row = Tensor(np.array([1.0, 3.0, 2.0, 0.0]).reshape(1, 4, 1))
    out = maxpool_grid(row, (1, 2))
    np.testing.assert_array_equal(out.data.reshape(-1), [3.0, 2.0])


def _brute_force_pool(x, kh, kw):
    # window enumeration oracle, independent of the kernels package
    h, w, d = x.shape
    oh, ow = -(-h // kh), -(-w // kw)
    out = np.empty((oh, ow, d))
    for i in range(oh):
        for j in range(ow):
            out[i, j] = x[i * kh:(i + 1) * kh, j * kw:(j + 1) * kw].reshape(-1, d).max(axis=0)
    return out


def test_maxpool_ceil_mode_partial_window():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 2, 2))
    out = maxpool_grid(Tensor(x), (2, 1))
    assert out.data.shape == (2, 2, 2)  # last window covers a single row
    np.testing.assert_array_equal(out.data, _brute_force_pool(x, 2, 1))


@pytest.mark.parametrize("h,w,d,kh,kw", [
    (4, 4, 3, 2, 2), (5, 3, 2, 2, 2), (1, 7, 4, 1, 2), (6, 6, 1, 4, 4), (3, 3, 5, 2, 1),
])
def test_maxpool_matches_brute_force(h, w, d, kh, kw):
    x = np.random.default_rng(h * 100 + w * 10 + kh).normal(size=(h, w, d))
    out = maxpool_grid(Tensor(x), (kh, kw))
    np.testing.assert_array_equal(out.data, _brute_force_pool(x, kh, kw))
    assert out.data.max() <= x.max()


def test_maxpool_identity_kernel():
    x = np.random.default_rng(2).normal(size=(3, 4, 2))
    out = maxpool_grid(Tensor(x), (1, 1))
    np.testing.assert_array_equal(out.data, x)


def test_maxpool_tie_breaks_to_first_row_major():
    x = Tensor(np.ones((2, 2, 1)), requires_grad=True)
    out = maxpool_grid(x, (2, 2))
    out.sum().backward()
    expected = np.zeros((2, 2, 1))
    expected[0, 0, 0] = 1.0  # all equal: first cell in row-major order wins
    np.testing.assert_array_equal(x.grad, expected)


def test_maxpool_gradient_routes_to_argmax_only():
    x = Tensor(np.array([[1.0, 5.0], [3.0, 4.0]]).reshape(2, 2, 1), requires_grad=True)
    out = maxpool_grid(x, (2, 2))
    out.backward(np.full((1, 1, 1), 2.5))
    expected = np.zeros((2, 2, 1))
    expected[0, 1, 0] = 2.5
    np.testing.assert_array_equal(x.grad, expected)


def test_maxpool_rejects_zero_extent_and_bad_kernel():
    with pytest.raises(DimensionError):
        maxpool_grid(Tensor(np.zeros((0, 2, 1))), (1, 1))
    with pytest.raises(DimensionError):
        maxpool_grid(Tensor(np.zeros((2, 2, 1))), (0, 2))


def test_maxpool_kernel_larger_than_grid_clamps():
    x = np.random.default_rng(3).normal(size=(3, 3, 2))
    out = maxpool_grid(Tensor(x), (4, 4))
    assert out.data.shape == (1, 1, 2)
    np.testing.assert_array_equal(out.data[0, 0], x.reshape(-1, 2).max(axis=0))


def test_rmsnorm_zero_vector_stays_zero():
    x = Tensor(np.zeros((2, 4)))
    out = rmsnorm(x, Tensor(np.ones(4)))
    np.testing.assert_array_equal(out.data, np.zeros((2, 4)))


def test_cross_entropy_uniform_is_log_vocab():
    v = 11
    logits = Tensor(np.zeros((3, v)))
    out = cross_entropy(logits, [0, 4, 10])
    assert abs(out.item() - np.log(v)) < 1e-12


def test_cross_entropy_confident_correct_is_zero():
    logits = np.zeros((2, 5))
    logits[0, 1] = 1000.0
    logits[1, 3] = 1000.0
    out = cross_entropy(Tensor(logits), [1, 3])
    assert out.item() < 1e-12


def test_concat_slice_round_trip():
    rng = np.random.default_rng(4)
    a = Tensor(rng.normal(size=(2, 3)))
    b = Tensor(rng.normal(size=(4, 3)))
    joined = concat([a, b], axis=0)
    np.testing.assert_array_equal(joined.slice_axis(0, 0, 2).data, a.data)
    np.testing.assert_array_equal(joined.slice_axis(0, 2, 6).data, b.data)


def test_scalar_broadcast_mul_grad():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    s = Tensor(2.0, requires_grad=True)
    (x * s).sum().backward()
    np.testing.assert_array_equal(x.grad, np.full((2, 3), 2.0))
    assert s.grad.reshape(()) == x.data.sum()


def test_elementwise_shape_mismatch_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3, 2)))


# -- finite-difference coverage for every differentiable op -------------------

def _fd_case(name, build, smooth):
    return pytest.param(build, 1e-6 if smooth else 1e-4, id=name)


def _random(shape, seed, scale=1.0):
    return Tensor(np.random.default_rng(seed).normal(scale=scale, size=shape),
                  requires_grad=True)


def _mask4():
    from dynpool.model import causal_mask
    return causal_mask(4)


@pytest.mark.parametrize("build,tol", [
    _fd_case("add", lambda s: (lambda a=_random((3, 4), s), b=_random((3, 4), s + 1):
                               (lambda: (a + b).sum(), [a, b]))(), True),
    _fd_case("mul", lambda s: (lambda a=_random((4, 2), s), b=_random((4, 2), s + 1):
                               (lambda: (a * b).sum(), [a, b]))(), True),
    _fd_case("scalar_mul", lambda s: (lambda a=_random((3, 3), s), b=_random((), s + 1):
                                      (lambda: (a * b).sum(), [a, b]))(), True),
    _fd_case("neg", lambda s: (lambda a=_random((2, 5), s):
                               (lambda: (-a).sum(), [a]))(), True),
    _fd_case("matmul", lambda s: (lambda a=_random((3, 4), s), b=_random((4, 2), s + 1):
                                  (lambda: (a @ b).sum(), [a, b]))(), True),
    _fd_case("transpose", lambda s: (lambda a=_random((3, 4), s):
                                     (lambda: (a.T @ a).sum(), [a]))(), True),
    _fd_case("reshape", lambda s: (lambda a=_random((2, 6), s):
                                   (lambda: (a.reshape(3, 4) * a.reshape(3, 4)).sum(), [a]))(), True),
    _fd_case("slice", lambda s: (lambda a=_random((4, 6), s):
                                 (lambda: (a.slice_axis(1, 1, 4) * a.slice_axis(1, 2, 5)).sum(), [a]))(), True),
    _fd_case("concat", lambda s: (lambda a=_random((2, 3), s), b=_random((4, 3), s + 1):
                                  (lambda: (concat([a, b], axis=0) * concat([b, a], axis=0)).sum(), [a, b]))(), True),
    _fd_case("mean", lambda s: (lambda a=_random((4, 4), s):
                                (lambda: (a * a).mean(), [a]))(), True),
    _fd_case("relu", lambda s: (lambda a=_random((4, 4), s):
                                (lambda: relu(a).sum(), [a]))(), False),
    _fd_case("silu", lambda s: (lambda a=_random((3, 5), s):
                                (lambda: (silu(a) * a).sum(), [a]))(), True),
    _fd_case("softmax", lambda s: (lambda a=_random((3, 6), s):
                                   (lambda: (softmax(a, axis=-1) * a).sum(), [a]))(), True),
    _fd_case("rmsnorm", lambda s: (lambda a=_random((3, 8), s), w=_random((8,), s + 1):
                                   (lambda: (rmsnorm(a, w) * a).sum(), [a, w]))(), True),
    _fd_case("embedding", lambda s: (lambda t=_random((5, 3), s):
                                     (lambda: (embedding_lookup(t, [0, 2, 2, 4]) *
                                               embedding_lookup(t, [1, 2, 3, 4])).sum(), [t]))(), True),
    _fd_case("maxpool", lambda s: (lambda a=_random((4, 4, 8), s):
                                   (lambda: (maxpool_grid(a, (2, 2)) * maxpool_grid(a, (2, 2))).sum(), [a]))(), False),
    _fd_case("cross_entropy", lambda s: (lambda a=_random((4, 7), s, 2.0):
                                         (lambda: cross_entropy(a, [1, 0, 6, 3]), [a]))(), True),
    _fd_case("mha_attend", lambda s: (lambda q=_random((4, 8), s), k=_random((4, 8), s + 1),
                                      v=_random((4, 8), s + 2), m=_mask4():
                                      (lambda: (mha_attend(q, k, v, 2, 0.5, m) *
                                                mha_attend(q, k, v, 4, 0.25)).sum(), [q, k, v]))(), True),
])
@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(build, tol, seed):
    loss_fn, tensors = build(seed * 97)
    loss_fn().backward()
    for t in tensors:
        numeric = fd_gradient(lambda: loss_fn().item(), t)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        assert max_rel_err(analytic, numeric) < tol


def test_backward_accumulates_over_shared_subgraphs():
    a = Tensor(np.array([[2.0]]), requires_grad=True)
    out = (a @ a).sum()  # d/da (a*a) = 2a
    out.backward()
    assert a.grad[0, 0] == 4.0


def test_backward_requires_scalar_seed():
    a = Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(DimensionError):
        (a + a).backward()
