import math

import numpy as np
import pytest

from phonoword.diffcore import (
    NonFiniteError,
    ShapeError,
    Tensor,
    assert_finite,
    conv1d,
    finite_difference_gradient,
    gelu,
    init_attention,
    init_transformer_layer,
    layer_norm,
    log_softmax,
    matmul,
    multi_head_attention,
    relative_error,
    sinusoidal_positions,
    softmax,
    transformer_layer,
)
from phonoword.diffcore.optim import Schedule

H = 1e-5
TOL = 1e-4


def grad_of(f, x):
    t = Tensor(x.copy(), requires_grad=True)
    f(t).backward()
    return t.grad


def fd_check(f, x):
    return relative_error(grad_of(f, x), finite_difference_gradient(f, x, H))


def test_matmul_identity():
    m = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(matmul(Tensor(np.eye(3)), Tensor(m)).data, m)


def test_log_softmax_uniform():
    np.testing.assert_allclose(log_softmax(Tensor(np.zeros(4))).data, np.full(4, -math.log(4)), atol=1e-15)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)


def test_assert_finite():
    assert_finite(Tensor(np.ones(3)))
    with pytest.raises(NonFiniteError):
        assert_finite(Tensor(np.array([1.0, np.nan])))


def test_finite_difference_sum_of_squares():
    g = finite_difference_gradient(lambda t: (t * t).sum(), np.array([1.0, 2.0]))
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)


def test_finite_difference_constant_is_zero():
    g = finite_difference_gradient(lambda t: Tensor(3.0), np.array([1.0, -2.0, 5.0]))
    np.testing.assert_array_equal(g, 0.0)


def test_finite_difference_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        finite_difference_gradient(lambda t: Tensor(np.inf), np.zeros(2))


@pytest.mark.parametrize("seed", range(20))
def test_gelu_gradient(seed):
    x = np.random.default_rng(seed).normal(size=(4, 3))
    err = relative_error(grad_of(lambda t: gelu(t).sum(), x),
                         finite_difference_gradient(lambda t: gelu(t).sum(), x, H))
    assert err < 1e-6


@pytest.mark.parametrize("seed", range(20))
def test_elementwise_and_reduction_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4,))

    def f(t):
        return ((t * w + 1.0) / (2.0 + t * t)).mean(axis=0).sum() + (t.T @ t).sum() * 0.1

    assert fd_check(f, x) < TOL


@pytest.mark.parametrize("seed", range(20))
def test_layer_norm_gradient_and_statistics(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 6)) * 3 + 1
    g = rng.normal(size=6)
    b = rng.normal(size=6)
    out = layer_norm(Tensor(x), eps=1e-12).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-6)
    c = rng.normal(size=(5, 6))
    assert fd_check(lambda t: (layer_norm(t, Tensor(g), Tensor(b)) * c).sum(), x) < TOL
    assert fd_check(lambda t: (layer_norm(Tensor(x), t, Tensor(b)) * c).sum(), g) < TOL


@pytest.mark.parametrize("seed", range(20))
def test_log_softmax_and_softmax_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5))
    c = rng.normal(size=(3, 5))
    assert fd_check(lambda t: (log_softmax(t) * c).sum(), x) < TOL
    assert fd_check(lambda t: (softmax(t) * c).sum(), x) < TOL


@pytest.mark.parametrize("seed", range(20))
def test_conv1d_gradients(seed):
    rng = np.random.default_rng(seed)
    stride, pad = [(1, 1), (2, 1), (2, 0), (3, 2)][seed % 4]
    x = rng.normal(size=(2, 9, 3))
    w = rng.normal(size=(3, 3, 4))
    b = rng.normal(size=4)
    out = conv1d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
    c = rng.normal(size=out.shape)
    assert fd_check(lambda t: (conv1d(t, Tensor(w), Tensor(b), stride, pad) * c).sum(), x) < TOL
    assert fd_check(lambda t: (conv1d(Tensor(x), t, Tensor(b), stride, pad) * c).sum(), w) < TOL
    assert fd_check(lambda t: (conv1d(Tensor(x), Tensor(w), t, stride, pad) * c).sum(), b) < TOL


def test_conv1d_matches_direct_sum():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, 2))
    w = rng.normal(size=(3, 2, 5))
    out = conv1d(Tensor(x), Tensor(w), None, stride=2, padding=1).data
    xp = np.pad(x, ((1, 1), (0, 0)))
    expected = np.array([sum(xp[2 * t + j] @ w[j] for j in range(3)) for t in range(4)])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_conv1d_too_short():
    with pytest.raises(ShapeError):
        conv1d(Tensor(np.ones((2, 3))), Tensor(np.ones((5, 3, 1))))


def _attn_params(dim, seed):
    p = {}
    init_attention(p, np.random.default_rng(seed), "a", dim)
    return p


@pytest.mark.parametrize("seed", range(20))
def test_attention_gradients(seed):
    rng = np.random.default_rng(seed)
    p = _attn_params(4, seed)
    x = rng.normal(size=(5, 4))
    c = rng.normal(size=(5, 4))
    mask = np.array([False, False, False, True, seed % 2 == 0])
    assert fd_check(lambda t: (multi_head_attention(t, p, "a", 2, mask) * c).sum(), x) < TOL
    w = p["a.q.w"].data.copy()

    def f(t):
        p["a.q.w"] = t
        return (multi_head_attention(Tensor(x), p, "a", 2, mask) * c).sum()

    assert fd_check(f, w) < TOL


def test_attention_rows_are_convex_combinations():
    rng = np.random.default_rng(3)
    p = _attn_params(8, 3)
    _, weights = multi_head_attention(Tensor(rng.normal(size=(6, 8))), p, "a", 4,
                                      np.array([0, 0, 0, 0, 1, 1], bool), return_weights=True)
    np.testing.assert_allclose(weights.data.sum(-1), 1.0, atol=1e-9)
    assert np.all(weights.data >= 0)
    np.testing.assert_array_equal(weights.data[..., 4:], 0.0)


def test_attention_all_false_mask_equals_no_mask():
    rng = np.random.default_rng(1)
    p = _attn_params(8, 1)
    x = Tensor(rng.normal(size=(2, 5, 8)))
    a = multi_head_attention(x, p, "a", 2, np.zeros((2, 5), bool)).data
    b = multi_head_attention(x, p, "a", 2, None).data
    np.testing.assert_array_equal(a, b)


def test_attention_heads_must_divide_dim():
    with pytest.raises(ShapeError):
        multi_head_attention(Tensor(np.ones((3, 6))), _attn_params(6, 0), "a", 4)


@pytest.mark.parametrize("seed", range(20))
def test_transformer_layer_gradient(seed):
    rng = np.random.default_rng(seed)
    p = {}
    init_transformer_layer(p, rng, "l", 4, 8)
    x = rng.normal(size=(2, 4, 4))
    c = rng.normal(size=(2, 4, 4))
    mask = np.array([[False] * 4, [False, False, False, True]])
    assert fd_check(lambda t: (transformer_layer(t, p, "l", 2, mask) * c).sum(), x) < TOL


def test_positions_shape_and_range():
    pe = sinusoidal_positions(10, 6)
    assert pe.shape == (10, 6)
    assert np.abs(pe).max() <= 1.0
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)


def test_backward_accumulates_on_shared_leaf():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    ((x * x) + x).sum().backward()
    np.testing.assert_array_equal(x.grad, [5.0, 7.0])


def test_schedule_warmup_then_decay():
    s = Schedule(1.0, 100, warmup_frac=0.1)
    assert s(0) == pytest.approx(0.1)
    assert s(9) == pytest.approx(1.0)
    assert s(99) < s(50) < s(10)
