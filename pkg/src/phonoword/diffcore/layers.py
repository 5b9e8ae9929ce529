"""Parameterised layers as plain functions over a flat ``{name: Tensor}`` dict.

Keeping parameters in one ordered dict makes EMA copies, checkpointing and
gradient checks uniform: every model is just a namespace of tensors.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    assert_finite,
    conv1d,
    gelu,
    layer_norm,
    matmul,
    softmax,
    transpose,
)

Params = dict  # str -> Tensor


def new_param(params: Params, name: str, value: np.ndarray) -> Tensor:
    if name in params:
        raise KeyError(f"duplicate parameter name {name!r}")
    t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
    params[name] = t
    return t


def init_linear(params: Params, rng: np.random.Generator, name: str, d_in: int, d_out: int,
                bias: bool = True) -> None:
    bound = 1.0 / math.sqrt(d_in)
    new_param(params, f"{name}.w", rng.uniform(-bound, bound, size=(d_in, d_out)))
    if bias:
        new_param(params, f"{name}.b", np.zeros(d_out))


def init_layer_norm(params: Params, name: str, dim: int) -> None:
    new_param(params, f"{name}.g", np.ones(dim))
    new_param(params, f"{name}.b", np.zeros(dim))


def init_conv(params: Params, rng: np.random.Generator, name: str, kernel: int, c_in: int,
              c_out: int) -> None:
    bound = 1.0 / math.sqrt(kernel * c_in)
    new_param(params, f"{name}.w", rng.uniform(-bound, bound, size=(kernel, c_in, c_out)))
    new_param(params, f"{name}.b", np.zeros(c_out))


def init_attention(params: Params, rng: np.random.Generator, name: str, dim: int) -> None:
    for proj in ("q", "k", "v", "o"):
        init_linear(params, rng, f"{name}.{proj}", dim, dim)


def init_transformer_layer(params: Params, rng: np.random.Generator, name: str, dim: int,
                           inner: int) -> None:
    init_layer_norm(params, f"{name}.ln1", dim)
    init_attention(params, rng, f"{name}.attn", dim)
    init_layer_norm(params, f"{name}.ln2", dim)
    init_linear(params, rng, f"{name}.ff1", dim, inner)
    init_linear(params, rng, f"{name}.ff2", inner, dim)


def linear(x: Tensor, params: Params, name: str) -> Tensor:
    w = params[f"{name}.w"]
    if x.shape[-1] != w.shape[0]:
        raise ShapeError("linear", x.shape, w.shape, name)
    out = matmul(x, w)
    b = params.get(f"{name}.b")
    return out if b is None else out + b


def norm(x: Tensor, params: Params, name: str, eps: float = 1e-5) -> Tensor:
    return layer_norm(x, params[f"{name}.g"], params[f"{name}.b"], eps)


def conv(x: Tensor, params: Params, name: str, stride: int = 1, padding: int = 0) -> Tensor:
    return conv1d(x, params[f"{name}.w"], params[f"{name}.b"], stride, padding)


def multi_head_attention(x: Tensor, params: Params, name: str, heads: int,
                         key_mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """Scaled dot-product self-attention.

    x: [L, D] or [B, L, D]. ``key_mask`` ([L] or [B, L]) is True at key
    positions that must be ignored (padding). An all-False mask is the same
    as no mask.
    """
    dim = x.shape[-1]
    if dim % heads:
        raise ShapeError("multi_head_attention", x.shape, (heads,), "heads must divide model dim")
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape((1,) + x.shape)
        if key_mask is not None:
            key_mask = np.asarray(key_mask)[None]
    b, length, _ = x.shape
    dh = dim // heads

    def split(t: Tensor) -> Tensor:
        return transpose(t.reshape(b, length, heads, dh), (0, 2, 1, 3))

    q = split(linear(x, params, f"{name}.q"))
    k = split(linear(x, params, f"{name}.k"))
    v = split(linear(x, params, f"{name}.v"))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    mask = None
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (b, length):
            raise ShapeError("multi_head_attention", (b, length), key_mask.shape, "key mask")
        if key_mask.all(axis=-1).any():
            raise ValueError("attention key mask hides every position of a sequence")
        mask = key_mask[:, None, None, :]
    weights = softmax(scores, axis=-1, mask=mask)
    ctx = matmul(weights, v)
    ctx = transpose(ctx, (0, 2, 1, 3)).reshape(b, length, dim)
    out = linear(ctx, params, f"{name}.o")
    assert_finite(out, f"attention {name}")
    if squeeze:
        out = out.reshape(length, dim)
        weights = weights.reshape(heads, length, length)
    return (out, weights) if return_weights else out


def feed_forward(x: Tensor, params: Params, name: str) -> Tensor:
    return linear(gelu(linear(x, params, f"{name}1")), params, f"{name}2")


def transformer_layer(x: Tensor, params: Params, name: str, heads: int,
                      key_mask: np.ndarray | None = None) -> Tensor:
    """Pre-LN block: x + MHA(LN x), then + FFN(LN x)."""
    x = x + multi_head_attention(norm(x, params, f"{name}.ln1"), params, f"{name}.attn", heads,
                                 key_mask)
    return x + feed_forward(norm(x, params, f"{name}.ln2"), params, f"{name}.ff")


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    out = np.zeros((length, dim))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle[:, : dim - dim // 2])
    return out


def padding_mask(lengths, max_len: int) -> np.ndarray:
    """True at padded positions."""
    lengths = np.asarray(lengths)
    return np.arange(max_len)[None, :] >= lengths[:, None]
