"""Image-shaped kernels (H x W x C layout, no batch axis)."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make, mean, sqrt, clip, exp

LEAKY_SLOPE = 0.2
EXP_CLAMP = 15.0


def conv2d(x, kernel, bias=None, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of an ``H x W x Cin`` image with a ``kh x kw x Cin x Cout`` kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects HxWxC input and 4-d kernel, got {x.shape} and {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if x.shape[2] != cin:
        raise ValueError(f"input has {x.shape[2]} channels, kernel expects {cin}")
    if stride < 1:
        raise ValueError("stride must be positive")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("'same' padding needs odd kernel sizes")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    h, w = x.shape[:2]
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0))) if (ph or pw) else x.data
    hp, wp = xp.shape[:2]
    if hp < kh or wp < kw:
        raise ValueError("input smaller than kernel")
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride]
    ho, wo = win.shape[:2]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = cols @ kmat
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError(f"bias shape {bias.shape} != ({cout},)")
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(ho, wo, cout)

    def bw(g):
        g2 = g.reshape(ho * wo, cout)
        gk = (cols.T @ g2).reshape(kernel.shape)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(ho, wo, kh, kw, cin)
            gxp = np.zeros((hp, wp, cin))
            for i in range(kh):
                for j in range(kw):
                    gxp[i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[:, :, i, j]
            gx = gxp[ph:ph + h, pw:pw + w]
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return make(out, parents, bw, "conv2d")


def separable_map(x, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply fixed linear maps along both spatial axes: ``rows @ x[..., c] @ cols.T``."""
    x = as_tensor(x)
    out = np.matmul(cols, np.tensordot(rows, x.data, axes=(1, 0)))

    def bw(g):
        return (np.tensordot(rows.T, np.matmul(cols.T, g), axes=(1, 0)),)

    return make(out, (x,), bw, "separable_map")


@lru_cache(maxsize=64)
def bilinear_matrix(n: int, factor: int = 2) -> np.ndarray:
    """1-D interpolation matrix for half-pixel (non corner aligned) upsampling."""
    m = np.zeros((n * factor, n))
    for i in range(n * factor):
        src = (i + 0.5) / factor - 0.5
        src = min(max(src, 0.0), n - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    m.setflags(write=False)
    return m


def upsample_bilinear(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"upsample expects a non-empty HxWxC tensor, got {x.shape}")
    return separable_map(x, bilinear_matrix(x.shape[0], factor), bilinear_matrix(x.shape[1], factor))


def normalize(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Per-channel spatial standardisation followed by an optional affine map.

    The spread is floored as ``sqrt(var + eps**2)`` so ``eps`` acts on the
    standard deviation.
    """
    x = as_tensor(x)
    if x.shape[0] * x.shape[1] <= 1 and eps <= 0:
        raise ValueError("normalize needs more than one position or eps > 0")
    centered = x - mean(x, axis=(0, 1), keepdims=True)
    var = mean(centered * centered, axis=(0, 1), keepdims=True)
    y = centered / sqrt(var + eps * eps)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope)
    return make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def safe_exp(x) -> Tensor:
    return exp(clip(x, -EXP_CLAMP, EXP_CLAMP))


_ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": safe_exp,
}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)
