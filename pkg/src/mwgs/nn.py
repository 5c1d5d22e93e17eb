"""Dense and convolutional layers with explicit backward passes.

Parameters live in flat ``dict[str, ndarray]`` stores so the optimizer and
checkpoint code can treat every module uniformly.  Dense weights are laid
out ``(fan_in, fan_out)`` so a batch ``x @ W + b`` maps rows to rows.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def glorot(rng, fan_in, fan_out, shape=None):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape or (fan_in, fan_out))


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def init_mlp(params, prefix, sizes, rng):
    """Register ``len(sizes) - 1`` dense layers under ``prefix.{i}.w/b``."""
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        params[f"{prefix}.{i}.w"] = glorot(rng, a, b)
        params[f"{prefix}.{i}.b"] = np.zeros(b)


def mlp_forward(params, prefix, x, n_layers, final_relu=False):
    """ReLU between layers; returns the output and the activation cache."""
    acts = [x]
    h = x
    for i in range(n_layers):
        h = h @ params[f"{prefix}.{i}.w"] + params[f"{prefix}.{i}.b"]
        if i < n_layers - 1 or final_relu:
            h = relu(h)
        acts.append(h)
    return h, acts


def mlp_backward(params, prefix, acts, dout, n_layers, grads, final_relu=False):
    """Accumulate parameter grads into ``grads``; return the input gradient."""
    d = dout
    for i in reversed(range(n_layers)):
        if i < n_layers - 1 or final_relu:
            d = d * (acts[i + 1] > 0)
        x = acts[i]
        x2 = x.reshape(-1, x.shape[-1])
        d2 = d.reshape(-1, d.shape[-1])
        _acc(grads, f"{prefix}.{i}.w", x2.T @ d2)
        _acc(grads, f"{prefix}.{i}.b", d2.sum(axis=0))
        d = d @ params[f"{prefix}.{i}.w"].T
    return d


def _acc(grads, key, value):
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


# --------------------------------------------------------------------------
# convolution, 3x3, zero padding 1


def conv2d(x, w, b, stride=1):
    """``x``: (C, H, W); ``w``: (O, C, 3, 3).  Returns (O, H', W') and the column cache."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    out = np.einsum("chwij,ocij->ohw", cols, w, optimize=True) + b[:, None, None]
    return out, (x.shape, stride)


def conv2d_backward(x, w, cache, dout):
    shape, stride = cache
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::stride, ::stride]
    dw = np.einsum("chwij,ohw->ocij", cols, dout, optimize=True)
    db = dout.sum(axis=(1, 2))
    dxp = np.zeros_like(xp)
    ho, wo = dout.shape[1:]
    for i in range(3):
        for j in range(3):
            contrib = np.einsum("oc,ohw->chw", w[:, :, i, j], dout, optimize=True)
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
    return dxp[:, 1:-1, 1:-1], dw, db


def upsample2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(d):
    c, h, w = d.shape
    return d.reshape(c, h // 2, 2, w // 2, 2).sum(axis=(2, 4))
