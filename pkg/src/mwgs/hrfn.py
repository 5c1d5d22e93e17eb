"""Hierarchical residual fusion network: features and view direction to k colors.

Four MLPs are chained as::

    emb    = M1(pe(x) | f_v | f_r | f_g) | w_r * f_r
    colors = sigmoid(M4(M3(M2(emb | w_v * f_v)) | d))

with ``|`` concatenation and ``d`` the unit vector from the camera centre to
the anchor.  Every hidden layer, and the outputs of M1..M3, pass through
ReLU.  All functions are batched over anchors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import InvalidConfig, InvalidShape

HIDDEN = {"m1": (128, 96), "m2": (96, 64), "m3": (48, 48), "m4": (48,)}


@dataclass(frozen=True)
class HRFNConfig:
    k: int = 10
    n_v: int = 48
    n_r: int = 32
    n_g: int = 16
    L_pe: int = 4
    hidden: tuple = tuple(HIDDEN.items())

    @property
    def widths(self) -> dict:
        return dict(self.hidden)

    @property
    def pe_dim(self) -> int:
        return 3 + 6 * self.L_pe

    def layer_sizes(self) -> dict:
        w = self.widths
        m1_in = self.pe_dim + self.n_v + self.n_r + self.n_g
        emb = w["m1"][-1] + self.n_r
        return {
            "m1": [m1_in, *w["m1"]],
            "m2": [emb + self.n_v, *w["m2"]],
            "m3": [w["m2"][-1], *w["m3"]],
            "m4": [w["m3"][-1] + 3, *w["m4"], 3 * self.k],
        }


def positional_encode(x, L_pe):
    """``x`` followed by ``sin`` and ``cos`` of ``2**l * pi * x`` for each band."""
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for ell in range(L_pe):
        arg = (2.0**ell) * np.pi * x
        parts += [np.sin(arg), np.cos(arg)]
    return np.concatenate(parts, axis=-1)


def positional_encode_backward(x, L_pe, dout):
    dx = dout[..., :3].copy()
    for ell in range(L_pe):
        f = (2.0**ell) * np.pi
        ds = dout[..., 3 + 6 * ell: 6 + 6 * ell]
        dc = dout[..., 6 + 6 * ell: 9 + 6 * ell]
        dx += f * (ds * np.cos(f * x) - dc * np.sin(f * x))
    return dx


def view_direction(x, x_c):
    diff = np.asarray(x, dtype=np.float64) - x_c
    norm = np.linalg.norm(diff, axis=-1, keepdims=True)
    return diff / norm, norm


def view_direction_backward(d, norm, dd):
    return (dd - d * np.sum(d * dd, axis=-1, keepdims=True)) / norm


def init_params(params, cfg: HRFNConfig, rng):
    for name, sizes in cfg.layer_sizes().items():
        nn.init_mlp(params, f"hrfn.{name}", sizes, rng)
    params["hrfn.omega_r"] = np.array(1.0)
    params["hrfn.omega_v"] = np.array(1.0)


@dataclass
class HRFNOutput:
    colors: np.ndarray  # (N, k, 3)
    cache: dict


def hrfn_forward(params, cfg: HRFNConfig, x, f_v, f_r, f_g, x_c,
                 scale_r=1.0, scale_v=1.0) -> HRFNOutput:
    """Colors for ``N`` anchors.  ``scale_r``/``scale_v`` multiply the residual weights."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = len(x)
    f_v = np.atleast_2d(f_v)
    f_r = np.atleast_2d(f_r)
    f_g = np.asarray(f_g, dtype=np.float64)
    if f_g.ndim == 1:
        f_g = np.broadcast_to(f_g, (n, f_g.shape[0]))
    for name, arr, want in (("f_v", f_v, cfg.n_v), ("f_r", f_r, cfg.n_r), ("f_g", f_g, cfg.n_g)):
        if arr.shape != (n, want):
            raise InvalidConfig(f"{name} has shape {arr.shape}, expected {(n, want)}")
    sizes = cfg.layer_sizes()
    w_r = float(params["hrfn.omega_r"]) * scale_r
    w_v = float(params["hrfn.omega_v"]) * scale_v
    pe = positional_encode(x, cfg.L_pe)
    h1, a1 = nn.mlp_forward(params, "hrfn.m1", np.concatenate([pe, f_v, f_r, f_g], axis=1),
                            len(sizes["m1"]) - 1, final_relu=True)
    emb = np.concatenate([h1, w_r * f_r], axis=1)
    h2, a2 = nn.mlp_forward(params, "hrfn.m2", np.concatenate([emb, w_v * f_v], axis=1),
                            len(sizes["m2"]) - 1, final_relu=True)
    h3, a3 = nn.mlp_forward(params, "hrfn.m3", h2, len(sizes["m3"]) - 1, final_relu=True)
    d, dnorm = view_direction(x, x_c)
    logits, a4 = nn.mlp_forward(params, "hrfn.m4", np.concatenate([h3, d], axis=1),
                                len(sizes["m4"]) - 1)
    colors = nn.sigmoid(logits).reshape(n, cfg.k, 3)
    cache = dict(x=x, f_v=f_v, f_r=f_r, n_g_batched=f_g, a1=a1, a2=a2, a3=a3, a4=a4,
                 d=d, dnorm=dnorm, w_r=w_r, w_v=w_v, scale_r=scale_r, scale_v=scale_v,
                 colors=colors, h1_dim=h1.shape[1], emb=emb)
    return HRFNOutput(colors, cache)


def hrfn_backward(params, cfg: HRFNConfig, out: HRFNOutput, d_colors, grads):
    """Accumulate parameter grads into ``grads``; return input grads ``x, f_v, f_r, f_g``.

    ``f_g`` gradients are summed over anchors (the global code is shared).
    """
    c = out.cache
    n = len(c["x"])
    d_colors = np.asarray(d_colors, dtype=np.float64)
    if d_colors.shape != out.colors.shape:
        raise InvalidShape(f"color gradient shape {d_colors.shape} != {out.colors.shape}")
    sizes = cfg.layer_sizes()
    col = c["colors"]
    d_logits = (d_colors * col * (1 - col)).reshape(n, -1)
    d_in4 = nn.mlp_backward(params, "hrfn.m4", c["a4"], d_logits, len(sizes["m4"]) - 1, grads)
    h3_dim = sizes["m3"][-1]
    d_h3, d_dir = d_in4[:, :h3_dim], d_in4[:, h3_dim:]
    d_h2 = nn.mlp_backward(params, "hrfn.m3", c["a3"], d_h3, len(sizes["m3"]) - 1, grads,
                           final_relu=True)
    d_in2 = nn.mlp_backward(params, "hrfn.m2", c["a2"], d_h2, len(sizes["m2"]) - 1, grads,
                            final_relu=True)
    emb_dim = c["emb"].shape[1]
    d_emb, d_fv_res = d_in2[:, :emb_dim], d_in2[:, emb_dim:]
    h1_dim = c["h1_dim"]
    d_h1, d_fr_res = d_emb[:, :h1_dim], d_emb[:, h1_dim:]
    nn._acc(grads, "hrfn.omega_r", np.array(np.sum(d_fr_res * c["f_r"]) * c["scale_r"]))
    nn._acc(grads, "hrfn.omega_v", np.array(np.sum(d_fv_res * c["f_v"]) * c["scale_v"]))
    d_in1 = nn.mlp_backward(params, "hrfn.m1", c["a1"], d_h1, len(sizes["m1"]) - 1, grads,
                            final_relu=True)
    pe_dim = cfg.pe_dim
    o1, o2, o3 = pe_dim, pe_dim + cfg.n_v, pe_dim + cfg.n_v + cfg.n_r
    d_x = positional_encode_backward(c["x"], cfg.L_pe, d_in1[:, :o1])
    d_x = d_x + view_direction_backward(c["d"], c["dnorm"], d_dir)
    d_fv = d_in1[:, o1:o2] + c["w_v"] * d_fv_res
    d_fr = d_in1[:, o2:o3] + c["w_r"] * d_fr_res
    d_fg = d_in1[:, o3:].sum(axis=0)
    return dict(x=d_x, f_v=d_fv, f_r=d_fr, f_g=d_fg)
