"""Numerical self-checks shared by ``mwgs selftest`` and the test suite.

Each check returns a :class:`CheckResult` with the largest error it saw.
Gradient errors are ``max|numeric - analytic| / max|numeric|`` per
parameter array, maximized over arrays.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from . import hrfn as H
from .losses import LossWeights, total_loss
from .rasterizer import ALPHA_MAX, _pixel_grid, _tile_alpha, composite_pixel, project_gaussians, \
    rasterize, rasterize_backward
from .sampler import SamplerConfig, refine, refine_backward
from .scene import Camera, build_covariance, build_covariance_backward, sigmoid
from .wavelet import HAAR, FilterPair, SubbandSet, dwt2, dwt2_backward, get_filters, idwt2, wavelet_packet

CORRUPT_ENV = "MWGS_SELFTEST_CORRUPT"


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return (f"{status} {self.name:8s} max_error={self.max_error:.3e} "
                f"tol={self.tolerance:.0e} {self.seconds:.2f}s{extra}")


def numeric_grad(f, arr, eps, skip=None):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place).

    ``skip(plus_state, minus_state)`` may veto an entry; ``f`` then must
    return ``(value, state)``.  Vetoed entries come back as NaN.
    """
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        if skip is not None:
            (hi, s_hi), (lo, s_lo) = hi, lo
            if skip(s_hi, s_lo):
                out.reshape(-1)[i] = np.nan
                continue
        out.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return out


def rel_error(num, ana):
    num, ana = np.asarray(num), np.asarray(ana)
    ok = np.isfinite(num)
    if not ok.any():
        return 0.0
    scale = max(float(np.abs(num[ok]).max()), 1e-12)
    return float(np.abs(num[ok] - ana[ok]).max() / scale)


# --------------------------------------------------------------------------
# wavelet


def corrupted(filters: FilterPair) -> FilterPair:
    """A deliberately broken filter bank for exercising the failure path."""
    low = (filters.low[0] * 1.01,) + tuple(filters.low[1:])
    return FilterPair(low, filters.high, filters.name + "-corrupt")


def check_dwt(n_maps=200, seed=0, filters: FilterPair = HAAR, tol=1e-10):
    rng = np.random.default_rng(seed)
    recon = energy = adjoint = 0.0
    count_ok = True
    for _ in range(n_maps):
        c = int(rng.integers(1, 5))
        h, w = 2 * rng.integers(1, 17, size=2)
        F = rng.normal(size=(c, h, w))
        s = dwt2(F, filters)
        recon = max(recon, float(np.abs(idwt2(s, filters) - F).max()))
        e0 = float(np.sum(F * F))
        energy = max(energy, abs(s.energy() - e0) / e0)
        G = [rng.normal(size=b.shape) for b in s.as_list()]
        lhs = sum(float(np.sum(b * g)) for b, g in zip(s.as_list(), G))
        rhs = float(np.sum(F * dwt2_backward(SubbandSet(*G), filters)))
        adjoint = max(adjoint, abs(lhs - rhs) / max(abs(lhs), 1e-12))
        m = int(rng.integers(0, 3))
        if h % 2**m == 0 and w % 2**m == 0:
            count_ok &= len(wavelet_packet(F, m, filters)) == 4**m
    err = max(recon, energy, adjoint)
    passed = recon <= 1e-12 and energy <= tol and adjoint <= tol and count_ok
    detail = f"recon={recon:.1e} energy={energy:.1e} adjoint={adjoint:.1e} packets={'ok' if count_ok else 'bad'}"
    return CheckResult("dwt", passed, err, tol, detail=detail)


# --------------------------------------------------------------------------
# rasterizer


def _raster_signature(buf):
    """Discrete state of a render: splat order plus cutoff, clamp and saturation flags."""
    sp = buf.splats
    parts = [sp.source.tobytes()]
    for y0, y1, x0, x1, idx in buf.tiles:
        parts.append(idx.tobytes())
        if len(idx):
            px, py = _pixel_grid(y0, y1, x0, x1, sp.mean2d.dtype)
            q = _tile_alpha(sp, idx, px, py)
            parts += [q["inside"].tobytes(), q["included"].tobytes(),
                      (q["raw"] >= ALPHA_MAX).tobytes()]
    return b"".join(parts)


def raster_scene(seed=0, n=5, size=16):
    rng = np.random.default_rng(seed)
    cam = Camera.look_at([0, -3, 0.3], [0, 0, 0], [0, 0, 1], size, size, 50)
    return cam, dict(
        mean=rng.normal(scale=0.3, size=(n, 3)), quat=rng.normal(size=(n, 4)),
        log_scale=np.log(rng.uniform(0.1, 0.3, (n, 3))), opacity_logit=rng.normal(size=n),
        color=rng.uniform(size=(n, 3)),
    ), rng.normal(size=(size, size, 3))


def check_raster(seed=0, tol=1e-3, eps=1e-5):
    cam, args, G = raster_scene(seed)

    def render():
        covs = build_covariance(args["quat"], np.exp(args["log_scale"]))
        buf = rasterize(cam, args["mean"], covs, sigmoid(args["opacity_logit"]), args["color"],
                        tile_size=4)
        return buf, covs

    buf, covs = render()
    g = rasterize_backward(cam, buf, covs, G)
    s = np.exp(args["log_scale"])
    dq, ds = build_covariance_backward(args["quat"], s, g.cov)
    op = sigmoid(args["opacity_logit"])
    analytic = dict(mean=g.mean, quat=dq, log_scale=ds * s,
                    opacity_logit=g.opacity * op * (1 - op), color=g.color)
    base = _raster_signature(buf)

    def f():
        b, _ = render()
        return float(np.sum(b.image * G)), _raster_signature(b)

    def skip(s_hi, s_lo):
        return s_hi != base or s_lo != base

    err = max(rel_error(numeric_grad(f, args[k], eps, skip), analytic[k]) for k in args)
    closed = check_two_splat()
    passed = err <= tol and closed <= 1e-12
    return CheckResult("raster", passed, max(err, closed), tol,
                       detail=f"fd={err:.1e} two_splat={closed:.1e}")


def check_two_splat(c1=(0.9, 0.2, 0.1), c2=(0.1, 0.3, 0.8)):
    """Two half-opaque splats on the optical axis: the centre pixel is 0.5 c1 + 0.25 c2."""
    cam = Camera(16, 16, 20.0, 20.0, 8.0, 8.0, np.array([1.0, 0, 0, 0]), np.zeros(3))
    means = np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 3.0]])
    covs = np.stack([np.eye(3) * 0.01] * 2)
    splats = project_gaussians(cam, means, covs, np.array([0.5, 0.5]), np.array([c1, c2]))
    got = composite_pixel(splats, (8.0, 8.0))
    want = 0.5 * np.asarray(c1) + 0.25 * np.asarray(c2)
    return float(np.abs(got - want).max())


# --------------------------------------------------------------------------
# sampler, HRFN, loss


def check_sampler(seed=1, tol=1e-3, eps=1e-6, Ms=(0, 1, 2)):
    rng = np.random.default_rng(seed)
    cam = Camera.look_at([0, -3, 0.3], [0, 0, 0], [0, 0, 1], 16, 16, 50)
    worst = 0.0
    for M in Ms:
        cfg = SamplerConfig(M=M, k_s=2)
        n, nr = 3, 4 * (2 * M + 2)
        args = dict(fmap=rng.normal(size=(nr, 8, 8)), xyz=rng.normal(scale=0.2, size=(n, 3)),
                    nc=rng.normal(size=(n, 2, 2)), bc=rng.normal(size=(n, 2, 2)),
                    omega_n=rng.normal(size=(n, cfg.n_logits)),
                    omega_b=rng.normal(size=(n, cfg.n_logits)))
        G = rng.normal(size=(n, nr))

        def f():
            return float(np.sum(refine(cam=cam, cfg=cfg, **args).f_r * G))

        ana = refine_backward(refine(cam=cam, cfg=cfg, **args), G)
        worst = max(worst, *(rel_error(numeric_grad(f, args[k], eps), ana[k]) for k in args))
    return CheckResult("sampler", worst <= tol, worst, tol)


def small_hrfn_config():
    hidden = (("m1", (32, 24)), ("m2", (24, 16)), ("m3", (12, 12)), ("m4", (12,)))
    return H.HRFNConfig(k=2, n_v=12, n_r=8, n_g=4, L_pe=2, hidden=hidden)


def check_hrfn(seed=2, tol=1e-4, eps=1e-6):
    rng = np.random.default_rng(seed)
    cfg = small_hrfn_config()
    P = {}
    H.init_params(P, cfg, rng)
    for k in P:
        if k.endswith(".b"):
            P[k] = rng.normal(scale=0.1, size=P[k].shape)
    n = 3
    inputs = dict(x=rng.normal(size=(n, 3)), f_v=rng.normal(size=(n, 12)),
                  f_r=rng.normal(size=(n, 8)), f_g=rng.normal(size=4))
    x_c = np.array([0.0, -3.0, 0.5])
    G = rng.normal(size=(n, 2, 3))

    def forward():
        return H.hrfn_forward(P, cfg, inputs["x"], inputs["f_v"], inputs["f_r"], inputs["f_g"], x_c)

    def f():
        return float(np.sum(forward().colors * G))

    grads = {}
    gi = H.hrfn_backward(P, cfg, forward(), G, grads)
    worst = max(rel_error(numeric_grad(f, inputs[k], eps), gi[k]) for k in inputs)
    for k in sorted(P):
        worst = max(worst, rel_error(numeric_grad(f, P[k], eps), grads[k]))
    return CheckResult("hrfn", worst <= tol, worst, tol)


def check_loss(seed=3, tol=1e-4, eps=1e-6, size=14):
    rng = np.random.default_rng(seed)
    I_r = rng.uniform(size=(size, size, 3))
    I_gt = rng.uniform(size=(size, size, 3))
    vm = rng.uniform(0.1, 0.9, size=(size, size))
    w = LossWeights()
    res = total_loss(I_r, I_gt, vm, w)

    def f():
        return total_loss(I_r, I_gt, vm, w).total

    err = max(rel_error(numeric_grad(f, I_r, eps), res.d_image),
              rel_error(numeric_grad(f, vm, eps), res.d_vm))
    return CheckResult("loss", err <= tol, err, tol)


CHECKS = {
    "dwt": check_dwt,
    "raster": check_raster,
    "sampler": check_sampler,
    "hrfn": check_hrfn,
    "loss": check_loss,
}


def run(names=None, corrupt=None):
    """Run the named checks (all by default).  ``corrupt='dwt'`` breaks the filter bank."""
    corrupt = corrupt if corrupt is not None else os.environ.get(CORRUPT_ENV, "")
    results = []
    for name in names or CHECKS:
        t0 = time.perf_counter()
        if name == "dwt":
            base = get_filters("haar")
            r = check_dwt(filters=corrupted(base) if corrupt == "dwt" else base)
        else:
            r = CHECKS[name]()
        r.seconds = time.perf_counter() - t0
        results.append(r)
    return results
