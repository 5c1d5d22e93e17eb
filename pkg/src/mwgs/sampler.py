"""Micro-macro wavelet-based sampling of refined appearance features.

The feature map is cut into ``2M + 2`` channel chunks.  At stage ``m`` the
chunks ``2m`` and ``2m + 1`` (zero-based) are expanded into ``4**m``
wavelet-packet sub-bands, read through a narrow frustum (additive jitter
bounded by ``r_narrow``) and a broad frustum (radial multiplicative jitter
bounded by ``R = max(R_max / dist, R_min)``), fused with per-anchor softmax
weights and concatenated into ``f_r``.

All functions are vectorized over anchors.  Positions are continuous
coordinates in which integer values hit texel centres; level ``m`` uses a
pure ``2**-m`` scaling of level-0 coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfig, InvalidGeometry, InvalidShape, InvalidState
from .scene import NEAR, Camera
from .wavelet import HAAR, FilterPair, wavelet_packet, wavelet_packet_backward


@dataclass(frozen=True)
class FrustumConfig:
    r_narrow: float = 1.5
    R_max: float = 32.0
    R_min: float = 2.0

    def __post_init__(self):
        if not (self.r_narrow > 0 and self.R_max > 0 and self.R_min > 0):
            raise InvalidConfig("frustum radii must be positive")


@dataclass(frozen=True)
class SamplerConfig:
    M: int = 1
    k_s: int = 1
    frustum: FrustumConfig = FrustumConfig()
    filters: FilterPair = HAAR

    @property
    def n_logits(self) -> int:
        return sum(4**m for m in range(self.M + 1))

    def stage_slice(self, m) -> slice:
        start = (4**m - 1) // 3
        return slice(start, start + 4**m)


# --------------------------------------------------------------------------
# pyramid


def split_feature_map(fmap, M):
    fmap = np.asarray(fmap, dtype=np.float64)
    n = 2 * M + 2
    if fmap.shape[0] % n:
        raise InvalidConfig(f"n_r = {fmap.shape[0]} is not divisible by 2M+2 = {n}")
    return np.split(fmap, n, axis=0)


@dataclass
class FeaturePyramid:
    chunks: list
    narrow: list  # per stage: (4**m, C, h, w)
    broad: list

    @property
    def M(self):
        return len(self.narrow) - 1


def build_pyramid(chunks, M, filters: FilterPair = HAAR) -> FeaturePyramid:
    if len(chunks) != 2 * M + 2:
        raise InvalidShape(f"expected {2 * M + 2} chunks, got {len(chunks)}")
    narrow, broad = [], []
    for m in range(M + 1):
        narrow.append(np.stack(wavelet_packet(chunks[2 * m], m, filters)))
        broad.append(np.stack(wavelet_packet(chunks[2 * m + 1], m, filters)))
    return FeaturePyramid(list(chunks), narrow, broad)


def build_pyramid_backward(d_narrow, d_broad, filters: FilterPair = HAAR):
    """Gradient of the concatenated feature map from per-stage sub-band gradients."""
    out = []
    for m, (dn, db) in enumerate(zip(d_narrow, d_broad)):
        out.append(wavelet_packet_backward(list(dn), m, filters))
        out.append(wavelet_packet_backward(list(db), m, filters))
    return np.concatenate(out, axis=0)


# --------------------------------------------------------------------------
# projection and bilinear reads


def project_to_map(x, cam: Camera, map_hw, m=0):
    """Map coordinates ``(N, 2)`` of world points, a visibility mask and the Jacobian.

    Points at or behind the near plane are flagged invisible; their
    coordinates are meaningless.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    W = cam.rotation
    t = (x - cam.position) @ W.T
    visible = t[:, 2] > NEAR
    z = np.where(visible, t[:, 2], 1.0)
    scale = 2.0**-m
    su = scale * map_hw[1] / cam.width
    sv = scale * map_hw[0] / cam.height
    p = np.stack([su * (cam.fx * t[:, 0] / z + cam.cx),
                  sv * (cam.fy * t[:, 1] / z + cam.cy)], axis=-1)
    jac_t = np.zeros((len(x), 2, 3))
    jac_t[:, 0, 0] = su * cam.fx / z
    jac_t[:, 0, 2] = -su * cam.fx * t[:, 0] / z**2
    jac_t[:, 1, 1] = sv * cam.fy / z
    jac_t[:, 1, 2] = -sv * cam.fy * t[:, 1] / z**2
    return p, visible, jac_t @ W


def _axis(c, n):
    cc = np.clip(c, 0.0, n - 1)
    if n == 1:
        i0 = np.zeros(c.shape, dtype=np.int64)
        return i0, i0, np.zeros_like(c), np.zeros_like(c)
    i0 = np.minimum(np.floor(cc).astype(np.int64), n - 2)
    frac = cc - i0
    live = ((c > 0.0) & (c < n - 1)).astype(np.float64)
    return i0, i0 + 1, frac, live


def bilinear(maps, pos):
    """Clamp-to-edge bilinear reads.

    ``maps``: (B, C, h, w); ``pos``: (..., 2) as (u, v).  Returns values of
    shape (..., B, C) and a cache for :func:`bilinear_backward`.
    """
    h, w = maps.shape[-2:]
    x0, x1, fx, lx = _axis(pos[..., 0], w)
    y0, y1, fy, ly = _axis(pos[..., 1], h)
    I00 = np.moveaxis(maps[:, :, y0, x0], (0, 1), (-2, -1))
    I01 = np.moveaxis(maps[:, :, y0, x1], (0, 1), (-2, -1))
    I10 = np.moveaxis(maps[:, :, y1, x0], (0, 1), (-2, -1))
    I11 = np.moveaxis(maps[:, :, y1, x1], (0, 1), (-2, -1))
    fx_, fy_ = fx[..., None, None], fy[..., None, None]
    top = (1 - fx_) * I00 + fx_ * I01
    bot = (1 - fx_) * I10 + fx_ * I11
    val = (1 - fy_) * top + fy_ * bot
    cache = (maps.shape, x0, x1, y0, y1, fx, fy, lx, ly, I00, I01, I10, I11)
    return val, cache


def bilinear_backward(cache, dval):
    """Returns ``(dmaps, dpos)`` for upstream ``dval`` of shape (..., B, C)."""
    shape, x0, x1, y0, y1, fx, fy, lx, ly, I00, I01, I10, I11 = cache
    fx_, fy_ = fx[..., None, None], fy[..., None, None]
    du = np.sum(dval * ((1 - fy_) * (I01 - I00) + fy_ * (I11 - I10)), axis=(-2, -1)) * lx
    dv = np.sum(dval * ((1 - fx_) * I10 + fx_ * I11 - (1 - fx_) * I00 - fx_ * I01),
                axis=(-2, -1)) * ly
    dmaps = np.zeros(shape)
    # (B, C, ...) layout for scattering
    g = np.moveaxis(dval, (-2, -1), (0, 1))
    for yi, xi, wt in ((y0, x0, (1 - fy) * (1 - fx)), (y0, x1, (1 - fy) * fx),
                       (y1, x0, fy * (1 - fx)), (y1, x1, fy * fx)):
        flat = (yi * shape[-1] + xi).ravel()
        contrib = (g * wt).reshape(shape[0], shape[1], -1)
        np.add.at(dmaps.reshape(shape[0], shape[1], -1), (slice(None), slice(None), flat), contrib)
    return dmaps, np.stack([du, dv], axis=-1)


# --------------------------------------------------------------------------
# frustum positions


def narrow_positions(p, nc, r):
    """``p``: (N, 2); ``nc``: (N, k_s, 2) -> (N, k_s, 2)."""
    return p[:, None, :] + r * np.tanh(nc)


def broad_radius(x, x_c, R_max, R_min):
    dist = np.linalg.norm(np.atleast_2d(x) - x_c, axis=-1)
    if np.any(dist <= 0):
        raise InvalidGeometry("anchor coincides with the camera centre")
    return np.maximum(R_max / dist, R_min), dist


def broad_positions(p, bc, R):
    """Radial multiplicative jitter ``(1 + R / |p| * tanh(bc)) * p``."""
    norm = np.linalg.norm(p, axis=-1)
    safe = np.where(norm > 0, norm, 1.0)
    direction = np.where((norm > 0)[:, None], p / safe[:, None], 0.0)
    return p[:, None, :] + (R[:, None, None] * np.tanh(bc)) * direction[:, None, :]


def sample_narrow(p, submap, nc, r):
    """Average of ``k_s`` narrow-frustum reads of one ``(C, h, w)`` map at ``p``."""
    pos = narrow_positions(np.atleast_2d(p), np.atleast_3d(nc).reshape(1, -1, 2), r)
    val, _ = bilinear(np.asarray(submap)[None], pos)
    return val.mean(axis=1)[0, 0]


def sample_broad(p, submap, bc, x_i, x_c, R_max, R_min):
    R, _ = broad_radius(x_i, x_c, R_max, R_min)
    pos = broad_positions(np.atleast_2d(p), np.asarray(bc).reshape(1, -1, 2), R)
    val, _ = bilinear(np.asarray(submap)[None], pos)
    return val.mean(axis=1)[0, 0]


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def fuse_stage(samples, logits):
    """``samples``: (N, J, C); ``logits``: (N, J).  Softmax-weighted sum over J."""
    samples = np.asarray(samples, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if samples.shape[:2] != logits.shape:
        raise InvalidShape(f"{samples.shape[1]} samples but {logits.shape[-1]} weights")
    w = softmax(logits)
    return np.einsum("nj,njc->nc", w, samples), w


def fuse_stage_backward(samples, w, dout):
    d_samples = w[:, :, None] * dout[:, None, :]
    dw = np.einsum("njc,nc->nj", samples, dout)
    d_logits = w * (dw - np.sum(w * dw, axis=1, keepdims=True))
    return d_samples, d_logits


def assemble_refined(stage_outputs):
    """Concatenate ``[(f_n_0, f_b_0), ..., (f_n_M, f_b_M)]`` along channels."""
    if not stage_outputs or any(s is None for s in stage_outputs):
        raise InvalidState("every stage must be computed before assembly")
    return np.concatenate([np.concatenate(s, axis=-1) for s in stage_outputs], axis=-1)


# --------------------------------------------------------------------------
# full refined-feature path


@dataclass
class RefinedResult:
    f_r: np.ndarray  # (N, n_r)
    visible: np.ndarray  # (N,)
    cache: dict


def refine(fmap, xyz, cam: Camera, nc, bc, omega_n, omega_b, cfg: SamplerConfig) -> RefinedResult:
    """Refined feature ``f_r`` for every anchor at positions ``xyz`` seen from ``cam``."""
    xyz = np.atleast_2d(np.asarray(xyz, dtype=np.float64))
    n = len(xyz)
    fmap = np.asarray(fmap, dtype=np.float64)
    map_hw = fmap.shape[1:]
    pyr = build_pyramid(split_feature_map(fmap, cfg.M), cfg.M, cfg.filters)
    fr = cfg.frustum
    R, dist = broad_radius(xyz, cam.position, fr.R_max, fr.R_min)
    stages, cache_st = [], []
    visible = None
    for m in range(cfg.M + 1):
        p, vis, jac = project_to_map(xyz, cam, map_hw, m)
        visible = vis
        pos_n = narrow_positions(p, nc, fr.r_narrow)
        pos_b = broad_positions(p, bc, R)
        vn, cn = bilinear(pyr.narrow[m], pos_n)  # (N, k_s, J, C)
        vb, cb = bilinear(pyr.broad[m], pos_b)
        sn, sb = vn.mean(axis=1), vb.mean(axis=1)
        sl = cfg.stage_slice(m)
        fn, wn = fuse_stage(sn, omega_n[:, sl])
        fb, wb = fuse_stage(sb, omega_b[:, sl])
        stages.append((fn, fb))
        cache_st.append(dict(p=p, jac=jac, cn=cn, cb=cb, sn=sn, sb=sb, wn=wn, wb=wb,
                             pyr_shape=pyr.narrow[m].shape))
    f_r = assemble_refined(stages) * visible[:, None]
    cache = dict(stages=cache_st, xyz=xyz, R=R, dist=dist, nc=nc, bc=bc, cam=cam,
                 cfg=cfg, n=n, fmap_shape=fmap.shape, pyr=pyr)
    return RefinedResult(f_r, visible, cache)


def refine_backward(res: RefinedResult, d_fr):
    """Gradients for the feature map, jitter, fusion logits and anchor positions."""
    c = res.cache
    cfg: SamplerConfig = c["cfg"]
    fr = cfg.frustum
    n, C = c["n"], c["fmap_shape"][0] // (2 * cfg.M + 2)
    d_fr = np.asarray(d_fr, dtype=np.float64) * res.visible[:, None]
    nc, bc, R, xyz, cam = c["nc"], c["bc"], c["R"], c["xyz"], c["cam"]
    k_s = nc.shape[1]
    d_nc = np.zeros_like(nc)
    d_bc = np.zeros_like(bc)
    d_on = np.zeros((n, cfg.n_logits))
    d_ob = np.zeros((n, cfg.n_logits))
    d_xyz = np.zeros((n, 3))
    d_R = np.zeros(n)
    d_narrow, d_broad = [], []
    tn, tb = np.tanh(nc), np.tanh(bc)
    for m, st in enumerate(c["stages"]):
        off = 2 * m * C
        dfn, dfb = d_fr[:, off:off + C], d_fr[:, off + C:off + 2 * C]
        sl = cfg.stage_slice(m)
        dsn, d_on[:, sl] = fuse_stage_backward(st["sn"], st["wn"], dfn)
        dsb, d_ob[:, sl] = fuse_stage_backward(st["sb"], st["wb"], dfb)
        dvn = np.broadcast_to(dsn[:, None] / k_s, (n, k_s) + dsn.shape[1:])
        dvb = np.broadcast_to(dsb[:, None] / k_s, (n, k_s) + dsb.shape[1:])
        dmap_n, dpos_n = bilinear_backward(st["cn"], dvn)
        dmap_b, dpos_b = bilinear_backward(st["cb"], dvb)
        d_narrow.append(dmap_n)
        d_broad.append(dmap_b)
        # narrow: pos = p + r tanh(nc)
        d_nc += dpos_n * fr.r_narrow * (1 - tn**2)
        dp = dpos_n.sum(axis=1)
        # broad: pos = p + R tanh(bc) * p / |p|
        p = st["p"]
        norm = np.linalg.norm(p, axis=-1)
        nz = norm > 0
        safe = np.where(nz, norm, 1.0)
        direction = np.where(nz[:, None], p / safe[:, None], 0.0)
        d_bc += dpos_b * R[:, None, None] * direction[:, None, :] * (1 - tb**2)
        d_R += np.sum(dpos_b * tb * direction[:, None, :], axis=(1, 2))
        d_dir = np.sum(dpos_b * R[:, None, None] * tb, axis=1)
        d_dir_p = (d_dir - direction * np.sum(direction * d_dir, axis=-1, keepdims=True)) / safe[:, None]
        dp = dp + dpos_b.sum(axis=1) + np.where(nz[:, None], d_dir_p, 0.0)
        d_xyz += np.einsum("ni,nij->nj", dp, st["jac"])
    # R = max(R_max / dist, R_min)
    active = fr.R_max / c["dist"] > fr.R_min
    d_dist = np.where(active, -fr.R_max / c["dist"] ** 2, 0.0) * d_R
    d_xyz += d_dist[:, None] * (xyz - cam.position) / c["dist"][:, None]
    vis = res.visible[:, None]
    d_fmap = build_pyramid_backward(d_narrow, d_broad, cfg.filters)
    return dict(fmap=d_fmap, nc=d_nc * vis[:, :, None],
                bc=d_bc * vis[:, :, None], omega_n=d_on * vis, omega_b=d_ob * vis,
                xyz=d_xyz * vis)


def sample_positions(xyz, cam: Camera, map_hw, nc, bc, cfg: SamplerConfig):
    """All read positions in level-0 map coordinates, one row per (sub-band) read."""
    xyz = np.atleast_2d(xyz)
    R, _ = broad_radius(xyz, cam.position, cfg.frustum.R_max, cfg.frustum.R_min)
    out = []
    for m in range(cfg.M + 1):
        p, vis, _ = project_to_map(xyz, cam, map_hw, m)
        for pos in (narrow_positions(p, nc, cfg.frustum.r_narrow), broad_positions(p, bc, R)):
            pts = pos[vis].reshape(-1, 2) * 2.0**m
            out.extend([pts] * 4**m)
    return np.concatenate(out) if out else np.zeros((0, 2))


def attention_histogram(xyz, cam: Camera, map_hw, nc, bc, cfg: SamplerConfig):
    """Per-texel count of sample reads at feature-map resolution."""
    pts = sample_positions(xyz, cam, map_hw, nc, bc, cfg)
    h, w = map_hw
    hist = np.zeros((h, w), dtype=np.int64)
    if len(pts):
        u = np.clip(np.rint(pts[:, 0]).astype(np.int64), 0, w - 1)
        v = np.clip(np.rint(pts[:, 1]).astype(np.int64), 0, h - 1)
        np.add.at(hist, (v, u), 1)
    return hist
