"""Tile-based splat rasterizer with analytic reverse-mode gradients.

A splat contributes to pixel ``p`` only where its Mahalanobis power
``d^T cov2d^-1 d`` is at most ``CUTOFF_POWER`` (the 3-sigma ellipse).  Tile
binning uses the exact axis-aligned box of that ellipse plus a margin, so a
tiled render and a single-tile render perform the same floating point
operations per pixel and agree bitwise.

Pixel ``(row i, col j)`` sits at continuous coordinate ``(u, v) = (j, i)``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameter, InvalidShape
from .scene import NEAR, Camera, GaussianPrimitive

DILATION = 0.3
ALPHA_MAX = 0.99
T_MIN = 1e-4
CUTOFF_POWER = 9.0
_BOX_MARGIN = 1e-3


@dataclass
class Splats:
    """Projected Gaussians, sorted front to back.

    ``source`` indexes the input Gaussian array; ``anchor_id``/``offset_id``
    break depth ties.  ``t_cam`` and ``jw`` are kept for the backward pass.
    """

    mean2d: np.ndarray  # (S, 2)
    cov2d: np.ndarray  # (S, 2, 2), dilation included
    conic: np.ndarray  # (S, 3): inverse cov entries (a, b, c)
    depth: np.ndarray  # (S,)
    opacity: np.ndarray  # (S,)
    color: np.ndarray  # (S, 3)
    source: np.ndarray  # (S,) int
    anchor_id: np.ndarray
    offset_id: np.ndarray
    t_cam: np.ndarray  # (S, 3)
    jw: np.ndarray  # (S, 2, 3) = J @ W
    n_input: int = 0

    def __len__(self):
        return len(self.depth)

    @property
    def radius(self):
        """Half extents of the 3-sigma box, ``(S, 2)`` as (u, v)."""
        var = np.stack([self.cov2d[:, 0, 0], self.cov2d[:, 1, 1]], axis=-1)
        return np.sqrt(CUTOFF_POWER * var) + _BOX_MARGIN


@dataclass
class RenderBuffers:
    image: np.ndarray  # (H, W, 3)
    transmittance: np.ndarray  # (H, W) final T per pixel
    depth: np.ndarray  # (H, W) alpha-weighted depth
    tiles: list  # [(y0, y1, x0, x1, splat index array)]
    splats: Splats
    background: np.ndarray
    tile_size: int
    threads: int = 1


def project_gaussians(cam: Camera, means, covs, opacities, colors,
                      anchor_id=None, offset_id=None, dtype=np.float64) -> Splats:
    """EWA projection of a batch of Gaussians, culling and depth sorting."""
    means = np.asarray(means, dtype=dtype).reshape(-1, 3)
    covs = np.asarray(covs, dtype=dtype).reshape(-1, 3, 3)
    opacities = np.asarray(opacities, dtype=dtype).reshape(-1)
    colors = np.asarray(colors, dtype=dtype).reshape(-1, 3)
    n = len(means)
    if anchor_id is None:
        anchor_id = np.arange(n)
    if offset_id is None:
        offset_id = np.zeros(n, dtype=np.int64)
    anchor_id = np.asarray(anchor_id).reshape(-1)
    offset_id = np.asarray(offset_id).reshape(-1)

    W = cam.rotation.astype(dtype)
    t = (means - cam.position.astype(dtype)) @ W.T
    front = t[:, 2] > NEAR
    z = np.where(front, t[:, 2], 1.0)
    x, y = t[:, 0], t[:, 1]
    J = np.zeros((n, 2, 3), dtype=dtype)
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / z**2
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / z**2
    jw = J @ W
    cov2d = jw @ covs @ np.swapaxes(jw, -1, -2)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=-1)

    A, B, C = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = A * C - B * B
    conic = np.stack([C / det, -B / det, A / det], axis=-1)
    rad = np.sqrt(CUTOFF_POWER * np.stack([A, C], axis=-1)) + _BOX_MARGIN
    onscreen = (
        (mean2d[:, 0] + rad[:, 0] >= 0) & (mean2d[:, 0] - rad[:, 0] <= cam.width - 1)
        & (mean2d[:, 1] + rad[:, 1] >= 0) & (mean2d[:, 1] - rad[:, 1] <= cam.height - 1)
    )
    keep = np.nonzero(front & onscreen & (det > 0))[0]
    order = keep[np.lexsort((offset_id[keep], anchor_id[keep], t[keep, 2]))]
    return Splats(
        mean2d=mean2d[order], cov2d=cov2d[order], conic=conic[order],
        depth=t[order, 2], opacity=opacities[order], color=colors[order],
        source=order, anchor_id=anchor_id[order], offset_id=offset_id[order],
        t_cam=t[order], jw=jw[order], n_input=n,
    )


def project_gaussian(cam: Camera, g: GaussianPrimitive):
    """Project one Gaussian; returns a single-element ``Splats`` or ``None`` if culled."""
    color = g.color if g.color is not None else np.zeros(3)
    s = project_gaussians(cam, g.mean[None], g.cov[None], [g.opacity], [color])
    return s if len(s) else None


# --------------------------------------------------------------------------
# forward


def _tile_alpha(splats: Splats, idx, px, py):
    """Per (splat, pixel) quantities for one tile."""
    mean = splats.mean2d[idx]
    con = splats.conic[idx]
    dx = px[None, :] - mean[:, 0:1]
    dy = py[None, :] - mean[:, 1:2]
    power = con[:, 0:1] * dx * dx + 2.0 * con[:, 1:2] * dx * dy + con[:, 2:3] * dy * dy
    inside = power <= CUTOFF_POWER
    g = np.exp(-0.5 * power)
    raw = splats.opacity[idx][:, None] * g
    alpha = np.where(inside, np.minimum(raw, ALPHA_MAX), 0.0)
    one_minus = 1.0 - alpha
    t_after = np.cumprod(one_minus, axis=0)
    included = t_after >= T_MIN
    t_before = np.empty_like(t_after)
    t_before[0] = 1.0
    t_before[1:] = t_after[:-1]
    w = np.where(included, alpha * t_before, 0.0)
    t_final = np.cumprod(np.where(included, one_minus, 1.0), axis=0)[-1]
    return dict(dx=dx, dy=dy, g=g, inside=inside, raw=raw, alpha=alpha,
                included=included, t_before=t_before, w=w, t_final=t_final)


def composite(splats: Splats, idx, px, py, background):
    """Front-to-back compositing of ``splats[idx]`` at pixel coordinates ``(px, py)``."""
    npix = len(px)
    bg = np.asarray(background, dtype=splats.mean2d.dtype)
    if len(idx) == 0:
        return np.broadcast_to(bg, (npix, 3)).copy(), np.ones(npix), np.zeros(npix), None
    q = _tile_alpha(splats, idx, px, py)
    w = q["w"]
    color = np.cumsum(w[:, :, None] * splats.color[idx][:, None, :], axis=0)[-1]
    color = color + q["t_final"][:, None] * bg
    depth = np.cumsum(w * splats.depth[idx][:, None], axis=0)[-1]
    return color, q["t_final"], depth, q


def composite_pixel(splats: Splats, p, background=(0.0, 0.0, 0.0)):
    """Color of a single pixel at continuous coordinate ``p = (u, v)``."""
    color, _, _, _ = composite(splats, np.arange(len(splats)),
                               np.array([float(p[0])]), np.array([float(p[1])]), background)
    return color[0]


def _tiles(width, height, tile_size):
    for y0 in range(0, height, tile_size):
        for x0 in range(0, width, tile_size):
            yield y0, min(y0 + tile_size, height), x0, min(x0 + tile_size, width)


def _bin(splats: Splats, y0, y1, x0, x1):
    if len(splats) == 0:
        return np.zeros(0, dtype=np.int64)
    r = splats.radius
    m = splats.mean2d
    hit = ((m[:, 0] + r[:, 0] >= x0) & (m[:, 0] - r[:, 0] <= x1 - 1)
           & (m[:, 1] + r[:, 1] >= y0) & (m[:, 1] - r[:, 1] <= y1 - 1))
    return np.nonzero(hit)[0]


def _pixel_grid(y0, y1, x0, x1, dtype):
    ys, xs = np.meshgrid(np.arange(y0, y1, dtype=dtype), np.arange(x0, x1, dtype=dtype),
                         indexing="ij")
    return xs.ravel(), ys.ravel()


def render(cam: Camera, splats: Splats, background=(0.0, 0.0, 0.0), tile_size: int = 16,
           threads: int = 1) -> RenderBuffers:
    """Rasterize depth-sorted splats into an ``(H, W, 3)`` image."""
    H, W = cam.height, cam.width
    if H <= 0 or W <= 0:
        raise InvalidParameter("zero-size image")
    if tile_size < 1:
        raise InvalidParameter("tile_size must be >= 1")
    dtype = splats.mean2d.dtype
    bg = np.asarray(background, dtype=dtype)
    tiles = [(y0, y1, x0, x1, _bin(splats, y0, y1, x0, x1))
             for y0, y1, x0, x1 in _tiles(W, H, tile_size)]

    def work(tile):
        y0, y1, x0, x1, idx = tile
        px, py = _pixel_grid(y0, y1, x0, x1, dtype)
        color, tf, depth, _ = composite(splats, idx, px, py, bg)
        return color, tf, depth

    image = np.empty((H, W, 3), dtype=dtype)
    trans = np.empty((H, W), dtype=dtype)
    depth = np.empty((H, W), dtype=dtype)
    results = _map(work, tiles, threads)
    for (y0, y1, x0, x1, _), (color, tf, dep) in zip(tiles, results):
        image[y0:y1, x0:x1] = color.reshape(y1 - y0, x1 - x0, 3)
        trans[y0:y1, x0:x1] = tf.reshape(y1 - y0, x1 - x0)
        depth[y0:y1, x0:x1] = dep.reshape(y1 - y0, x1 - x0)
    return RenderBuffers(image, trans, depth, tiles, splats, bg, tile_size, threads)


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# backward


@dataclass
class SplatGrads:
    """Gradients w.r.t. the projected splats (sorted order)."""

    mean2d: np.ndarray
    conic: np.ndarray
    opacity: np.ndarray
    color: np.ndarray


@dataclass
class GaussianGrads:
    """Gradients w.r.t. the input Gaussians (input order; zero where culled)."""

    mean: np.ndarray
    cov: np.ndarray
    opacity: np.ndarray
    color: np.ndarray


def _tile_backward(splats: Splats, idx, px, py, bg, dC):
    q = _tile_alpha(splats, idx, px, py)
    col = splats.color[idx]
    w = q["w"]
    # contribution of everything behind splat i, background included
    contrib = w[:, :, None] * col[:, None, :]
    csum = np.cumsum(contrib, axis=0)
    behind = csum[-1][None] - csum + q["t_final"][None, :, None] * bg
    dcolor = np.einsum("sp,pc->sc", w, dC)
    d_alpha = (q["t_before"] * np.einsum("sc,pc->sp", col, dC)
               - np.einsum("spc,pc->sp", behind, dC) / (1.0 - q["alpha"]))
    d_alpha = np.where(q["included"], d_alpha, 0.0)
    live = q["inside"] & (q["raw"] < ALPHA_MAX)
    d_raw = np.where(live, d_alpha, 0.0)
    opac = splats.opacity[idx][:, None]
    d_opacity = np.sum(d_raw * q["g"], axis=1)
    d_power = -0.5 * q["g"] * opac * d_raw
    dx, dy = q["dx"], q["dy"]
    con = splats.conic[idx]
    d_conic = np.stack([
        np.sum(d_power * dx * dx, axis=1),
        np.sum(2.0 * d_power * dx * dy, axis=1),
        np.sum(d_power * dy * dy, axis=1),
    ], axis=-1)
    d_dx = d_power * (2.0 * con[:, 0:1] * dx + 2.0 * con[:, 1:2] * dy)
    d_dy = d_power * (2.0 * con[:, 1:2] * dx + 2.0 * con[:, 2:3] * dy)
    d_mean = -np.stack([d_dx.sum(axis=1), d_dy.sum(axis=1)], axis=-1)
    return d_mean, d_conic, d_opacity, dcolor


def render_backward(buf: RenderBuffers, grad_image) -> SplatGrads:
    """Gradients of ``sum(grad_image * image)`` w.r.t. every splat field."""
    grad_image = np.asarray(grad_image, dtype=buf.image.dtype)
    if grad_image.shape != buf.image.shape:
        raise InvalidParameter(
            f"grad_image shape {grad_image.shape} does not match image {buf.image.shape}")
    s = buf.splats
    dtype = buf.image.dtype
    out = SplatGrads(np.zeros((len(s), 2), dtype), np.zeros((len(s), 3), dtype),
                     np.zeros(len(s), dtype), np.zeros((len(s), 3), dtype))

    def work(tile):
        y0, y1, x0, x1, idx = tile
        if len(idx) == 0:
            return None
        px, py = _pixel_grid(y0, y1, x0, x1, dtype)
        dC = grad_image[y0:y1, x0:x1].reshape(-1, 3)
        return _tile_backward(s, idx, px, py, buf.background, dC)

    results = _map(work, buf.tiles, buf.threads)
    # fixed tile order keeps the reduction deterministic
    for tile, res in zip(buf.tiles, results):
        if res is None:
            continue
        idx = tile[4]
        out.mean2d[idx] += res[0]
        out.conic[idx] += res[1]
        out.opacity[idx] += res[2]
        out.color[idx] += res[3]
    return out


def project_backward(cam: Camera, splats: Splats, covs, g: SplatGrads) -> GaussianGrads:
    """Chain splat gradients through the EWA projection to 3D means and covariances."""
    n = splats.n_input
    covs = np.asarray(covs, dtype=np.float64).reshape(-1, 3, 3)
    src = splats.source
    cov3 = covs[src]
    cov2d = splats.cov2d
    A, B, C = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = A * C - B * B
    det2 = det * det
    da_, db_, dc_ = g.conic[:, 0], g.conic[:, 1], g.conic[:, 2]
    dA = (-C * C * da_ + B * C * db_ - B * B * dc_) / det2
    dB = (2 * B * C * da_ + (-det - 2 * B * B) * db_ + 2 * A * B * dc_) / det2
    dC = (-B * B * da_ + A * B * db_ - A * A * dc_) / det2
    G = np.empty((len(src), 2, 2))
    G[:, 0, 0] = dA
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * dB
    G[:, 1, 1] = dC
    jw = splats.jw
    d_cov3 = np.swapaxes(jw, -1, -2) @ G @ jw
    d_jw = 2.0 * G @ jw @ cov3
    Wm = cam.rotation
    dJ = d_jw @ Wm.T
    x, y, z = splats.t_cam[:, 0], splats.t_cam[:, 1], splats.t_cam[:, 2]
    fx, fy = cam.fx, cam.fy
    du, dv = g.mean2d[:, 0], g.mean2d[:, 1]
    dt = np.zeros((len(src), 3))
    dt[:, 0] = dJ[:, 0, 2] * (-fx / z**2) + du * fx / z
    dt[:, 1] = dJ[:, 1, 2] * (-fy / z**2) + dv * fy / z
    dt[:, 2] = (dJ[:, 0, 0] * (-fx / z**2) + dJ[:, 0, 2] * (2 * fx * x / z**3)
                + dJ[:, 1, 1] * (-fy / z**2) + dJ[:, 1, 2] * (2 * fy * y / z**3)
                - du * fx * x / z**2 - dv * fy * y / z**2)
    out = GaussianGrads(np.zeros((n, 3)), np.zeros((n, 3, 3)), np.zeros(n), np.zeros((n, 3)))
    out.mean[src] = dt @ Wm
    out.cov[src] = d_cov3
    out.opacity[src] = g.opacity
    out.color[src] = g.color
    return out


def rasterize(cam: Camera, means, covs, opacities, colors, anchor_id=None, offset_id=None,
              background=(0.0, 0.0, 0.0), tile_size=16, threads=1, dtype=np.float64):
    """Project and render in one call."""
    splats = project_gaussians(cam, means, covs, opacities, colors, anchor_id, offset_id, dtype)
    return render(cam, splats, background, tile_size, threads)


def rasterize_backward(cam: Camera, buf: RenderBuffers, covs, grad_image) -> GaussianGrads:
    return project_backward(cam, buf.splats, covs, render_backward(buf, grad_image))


def check_shapes(image, grad):
    if np.shape(image) != np.shape(grad):
        raise InvalidShape("shape mismatch")
