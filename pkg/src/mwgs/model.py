"""The full differentiable pipeline from parameters to a rendered image.

Per view: the appearance bundle of a reference image feeds the wavelet
sampler (refined feature ``f_r`` per anchor) and the HRFN, which colors the
``k`` children of every anchor; the children are expanded from the anchor
geometry and rasterized.  :meth:`Model.backward` walks the same chain in
reverse and returns gradients keyed like :attr:`Model.params`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import hrfn
from .config import RunConfig
from .encoder import AppearanceBundle, Encoder
from .errors import InvalidConfig, InvalidShape, MissingEntry
from .rasterizer import RenderBuffers, rasterize, rasterize_backward
from .sampler import FrustumConfig, SamplerConfig, attention_histogram, refine, refine_backward
from .scene import Anchor, expand_anchors, expand_anchors_backward
from .wavelet import get_filters

ANCHOR_KEYS = ("xyz", "log_lv", "offsets", "log_scales", "rotations", "opacity", "f_v",
               "nc", "bc", "omega_n", "omega_b")

_ANCHOR_GROUP = {
    "xyz": "means", "offsets": "offsets", "log_lv": "anchor_scale", "log_scales": "scales",
    "rotations": "rotations", "opacity": "opacity", "f_v": "features", "nc": "jitter",
    "bc": "jitter", "omega_n": "fusion", "omega_b": "fusion",
}

OVERRIDE_KEYS = ("f_g", "f_r", "omega_r", "omega_v")


def param_group(name: str) -> str:
    """Learning-rate group of a parameter key."""
    head, _, rest = name.partition(".")
    if head == "anchor":
        return _ANCHOR_GROUP[rest]
    if head == "hrfn":
        return "hrfn"
    if name.startswith("enc.grid."):
        return "grid"
    if head == "enc":
        return "encoder"
    raise MissingEntry(f"parameter {name!r} belongs to no group")


def voxelize(points, voxel_size):
    """Sorted unique voxel centers of a point cloud."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise InvalidShape("cannot place anchors: the point cloud is empty")
    cells = np.unique(np.floor(pts / voxel_size).astype(np.int64), axis=0)
    return (cells + 0.5) * voxel_size


def _logit(p):
    return float(np.log(p / (1.0 - p)))


class _Clock:
    def __init__(self, sink):
        self.sink = sink
        self.t = time.perf_counter()

    def lap(self, name):
        if self.sink is not None:
            now = time.perf_counter()
            self.sink[name] = self.sink.get(name, 0.0) + now - self.t
            self.t = now


@dataclass
class Forward:
    buffers: RenderBuffers
    bundle: AppearanceBundle
    cam: object
    overrides: dict
    refined: object
    colors: object
    geometry: tuple
    covs: np.ndarray

    @property
    def image(self):
        return self.buffers.image

    @property
    def depth(self):
        return self.buffers.depth


@dataclass
class Model:
    cfg: RunConfig
    image_hw: tuple
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        c = self.cfg
        c.validate(self.image_hw)
        self.hcfg = hrfn.HRFNConfig(k=c.k, n_v=c.n_v, n_r=c.n_r, n_g=c.n_g, L_pe=c.L_pe)
        self.scfg = SamplerConfig(M=c.M, k_s=c.k_s,
                                  frustum=FrustumConfig(c.r_narrow, c.R_max, c.R_min),
                                  filters=get_filters(c.wavelet))
        self.encoder = Encoder(c.encoder, c.n_r, c.n_g, self.image_hw)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_points(cls, cfg: RunConfig, image_hw, points, image_ids, seed=None):
        """Anchors at occupied voxels of ``points``; all networks freshly initialized."""
        model = cls(cfg, tuple(image_hw))
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        xyz = voxelize(points, cfg.voxel_size)
        n, k = len(xyz), cfg.k
        p = model.params
        p["anchor.xyz"] = xyz
        p["anchor.log_lv"] = np.full((n, 3), np.log(cfg.voxel_size))
        p["anchor.offsets"] = rng.normal(0.0, cfg.offset_init_std, size=(n, k, 3))
        p["anchor.log_scales"] = np.full((n, k, 3), np.log(cfg.gaussian_scale_init * cfg.voxel_size))
        rot = np.zeros((n, k, 4))
        rot[..., 0] = 1.0
        p["anchor.rotations"] = rot
        p["anchor.opacity"] = np.full((n, k), _logit(cfg.opacity_init))
        p["anchor.f_v"] = rng.normal(0.0, 0.1, size=(n, cfg.n_v))
        p["anchor.nc"] = np.zeros((n, cfg.k_s, 2))
        p["anchor.bc"] = np.zeros((n, cfg.k_s, 2))
        p["anchor.omega_n"] = np.zeros((n, model.scfg.n_logits))
        p["anchor.omega_b"] = np.zeros((n, model.scfg.n_logits))
        hrfn.init_params(p, model.hcfg, rng)
        model.encoder.init_params(p, rng, image_ids, cfg.fmap_std)
        return model

    @property
    def n_anchors(self) -> int:
        return len(self.params["anchor.xyz"])

    @property
    def n_gaussians(self) -> int:
        return self.n_anchors * self.cfg.k

    def anchors(self):
        p = self.params
        return [
            Anchor(position=p["anchor.xyz"][i], log_scale=p["anchor.log_lv"][i],
                   offsets=p["anchor.offsets"][i], feature=p["anchor.f_v"][i],
                   opacity_logits=p["anchor.opacity"][i], rotations=p["anchor.rotations"][i],
                   log_scales=p["anchor.log_scales"][i], nc=p["anchor.nc"][i],
                   bc=p["anchor.bc"][i], omega_n=p["anchor.omega_n"][i],
                   omega_b=p["anchor.omega_b"][i])
            for i in range(self.n_anchors)
        ]

    # -- forward / backward -----------------------------------------------------

    def encode(self, image_id, image=None) -> AppearanceBundle:
        return self.encoder.encode(self.params, image_id, image)

    def forward(self, cam, bundle: AppearanceBundle, overrides=None, threads=None,
                dtype=np.float64, timings=None) -> Forward:
        """Render ``cam`` under ``bundle``.  ``timings``, if a dict, collects stage seconds."""
        clock = _Clock(timings)
        ov = {key: 1.0 for key in OVERRIDE_KEYS}
        for key, val in (overrides or {}).items():
            if key not in ov:
                raise InvalidConfig(f"unknown override {key!r}; expected one of {OVERRIDE_KEYS}")
            ov[key] = float(val)
        p = self.params
        xyz = p["anchor.xyz"]
        res = refine(bundle.fmap, xyz, cam, p["anchor.nc"], p["anchor.bc"],
                     p["anchor.omega_n"], p["anchor.omega_b"], self.scfg)
        clock.lap("sample")
        out = hrfn.hrfn_forward(p, self.hcfg, xyz, p["anchor.f_v"], ov["f_r"] * res.f_r,
                                ov["f_g"] * bundle.f_g, cam.position,
                                scale_r=ov["omega_r"], scale_v=ov["omega_v"])
        clock.lap("hrfn")
        geom = (xyz, p["anchor.log_lv"], p["anchor.offsets"], p["anchor.opacity"],
                p["anchor.rotations"], p["anchor.log_scales"])
        means, covs, opac = expand_anchors(*geom)
        n, k = opac.shape
        aid = np.repeat(np.arange(n), k)
        oid = np.tile(np.arange(k), n)
        covs = covs.reshape(-1, 3, 3)
        buf = rasterize(cam, means.reshape(-1, 3), covs, opac.reshape(-1),
                        out.colors.reshape(-1, 3), aid, oid, background=self.cfg.background,
                        tile_size=self.cfg.tile_size,
                        threads=self.cfg.threads if threads is None else threads, dtype=dtype)
        clock.lap("raster")
        return Forward(buf, bundle, cam, ov, res, out, geom, covs)

    def backward(self, fwd: Forward, d_image, d_vm=None) -> dict:
        """Gradients of a scalar loss given its image (and visibility) gradient."""
        p = self.params
        grads = {}
        g = rasterize_backward(fwd.cam, fwd.buffers, fwd.covs, d_image)
        n, k = p["anchor.opacity"].shape
        dgeo = expand_anchors_backward(*fwd.geometry, g.mean.reshape(n, k, 3),
                                       g.cov.reshape(n, k, 3, 3), g.opacity.reshape(n, k))
        dh = hrfn.hrfn_backward(p, self.hcfg, fwd.colors, g.color.reshape(n, k, 3), grads)
        ds = refine_backward(fwd.refined, fwd.overrides["f_r"] * dh["f_r"])
        grads["anchor.xyz"] = dgeo["xyz"] + dh["x"] + ds["xyz"]
        grads["anchor.log_lv"] = dgeo["log_lv"]
        grads["anchor.offsets"] = dgeo["offsets"]
        grads["anchor.log_scales"] = dgeo["log_scales"]
        grads["anchor.rotations"] = dgeo["rotations"]
        grads["anchor.opacity"] = dgeo["opacity_logits"]
        grads["anchor.f_v"] = dh["f_v"]
        for key in ("nc", "bc", "omega_n", "omega_b"):
            grads[f"anchor.{key}"] = ds[key]
        self.encoder.backward(p, fwd.bundle, fwd.overrides["f_g"] * dh["f_g"], ds["fmap"],
                              d_vm, grads)
        return grads

    # -- conveniences -----------------------------------------------------------

    def render_view(self, cam, bundle: AppearanceBundle, overrides=None, threads=None,
                    dtype=np.float64) -> RenderBuffers:
        if bundle is None:
            raise MissingEntry("render_view needs an appearance bundle")
        return self.forward(cam, bundle, overrides, threads, dtype).buffers

    def attention(self, cam, map_hw=None):
        p = self.params
        map_hw = map_hw or self.encoder.fmap_hw
        return attention_histogram(p["anchor.xyz"], cam, map_hw, p["anchor.nc"], p["anchor.bc"],
                                   self.scfg)
