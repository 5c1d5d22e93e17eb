"""Per-image appearance bundles: global code, refined feature map, visibility map.

Two interchangeable encoders stand in for a pretrained image backbone:

``grid``
    every registered image owns a learnable feature grid and visibility
    logits; the global code is pooled from its grid.
``conv``
    a shared three-stage stride-2 convolutional encoder reads the image and
    feeds a two-stage decoder for the feature map, a separate three-stage
    decoder for visibility logits, and the pooled global path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import InvalidConfig, InvalidShape, MissingEntry

ENC_CHANNELS = (16, 32, 64)
VM_CHANNELS = (32, 16, 1)


@dataclass
class AppearanceBundle:
    f_g: np.ndarray  # (n_g,)
    fmap: np.ndarray  # (n_r, H_F, W_F)
    vm: np.ndarray  # (H, W) in (0, 1)
    image_id: str | None = None
    cache: dict = field(default_factory=dict, repr=False)


def global_feature(params, F_enc, prefix="enc.mlpg"):
    """Spatial mean pooling followed by a two-layer ReLU MLP.  Returns ``(f_g, cache)``."""
    F_enc = np.asarray(F_enc, dtype=np.float64)
    if F_enc.size == 0:
        raise InvalidShape("empty feature map")
    pooled = F_enc.reshape(F_enc.shape[0], -1).mean(axis=1)
    f_g, acts = nn.mlp_forward(params, prefix, pooled, 2)
    return f_g, {"acts": acts, "shape": F_enc.shape}


def global_feature_backward(params, cache, d_fg, grads, prefix="enc.mlpg"):
    d_pooled = nn.mlp_backward(params, prefix, cache["acts"], d_fg, 2, grads)
    c, h, w = cache["shape"]
    return np.broadcast_to(d_pooled[:, None, None] / (h * w), (c, h, w))


class Encoder:
    """Produces :class:`AppearanceBundle` objects and routes their gradients back.

    Parameters are stored in the caller's flat parameter dict under the
    ``enc.`` prefix.
    """

    def __init__(self, mode, n_r, n_g, image_hw, fmap_hw=None):
        if mode not in ("grid", "conv"):
            raise InvalidConfig(f"encoder mode must be 'grid' or 'conv', got {mode!r}")
        self.mode = mode
        self.n_r = n_r
        self.n_g = n_g
        self.H, self.W = image_hw
        self.fmap_hw = fmap_hw or (self.H // 2, self.W // 2)
        if mode == "conv" and (self.H % 8 or self.W % 8 or self.fmap_hw != (self.H // 2, self.W // 2)):
            raise InvalidConfig("conv encoder needs image dims divisible by 8 and F^MAP at half size")

    # -- parameters -------------------------------------------------------

    def init_params(self, params, rng, image_ids=(), fmap_std=0.1):
        pool_dim = self.n_r if self.mode == "grid" else ENC_CHANNELS[-1]
        nn.init_mlp(params, "enc.mlpg", [pool_dim, 2 * self.n_g, self.n_g], rng)
        if self.mode == "grid":
            for image_id in image_ids:
                self.register(params, image_id, rng, fmap_std)
        else:
            chans = (3,) + ENC_CHANNELS
            for i in range(3):
                _conv_init(params, f"enc.conv.e{i}", chans[i], chans[i + 1], rng)
            fch = (ENC_CHANNELS[-1], 32, self.n_r)
            for i in range(2):
                _conv_init(params, f"enc.conv.f{i}", fch[i], fch[i + 1], rng)
            vch = (ENC_CHANNELS[-1],) + VM_CHANNELS
            for i in range(3):
                _conv_init(params, f"enc.conv.v{i}", vch[i], vch[i + 1], rng)
            # visibility starts at sigmoid(0) = 0.5
            params["enc.conv.v2.w"][:] = 0.0

    def register(self, params, image_id, rng, fmap_std=0.1):
        hf, wf = self.fmap_hw
        params[f"enc.grid.{image_id}.fmap"] = rng.normal(0.0, fmap_std, size=(self.n_r, hf, wf))
        params[f"enc.grid.{image_id}.vm"] = np.zeros((self.H, self.W))

    def image_ids(self, params):
        return sorted({k.split(".")[2] for k in params if k.startswith("enc.grid.")})

    # -- forward / backward ------------------------------------------------

    def encode(self, params, image_id, image=None) -> AppearanceBundle:
        if self.mode == "grid":
            key = f"enc.grid.{image_id}.fmap"
            if key not in params:
                raise MissingEntry(f"image id {image_id!r} is not registered with the grid encoder")
            fmap = params[key]
            vm_logits = params[f"enc.grid.{image_id}.vm"]
            f_g, gcache = global_feature(params, fmap)
            vm = nn.sigmoid(vm_logits)
            return AppearanceBundle(f_g, fmap, vm, image_id, {"global": gcache, "vm": vm})
        if image is None:
            raise MissingEntry("conv encoder needs the reference image")
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (self.H, self.W, 3):
            raise InvalidShape(f"reference image must be {self.H}x{self.W}x3, got {image.shape}")
        cache = {}
        h = np.moveaxis(image, -1, 0) * 2.0 - 1.0
        enc = []
        for i in range(3):
            h = self._conv(params, f"enc.conv.e{i}", h, 2, True, cache)
            enc.append(h)
        top = enc[-1]
        f = top
        for i in range(2):
            f = nn.upsample2(f)
            f = self._conv(params, f"enc.conv.f{i}", f, 1, i < 1, cache)
        v = top
        for i in range(3):
            v = nn.upsample2(v)
            v = self._conv(params, f"enc.conv.v{i}", v, 1, i < 2, cache)
        vm = nn.sigmoid(v[0])
        f_g, gcache = global_feature(params, top)
        cache.update({"global": gcache, "vm": vm})
        return AppearanceBundle(f_g, f, vm, image_id, cache)

    def _conv(self, params, prefix, x, stride, act, cache):
        out, c = nn.conv2d(x, params[prefix + ".w"], params[prefix + ".b"], stride)
        cache[prefix] = (x, c, out, act)
        return nn.relu(out) if act else out

    def _conv_back(self, params, prefix, d, cache, grads):
        x, c, out, act = cache[prefix]
        if act:
            d = d * (out > 0)
        dx, dw, db = nn.conv2d_backward(x, params[prefix + ".w"], c, d)
        nn._acc(grads, prefix + ".w", dw)
        nn._acc(grads, prefix + ".b", db)
        return dx

    def backward(self, params, bundle: AppearanceBundle, d_fg, d_fmap, d_vm, grads):
        """Accumulate gradients of the bundle outputs into ``grads``."""
        cache = bundle.cache
        vm = cache["vm"]
        d_vm_logits = None if d_vm is None else d_vm * vm * (1.0 - vm)
        if self.mode == "grid":
            d_grid = global_feature_backward(params, cache["global"], d_fg, grads)
            if d_fmap is not None:
                d_grid = d_grid + d_fmap
            nn._acc(grads, f"enc.grid.{bundle.image_id}.fmap", np.array(d_grid))
            if d_vm_logits is not None:
                nn._acc(grads, f"enc.grid.{bundle.image_id}.vm", d_vm_logits)
            return
        d_top = np.array(global_feature_backward(params, cache["global"], d_fg, grads))
        if d_fmap is not None:
            d = d_fmap
            for i in reversed(range(2)):
                d = self._conv_back(params, f"enc.conv.f{i}", d, cache, grads)
                d = nn.upsample2_backward(d)
            d_top = d_top + d
        if d_vm_logits is not None:
            d = d_vm_logits[None]
            for i in reversed(range(3)):
                d = self._conv_back(params, f"enc.conv.v{i}", d, cache, grads)
                d = nn.upsample2_backward(d)
            d_top = d_top + d
        d = d_top
        for i in reversed(range(3)):
            d = self._conv_back(params, f"enc.conv.e{i}", d, cache, grads)


def _conv_init(params, prefix, cin, cout, rng):
    params[prefix + ".w"] = nn.glorot(rng, cin * 9, cout * 9, (cout, cin, 3, 3))
    params[prefix + ".b"] = np.zeros(cout)
