"""Frame-time measurement for the render path."""

from __future__ import annotations

import time

import numpy as np

from .model import Model


def replicate_anchors(model: Model, factor: int, seed=0, spread=0.05) -> Model:
    """Copy of ``model`` with every anchor repeated ``factor`` times, slightly jittered."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    rng = np.random.default_rng(seed)
    params = dict(model.params)
    for key in [k for k in params if k.startswith("anchor.")]:
        params[key] = np.concatenate([params[key]] * factor, axis=0)
    xyz = params["anchor.xyz"]
    params["anchor.xyz"] = xyz + rng.normal(0.0, spread, size=xyz.shape) * (np.arange(len(xyz)) >= model.n_anchors)[:, None]
    return Model(model.cfg, model.image_hw, params)


def bench(model: Model, cam, bundle_fn, frames=100, warmup=10, dtype=np.float64):
    """Time ``frames`` full renders after ``warmup`` untimed ones.

    ``bundle_fn()`` produces the appearance bundle and is timed as the
    ``encode`` stage, so feature extraction counts towards the frame time.
    """
    if frames < 1:
        raise ValueError("frames must be >= 1")
    per_frame, stages = [], {}
    for i in range(warmup + frames):
        sink = {} if i >= warmup else None
        t0 = time.perf_counter()
        bundle = bundle_fn()
        t1 = time.perf_counter()
        model.forward(cam, bundle, dtype=dtype, timings=sink)
        t2 = time.perf_counter()
        if sink is not None:
            per_frame.append(1e3 * (t2 - t0))
            sink["encode"] = t1 - t0
            for name, sec in sink.items():
                stages.setdefault(name, []).append(1e3 * sec)
    ms = np.array(per_frame)
    return {
        "resolution": [cam.width, cam.height],
        "gaussian_count": model.n_gaussians,
        "anchor_count": model.n_anchors,
        "frames": frames,
        "warmup": warmup,
        "dtype": np.dtype(dtype).name,
        "ms_per_frame": {"mean": float(ms.mean()), "p50": float(np.percentile(ms, 50)),
                         "p95": float(np.percentile(ms, 95))},
        "fps": float(1e3 / ms.mean()),
        "stage_ms_mean": {k: float(np.mean(v)) for k, v in sorted(stages.items())},
    }
