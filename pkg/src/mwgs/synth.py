"""Synthetic multi-appearance datasets with transient occluders.

Layout written by :func:`synthesize`::

    out/images/NNN.ppm    observed images (appearance transform + occluders)
    out/masks/NNN.ppm     occluder masks, evaluation only
    out/cameras.json      per-image camera, split, appearance condition
    out/points.json       noisy sparse points near the ground-truth blobs
    out/manifest.json     spec echo and sha256 of every file above
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io
from .errors import InvalidConfig, InvalidState, MissingEntry
from .rasterizer import rasterize
from .scene import Camera, build_covariance


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    width: int = 64
    height: int = 64
    fov_y: float = 45.0
    n_blobs: int = 20
    blob_extent: float = 0.5
    blob_scale: list = field(default_factory=lambda: [0.06, 0.18])
    blob_opacity: list = field(default_factory=lambda: [0.7, 0.95])
    blob_color: list = field(default_factory=lambda: [0.15, 0.95])
    n_cameras: int = 8
    n_test: int = 0
    ring_radius: float = 3.0
    ring_height: float = 1.2
    look_at: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    n_appearances: int = 2
    gain_range: list = field(default_factory=lambda: [0.5, 1.5])
    gamma_range: list = field(default_factory=lambda: [0.7, 1.4])
    tint_range: list = field(default_factory=lambda: [-0.1, 0.1])
    occluder_prob: float = 0.0
    occluder_size: list = field(default_factory=lambda: [0.2, 0.4])
    occluder_color: list | None = None
    points_per_blob: int = 2
    point_noise: float = 0.03
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    def validate(self):
        if self.n_blobs < 1 or self.n_cameras < 1 or self.width < 1 or self.height < 1:
            raise InvalidConfig("n_blobs, n_cameras and image size must be positive")
        if self.gamma_range[0] <= 0:
            raise InvalidConfig("gamma must be positive")
        if self.gain_range[0] <= 0:
            raise InvalidConfig("gain must be positive")
        if not 0.0 <= self.occluder_prob <= 1.0:
            raise InvalidConfig("occluder_prob must lie in [0, 1]")
        if self.n_appearances < 0:
            raise InvalidConfig("n_appearances must be >= 0")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidConfig(f"unknown synth spec keys: {unknown}")
        return cls(**d).validate()


@dataclass(frozen=True)
class Appearance:
    gain: tuple
    gamma: float
    tint: tuple

    @classmethod
    def identity(cls):
        return cls((1.0, 1.0, 1.0), 1.0, (0.0, 0.0, 0.0))


def apply_appearance(img, a: Appearance):
    out = (np.asarray(a.gain) * img) ** a.gamma + np.asarray(a.tint)
    return np.clip(out, 0.0, 1.0)


def invert_appearance(img, a: Appearance):
    return np.clip(np.asarray(img) - np.asarray(a.tint), 0.0, None) ** (1.0 / a.gamma) / np.asarray(a.gain)


def _ring_cameras(spec: SyntheticSceneSpec):
    cams = []
    total = spec.n_cameras + spec.n_test
    for i in range(total):
        if i < spec.n_cameras:
            angle = 2 * math.pi * i / spec.n_cameras
        else:
            angle = 2 * math.pi * ((i - spec.n_cameras) + 0.5) / max(spec.n_test, 1) + 0.1
        pos = [spec.ring_radius * math.cos(angle), spec.ring_radius * math.sin(angle), spec.ring_height]
        cams.append(Camera.look_at(pos, spec.look_at, [0, 0, 1], spec.width, spec.height, spec.fov_y))
    return cams


def ground_truth_blobs(spec: SyntheticSceneSpec, rng):
    n = spec.n_blobs
    means = rng.uniform(-spec.blob_extent, spec.blob_extent, size=(n, 3))
    scales = rng.uniform(*spec.blob_scale, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opac = rng.uniform(*spec.blob_opacity, size=n)
    colors = rng.uniform(*spec.blob_color, size=(n, 3))
    return dict(means=means, scales=scales, quats=quats, opacity=opac, colors=colors)


def synthesize(spec: SyntheticSceneSpec, out_dir):
    """Render, transform and write a dataset; returns the manifest dict."""
    spec.validate()
    out = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    blobs = ground_truth_blobs(spec, rng)
    covs = build_covariance(blobs["quats"], blobs["scales"])
    cams = _ring_cameras(spec)
    n_cond = spec.n_appearances
    conditions = [_random_appearance(spec, rng) for _ in range(max(n_cond, 0))]
    pts = blobs["means"].repeat(spec.points_per_blob, axis=0)
    pts = pts + rng.normal(0.0, spec.point_noise, size=pts.shape)

    records = []
    for i, cam in enumerate(cams):
        image_id = f"{i:03d}"
        raw = rasterize(cam, blobs["means"], covs, blobs["opacity"], blobs["colors"],
                        background=spec.background).image
        cond = i % n_cond if n_cond else None
        app = conditions[cond] if n_cond else _random_appearance(spec, rng)
        img = apply_appearance(raw, app)
        mask = np.zeros((spec.height, spec.width))
        occluded = bool(rng.uniform() < spec.occluder_prob)
        if occluded:
            img, mask = _stamp_occluder(img, spec, rng)
        io.write_ppm(out / "images" / f"{image_id}.ppm", img)
        io.write_ppm(out / "masks" / f"{image_id}.ppm", mask)
        records.append({
            "id": image_id,
            "split": "train" if i < spec.n_cameras else "test",
            "camera": cam.to_dict(),
            "appearance": cond,
            "appearance_params": asdict(app),
            "occluded": occluded,
        })
    for r in records:
        if r["split"] == "test":
            same = [q["id"] for q in records if q["split"] == "train" and q["appearance"] == r["appearance"]]
            r["reference"] = same[0] if same else records[0]["id"]
    (out / "cameras.json").write_text(json.dumps({"images": records}, indent=1))
    (out / "points.json").write_text(json.dumps({"points": pts.tolist()}))
    files = sorted(p.relative_to(out).as_posix() for p in out.rglob("*")
                   if p.is_file() and p.name != "manifest.json")
    manifest = {
        "spec": asdict(spec),
        "files": {f: io.sha256(out / f) for f in files},
        "ground_truth": {k: v.tolist() for k, v in blobs.items()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def _random_appearance(spec, rng):
    gain = tuple(rng.uniform(*spec.gain_range, size=3).tolist())
    gamma = float(rng.uniform(*spec.gamma_range))
    tint = tuple(rng.uniform(*spec.tint_range, size=3).tolist())
    return Appearance(gain, gamma, tint)


def _stamp_occluder(img, spec, rng):
    h, w = img.shape[:2]
    fh, fw = rng.uniform(*spec.occluder_size, size=2)
    rh, rw = max(1, int(round(fh * h))), max(1, int(round(fw * w)))
    y0 = int(rng.integers(0, h - rh + 1))
    x0 = int(rng.integers(0, w - rw + 1))
    color = (np.asarray(spec.occluder_color, dtype=np.float64) if spec.occluder_color is not None
             else rng.uniform(0.0, 1.0, size=3))
    img = img.copy()
    mask = np.zeros((h, w))
    img[y0:y0 + rh, x0:x0 + rw] = color
    mask[y0:y0 + rh, x0:x0 + rw] = 1.0
    return img, mask


# --------------------------------------------------------------------------
# loading and evaluation helpers


@dataclass
class Dataset:
    root: Path
    ids: list
    cameras: dict
    images: dict
    splits: dict
    references: dict
    points: np.ndarray
    records: list

    @property
    def image_hw(self):
        first = self.images[self.ids[0]]
        return first.shape[:2]

    def split_ids(self, split="train"):
        if split == "all":
            return list(self.ids)
        return [i for i in self.ids if self.splits[i] == split]

    def mask(self, image_id):
        path = self.root / "masks" / f"{image_id}.ppm"
        if not path.exists():
            raise MissingEntry(f"no occluder mask for image {image_id}")
        return io.read_ppm(path)


def load_dataset(root) -> Dataset:
    root = Path(root)
    cpath = root / "cameras.json"
    if not cpath.exists():
        raise MissingEntry(f"{root} is not a dataset directory (missing cameras.json)")
    records = json.loads(cpath.read_text())["images"]
    ids = [r["id"] for r in records]
    cams = {r["id"]: Camera.from_dict(r["camera"]) for r in records}
    images = {i: io.read_ppm(root / "images" / f"{i}.ppm") for i in ids}
    splits = {r["id"]: r.get("split", "train") for r in records}
    refs = {r["id"]: r.get("reference", r["id"]) for r in records}
    ppath = root / "points.json"
    points = np.array(json.loads(ppath.read_text())["points"]) if ppath.exists() else np.zeros((0, 3))
    return Dataset(root, ids, cams, images, splits, refs, points, records)


def eval_vm_separation(vm_maps, masks):
    """Mean visibility on static versus occluded pixels across all given maps."""
    if masks is None or len(masks) == 0:
        raise MissingEntry("occluder masks are required")
    vm = np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in vm_maps])
    occ = np.concatenate([np.asarray(m).ravel() > 0.5 for m in masks])
    if vm.shape != occ.shape:
        raise InvalidState("visibility maps and masks do not align")
    if not occ.any() or occ.all():
        raise InvalidState("need both occluded and static pixels to measure separation")
    occluded = float(vm[occ].mean())
    static = float(vm[~occ].mean())
    return {"occluded_mean": occluded, "static_mean": static, "separation": static - occluded}
