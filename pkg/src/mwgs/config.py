"""Run configuration: one flat JSON object, validated on load.

Learning rates are ``[start, end]`` pairs interpolated log-linearly over
``steps``.  Unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import InvalidConfig

PARAM_GROUPS = (
    "means", "offsets", "anchor_scale", "scales", "rotations", "opacity", "features",
    "jitter", "fusion", "hrfn", "encoder", "grid",
)


@dataclass
class RunConfig:
    dataset: str = ""
    checkpoint: str = ""
    output: str = "out"
    seed: int = 0
    threads: int = 1
    steps: int = 2000
    # model sizes
    k: int = 10
    k_s: int = 1
    M: int = 1
    n_v: int = 48
    n_r: int = 32
    n_g: int = 16
    L_pe: int = 4
    # sampler
    r_narrow: float = 1.5
    R_max: float = 32.0
    R_min: float = 2.0
    wavelet: str = "haar"
    encoder: str = "grid"
    fmap_std: float = 0.1
    # loss
    lambda_ssim: float = 0.2
    lambda_l1: float = 0.8
    lambda_vm: float = 0.15
    # renderer
    tile_size: int = 16
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    # initialization
    voxel_size: float = 0.1
    offset_init_std: float = 1.0
    gaussian_scale_init: float = 0.5
    opacity_init: float = 0.1
    # learning rates [start, end]
    lr_means: list = field(default_factory=lambda: [1.6e-4, 1.6e-6])
    lr_offsets: list = field(default_factory=lambda: [1.6e-4, 1.6e-6])
    lr_anchor_scale: list = field(default_factory=lambda: [5e-3, 5e-3])
    lr_scales: list = field(default_factory=lambda: [5e-3, 5e-3])
    lr_rotations: list = field(default_factory=lambda: [1e-3, 1e-3])
    lr_opacity: list = field(default_factory=lambda: [5e-2, 5e-2])
    lr_features: list = field(default_factory=lambda: [7.5e-3, 7.5e-3])
    lr_jitter: list = field(default_factory=lambda: [1e-4, 1e-5])
    lr_fusion: list = field(default_factory=lambda: [1e-3, 1e-4])
    lr_hrfn: list = field(default_factory=lambda: [5e-4, 5e-5])
    lr_encoder: list = field(default_factory=lambda: [1e-4, 1e-6])
    lr_grid: list = field(default_factory=lambda: [1e-4, 1e-6])
    frozen_groups: list = field(default_factory=list)
    # bookkeeping
    log_every: int = 1
    checkpoint_every: int = 0

    def validate(self, image_hw=None) -> "RunConfig":
        ints = ("seed", "threads", "steps", "k", "k_s", "M", "n_v", "n_r", "n_g", "L_pe",
                "tile_size", "log_every", "checkpoint_every")
        for name in ints:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise InvalidConfig(f"{name} must be an integer, got {v!r}")
        if self.k < 1 or self.k_s < 1 or self.M < 0 or self.L_pe < 0 or self.steps < 0:
            raise InvalidConfig("k, k_s >= 1 and M, L_pe, steps >= 0 are required")
        if min(self.n_v, self.n_r, self.n_g) < 1 or self.threads < 1 or self.tile_size < 1:
            raise InvalidConfig("feature sizes, threads and tile_size must be positive")
        if self.n_r % (2 * self.M + 2):
            raise InvalidConfig(f"n_r = {self.n_r} must be divisible by 2M+2 = {2 * self.M + 2}")
        if self.encoder not in ("grid", "conv"):
            raise InvalidConfig(f"encoder must be 'grid' or 'conv', got {self.encoder!r}")
        if min(self.r_narrow, self.R_max, self.R_min) <= 0:
            raise InvalidConfig("frustum radii must be positive")
        if min(self.lambda_ssim, self.lambda_l1, self.lambda_vm) < 0:
            raise InvalidConfig("loss weights must be non-negative")
        if len(self.background) != 3 or not all(0 <= c <= 1 for c in self.background):
            raise InvalidConfig("background must be three values in [0, 1]")
        for g in PARAM_GROUPS:
            lr = getattr(self, f"lr_{g}")
            if len(lr) != 2 or min(lr) < 0:
                raise InvalidConfig(f"lr_{g} must be a [start, end] pair of non-negative rates")
        unknown = set(self.frozen_groups) - set(PARAM_GROUPS)
        if unknown:
            raise InvalidConfig(f"unknown parameter groups in frozen_groups: {sorted(unknown)}")
        from .wavelet import get_filters
        get_filters(self.wavelet)
        if image_hw is not None:
            h, w = image_hw
            hf, wf = h // 2, w // 2
            if h % 2 or w % 2 or hf % (2**self.M) or wf % (2**self.M):
                raise InvalidConfig(
                    f"feature map {hf}x{wf} (half of {h}x{w}) is not divisible by 2^M = {2**self.M}")
            if self.encoder == "conv" and (h % 8 or w % 8):
                raise InvalidConfig("conv encoder needs image dims divisible by 8")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {unknown}")
        cfg = cls(**d)
        for f in fields(cls):
            v = getattr(cfg, f.name)
            if f.type == "float" and isinstance(v, int) and not isinstance(v, bool):
                setattr(cfg, f.name, float(v))
        return cfg.validate()

    def with_overrides(self, pairs) -> "RunConfig":
        d = self.to_dict()
        for item in pairs or ():
            if "=" not in item:
                raise InvalidConfig(f"--set expects key=value, got {item!r}")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            d[key.strip()] = value
        return RunConfig.from_dict(d)


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise InvalidConfig(f"{path}: config must be a JSON object")
    return RunConfig.from_dict(doc)


def describe_defaults() -> str:
    defaults = RunConfig()
    return "\n".join(f"  {f.name} = {json.dumps(getattr(defaults, f.name))}" for f in fields(RunConfig))
