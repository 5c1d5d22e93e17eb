"""Cameras, anchors and 3D Gaussian primitives.

Quaternions are stored scalar-first ``(w, x, y, z)``.  Camera space follows
the pinhole convention x right, y down, z forward; a camera's
``orientation`` rotates world vectors into camera space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BehindCamera, InvalidParameter, NumericalDegeneracy

NEAR = 0.01


def _finite(name, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidParameter(f"{name}: non-finite input")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --------------------------------------------------------------------------
# quaternions


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise InvalidParameter("zero-length quaternion")
    return q / n


def quat_to_rotmat(q):
    """Rotation matrices ``(..., 3, 3)`` of (not necessarily unit) quaternions."""
    w, x, y, z = np.moveaxis(quat_normalize(q), -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def quat_to_rotmat_backward(q, dR):
    """Gradient w.r.t. the raw quaternion, including the normalization."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / n
    w, x, y, z = np.moveaxis(qn, -1, 0)
    d = dR.reshape(dR.shape[:-2] + (9,))
    d00, d01, d02, d10, d11, d12, d20, d21, d22 = np.moveaxis(d, -1, 0)
    dw = 2 * (-z * d01 + y * d02 + z * d10 - x * d12 - y * d20 + x * d21)
    dx = 2 * (y * d01 + z * d02 + y * d10 - 2 * x * d11 - w * d12
              + z * d20 + w * d21 - 2 * x * d22)
    dy = 2 * (-2 * y * d00 + x * d01 + w * d02 + x * d10 + z * d12
              - w * d20 + z * d21 - 2 * y * d22)
    dz = 2 * (-2 * z * d00 - w * d01 + x * d02 + w * d10 - 2 * z * d11
              + y * d12 + x * d20 + y * d21)
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    return (dqn - qn * np.sum(qn * dqn, axis=-1, keepdims=True)) / n


def quat_multiply(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w1, x1, y1, z1 = np.moveaxis(a, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def rotmat_to_quat(R):
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    return q / np.linalg.norm(q)


# --------------------------------------------------------------------------
# covariance


def build_covariance(q, s):
    """Return ``R S S^T R^T`` for quaternion ``q`` and per-axis scales ``s``.

    Both arguments may carry leading batch dimensions.
    """
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    _finite("build_covariance", q, s)
    if np.any(s <= 0):
        raise InvalidParameter("scales must be positive")
    M = quat_to_rotmat(q) * s[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


def build_covariance_backward(q, s, dcov):
    """Gradients ``(dq, ds)`` of ``build_covariance`` given ``dL/dSigma``."""
    R = quat_to_rotmat(q)
    M = R * s[..., None, :]
    dM = (dcov + np.swapaxes(dcov, -1, -2)) @ M
    dR = dM * s[..., None, :]
    ds = np.sum(dM * R, axis=-2)
    return quat_to_rotmat_backward(q, dR), ds


# --------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    orientation: np.ndarray  # world -> camera, (w, x, y, z)
    position: np.ndarray  # camera centre in world units

    def __post_init__(self):
        q = np.asarray(self.orientation, dtype=np.float64)
        p = np.asarray(self.position, dtype=np.float64)
        object.__setattr__(self, "orientation", q)
        object.__setattr__(self, "position", p)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameter("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise InvalidParameter("image size must be positive")
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise InvalidParameter("camera orientation must be a unit quaternion")
        _finite("camera", q, p, np.array([self.fx, self.fy, self.cx, self.cy]))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(self.orientation)

    def to_camera(self, x):
        return (np.asarray(x, dtype=np.float64) - self.position) @ self.rotation.T

    def scaled(self, factor: float) -> "Camera":
        """Same pose, intrinsics scaled to an image ``factor`` times larger."""
        return Camera(
            int(round(self.width * factor)), int(round(self.height * factor)),
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
            self.orientation, self.position,
        )

    @classmethod
    def look_at(cls, position, target, up, width, height, fov_y_deg):
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        f = 0.5 * height / math.tan(math.radians(fov_y_deg) / 2)
        return cls(width, height, f, f, width / 2, height / 2, rotmat_to_quat(R), position)

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height,
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "orientation": self.orientation.tolist(),
            "position": self.position.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]),
            float(d["cx"]), float(d["cy"]),
            np.array(d["orientation"], dtype=np.float64),
            np.array(d["position"], dtype=np.float64),
        )


def project_point(cam: Camera, x):
    """Pinhole projection of one world point; returns ``(u, v, z)``."""
    t = cam.to_camera(x)
    if t[2] <= NEAR:
        raise BehindCamera(f"point at depth {t[2]:.4g} is behind the near plane")
    return cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy, t[2]


# --------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class GaussianPrimitive:
    mean: np.ndarray
    cov: np.ndarray
    opacity: float
    color: np.ndarray | None = None


def eval_gaussian(g: GaussianPrimitive, x) -> float:
    d = np.asarray(x, dtype=np.float64) - g.mean
    try:
        sol = np.linalg.solve(g.cov, d)
    except np.linalg.LinAlgError as exc:
        raise NumericalDegeneracy("singular covariance") from exc
    if np.linalg.cond(g.cov) > 1e14:
        raise NumericalDegeneracy("covariance is numerically singular")
    return float(np.exp(-0.5 * d @ sol))


@dataclass
class Anchor:
    """One voxel anchor and the parameters of its ``k`` child Gaussians.

    ``log_scale`` parameterizes the per-axis scaling ``l_v = exp(log_scale)``.
    Sampler parameters live here too: ``nc`` and ``bc`` are ``(k_s, 2)``
    jitter parameters, ``omega_n`` / ``omega_b`` the flattened per-stage
    fusion logits.
    """

    position: np.ndarray
    log_scale: np.ndarray
    offsets: np.ndarray
    feature: np.ndarray
    opacity_logits: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    nc: np.ndarray = field(default_factory=lambda: np.zeros((1, 2)))
    bc: np.ndarray = field(default_factory=lambda: np.zeros((1, 2)))
    omega_n: np.ndarray = field(default_factory=lambda: np.zeros(5))
    omega_b: np.ndarray = field(default_factory=lambda: np.zeros(5))

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        k = self.offsets.shape[0]
        if k < 1 or self.offsets.shape != (k, 3):
            raise InvalidParameter("offsets must be (k, 3) with k >= 1")
        if self.opacity_logits.shape != (k,) or self.rotations.shape != (k, 4) \
                or self.log_scales.shape != (k, 3):
            raise InvalidParameter("per-Gaussian parameter shapes disagree with k")
        if self.position.shape != (3,) or self.log_scale.shape != (3,):
            raise InvalidParameter("anchor position and scaling must have 3 entries")

    @property
    def k(self) -> int:
        return self.offsets.shape[0]

    @property
    def scaling(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def to_dict(self) -> dict:
        return {name: getattr(self, name).tolist() for name in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "Anchor":
        return cls(**{name: np.array(v, dtype=np.float64) for name, v in d.items()})


def expand_anchor(a: Anchor) -> list[GaussianPrimitive]:
    """The ``k`` child Gaussians of an anchor; colors are left unset."""
    means, covs, opac = expand_anchors(
        a.position[None], a.log_scale[None], a.offsets[None],
        a.opacity_logits[None], a.rotations[None], a.log_scales[None],
    )
    return [GaussianPrimitive(means[0, j], covs[0, j], float(opac[0, j])) for j in range(a.k)]


def expand_anchors(xyz, log_lv, offsets, opacity_logits, rotations, log_scales):
    """Batched anchor expansion: ``(N, k, 3)`` means, ``(N, k, 3, 3)`` covs, ``(N, k)`` opacities."""
    _finite("expand_anchors", xyz, log_lv, offsets, opacity_logits, rotations, log_scales)
    lv = np.exp(log_lv)
    means = xyz[:, None, :] + offsets * lv[:, None, :]
    covs = build_covariance(rotations, np.exp(log_scales))
    return means, covs, sigmoid(opacity_logits)


def expand_anchors_backward(xyz, log_lv, offsets, opacity_logits, rotations, log_scales,
                            dmeans, dcovs, dopac):
    lv = np.exp(log_lv)
    s = np.exp(log_scales)
    dq, ds = build_covariance_backward(rotations, s, dcovs)
    op = sigmoid(opacity_logits)
    return {
        "xyz": dmeans.sum(axis=1),
        "offsets": dmeans * lv[:, None, :],
        "log_lv": np.sum(dmeans * offsets, axis=1) * lv,
        "rotations": dq,
        "log_scales": ds * s,
        "opacity_logits": dopac * op * (1 - op),
    }


# --------------------------------------------------------------------------
# scene file


def save_scene(path, cameras, anchors, config: dict | None = None):
    doc = {
        "cameras": [c.to_dict() for c in cameras],
        "anchors": [a.to_dict() for a in anchors],
        "config": dict(config or {}),
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_scene(path):
    doc = json.loads(Path(path).read_text())
    cams = [Camera.from_dict(c) for c in doc["cameras"]]
    anchors = [Anchor.from_dict(a) for a in doc["anchors"]]
    return cams, anchors, doc.get("config", {})
