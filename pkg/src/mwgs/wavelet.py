"""Multi-channel 2D discrete wavelet transform and wavelet packets.

Filters act as decimating matrices: row ``i`` of the low-pass matrix holds
the low-pass taps starting at column ``2i`` (wrapping periodically for
filters longer than two taps).  For a ``C x H x W`` map every channel is
transformed independently and each sub-band keeps the channel axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidConfig, InvalidShape


@dataclass(frozen=True)
class FilterPair:
    low: tuple
    high: tuple
    name: str = "custom"

    def is_orthonormal(self, tol=1e-12) -> bool:
        lo, hi = np.array(self.low), np.array(self.high)
        return (abs(lo @ lo - 1) < tol and abs(hi @ hi - 1) < tol and abs(lo @ hi) < tol)


_S = 1.0 / math.sqrt(2.0)
HAAR = FilterPair((_S, _S), (_S, -_S), "haar")

# Daubechies 4-tap, high-pass by the quadrature mirror relation
_D = [(1 + math.sqrt(3)), (3 + math.sqrt(3)), (3 - math.sqrt(3)), (1 - math.sqrt(3))]
_D = tuple(c / (4 * math.sqrt(2)) for c in _D)
DB2 = FilterPair(_D, tuple((-1) ** i * _D[3 - i] for i in range(4)), "db2")

FILTERS = {"haar": HAAR, "db2": DB2}


def get_filters(name: str) -> FilterPair:
    try:
        return FILTERS[name]
    except KeyError:
        raise InvalidConfig(f"unknown wavelet family {name!r}; choose from {sorted(FILTERS)}") from None


@dataclass
class SubbandSet:
    LL: np.ndarray
    LH: np.ndarray
    HL: np.ndarray
    HH: np.ndarray

    def as_list(self):
        return [self.LL, self.LH, self.HL, self.HH]

    def energy(self) -> float:
        return float(sum(np.sum(b * b) for b in self.as_list()))


@lru_cache(maxsize=64)
def _analysis_matrix(taps: tuple, n: int) -> np.ndarray:
    m = np.zeros((n // 2, n))
    for i in range(n // 2):
        for k, c in enumerate(taps):
            m[i, (2 * i + k) % n] += c
    m.setflags(write=False)
    return m


def _matrices(filters: FilterPair, n: int):
    return _analysis_matrix(tuple(filters.low), n), _analysis_matrix(tuple(filters.high), n)


def _as_chw(F):
    F = np.asarray(F, dtype=np.float64)
    if F.ndim == 2:
        F = F[None]
    if F.ndim != 3:
        raise InvalidShape(f"expected a C x H x W map, got shape {F.shape}")
    return F


def dwt2(F, filters: FilterPair = HAAR) -> SubbandSet:
    """One-level decomposition of every channel into LL, LH, HL, HH."""
    F = _as_chw(F)
    _, H, W = F.shape
    if H % 2 or W % 2:
        raise InvalidShape(f"dwt2 needs even spatial dims, got {H}x{W}")
    Lh, Hh = _matrices(filters, H)
    Lw, Hw = _matrices(filters, W)
    FL = F @ Lw.T
    FH = F @ Hw.T
    return SubbandSet(Lh @ FL, Hh @ FL, Lh @ FH, Hh @ FH)


def dwt2_backward(grad: SubbandSet, filters: FilterPair = HAAR) -> np.ndarray:
    """Adjoint of :func:`dwt2`: maps sub-band gradients to the input gradient."""
    bands = [np.asarray(b, dtype=np.float64) for b in grad.as_list()]
    shape = bands[0].shape
    if any(b.shape != shape for b in bands) or len(shape) != 3:
        raise InvalidShape("sub-band gradients must share one C x h x w shape")
    _, h, w = shape
    Lh, Hh = _matrices(filters, 2 * h)
    Lw, Hw = _matrices(filters, 2 * w)
    gLL, gLH, gHL, gHH = bands
    return (Lh.T @ gLL @ Lw + Hh.T @ gLH @ Lw + Lh.T @ gHL @ Hw + Hh.T @ gHH @ Hw)


def idwt2(s: SubbandSet, filters: FilterPair = HAAR) -> np.ndarray:
    """Inverse of :func:`dwt2` for orthonormal filters (the adjoint)."""
    return dwt2_backward(s, filters)


def wavelet_packet(F, m: int, filters: FilterPair = HAAR) -> list:
    """Full packet tree of depth ``m``; ``4**m`` leaves in depth-first LL, LH, HL, HH order."""
    F = _as_chw(F)
    if m < 0:
        raise InvalidShape("packet level must be >= 0")
    _, H, W = F.shape
    if H % (2**m) or W % (2**m):
        raise InvalidShape(f"{H}x{W} map is not divisible by 2^{m}")
    if m == 0:
        return [F]
    out = []
    for band in dwt2(F, filters).as_list():
        out.extend(wavelet_packet(band, m - 1, filters))
    return out


def wavelet_packet_backward(grads, m: int, filters: FilterPair = HAAR) -> np.ndarray:
    """Adjoint of :func:`wavelet_packet`."""
    grads = list(grads)
    if len(grads) != 4**m:
        raise InvalidShape(f"expected {4**m} packet gradients, got {len(grads)}")
    if m == 0:
        return np.asarray(grads[0], dtype=np.float64)
    q = 4 ** (m - 1)
    children = [wavelet_packet_backward(grads[i * q:(i + 1) * q], m - 1, filters) for i in range(4)]
    return dwt2_backward(SubbandSet(*children), filters)
