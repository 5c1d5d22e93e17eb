"""Image losses and metrics with exact gradients.

SSIM uses an 11x11 Gaussian window (sigma 1.5), C1 = 0.01**2, C2 = 0.03**2,
evaluated on the 'valid' region of each channel and averaged.  Images are
``(H, W, 3)`` and visibility maps ``(H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidShape

WINDOW = 11
SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2
PSNR_CAP = 100.0


def _gauss_taps(size=WINDOW, sigma=SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


_TAPS = _gauss_taps()


def _filt(x, g=_TAPS):
    """Separable 'valid' correlation over the first two axes."""
    k = len(g)
    h, w = x.shape[0] - k + 1, x.shape[1] - k + 1
    tmp = sum(g[i] * x[i:i + h] for i in range(k))
    return sum(g[j] * tmp[:, j:j + w] for j in range(k))


def _filt_T(y, shape, g=_TAPS):
    """Adjoint of :func:`_filt`."""
    k = len(g)
    h, w = y.shape[:2]
    tmp = np.zeros((h, shape[1]) + y.shape[2:])
    for j in range(k):
        tmp[:, j:j + w] += g[j] * y
    out = np.zeros(shape)
    for i in range(k):
        out[i:i + h] += g[i] * tmp
    return out


def _check(a, b):
    if a.shape != b.shape:
        raise InvalidShape(f"image shapes differ: {a.shape} vs {b.shape}")


def ssim(a, b, return_grad=False):
    """Mean SSIM of two ``(H, W, C)`` images; optionally the gradients w.r.t. both."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < WINDOW or a.shape[1] < WINDOW:
        raise InvalidShape(f"images smaller than the {WINDOW}x{WINDOW} SSIM window")
    mu_a, mu_b = _filt(a), _filt(b)
    saa = _filt(a * a) - mu_a**2
    sbb = _filt(b * b) - mu_b**2
    sab = _filt(a * b) - mu_a * mu_b
    num1 = 2 * mu_a * mu_b + C1
    num2 = 2 * sab + C2
    den1 = mu_a**2 + mu_b**2 + C1
    den2 = saa + sbb + C2
    smap = num1 * num2 / (den1 * den2)
    value = float(smap.mean())
    if not return_grad:
        return value
    g = np.full(smap.shape, 1.0 / smap.size)
    S = smap
    # partials of S w.r.t. its local statistics
    d_mu_a = g * (2 * mu_b * num2 / (den1 * den2) - S * 2 * mu_a / den1)
    d_mu_b = g * (2 * mu_a * num2 / (den1 * den2) - S * 2 * mu_b / den1)
    d_saa = g * (-S / den2)
    d_sbb = d_saa
    d_sab = g * (2 * num1 / (den1 * den2))
    # statistics are filtered moments: back through the subtraction of products
    d_mu_a_tot = d_mu_a - 2 * mu_a * d_saa - mu_b * d_sab
    d_mu_b_tot = d_mu_b - 2 * mu_b * d_sbb - mu_a * d_sab
    shape = a.shape
    da = _filt_T(d_mu_a_tot, shape) + 2 * a * _filt_T(d_saa, shape) + b * _filt_T(d_sab, shape)
    db = _filt_T(d_mu_b_tot, shape) + 2 * b * _filt_T(d_sbb, shape) + a * _filt_T(d_sab, shape)
    return value, da, db


def masked_l1(I_r, I_gt, vm):
    I_r, I_gt = np.asarray(I_r, dtype=np.float64), np.asarray(I_gt, dtype=np.float64)
    _check(I_r, I_gt)
    m = np.asarray(vm, dtype=np.float64)[..., None]
    return float(np.mean(np.abs(m * I_r - m * I_gt)))


def psnr(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


@dataclass(frozen=True)
class LossWeights:
    ssim: float = 0.2
    l1: float = 0.8
    vm: float = 0.15

    def __post_init__(self):
        if min(self.ssim, self.l1, self.vm) < 0:
            raise InvalidShape("loss weights must be non-negative")


@dataclass
class LossResult:
    total: float
    terms: dict
    d_image: np.ndarray
    d_vm: np.ndarray


def total_loss(I_r, I_gt, vm, w: LossWeights = LossWeights()) -> LossResult:
    """Visibility-masked SSIM + L1 loss with a pull of ``vm`` towards one."""
    I_r = np.asarray(I_r, dtype=np.float64)
    I_gt = np.asarray(I_gt, dtype=np.float64)
    vm = np.asarray(vm, dtype=np.float64)
    _check(I_r, I_gt)
    if vm.shape != I_r.shape[:2]:
        raise InvalidShape(f"visibility map {vm.shape} does not match image {I_r.shape[:2]}")
    m = vm[..., None]
    X, Y = m * I_r, m * I_gt
    s, dX, dY = ssim(X, Y, return_grad=True)
    diff = X - Y
    l1 = float(np.mean(np.abs(diff)))
    sign = np.sign(diff) / diff.size
    reg = float(np.mean((vm - 1.0) ** 2))
    total = w.ssim * (1.0 - s) + w.l1 * l1 + w.vm * reg
    dX_tot = -w.ssim * dX + w.l1 * sign
    dY_tot = -w.ssim * dY - w.l1 * sign
    d_image = m * dX_tot
    d_vm = np.sum(dX_tot * I_r + dY_tot * I_gt, axis=-1) + w.vm * 2.0 * (vm - 1.0) / vm.size
    return LossResult(total, {"ssim": s, "l1": l1, "vm_reg": reg}, d_image, d_vm)
