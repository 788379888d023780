"""Differentiable reconstruction losses: mean absolute error and SSIM."""

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_same(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def l1_loss(pred, gt):
    """Mean absolute difference over every element."""
    _check_same(pred, gt)
    return T.mean(T.abs_(T.sub(pred, gt)))


def ssim_map(o, i, window=SSIM_WINDOW, sigma=SSIM_SIGMA, c1=SSIM_C1, c2=SSIM_C2):
    """Local SSIM under a Gaussian window, per channel ('valid' positions only)."""
    _check_same(o, i)
    if window > o.shape[2] or window > o.shape[3]:
        raise ShapeError(f"SSIM window {window} exceeds image size {o.shape[2]}x{o.shape[3]}")
    taps = T.gaussian_window(window, sigma)

    def blur(x):
        return T.separable_filter(x, taps)

    mu_o, mu_i = blur(o), blur(i)
    mu_oo, mu_ii, mu_oi = T.square(mu_o), T.square(mu_i), T.mul(mu_o, mu_i)
    var_o = T.sub(blur(T.square(o)), mu_oo)
    var_i = T.sub(blur(T.square(i)), mu_ii)
    cov = T.sub(blur(T.mul(o, i)), mu_oi)
    num = T.mul(T.add(T.mul(mu_oi, 2.0), c1), T.add(T.mul(cov, 2.0), c2))
    den = T.mul(T.add(T.add(mu_oo, mu_ii), c1), T.add(T.add(var_o, var_i), c2))
    return T.div(num, den)


def ssim(o, i, window=SSIM_WINDOW, sigma=SSIM_SIGMA, c1=SSIM_C1, c2=SSIM_C2):
    """Mean local SSIM over windows, channels and batch; a scalar Tensor in [-1, 1]."""
    return T.mean(ssim_map(o, i, window, sigma, c1, c2))


def ssim_loss(o, i, **kwargs):
    return T.sub(1.0, ssim(o, i, **kwargs))


def ssim_value(a, b, window=SSIM_WINDOW, sigma=SSIM_SIGMA, c1=SSIM_C1, c2=SSIM_C2):
    """SSIM of two images given as arrays in [0, 1].

    Accepts (H, W), (H, W, C) or (N, C, H, W); evaluated in float64.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None, None], b[None, None]
    elif a.ndim == 3:
        a, b = a.transpose(2, 0, 1)[None], b.transpose(2, 0, 1)[None]
    return ssim(Tensor(a), Tensor(b), window, sigma, c1, c2).item()
