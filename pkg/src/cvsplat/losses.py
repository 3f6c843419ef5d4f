"""Photometric losses (plain and per-pixel weighted), volume regularizer, metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

LAMBDA_SSIM = 0.2
LAMBDA_VOL = 0.001

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
C1 = (SSIM_K1 * 1.0) ** 2
C2 = (SSIM_K2 * 1.0) ** 2


def _check_pair(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 images, got {a.shape}")
    return a, b


def _check_weights(weights, shape):
    # no map means all ones; sharing one code path keeps the two cases bitwise equal
    if weights is None:
        return np.ones(shape[:2])
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != shape[:2]:
        raise ValueError(f"weight map shape {w.shape} does not match image {shape[:2]}")
    return w


def _window_1d():
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2 * SSIM_SIGMA ** 2))
    return g / g.sum()


_WIN = _window_1d()


@njit(cache=True, inline="always")
def _mirror(i, n):
    # numpy "reflect" padding index (edge sample not repeated)
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = abs(i) % period
    return period - i if i >= n else i


@njit(cache=True)
def _blur_rows(x, win, out):
    # correlate along axis 1 of an H x W x C array, via a mirrored row buffer
    H, W, C = x.shape
    r = win.shape[0] // 2
    buf = np.empty((W + 2 * r) * C)
    for y in range(H):
        for i in range(-r, W + r):
            s = _mirror(i, W)
            for c in range(C):
                buf[(i + r) * C + c] = x[y, s, c]
        row = out[y].reshape(W * C)
        row[:] = 0.0
        for j in range(2 * r + 1):
            wj = win[j]
            off = j * C
            for i in range(W * C):
                row[i] += wj * buf[off + i]


@njit(cache=True)
def _blur_cols(x, win, out):
    H, W, C = x.shape
    r = win.shape[0] // 2
    n = W * C
    xf = x.reshape(H, n)
    of = out.reshape(H, n)
    for y in range(H):
        of[y, :] = 0.0
        for j in range(-r, r + 1):
            s = _mirror(y + j, H)
            wj = win[j + r]
            for i in range(n):
                of[y, i] += wj * xf[s, i]


@njit(cache=True)
def _blur_rows_adjoint(g, win, out):
    # gather over the virtual padded row, then fold mirrored samples back
    H, W, C = g.shape
    r = win.shape[0] // 2
    zp = np.zeros((W + 4 * r) * C)
    ext = np.empty((W + 2 * r) * C)
    for y in range(H):
        zp[2 * r * C:(2 * r + W) * C] = g[y].reshape(W * C)
        ext[:] = 0.0
        for jj in range(2 * r + 1):
            wj = win[jj]
            off = (2 * r - jj) * C
            for k in range((W + 2 * r) * C):
                ext[k] += wj * zp[off + k]
        row = out[y].reshape(W * C)
        row[:] = ext[r * C:(r + W) * C]
        for v in range(-r, 0):
            d = _mirror(v, W)
            for c in range(C):
                row[d * C + c] += ext[(v + r) * C + c]
        for v in range(W, W + r):
            d = _mirror(v, W)
            for c in range(C):
                row[d * C + c] += ext[(v + r) * C + c]


@njit(cache=True)
def _blur_cols_adjoint(g, win, out):
    H, W, C = g.shape
    r = win.shape[0] // 2
    n = W * C
    gf = g.reshape(H, n)
    of = out.reshape(H, n)
    of[:] = 0.0
    for v in range(-r, H + r):
        d = _mirror(v, H)
        for j in range(-r, r + 1):
            y = v - j
            if y < 0 or y >= H:
                continue
            wj = win[j + r]
            for i in range(n):
                of[d, i] += wj * gf[y, i]


def _as_hwc(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    return x if x.ndim == 3 else x[..., None]


def gaussian_blur(x):
    """11x11 Gaussian window (sigma 1.5) with reflect-padded borders, per channel."""
    shape = np.shape(x)
    x = _as_hwc(x)
    tmp = np.empty_like(x)
    out = np.empty_like(x)
    _blur_rows(x, _WIN, tmp)
    _blur_cols(tmp, _WIN, out)
    return out.reshape(shape)


def gaussian_blur_adjoint(g):
    shape = np.shape(g)
    g = _as_hwc(g)
    tmp = np.empty_like(g)
    out = np.empty_like(g)
    _blur_cols_adjoint(g, _WIN, tmp)
    _blur_rows_adjoint(tmp, _WIN, out)
    return out.reshape(shape)


def _ssim_terms(a, b):
    mu_a = gaussian_blur(a)
    mu_b = gaussian_blur(b)
    p_aa = gaussian_blur(a * a)
    p_bb = gaussian_blur(b * b)
    p_ab = gaussian_blur(a * b)
    mu_ab = mu_a * mu_b
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    A1 = 2 * mu_ab + C1
    A2 = 2 * (p_ab - mu_ab) + C2
    B1 = mu_aa + mu_bb + C1
    B2 = (p_aa - mu_aa) + (p_bb - mu_bb) + C2
    S = (A1 * A2) / (B1 * B2)
    return S, (mu_a, mu_b, A1, A2, B1, B2)


def ssim_map(a, b):
    """Per-pixel SSIM, averaged over the three channels."""
    a, b = _check_pair(a, b)
    S, _ = _ssim_terms(a.astype(np.float64), b.astype(np.float64))
    return S.mean(axis=2)


def ssim(a, b):
    return float(ssim_map(a, b).mean())


def _ssim_backward(a, b, S, terms, dS):
    """dL/da given dL/dS (per channel) for S = SSIM(a, b)."""
    mu_a, mu_b, A1, A2, B1, B2 = terms
    inv_D = 1.0 / (B1 * B2)
    g_mu = dS * (2 * mu_b * (A2 - A1) - S * 2 * mu_a * (B2 - B1)) * inv_D
    g_pab = dS * 2 * A1 * inv_D
    g_paa = -dS * S * B1 * inv_D
    return gaussian_blur_adjoint(g_mu) + 2 * a * gaussian_blur_adjoint(g_paa) + b * gaussian_blur_adjoint(g_pab)


def l1_loss(rendered, target):
    rendered, target = _check_pair(rendered, target)
    return float(np.mean(np.abs(rendered - target).mean(axis=2)))


def weighted_l1(weights, rendered, target):
    """mean_x U'(x) * mean_c |rendered - target|, with its gradient image."""
    rendered, target = _check_pair(rendered, target)
    w = _check_weights(weights, rendered.shape)
    diff = rendered - target
    per_pixel = np.abs(diff).mean(axis=2)
    H, W = per_pixel.shape
    loss = np.mean(w * per_pixel)
    grad = w[..., None] * np.sign(diff) / (H * W * 3)
    return float(loss), grad


def ssim_loss(rendered, target):
    return weighted_ssim_loss(None, rendered, target)[0]


def weighted_ssim_loss(weights, rendered, target):
    """mean(U' * (1 - SSIM_MAP)), weights applied after the map is formed."""
    rendered, target = _check_pair(rendered, target)
    w = _check_weights(weights, rendered.shape)
    a = rendered.astype(np.float64)
    b = target.astype(np.float64)
    S, terms = _ssim_terms(a, b)
    smap = S.mean(axis=2)
    H, W = smap.shape
    loss = np.mean(w * (1.0 - smap))
    dS = np.broadcast_to(-w[..., None] / (H * W * 3), S.shape)
    grad = _ssim_backward(a, b, S, terms, dS)
    return float(loss), grad


def volume_reg(field_):
    """Mean over Gaussians of the product of the three scales, and d/dlog_scale."""
    k = len(field_)
    if k == 0:
        return 0.0, np.zeros((0, 3))
    prod = np.exp(field_.log_scale.astype(np.float64).sum(axis=1))
    grad = np.repeat(prod[:, None] / k, 3, axis=1)
    return float(prod.mean()), grad


@dataclass
class LossBreakdown:
    l_color: float
    l_ssim: float
    l_vol: float
    total: float
    d_color: np.ndarray
    d_alpha: np.ndarray
    d_log_scale: np.ndarray


def total_loss(weights, rendered, target, field_, lambda_ssim=LAMBDA_SSIM, lambda_vol=LAMBDA_VOL) -> LossBreakdown:
    if not 0 <= lambda_ssim < 1:
        raise ValueError(f"lambda_ssim must be in [0, 1), got {lambda_ssim}")
    if lambda_vol < 0:
        raise ValueError(f"lambda_vol must be >= 0, got {lambda_vol}")
    l_color, g_color = weighted_l1(weights, rendered, target)
    l_ssim, g_ssim = weighted_ssim_loss(weights, rendered, target)
    l_vol, g_vol = volume_reg(field_)
    total = (1.0 - lambda_ssim) * l_color + lambda_ssim * l_ssim + lambda_vol * l_vol
    d_color = (1.0 - lambda_ssim) * g_color + lambda_ssim * g_ssim
    d_alpha = np.zeros(rendered.shape[:2])
    return LossBreakdown(l_color, l_ssim, l_vol, total, d_color, d_alpha, lambda_vol * g_vol)


def psnr(a, b):
    """10 log10(1 / MSE) in dB; identical images give +inf."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))
