"""Tile-based alpha-compositing rasterizer with an analytic backward pass.

Pipeline per view: ``preprocess`` projects every Gaussian to a screen-space
splat, ``bin_splats`` builds depth-sorted per-tile lists, ``_forward_tiles``
composites front to back. ``render_backward`` walks the same lists in reverse
and chains the pixel gradients back to the Gaussian parameters.

Gradients are written into one slot per (tile, splat) list entry and reduced
per Gaussian in tile-major order, so results do not depend on the number of
worker threads.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numba
import numpy as np
from numba import njit, prange

from .gaussians import ALPHA_EPS, LOWPASS, GaussianField, frustum_limits
from .geometry import Z_NEAR, Camera

ALPHA_MAX = 0.99
T_MIN = 1e-4
DEPTH_ALPHA_MIN = 1e-6
NEAR_CULL = 0.2


@dataclass(frozen=True)
class RasterSettings:
    tile_size: int = 16
    alpha_max: float = ALPHA_MAX
    t_min: float = T_MIN
    # 0 disables the footprint cutoff: every splat reaches every pixel
    alpha_eps: float = ALPHA_EPS
    lowpass: float = LOWPASS
    # splats whose camera-space depth is at or below this are not drawn
    near: float = NEAR_CULL

    def __post_init__(self):
        if self.tile_size < 1:
            raise ValueError("tile_size must be >= 1")
        if not 0 < self.alpha_max < 1:
            raise ValueError("alpha_max must be in (0, 1)")
        if self.alpha_eps < 0 or self.t_min < 0:
            raise ValueError("alpha_eps and t_min must be nonnegative")
        if self.near < Z_NEAR:
            raise ValueError(f"near must be >= {Z_NEAR}")


EXACT = RasterSettings(alpha_eps=0.0, t_min=0.0)


@contextmanager
def threads(n: int | None):
    """Temporarily cap numba's worker count."""
    if n is None:
        yield
        return
    prev = numba.get_num_threads()
    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))
    try:
        yield
    finally:
        numba.set_num_threads(prev)


# --------------------------------------------------------------------------
# kernels


@njit(cache=True)
def _quat_rotmat(qw, qx, qy, qz):
    n = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    w, x, y, z = qw / n, qx / n, qy / n, qz / n
    R = np.empty((3, 3))
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y - w * z)
    R[0, 2] = 2 * (x * z + w * y)
    R[1, 0] = 2 * (x * y + w * z)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z - w * x)
    R[2, 0] = 2 * (x * z - w * y)
    R[2, 1] = 2 * (y * z + w * x)
    R[2, 2] = 1 - 2 * (x * x + y * y)
    return R


@njit(cache=True)
def _preprocess(mu, rot, log_scale, opl, color, Rw, tw, fx, fy, cx, cy, width, height,
                lowpass, eps, near, lim_x, lim_y, tile, p_cam, mean2d, cov2d, conic, depth, opac, col, pmin, rect, valid):
    n_tx = (width + tile - 1) // tile
    n_ty = (height + tile - 1) // tile
    for k in range(mu.shape[0]):
        valid[k] = False
        px = Rw[0, 0] * mu[k, 0] + Rw[0, 1] * mu[k, 1] + Rw[0, 2] * mu[k, 2] + tw[0]
        py = Rw[1, 0] * mu[k, 0] + Rw[1, 1] * mu[k, 1] + Rw[1, 2] * mu[k, 2] + tw[1]
        pz = Rw[2, 0] * mu[k, 0] + Rw[2, 1] * mu[k, 1] + Rw[2, 2] * mu[k, 2] + tw[2]
        p_cam[k, 0] = px
        p_cam[k, 1] = py
        p_cam[k, 2] = pz
        if pz <= near:
            continue
        o = 1.0 / (1.0 + np.exp(-np.float64(opl[k])))
        if eps > 0.0:
            if o <= eps:
                continue
            r2 = 2.0 * np.log(o / eps)
            pm = -0.5 * r2
        else:
            r2 = np.inf
            pm = -np.inf
        R = _quat_rotmat(rot[k, 0], rot[k, 1], rot[k, 2], rot[k, 3])
        M = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                M[i, j] = R[i, j] * np.exp(np.float64(log_scale[k, j]))
        S = M @ M.T
        # T = J W, J the pinhole Jacobian at the camera-space mean
        iz = 1.0 / pz
        J = np.zeros((2, 3))
        J[0, 0] = fx * iz
        J[0, 2] = -fx * min(max(px * iz, -lim_x), lim_x) * iz
        J[1, 1] = fy * iz
        J[1, 2] = -fy * min(max(py * iz, -lim_y), lim_y) * iz
        T = J @ Rw
        C = T @ S @ T.T
        a = C[0, 0] + lowpass
        b = 0.5 * (C[0, 1] + C[1, 0])
        c = C[1, 1] + lowpass
        det = a * c - b * b
        if det <= 0.0:
            continue
        mx = fx * px * iz + cx
        my = fy * py * iz + cy
        if r2 < np.inf:
            ex = np.sqrt(r2 * a) + 1e-3
            ey = np.sqrt(r2 * c) + 1e-3
            if mx + ex < 0 or mx - ex > width - 1 or my + ey < 0 or my - ey > height - 1:
                continue
            x0 = int(np.floor(max(mx - ex, 0.0))) // tile
            x1 = int(np.floor(min(mx + ex, width - 1.0))) // tile
            y0 = int(np.floor(max(my - ey, 0.0))) // tile
            y1 = int(np.floor(min(my + ey, height - 1.0))) // tile
        else:
            x0, x1, y0, y1 = 0, n_tx - 1, 0, n_ty - 1
        mean2d[k, 0] = mx
        mean2d[k, 1] = my
        cov2d[k, 0] = a
        cov2d[k, 1] = b
        cov2d[k, 2] = c
        conic[k, 0] = c / det
        conic[k, 1] = -b / det
        conic[k, 2] = a / det
        depth[k] = pz
        opac[k] = o
        for ch in range(3):
            col[k, ch] = min(max(color[k, ch], 0.0), 1.0)
        pmin[k] = pm
        rect[k, 0] = x0
        rect[k, 1] = x1
        rect[k, 2] = y0
        rect[k, 3] = y1
        valid[k] = True


@njit(cache=True)
def _bin(order, rect, valid, n_tx, n_ty):
    n_tiles = n_tx * n_ty
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for k in order:
        if not valid[k]:
            continue
        for ty in range(rect[k, 2], rect[k, 3] + 1):
            for tx in range(rect[k, 0], rect[k, 1] + 1):
                counts[ty * n_tx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    entries = np.empty(offsets[-1], dtype=np.int64)
    for k in order:
        if not valid[k]:
            continue
        for ty in range(rect[k, 2], rect[k, 3] + 1):
            for tx in range(rect[k, 0], rect[k, 1] + 1):
                t = ty * n_tx + tx
                entries[fill[t]] = k
                fill[t] += 1
    return offsets, entries


@njit(cache=True, inline="always")
def _clamped_range(lo, hi, n):
    # integers in [lo, hi] intersected with [0, n - 1]; empty when first > last
    lo = min(max(lo, 0.0), float(n))
    hi = min(max(hi, -1.0), n - 1.0)
    return int(np.ceil(lo)), int(np.floor(hi))


@njit(cache=True, inline="always")
def _rows(my, cyy, pm, ty0, th):
    if pm == -np.inf:
        return 0, th - 1
    ey = np.sqrt(-2.0 * pm * cyy)
    return _clamped_range(my - ey - 1.0 - ty0, my + ey + 1.0 - ty0, th)


@njit(cache=True, inline="always")
def _span(y, mx, my, ca, cb, cc, pm, tx0, tw):
    # superset (one pixel of slack) of the row's pixels inside the footprint ellipse
    if pm == -np.inf:
        return 0, tw - 1
    dy = y - my
    disc = max(cb * cb * dy * dy - ca * (cc * dy * dy + 2.0 * pm), 0.0)
    xc = mx - cb * dy / ca
    half = np.sqrt(disc) / ca
    return _clamped_range(xc - half - 1.0 - tx0, xc + half + 1.0 - tx0, tw)


_LN2_HI = 6.93147180369123816490e-01
_LN2_LO = 1.90821492927058770002e-10
_INV_LN2 = 1.44269504088896338700e+00
_ROUND = 6755399441055744.0  # 1.5 * 2**52; adding it rounds a double to an integer
_ROUND_BITS = 0x4338000000000000


@njit(cache=True, inline="always")
def _exp_span(x, n, bits, out):
    """out[:n] = exp(x[:n]) for x <= 0, to ~3e-16 relative; inputs below -708 are clamped.

    Branch-free so the loop vectorizes; the row spans are short, and a libm
    call per pixel dominated the compositing cost.
    """
    kf = bits.view(np.float64)
    for i in range(n):
        xi = max(x[i], -708.0)
        t = xi * _INV_LN2 + _ROUND
        k = t - _ROUND
        r = (xi - k * _LN2_HI) - k * _LN2_LO
        out[i] = 1.0 + r * (1.0 + r * (0.5 + r * (1.0 / 6 + r * (1.0 / 24 + r * (1.0 / 120 + r * (1.0 / 720 + r * (
            1.0 / 5040 + r * (1.0 / 40320 + r * (1.0 / 362880 + r * (1.0 / 3628800 + r * (
                1.0 / 39916800 + r * (1.0 / 479001600))))))))))))
        kf[i] = t
    for i in range(n):
        bits[i] = (bits[i] - _ROUND_BITS + 1023) << 52
    for i in range(n):
        out[i] *= kf[i]


@njit(cache=True, inline="always")
def _span_powers(y, x0, n, tx0, mx, my, ca, cb, cc, out):
    dy = y - my
    for i in range(n):
        dx = tx0 + x0 + i - mx
        out[i] = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy


@njit(parallel=True, cache=True)
def _forward_tiles(offsets, entries, mean2d, cov2d, conic, opac, col, depth, pmin, width, height, tile,
                   bg, alpha_max, t_min, out_color, out_alpha, out_depth, out_T, out_last):
    n_tx = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        tx0 = (t % n_tx) * tile
        ty0 = (t // n_tx) * tile
        tw = min(tile, width - tx0)
        th = min(tile, height - ty0)
        npx = tw * th
        start = offsets[t]
        T = np.ones(npx)
        acc = np.zeros((4, npx))
        last = np.full(npx, start)
        done = np.zeros(npx, np.bool_)
        pw = np.empty(tw)
        ex = np.empty(tw)
        bits = np.empty(tw, np.int64)
        n_done = 0
        # splat-major: each splat visits only the rows and spans its footprint covers
        for e in range(start, offsets[t + 1]):
            if n_done == npx:
                break
            k = entries[e]
            mx = mean2d[k, 0]
            my = mean2d[k, 1]
            ca = conic[k, 0]
            cb = conic[k, 1]
            cc = conic[k, 2]
            pm = pmin[k]
            o = opac[k]
            y0, y1 = _rows(my, cov2d[k, 2], pm, ty0, th)
            for ly in range(y0, y1 + 1):
                y = ty0 + ly
                x0, x1 = _span(y, mx, my, ca, cb, cc, pm, tx0, tw)
                n = x1 - x0 + 1
                if n <= 0:
                    continue
                _span_powers(y, x0, n, tx0, mx, my, ca, cb, cc, pw)
                _exp_span(pw, n, bits, ex)
                for i in range(n):
                    p = ly * tw + x0 + i
                    if done[p] or pw[i] < pm:
                        continue
                    alpha = min(alpha_max, o * ex[i])
                    w = alpha * T[p]
                    acc[0, p] += w * col[k, 0]
                    acc[1, p] += w * col[k, 1]
                    acc[2, p] += w * col[k, 2]
                    acc[3, p] += w * depth[k]
                    T[p] = T[p] * (1.0 - alpha)
                    last[p] = e + 1
                    if T[p] < t_min:
                        done[p] = True
                        n_done += 1
        for ly in range(th):
            for lx in range(tw):
                p = ly * tw + lx
                y = ty0 + ly
                x = tx0 + lx
                Tp = T[p]
                out_color[y, x, 0] = acc[0, p] + Tp * bg[0]
                out_color[y, x, 1] = acc[1, p] + Tp * bg[1]
                out_color[y, x, 2] = acc[2, p] + Tp * bg[2]
                a = 1.0 - Tp
                out_alpha[y, x] = a
                out_depth[y, x] = acc[3, p] / a if a > 1e-6 else 0.0
                out_T[y, x] = Tp
                out_last[y, x] = last[p]


@njit(parallel=True, cache=True)
def _backward_tiles(offsets, entries, mean2d, cov2d, conic, opac, col, pmin, width, height, tile, bg,
                    alpha_max, out_T, out_last, d_color, d_alpha, egrad):
    # egrad columns: dmean x, dmean y, dconic a, b, c, dopacity, dcolor r, g, b
    n_tx = (width + tile - 1) // tile
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        tx0 = (t % n_tx) * tile
        ty0 = (t // n_tx) * tile
        tw = min(tile, width - tx0)
        th = min(tile, height - ty0)
        npx = tw * th
        start = offsets[t]
        T = np.empty(npx)
        bacc = np.empty((3, npx))
        gpix = np.empty((3, npx))
        ga = np.empty(npx)
        last = np.empty(npx, np.int64)
        pw = np.empty(tw)
        ex = np.empty(tw)
        bits = np.empty(tw, np.int64)
        e_end = start
        for ly in range(th):
            for lx in range(tw):
                p = ly * tw + lx
                y = ty0 + ly
                x = tx0 + lx
                Tf = out_T[y, x]
                T[p] = Tf
                for c in range(3):
                    bacc[c, p] = Tf * bg[c]
                    gpix[c, p] = d_color[y, x, c]
                ga[p] = d_alpha[y, x] * Tf
                last[p] = out_last[y, x]
                e_end = max(e_end, last[p])
        for e in range(e_end - 1, start - 1, -1):
            k = entries[e]
            mx = mean2d[k, 0]
            my = mean2d[k, 1]
            ca = conic[k, 0]
            cb = conic[k, 1]
            cc = conic[k, 2]
            pm = pmin[k]
            o = opac[k]
            cr = col[k, 0]
            cg = col[k, 1]
            cbl = col[k, 2]
            a0 = a1 = a2 = a3 = a4 = a5 = a6 = a7 = a8 = 0.0
            y0, y1 = _rows(my, cov2d[k, 2], pm, ty0, th)
            for ly in range(y0, y1 + 1):
                y = ty0 + ly
                x0, x1 = _span(y, mx, my, ca, cb, cc, pm, tx0, tw)
                n = x1 - x0 + 1
                if n <= 0:
                    continue
                _span_powers(y, x0, n, tx0, mx, my, ca, cb, cc, pw)
                _exp_span(pw, n, bits, ex)
                dy = y - my
                for i in range(n):
                    p = ly * tw + x0 + i
                    if e >= last[p] or pw[i] < pm:
                        continue
                    dx = tx0 + x0 + i - mx
                    g0 = gpix[0, p]
                    g1 = gpix[1, p]
                    g2 = gpix[2, p]
                    gauss = ex[i]
                    raw = o * gauss
                    clamped = raw > alpha_max
                    alpha = alpha_max if clamped else raw
                    inv = 1.0 / (1.0 - alpha)
                    T_before = T[p] * inv
                    w = alpha * T_before
                    a6 += w * g0
                    a7 += w * g1
                    a8 += w * g2
                    dl_dalpha = (g0 * (cr * T_before - bacc[0, p] * inv)
                                 + g1 * (cg * T_before - bacc[1, p] * inv)
                                 + g2 * (cbl * T_before - bacc[2, p] * inv)
                                 + ga[p] * inv)
                    bacc[0, p] += cr * w
                    bacc[1, p] += cg * w
                    bacc[2, p] += cbl * w
                    T[p] = T_before
                    if clamped:
                        continue
                    a5 += gauss * dl_dalpha
                    dl_dpower = alpha * dl_dalpha
                    # power = -1/2 d^T Q d with d = pixel - mean
                    a0 += dl_dpower * (ca * dx + cb * dy)
                    a1 += dl_dpower * (cb * dx + cc * dy)
                    a2 += -0.5 * dl_dpower * dx * dx
                    a3 += -dl_dpower * dx * dy
                    a4 += -0.5 * dl_dpower * dy * dy
            egrad[e, 0] = a0
            egrad[e, 1] = a1
            egrad[e, 2] = a2
            egrad[e, 3] = a3
            egrad[e, 4] = a4
            egrad[e, 5] = a5
            egrad[e, 6] = a6
            egrad[e, 7] = a7
            egrad[e, 8] = a8


@njit(cache=True)
def _reduce_entries(entries, egrad, n):
    out = np.zeros((n, egrad.shape[1]))
    for e in range(entries.shape[0]):
        k = entries[e]
        for j in range(egrad.shape[1]):
            out[k, j] += egrad[e, j]
    return out


@njit(cache=True)
def _preprocess_backward(rot, log_scale, opl, color, Rw, fx, fy, lim_x, lim_y, p_cam, conic, valid, sgrad,
                         g_mu, g_rot, g_ls, g_opl, g_col):
    for k in range(rot.shape[0]):
        if not valid[k]:
            continue
        gmx, gmy = sgrad[k, 0], sgrad[k, 1]
        # conic gradient as a symmetric matrix, then d(Q^-1): dL/dCov = -Q G Q
        Q = np.empty((2, 2))
        Q[0, 0] = conic[k, 0]
        Q[0, 1] = conic[k, 1]
        Q[1, 0] = conic[k, 1]
        Q[1, 1] = conic[k, 2]
        GQ = np.empty((2, 2))
        GQ[0, 0] = sgrad[k, 2]
        GQ[0, 1] = 0.5 * sgrad[k, 3]
        GQ[1, 0] = 0.5 * sgrad[k, 3]
        GQ[1, 1] = sgrad[k, 4]
        G2 = -(Q @ GQ @ Q)

        px, py, pz = p_cam[k, 0], p_cam[k, 1], p_cam[k, 2]
        iz = 1.0 / pz
        # clamped x/z, y/z carry no gradient through the Jacobian
        tx = px * iz
        ty = py * iz
        free_x = -lim_x <= tx <= lim_x
        free_y = -lim_y <= ty <= lim_y
        tx = min(max(tx, -lim_x), lim_x)
        ty = min(max(ty, -lim_y), lim_y)
        J = np.zeros((2, 3))
        J[0, 0] = fx * iz
        J[0, 2] = -fx * tx * iz
        J[1, 1] = fy * iz
        J[1, 2] = -fy * ty * iz
        T = J @ Rw
        R = _quat_rotmat(rot[k, 0], rot[k, 1], rot[k, 2], rot[k, 3])
        s = np.empty(3)
        M = np.empty((3, 3))
        for j in range(3):
            s[j] = np.exp(np.float64(log_scale[k, j]))
            for i in range(3):
                M[i, j] = R[i, j] * s[j]
        Sig = M @ M.T

        G3 = T.T @ G2 @ T
        GT = 2.0 * (G2 @ T @ Sig)
        GJ = GT @ Rw.T

        # camera-space mean: through the projected center and through J
        gx = gmx * fx * iz
        gy = gmy * fy * iz
        gz = -gmx * fx * px * iz * iz - gmy * fy * py * iz * iz
        # J02 = -fx tx / z with tx = x / z unless clamped
        gz += GJ[0, 0] * (-fx * iz * iz) + GJ[1, 1] * (-fy * iz * iz)
        if free_x:
            gx += GJ[0, 2] * (-fx * iz * iz)
            gz += GJ[0, 2] * (2.0 * fx * tx * iz * iz)
        else:
            gz += GJ[0, 2] * (fx * tx * iz * iz)
        if free_y:
            gy += GJ[1, 2] * (-fy * iz * iz)
            gz += GJ[1, 2] * (2.0 * fy * ty * iz * iz)
        else:
            gz += GJ[1, 2] * (fy * ty * iz * iz)
        for i in range(3):
            g_mu[k, i] = Rw[0, i] * gx + Rw[1, i] * gy + Rw[2, i] * gz

        GM = 2.0 * (G3 @ M)
        GR = np.empty((3, 3))
        for j in range(3):
            acc = 0.0
            for i in range(3):
                acc += GM[i, j] * R[i, j]
                GR[i, j] = GM[i, j] * s[j]
            g_ls[k, j] = acc * s[j]

        qn = np.sqrt(rot[k, 0] ** 2 + rot[k, 1] ** 2 + rot[k, 2] ** 2 + rot[k, 3] ** 2)
        w, x, y, z = rot[k, 0] / qn, rot[k, 1] / qn, rot[k, 2] / qn, rot[k, 3] / qn
        gw = 2.0 * (-z * GR[0, 1] + y * GR[0, 2] + z * GR[1, 0] - x * GR[1, 2] - y * GR[2, 0] + x * GR[2, 1])
        gxq = 2.0 * (y * GR[0, 1] + z * GR[0, 2] + y * GR[1, 0] - 2 * x * GR[1, 1] - w * GR[1, 2]
                     + z * GR[2, 0] + w * GR[2, 1] - 2 * x * GR[2, 2])
        gyq = 2.0 * (-2 * y * GR[0, 0] + x * GR[0, 1] + w * GR[0, 2] + x * GR[1, 0] + z * GR[1, 2]
                     - w * GR[2, 0] + z * GR[2, 1] - 2 * y * GR[2, 2])
        gzq = 2.0 * (-2 * z * GR[0, 0] - w * GR[0, 1] + x * GR[0, 2] + w * GR[1, 0] - 2 * z * GR[1, 1]
                     + y * GR[1, 2] + x * GR[2, 0] + y * GR[2, 1])
        dot = w * gw + x * gxq + y * gyq + z * gzq
        g_rot[k, 0] = (gw - w * dot) / qn
        g_rot[k, 1] = (gxq - x * dot) / qn
        g_rot[k, 2] = (gyq - y * dot) / qn
        g_rot[k, 3] = (gzq - z * dot) / qn

        o = 1.0 / (1.0 + np.exp(-np.float64(opl[k])))
        g_opl[k] = sgrad[k, 5] * o * (1.0 - o)
        for ch in range(3):
            inside = color[k, ch] >= 0.0 and color[k, ch] <= 1.0
            g_col[k, ch] = sgrad[k, 6 + ch] if inside else 0.0


# --------------------------------------------------------------------------
# python surface


@dataclass
class _Projected:
    p_cam: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    pmin: np.ndarray
    rect: np.ndarray
    valid: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    camera: Camera
    settings: RasterSettings
    background: np.ndarray
    n_gaussians: int
    # transient state for the backward pass
    projected: _Projected = field(repr=False, default=None)
    offsets: np.ndarray = field(repr=False, default=None)
    entries: np.ndarray = field(repr=False, default=None)
    final_T: np.ndarray = field(repr=False, default=None)
    last: np.ndarray = field(repr=False, default=None)

    @property
    def depth_valid(self):
        return self.alpha > DEPTH_ALPHA_MIN

    def tile_lists(self):
        """Per-tile Gaussian index lists, each sorted front to back."""
        return [self.entries[self.offsets[t]:self.offsets[t + 1]] for t in range(len(self.offsets) - 1)]


@dataclass
class FieldGradients:
    mu: np.ndarray
    rot: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    mean2d: np.ndarray
    visible: np.ndarray

    def __len__(self):
        return len(self.mu)

    def as_dict(self):
        return {
            "mu": self.mu, "rot": self.rot, "log_scale": self.log_scale,
            "opacity_logit": self.opacity_logit, "color": self.color,
        }

    def mean2d_norm(self, camera: Camera):
        """Screen-space positional gradient norm in NDC units (pixels * size / 2)."""
        g = self.mean2d * np.array([camera.width * 0.5, camera.height * 0.5])
        return np.linalg.norm(g, axis=1)


def preprocess(field_: GaussianField, camera: Camera, settings: RasterSettings = RasterSettings()) -> _Projected:
    n = len(field_)
    dt = field_.dtype
    out = _Projected(
        p_cam=np.zeros((n, 3), dt), mean2d=np.zeros((n, 2), dt), cov2d=np.zeros((n, 3), dt),
        conic=np.zeros((n, 3), dt), depth=np.zeros(n, dt), opacity=np.zeros(n, dt),
        color=np.zeros((n, 3), dt), pmin=np.zeros(n, dt), rect=np.zeros((n, 4), np.int64),
        valid=np.zeros(n, np.bool_),
    )
    if n == 0:
        return out
    _preprocess(
        field_.mu, field_.rot, field_.log_scale, field_.opacity_logit, field_.color,
        camera.R, camera.t, float(camera.fx), float(camera.fy), float(camera.cx), float(camera.cy),
        camera.width, camera.height, float(settings.lowpass), float(settings.alpha_eps),
        float(settings.near), *frustum_limits(camera), settings.tile_size, out.p_cam, out.mean2d, out.cov2d, out.conic, out.depth, out.opacity,
        out.color, out.pmin, out.rect, out.valid,
    )
    return out


def bin_splats(proj: _Projected, camera: Camera, tile: int):
    n_tx = (camera.width + tile - 1) // tile
    n_ty = (camera.height + tile - 1) // tile
    # depth ascending, original index breaks ties
    order = np.lexsort((np.arange(len(proj.depth)), proj.depth.astype(np.float64)))
    return _bin(order.astype(np.int64), proj.rect, proj.valid, n_tx, n_ty)


def render(field_: GaussianField, camera: Camera, background=(0.0, 0.0, 0.0),
           settings: RasterSettings = RasterSettings(), n_threads: int | None = None) -> RenderOutput:
    dt = field_.dtype
    bg = np.asarray(background, dtype=dt).reshape(3)
    H, W = camera.height, camera.width
    with threads(n_threads):
        proj = preprocess(field_, camera, settings)
        offsets, entries = bin_splats(proj, camera, settings.tile_size)
        color = np.empty((H, W, 3), dt)
        alpha = np.empty((H, W), dt)
        depth = np.empty((H, W), dt)
        final_T = np.empty((H, W), dt)
        last = np.empty((H, W), np.int64)
        _forward_tiles(
            offsets, entries, proj.mean2d, proj.cov2d, proj.conic, proj.opacity, proj.color, proj.depth, proj.pmin,
            W, H, settings.tile_size, bg, dt.type(settings.alpha_max), dt.type(settings.t_min),
            color, alpha, depth, final_T, last,
        )
    return RenderOutput(color, alpha, depth, camera, settings, bg, len(field_), proj, offsets, entries, final_T, last)


def render_backward(field_: GaussianField, camera: Camera, output: RenderOutput, d_color, d_alpha=None,
                    n_threads: int | None = None) -> FieldGradients:
    """Gradients of sum(d_color * color) + sum(d_alpha * alpha) w.r.t. every parameter."""
    if output.projected is None:
        raise ValueError("render output carries no backward state")
    if output.n_gaussians != len(field_) or output.camera is not camera:
        raise ValueError("render output was produced for a different field or camera")
    H, W = camera.height, camera.width
    dt = field_.dtype
    d_color = np.ascontiguousarray(d_color, dtype=dt)
    if d_color.shape != (H, W, 3):
        raise ValueError(f"d_color must have shape {(H, W, 3)}, got {d_color.shape}")
    d_alpha = np.zeros((H, W), dt) if d_alpha is None else np.ascontiguousarray(d_alpha, dtype=dt)
    if d_alpha.shape != (H, W):
        raise ValueError(f"d_alpha must have shape {(H, W)}, got {d_alpha.shape}")
    proj = output.projected
    n = len(field_)
    with threads(n_threads):
        egrad = np.zeros((len(output.entries), 9), dt)
        _backward_tiles(
            output.offsets, output.entries, proj.mean2d, proj.cov2d, proj.conic, proj.opacity, proj.color, proj.pmin,
            W, H, output.settings.tile_size, output.background, dt.type(output.settings.alpha_max),
            output.final_T, output.last, d_color, d_alpha, egrad,
        )
        sgrad = _reduce_entries(output.entries, egrad, n)
    g = {name: np.zeros_like(getattr(field_, name)) for name in ("mu", "rot", "log_scale", "opacity_logit", "color")}
    if n:
        _preprocess_backward(
            field_.rot, field_.log_scale, field_.opacity_logit, field_.color, camera.R,
            float(camera.fx), float(camera.fy), *frustum_limits(camera), proj.p_cam, proj.conic, proj.valid, sgrad,
            g["mu"], g["rot"], g["log_scale"], g["opacity_logit"], g["color"],
        )
    return FieldGradients(
        g["mu"], g["rot"], g["log_scale"], g["opacity_logit"], g["color"],
        sgrad[:, :2].copy(), proj.valid.copy(),
    )


def render_depth(field_: GaussianField, camera: Camera, settings: RasterSettings = RasterSettings(),
                 n_threads: int | None = None):
    """Alpha-normalized expected depth; NaN where accumulated alpha <= 1e-6."""
    out = render(field_, camera, settings=settings, n_threads=n_threads)
    depth = out.depth.astype(np.float64)
    depth[~out.depth_valid] = np.nan
    return depth
