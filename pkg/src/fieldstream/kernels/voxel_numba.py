"""Numba ray-marching kernels for the voxel radiance field.

Grid layout: density (Nx, Ny, Nz) raw values activated by softplus;
sh (Nx, Ny, Nz, 12) as 3 color channels x 4 coefficients with the SH
basis constants folded in, so channel c of a sample viewed along unit
direction d is sigmoid(k0 + k1*dx + k2*dy + k3*dz).

Values live at cell centers; interpolation clamps at the grid border.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, inline="always")
def _softplus(x):
    if x > 30.0:
        return x
    if x < -30.0:
        return math.exp(x)
    return math.log1p(math.exp(x))


@njit(cache=True)
def voxel_forward(density, sh, lo, cell, origins, dirs, t0s, t1s, n_samples, bg, far):
    """March every ray, compositing front-to-back.

    Returns (rgb (R,3), depth (R), opacity (R), t_end (R)). Rays with an
    empty interval (t1 <= t0) produce background, depth = far, opacity 0.
    """
    n_rays = origins.shape[0]
    nx, ny, nz = density.shape
    out_rgb = np.zeros((n_rays, 3))
    out_depth = np.zeros(n_rays)
    out_opac = np.zeros(n_rays)
    out_tend = np.ones(n_rays)
    coeffs = np.empty(12)

    for r in range(n_rays):
        t0 = t0s[r]
        t1 = t1s[r]
        if not (t1 > t0):
            out_rgb[r, 0] = bg[0]
            out_rgb[r, 1] = bg[1]
            out_rgb[r, 2] = bg[2]
            out_depth[r] = far
            continue
        ox = origins[r, 0]
        oy = origins[r, 1]
        oz = origins[r, 2]
        dx = dirs[r, 0]
        dy = dirs[r, 1]
        dz = dirs[r, 2]
        delta = (t1 - t0) / n_samples
        trans = 1.0
        acc_r = 0.0
        acc_g = 0.0
        acc_b = 0.0
        acc_d = 0.0
        acc_w = 0.0
        for s in range(n_samples):
            t = t0 + (s + 0.5) * delta
            u = (ox + t * dx - lo[0]) / cell[0] - 0.5
            v = (oy + t * dy - lo[1]) / cell[1] - 0.5
            w = (oz + t * dz - lo[2]) / cell[2] - 0.5
            i0 = int(math.floor(u))
            j0 = int(math.floor(v))
            k0 = int(math.floor(w))
            i0 = min(max(i0, 0), nx - 2)
            j0 = min(max(j0, 0), ny - 2)
            k0 = min(max(k0, 0), nz - 2)
            fu = min(max(u - i0, 0.0), 1.0)
            fv = min(max(v - j0, 0.0), 1.0)
            fw = min(max(w - k0, 0.0), 1.0)

            raw = 0.0
            for c in range(12):
                coeffs[c] = 0.0
            for di in range(2):
                wi = fu if di == 1 else 1.0 - fu
                for dj in range(2):
                    wj = fv if dj == 1 else 1.0 - fv
                    for dk in range(2):
                        wk = fw if dk == 1 else 1.0 - fw
                        wc = wi * wj * wk
                        ii = i0 + di
                        jj = j0 + dj
                        kk = k0 + dk
                        raw += wc * density[ii, jj, kk]
                        for c in range(12):
                            coeffs[c] += wc * sh[ii, jj, kk, c]

            sigma = _softplus(raw)
            alpha = 1.0 - math.exp(-sigma * delta)
            wgt = trans * alpha
            cr = _sigmoid(coeffs[0] + coeffs[1] * dx + coeffs[2] * dy + coeffs[3] * dz)
            cg = _sigmoid(coeffs[4] + coeffs[5] * dx + coeffs[6] * dy + coeffs[7] * dz)
            cb = _sigmoid(coeffs[8] + coeffs[9] * dx + coeffs[10] * dy + coeffs[11] * dz)
            acc_r += wgt * cr
            acc_g += wgt * cg
            acc_b += wgt * cb
            acc_d += wgt * t
            acc_w += wgt
            trans *= 1.0 - alpha

        out_rgb[r, 0] = acc_r + trans * bg[0]
        out_rgb[r, 1] = acc_g + trans * bg[1]
        out_rgb[r, 2] = acc_b + trans * bg[2]
        out_depth[r] = acc_d + trans * far
        out_opac[r] = acc_w
        out_tend[r] = trans
    return out_rgb, out_depth, out_opac, out_tend


@njit(cache=True)
def voxel_backward(
    density,
    sh,
    lo,
    cell,
    origins,
    dirs,
    t0s,
    t1s,
    n_samples,
    bg,
    far,
    d_rgb,
    d_depth,
    d_opac,
    g_density,
    g_sh,
):
    """Reverse accumulation through compositing, interpolation, and the
    activations; gradients are accumulated into g_density / g_sh."""
    n_rays = origins.shape[0]
    nx, ny, nz = density.shape
    coeffs = np.empty(12)
    alpha_s = np.empty(n_samples)
    trans_s = np.empty(n_samples)
    sigma_s = np.empty(n_samples)
    color_s = np.empty((n_samples, 3))

    for r in range(n_rays):
        t0 = t0s[r]
        t1 = t1s[r]
        if not (t1 > t0):
            continue
        gr = d_rgb[r, 0]
        gg = d_rgb[r, 1]
        gb = d_rgb[r, 2]
        gd = d_depth[r]
        go = d_opac[r]
        if gr == 0.0 and gg == 0.0 and gb == 0.0 and gd == 0.0 and go == 0.0:
            continue
        ox = origins[r, 0]
        oy = origins[r, 1]
        oz = origins[r, 2]
        dx = dirs[r, 0]
        dy = dirs[r, 1]
        dz = dirs[r, 2]
        delta = (t1 - t0) / n_samples

        # forward replay, caching per-sample state
        trans = 1.0
        for s in range(n_samples):
            t = t0 + (s + 0.5) * delta
            u = (ox + t * dx - lo[0]) / cell[0] - 0.5
            v = (oy + t * dy - lo[1]) / cell[1] - 0.5
            w = (oz + t * dz - lo[2]) / cell[2] - 0.5
            i0 = min(max(int(math.floor(u)), 0), nx - 2)
            j0 = min(max(int(math.floor(v)), 0), ny - 2)
            k0 = min(max(int(math.floor(w)), 0), nz - 2)
            fu = min(max(u - i0, 0.0), 1.0)
            fv = min(max(v - j0, 0.0), 1.0)
            fw = min(max(w - k0, 0.0), 1.0)
            raw = 0.0
            for c in range(12):
                coeffs[c] = 0.0
            for di in range(2):
                wi = fu if di == 1 else 1.0 - fu
                for dj in range(2):
                    wj = fv if dj == 1 else 1.0 - fv
                    for dk in range(2):
                        wk = fw if dk == 1 else 1.0 - fw
                        wc = wi * wj * wk
                        ii = i0 + di
                        jj = j0 + dj
                        kk = k0 + dk
                        raw += wc * density[ii, jj, kk]
                        for c in range(12):
                            coeffs[c] += wc * sh[ii, jj, kk, c]
            sigma = _softplus(raw)
            alpha = 1.0 - math.exp(-sigma * delta)
            sigma_s[s] = sigma
            alpha_s[s] = alpha
            trans_s[s] = trans
            color_s[s, 0] = _sigmoid(coeffs[0] + coeffs[1] * dx + coeffs[2] * dy + coeffs[3] * dz)
            color_s[s, 1] = _sigmoid(coeffs[4] + coeffs[5] * dx + coeffs[6] * dy + coeffs[7] * dz)
            color_s[s, 2] = _sigmoid(coeffs[8] + coeffs[9] * dx + coeffs[10] * dy + coeffs[11] * dz)
            trans *= 1.0 - alpha

        # suffix pass
        suffix = trans * (gr * bg[0] + gg * bg[1] + gb * bg[2] + gd * far)
        for s in range(n_samples - 1, -1, -1):
            t = t0 + (s + 0.5) * delta
            alpha = alpha_s[s]
            tr = trans_s[s]
            wgt = tr * alpha
            cr = color_s[s, 0]
            cg = color_s[s, 1]
            cb = color_s[s, 2]
            val = gr * cr + gg * cg + gb * cb + gd * t + go
            one_m_a = 1.0 - alpha
            # fully opaque sample: everything behind it has zero weight and
            # suffix is exactly 0, so the quotient term vanishes
            denom = one_m_a if one_m_a > 0.0 else 1.0
            d_alpha = tr * val - suffix / denom
            suffix += wgt * val
            d_sigma = d_alpha * delta * one_m_a
            # d(softplus)/draw = sigmoid(raw) = 1 - exp(-sigma)
            d_raw = d_sigma * (1.0 - math.exp(-sigma_s[s]))

            da_r = wgt * gr * cr * (1.0 - cr)
            da_g = wgt * gg * cg * (1.0 - cg)
            da_b = wgt * gb * cb * (1.0 - cb)

            u = (ox + t * dx - lo[0]) / cell[0] - 0.5
            v = (oy + t * dy - lo[1]) / cell[1] - 0.5
            w = (oz + t * dz - lo[2]) / cell[2] - 0.5
            i0 = min(max(int(math.floor(u)), 0), nx - 2)
            j0 = min(max(int(math.floor(v)), 0), ny - 2)
            k0 = min(max(int(math.floor(w)), 0), nz - 2)
            fu = min(max(u - i0, 0.0), 1.0)
            fv = min(max(v - j0, 0.0), 1.0)
            fw = min(max(w - k0, 0.0), 1.0)
            for di in range(2):
                wi = fu if di == 1 else 1.0 - fu
                for dj in range(2):
                    wj = fv if dj == 1 else 1.0 - fv
                    for dk in range(2):
                        wk = fw if dk == 1 else 1.0 - fw
                        wc = wi * wj * wk
                        if wc == 0.0:
                            continue
                        ii = i0 + di
                        jj = j0 + dj
                        kk = k0 + dk
                        g_density[ii, jj, kk] += wc * d_raw
                        g_sh[ii, jj, kk, 0] += wc * da_r
                        g_sh[ii, jj, kk, 1] += wc * da_r * dx
                        g_sh[ii, jj, kk, 2] += wc * da_r * dy
                        g_sh[ii, jj, kk, 3] += wc * da_r * dz
                        g_sh[ii, jj, kk, 4] += wc * da_g
                        g_sh[ii, jj, kk, 5] += wc * da_g * dx
                        g_sh[ii, jj, kk, 6] += wc * da_g * dy
                        g_sh[ii, jj, kk, 7] += wc * da_g * dz
                        g_sh[ii, jj, kk, 8] += wc * da_b
                        g_sh[ii, jj, kk, 9] += wc * da_b * dx
                        g_sh[ii, jj, kk, 10] += wc * da_b * dy
                        g_sh[ii, jj, kk, 11] += wc * da_b * dz
