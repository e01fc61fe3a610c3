"""Numba tile-blending kernels for the Gaussian splatting backend.

Inputs are pre-projected per-Gaussian quantities: 2D means in pixel-center
coordinates, packed inverse covariances (a, b, c) with the quadratic form
q = a*dx^2 + 2*b*dx*dy + c*dy^2, activated opacities, per-Gaussian RGB,
and camera-space depths. ``tile_gauss``/``tile_offsets`` give, per image
tile, the Gaussian indices sorted front to back.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def splat_forward(
    means2d,
    conic,
    opac,
    colors,
    depths,
    q_max,
    tile_gauss,
    tile_offsets,
    tiles_x,
    width,
    height,
    tile_size,
    bg,
    far,
    t_floor,
    alpha_min,
    alpha_max,
):
    out_rgb = np.empty((height, width, 3))
    out_depth = np.empty((height, width))
    out_alpha = np.zeros((height, width))
    out_tend = np.ones((height, width))
    n_tiles = tile_offsets.shape[0] - 1

    for tile in range(n_tiles):
        ty = tile // tiles_x
        tx = tile % tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        lo = tile_offsets[tile]
        hi = tile_offsets[tile + 1]
        for py in range(y0, y1):
            cy = py + 0.5
            for px in range(x0, x1):
                cx = px + 0.5
                trans = 1.0
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                acc_d = 0.0
                acc_w = 0.0
                for n in range(lo, hi):
                    g = tile_gauss[n]
                    dx = cx - means2d[g, 0]
                    dy = cy - means2d[g, 1]
                    q = (
                        conic[g, 0] * dx * dx
                        + 2.0 * conic[g, 1] * dx * dy
                        + conic[g, 2] * dy * dy
                    )
                    if q > q_max[g]:  # alpha provably below the blend cutoff
                        continue
                    alpha = opac[g] * math.exp(-0.5 * q)
                    if alpha > alpha_max:
                        alpha = alpha_max
                    if alpha < alpha_min:
                        continue
                    w = trans * alpha
                    acc_r += w * colors[g, 0]
                    acc_g += w * colors[g, 1]
                    acc_b += w * colors[g, 2]
                    acc_d += w * depths[g]
                    acc_w += w
                    trans *= 1.0 - alpha
                    if trans < t_floor:
                        break
                out_rgb[py, px, 0] = acc_r + trans * bg[0]
                out_rgb[py, px, 1] = acc_g + trans * bg[1]
                out_rgb[py, px, 2] = acc_b + trans * bg[2]
                out_depth[py, px] = acc_d + trans * far
                out_alpha[py, px] = acc_w
                out_tend[py, px] = trans
    return out_rgb, out_depth, out_alpha, out_tend


@njit(cache=True)
def splat_backward(
    means2d,
    conic,
    opac,
    colors,
    depths,
    q_max,
    tile_gauss,
    tile_offsets,
    tiles_x,
    width,
    height,
    tile_size,
    bg,
    far,
    t_floor,
    alpha_min,
    alpha_max,
    d_rgb,
    d_depth,
    d_alpha,
    g_means2d,
    g_conic,
    g_opac,
    g_colors,
    g_depths,
):
    n_tiles = tile_offsets.shape[0] - 1
    max_len = 0
    for tile in range(n_tiles):
        ln = tile_offsets[tile + 1] - tile_offsets[tile]
        if ln > max_len:
            max_len = ln
    hit_idx = np.empty(max_len, dtype=np.int64)
    hit_alpha = np.empty(max_len)
    hit_trans = np.empty(max_len)

    for tile in range(n_tiles):
        ty = tile // tiles_x
        tx = tile % tiles_x
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = min(y0 + tile_size, height)
        x1 = min(x0 + tile_size, width)
        lo = tile_offsets[tile]
        hi = tile_offsets[tile + 1]
        if hi == lo:
            continue
        for py in range(y0, y1):
            cy = py + 0.5
            for px in range(x0, x1):
                cx = px + 0.5
                gr = d_rgb[py, px, 0]
                gg = d_rgb[py, px, 1]
                gb = d_rgb[py, px, 2]
                gd = d_depth[py, px]
                ga = d_alpha[py, px]
                if gr == 0.0 and gg == 0.0 and gb == 0.0 and gd == 0.0 and ga == 0.0:
                    continue

                # replay the forward traversal
                trans = 1.0
                n_hit = 0
                for n in range(lo, hi):
                    g = tile_gauss[n]
                    dx = cx - means2d[g, 0]
                    dy = cy - means2d[g, 1]
                    q = (
                        conic[g, 0] * dx * dx
                        + 2.0 * conic[g, 1] * dx * dy
                        + conic[g, 2] * dy * dy
                    )
                    if q > q_max[g]:
                        continue
                    alpha = opac[g] * math.exp(-0.5 * q)
                    if alpha > alpha_max:
                        alpha = alpha_max
                    if alpha < alpha_min:
                        continue
                    hit_idx[n_hit] = g
                    hit_alpha[n_hit] = alpha
                    hit_trans[n_hit] = trans
                    n_hit += 1
                    trans *= 1.0 - alpha
                    if trans < t_floor:
                        break

                suffix = trans * (gr * bg[0] + gg * bg[1] + gb * bg[2] + gd * far)
                for n in range(n_hit - 1, -1, -1):
                    g = hit_idx[n]
                    alpha = hit_alpha[n]
                    tr = hit_trans[n]
                    w = tr * alpha
                    val = (
                        gr * colors[g, 0]
                        + gg * colors[g, 1]
                        + gb * colors[g, 2]
                        + gd * depths[g]
                        + ga
                    )
                    d_a = tr * val - suffix / (1.0 - alpha)
                    suffix += w * val

                    g_colors[g, 0] += w * gr
                    g_colors[g, 1] += w * gg
                    g_colors[g, 2] += w * gb
                    g_depths[g] += w * gd

                    dx = cx - means2d[g, 0]
                    dy = cy - means2d[g, 1]
                    q = (
                        conic[g, 0] * dx * dx
                        + 2.0 * conic[g, 1] * dx * dy
                        + conic[g, 2] * dy * dy
                    )
                    gauss = math.exp(-0.5 * q)
                    if opac[g] * gauss > alpha_max:
                        continue  # clamped: no gradient into opacity/shape
                    g_opac[g] += d_a * gauss
                    d_q = -0.5 * alpha * d_a
                    g_conic[g, 0] += d_q * dx * dx
                    g_conic[g, 1] += d_q * 2.0 * dx * dy
                    g_conic[g, 2] += d_q * dy * dy
                    dq_dx = 2.0 * (conic[g, 0] * dx + conic[g, 1] * dy)
                    dq_dy = 2.0 * (conic[g, 1] * dx + conic[g, 2] * dy)
                    g_means2d[g, 0] += -d_q * dq_dx
                    g_means2d[g, 1] += -d_q * dq_dy
