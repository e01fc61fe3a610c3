"""Pure-numpy fallbacks for the splat blending kernels.

Vectorized per tile over (pixels x gaussians); arithmetic matches the
numba kernels, including the alpha clamp/skip rules and the early
transmittance stop.
"""

import numpy as np


def _tile_pixels(tx, ty, tile_size, width, height):
    y0, y1 = ty * tile_size, min((ty + 1) * tile_size, height)
    x0, x1 = tx * tile_size, min((tx + 1) * tile_size, width)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    return xs.ravel() + 0.5, ys.ravel() + 0.5, (y0, y1, x0, x1)


def _tile_blend_state(
    means2d, conic, opac, q_max, gidx, pcx, pcy, t_floor, alpha_min, alpha_max
):
    """Per-tile blend state: alpha (P,G), weights, processed mask, t_end."""
    dx = pcx[:, None] - means2d[gidx, 0][None, :]
    dy = pcy[:, None] - means2d[gidx, 1][None, :]
    a = conic[gidx, 0][None, :]
    b = conic[gidx, 1][None, :]
    c = conic[gidx, 2][None, :]
    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    gauss = np.exp(-0.5 * q)
    alpha_raw = opac[gidx][None, :] * gauss
    alpha = np.minimum(alpha_raw, alpha_max)
    eff = np.where((q <= q_max[gidx][None, :]) & (alpha >= alpha_min), alpha, 0.0)
    # transmittance before each gaussian; a gaussian is reached only while
    # the running transmittance has not yet dropped below the floor
    t_before = np.cumprod(1.0 - eff, axis=1)
    t_before = np.concatenate([np.ones((len(pcx), 1)), t_before[:, :-1]], axis=1)
    reached = t_before >= t_floor
    processed = reached & (eff > 0.0)
    wgt = np.where(processed, t_before * alpha, 0.0)
    t_end = np.prod(np.where(processed, 1.0 - alpha, 1.0), axis=1)
    return dx, dy, q, gauss, alpha_raw, alpha, t_before, processed, wgt, t_end


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
    out_rgb[:] = bg
    out_depth = np.full((height, width), float(far))
    out_alpha = np.zeros((height, width))
    out_tend = np.ones((height, width))
    n_tiles = tile_offsets.shape[0] - 1

    for tile in range(n_tiles):
        lo, hi = tile_offsets[tile], tile_offsets[tile + 1]
        ty, tx = divmod(tile, tiles_x)
        pcx, pcy, (y0, y1, x0, x1) = _tile_pixels(tx, ty, tile_size, width, height)
        if hi == lo:
            continue
        gidx = tile_gauss[lo:hi]
        _, _, _, _, _, alpha, _, processed, wgt, t_end = _tile_blend_state(
            means2d, conic, opac, q_max, gidx, pcx, pcy, t_floor, alpha_min, alpha_max
        )
        rgb = wgt @ colors[gidx] + t_end[:, None] * bg
        dep = wgt @ depths[gidx] + t_end * far
        shape = (y1 - y0, x1 - x0)
        out_rgb[y0:y1, x0:x1] = rgb.reshape(shape + (3,))
        out_depth[y0:y1, x0:x1] = dep.reshape(shape)
        out_alpha[y0:y1, x0:x1] = wgt.sum(axis=1).reshape(shape)
        out_tend[y0:y1, x0:x1] = t_end.reshape(shape)
    return out_rgb, out_depth, out_alpha, out_tend


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
    bg = np.asarray(bg)

    for tile in range(n_tiles):
        lo, hi = tile_offsets[tile], tile_offsets[tile + 1]
        if hi == lo:
            continue
        ty, tx = divmod(tile, tiles_x)
        pcx, pcy, (y0, y1, x0, x1) = _tile_pixels(tx, ty, tile_size, width, height)
        gidx = tile_gauss[lo:hi]
        dx, dy, q, gauss, alpha_raw, alpha, t_before, processed, wgt, t_end = (
            _tile_blend_state(
                means2d, conic, opac, q_max, gidx, pcx, pcy, t_floor, alpha_min, alpha_max
            )
        )
        gr = d_rgb[y0:y1, x0:x1].reshape(-1, 3)
        gd = d_depth[y0:y1, x0:x1].ravel()
        ga = d_alpha[y0:y1, x0:x1].ravel()

        # per (pixel, gaussian) scalar value and its suffix sums
        val = gr @ colors[gidx].T + gd[:, None] * depths[gidx][None, :] + ga[:, None]
        v_end = gr @ bg + gd * far
        wv = wgt * val
        suffix = (
            np.concatenate(
                [np.cumsum(wv[:, ::-1], axis=1)[:, ::-1][:, 1:], np.zeros((len(gd), 1))],
                axis=1,
            )
            + (t_end * v_end)[:, None]
        )
        d_a = np.where(processed, t_before * val - suffix / (1.0 - alpha), 0.0)

        np.add.at(g_colors, gidx, wgt.T @ gr)
        np.add.at(g_depths, gidx, wgt.T @ gd)

        unclamped = processed & (alpha_raw <= alpha_max)
        d_a_u = np.where(unclamped, d_a, 0.0)
        np.add.at(g_opac, gidx, np.sum(d_a_u * gauss, axis=0))
        d_q = -0.5 * alpha * d_a_u
        np.add.at(
            g_conic,
            gidx,
            np.stack(
                [
                    np.sum(d_q * dx * dx, axis=0),
                    np.sum(d_q * 2.0 * dx * dy, axis=0),
                    np.sum(d_q * dy * dy, axis=0),
                ],
                axis=1,
            ),
        )
        a = conic[gidx, 0][None, :]
        b = conic[gidx, 1][None, :]
        c = conic[gidx, 2][None, :]
        dq_dx = 2.0 * (a * dx + b * dy)
        dq_dy = 2.0 * (b * dx + c * dy)
        np.add.at(
            g_means2d,
            gidx,
            np.stack(
                [np.sum(-d_q * dq_dx, axis=0), np.sum(-d_q * dq_dy, axis=0)], axis=1
            ),
        )
