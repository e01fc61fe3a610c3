"""Pure-numpy fallbacks for the voxel ray-marching kernels.

Same arithmetic as the numba kernels, vectorized over rays x samples.
"""

import numpy as np


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softplus(x):
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def _interp_setup(points, lo, cell, shape):
    """Trilinear indices/fractions for points (..., 3), clamped at borders."""
    u = (points - lo) / cell - 0.5
    base = np.floor(u).astype(np.int64)
    base = np.clip(base, 0, np.asarray(shape, dtype=np.int64) - 2)
    frac = np.clip(u - base, 0.0, 1.0)
    return base, frac


def _corner_weights(frac):
    """Weights for the 8 trilinear corners, order (di, dj, dk) lexicographic."""
    fu, fv, fw = frac[..., 0], frac[..., 1], frac[..., 2]
    out = []
    for di in range(2):
        wi = fu if di == 1 else 1.0 - fu
        for dj in range(2):
            wj = fv if dj == 1 else 1.0 - fv
            for dk in range(2):
                wk = fw if dk == 1 else 1.0 - fw
                out.append(wi * wj * wk)
    return out


_CORNERS = [(di, dj, dk) for di in range(2) for dj in range(2) for dk in range(2)]


def _sample_grid(density, sh, points, lo, cell):
    base, frac = _interp_setup(points, lo, cell, density.shape)
    weights = _corner_weights(frac)
    raw = np.zeros(points.shape[:-1])
    coeffs = np.zeros(points.shape[:-1] + (12,))
    for (di, dj, dk), w in zip(_CORNERS, weights):
        ii = base[..., 0] + di
        jj = base[..., 1] + dj
        kk = base[..., 2] + dk
        raw += w * density[ii, jj, kk]
        coeffs += w[..., None] * sh[ii, jj, kk, :]
    return raw, coeffs, base, weights


def _sample_colors(coeffs, dirs):
    """coeffs (..., 12), dirs (..., 3) -> (..., 3) channel colors."""
    k = coeffs.reshape(coeffs.shape[:-1] + (3, 4))
    affine = k[..., 0] + np.sum(k[..., 1:] * dirs[..., None, :], axis=-1)
    return _sigmoid(affine)


def _ray_state(density, sh, lo, cell, origins, dirs, t0s, t1s, n_samples):
    n_rays = origins.shape[0]
    delta = (t1s - t0s) / n_samples
    ts = t0s[:, None] + (np.arange(n_samples) + 0.5) * delta[:, None]
    points = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    raw, coeffs, _, _ = _sample_grid(density, sh, points, lo, cell)
    sigma = _softplus(raw)
    alpha = 1.0 - np.exp(-sigma * delta[:, None])
    # transmittance before each sample
    trans = np.cumprod(1.0 - alpha, axis=1)
    trans = np.concatenate([np.ones((n_rays, 1)), trans[:, :-1]], axis=1)
    t_end = trans[:, -1] * (1.0 - alpha[:, -1])
    wgt = trans * alpha
    colors = _sample_colors(coeffs, np.broadcast_to(dirs[:, None, :], points.shape))
    return ts, points, sigma, alpha, trans, t_end, wgt, colors


def voxel_forward(density, sh, lo, cell, origins, dirs, t0s, t1s, n_samples, bg, far):
    n_rays = origins.shape[0]
    empty = ~(t1s > t0s)
    ts, _, _, _, _, t_end, wgt, colors = _ray_state(
        density, sh, lo, cell, origins, dirs, np.where(empty, 0.0, t0s),
        np.where(empty, 1.0, t1s), n_samples
    )
    out_rgb = np.einsum("rs,rsc->rc", wgt, colors) + t_end[:, None] * bg
    out_depth = np.sum(wgt * ts, axis=1) + t_end * far
    out_opac = np.sum(wgt, axis=1)
    out_rgb[empty] = bg
    out_depth[empty] = far
    out_opac[empty] = 0.0
    t_end = np.where(empty, 1.0, t_end)
    return out_rgb, out_depth, out_opac, t_end


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
    live = t1s > t0s
    if not np.any(live):
        return
    origins = origins[live]
    dirs = dirs[live]
    t0s = t0s[live]
    t1s = t1s[live]
    d_rgb = d_rgb[live]
    d_depth = d_depth[live]
    d_opac = d_opac[live]

    delta = (t1s - t0s) / n_samples
    ts, points, sigma, alpha, trans, t_end, wgt, colors = _ray_state(
        density, sh, lo, cell, origins, dirs, t0s, t1s, n_samples
    )

    # per-sample scalar value v and the suffix sums S_i = sum_{j>i} w_j v_j + T_end v_end
    v = (
        np.einsum("rc,rsc->rs", d_rgb, colors)
        + d_depth[:, None] * ts
        + d_opac[:, None]
    )
    v_end = d_rgb @ np.asarray(bg) + d_depth * far
    wv = wgt * v
    suffix = np.concatenate(
        [np.cumsum(wv[:, ::-1], axis=1)[:, ::-1][:, 1:], np.zeros((len(t0s), 1))], axis=1
    ) + (t_end * v_end)[:, None]

    one_m_a = 1.0 - alpha
    denom = np.where(one_m_a > 0.0, one_m_a, 1.0)
    d_alpha = trans * v - suffix / denom
    d_sigma = d_alpha * delta[:, None] * one_m_a
    d_raw = d_sigma * (1.0 - np.exp(-sigma))

    d_aff = wgt[..., None] * d_rgb[:, None, :] * colors * (1.0 - colors)  # (R,S,3)
    dirs_b = np.broadcast_to(dirs[:, None, :], points.shape)
    ones = np.ones(points.shape[:-1] + (1,))
    basis = np.concatenate([ones, dirs_b], axis=-1)  # (R,S,4)
    d_coeffs = (d_aff[..., :, None] * basis[..., None, :]).reshape(
        points.shape[:-1] + (12,)
    )

    base, frac = _interp_setup(points, lo, cell, density.shape)
    weights = _corner_weights(frac)
    for (di, dj, dk), w in zip(_CORNERS, weights):
        idx = (base[..., 0] + di, base[..., 1] + dj, base[..., 2] + dk)
        np.add.at(g_density, idx, w * d_raw)
        np.add.at(g_sh, idx, w[..., None] * d_coeffs)
