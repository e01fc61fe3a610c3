"""Pure-numpy fallback for the mesh rasterizer: per-triangle loop with
vectorized bounding-box coverage tests."""

import math

import numpy as np


def mesh_raster(xy, z, colors, tris, width, height, bg, far):
    out_rgb = np.empty((height, width, 3))
    out_rgb[:] = bg
    zbuf = np.full((height, width), np.inf)
    out_opac = np.zeros((height, width))

    for f in range(tris.shape[0]):
        i0, i1, i2 = tris[f]
        x0, y0 = xy[i0]
        x1, y1 = xy[i1]
        x2, y2 = xy[i2]
        area = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        if abs(area) < 1e-12:
            continue
        xmin = max(int(math.floor(min(x0, x1, x2) - 0.5)), 0)
        xmax = min(int(math.ceil(max(x0, x1, x2) - 0.5)), width - 1)
        ymin = max(int(math.floor(min(y0, y1, y2) - 0.5)), 0)
        ymax = min(int(math.ceil(max(y0, y1, y2) - 0.5)), height - 1)
        if xmin > xmax or ymin > ymax:
            continue
        ys, xs = np.mgrid[ymin : ymax + 1, xmin : xmax + 1]
        cx = xs + 0.5
        cy = ys + 0.5
        l0 = ((y1 - y2) * (cx - x2) + (x2 - x1) * (cy - y2)) / area
        l1 = ((y2 - y0) * (cx - x2) + (x0 - x2) * (cy - y2)) / area
        l2 = 1.0 - l0 - l1
        inside = (l0 >= 0.0) & (l1 >= 0.0) & (l2 >= 0.0)
        if not inside.any():
            continue
        iz = 1.0 / z[[i0, i1, i2]]
        inv_z = l0 * iz[0] + l1 * iz[1] + l2 * iz[2]
        pz = 1.0 / inv_z
        win = inside & (pz < zbuf[ymin : ymax + 1, xmin : xmax + 1])
        if not win.any():
            continue
        col = (
            l0[..., None] * colors[i0] * iz[0]
            + l1[..., None] * colors[i1] * iz[1]
            + l2[..., None] * colors[i2] * iz[2]
        ) * pz[..., None]
        sub = (slice(ymin, ymax + 1), slice(xmin, xmax + 1))
        zbuf[sub] = np.where(win, pz, zbuf[sub])
        out_rgb[sub] = np.where(win[..., None], col, out_rgb[sub])
        out_opac[sub] = np.where(win, 1.0, out_opac[sub])

    out_depth = np.where(np.isfinite(zbuf), zbuf, far)
    return out_rgb, out_depth, out_opac
