"""Numba z-buffer triangle rasterizer for the mesh baseline.

Vertices arrive pre-projected: ``xy`` in pixel-center coordinates and
``z`` as eye-space depth (already culled against the near plane).
Interpolation is perspective-correct (1/z linear in screen space), so a
covered pixel's depth equals the analytic ray-triangle intersection.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def mesh_raster(xy, z, colors, tris, width, height, bg, far):
    out_rgb = np.empty((height, width, 3))
    for py in range(height):
        for px in range(width):
            out_rgb[py, px, 0] = bg[0]
            out_rgb[py, px, 1] = bg[1]
            out_rgb[py, px, 2] = bg[2]
    zbuf = np.full((height, width), np.inf)
    out_opac = np.zeros((height, width))

    for f in range(tris.shape[0]):
        i0, i1, i2 = tris[f, 0], tris[f, 1], tris[f, 2]
        x0, y0 = xy[i0, 0], xy[i0, 1]
        x1, y1 = xy[i1, 0], xy[i1, 1]
        x2, y2 = xy[i2, 0], xy[i2, 1]
        area = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        if abs(area) < 1e-12:
            continue
        xmin = max(int(math.floor(min(x0, min(x1, x2)) - 0.5)), 0)
        xmax = min(int(math.ceil(max(x0, max(x1, x2)) - 0.5)), width - 1)
        ymin = max(int(math.floor(min(y0, min(y1, y2)) - 0.5)), 0)
        ymax = min(int(math.ceil(max(y0, max(y1, y2)) - 0.5)), height - 1)
        if xmin > xmax or ymin > ymax:
            continue
        iz0 = 1.0 / z[i0]
        iz1 = 1.0 / z[i1]
        iz2 = 1.0 / z[i2]
        for py in range(ymin, ymax + 1):
            cy = py + 0.5
            for px in range(xmin, xmax + 1):
                cx = px + 0.5
                l0 = ((y1 - y2) * (cx - x2) + (x2 - x1) * (cy - y2)) / area
                l1 = ((y2 - y0) * (cx - x2) + (x0 - x2) * (cy - y2)) / area
                l2 = 1.0 - l0 - l1
                if l0 < 0.0 or l1 < 0.0 or l2 < 0.0:
                    continue
                inv_z = l0 * iz0 + l1 * iz1 + l2 * iz2
                pz = 1.0 / inv_z
                if pz < zbuf[py, px]:
                    zbuf[py, px] = pz
                    out_rgb[py, px, 0] = (
                        l0 * colors[i0, 0] * iz0
                        + l1 * colors[i1, 0] * iz1
                        + l2 * colors[i2, 0] * iz2
                    ) * pz
                    out_rgb[py, px, 1] = (
                        l0 * colors[i0, 1] * iz0
                        + l1 * colors[i1, 1] * iz1
                        + l2 * colors[i2, 1] * iz2
                    ) * pz
                    out_rgb[py, px, 2] = (
                        l0 * colors[i0, 2] * iz0
                        + l1 * colors[i1, 2] * iz1
                        + l2 * colors[i2, 2] * iz2
                    ) * pz
                    out_opac[py, px] = 1.0

    out_depth = np.where(np.isfinite(zbuf), zbuf, far)
    return out_rgb, out_depth, out_opac
