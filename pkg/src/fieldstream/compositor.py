"""Depth-correct merging of renders with overlay scene elements.

Real (eye-space) depth converts to a normalized z-buffer value in [0, 1]
exactly as a standard perspective projection would produce it, so overlay
elements rasterized by a GL-style pipeline compare correctly against
rendered scene depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RenderProduct

TIE_EPS = 1e-9


@dataclass(frozen=True)
class OverlayLayer:
    rgb: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) bool, overlay coverage
    depth: np.ndarray  # (H, W) eye-space meters, valid where mask


def depth_to_zbuffer(z_eye, near: float, far: float):
    """Map eye-space depth to the [0, 1] z-buffer value; clamps outside
    [near, far]. Strictly increasing in z_eye."""
    if not (0.0 < near < far):
        raise ValueError("require 0 < near < far")
    z = np.clip(np.asarray(z_eye, dtype=np.float64), near, far)
    return far * (z - near) / (z * (far - near))


def zbuffer_to_depth(d, near: float, far: float):
    """Exact inverse of depth_to_zbuffer on [0, 1]."""
    if not (0.0 < near < far):
        raise ValueError("require 0 < near < far")
    d = np.asarray(d, dtype=np.float64)
    return far * near / (far - d * (far - near))


def _check_dims(render: RenderProduct, overlay: OverlayLayer) -> None:
    if overlay.rgb.shape != render.rgb.shape:
        raise ValueError(
            f"overlay dimensions {overlay.rgb.shape} do not match render {render.rgb.shape}"
        )


def composite_occlude(
    render: RenderProduct, overlay: OverlayLayer, near: float, far: float
) -> np.ndarray:
    """Overlay pixels win where they are nearer in z-buffer space; ties go
    to the overlay so UI elements are never swallowed by coincident
    geometry."""
    _check_dims(render, overlay)
    d_over = depth_to_zbuffer(overlay.depth, near, far)
    d_render = depth_to_zbuffer(render.depth, near, far)
    win = overlay.mask & (d_over < d_render + TIE_EPS)
    return np.where(win[..., None], overlay.rgb, render.rgb)


def composite_cutout(render: RenderProduct, overlay: OverlayLayer) -> np.ndarray:
    """Overlay always draws in front; depth ignored."""
    _check_dims(render, overlay)
    return np.where(overlay.mask[..., None], overlay.rgb, render.rgb)
