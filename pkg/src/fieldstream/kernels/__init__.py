"""Hot numeric kernels with two interchangeable implementations.

The numba-compiled kernels are used by default; setting the environment
variable ``FIELDSTREAM_NUMBA=0`` (or running without numba installed)
selects the pure-numpy fallbacks instead. Both paths implement identical
arithmetic; ``benchmarks/bench_kernels.py`` compares their speed.
"""

import os


def numba_requested() -> bool:
    flag = os.environ.get("FIELDSTREAM_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


def _numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


USE_NUMBA = numba_requested() and _numba_available()

if USE_NUMBA:
    from .voxel_numba import voxel_forward, voxel_backward
    from .splat_numba import splat_forward, splat_backward
    from .mesh_numba import mesh_raster
    from .adam_numba import adam_update
else:
    from .voxel_numpy import voxel_forward, voxel_backward
    from .splat_numpy import splat_forward, splat_backward
    from .mesh_numpy import mesh_raster
    from .adam_numpy import adam_update

__all__ = [
    "USE_NUMBA",
    "numba_requested",
    "voxel_forward",
    "voxel_backward",
    "splat_forward",
    "splat_backward",
    "mesh_raster",
    "adam_update",
]
