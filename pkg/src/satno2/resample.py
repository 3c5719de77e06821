"""Bilinear resampling shared by the Sentinel-2 and Sentinel-5P stages.

Sample positions follow the pixel-center convention: pixel ``i`` of a raster
is centered at coordinate ``i``; upsampling by ``f`` places output pixel ``j``
at input coordinate ``(j + 0.5) / f - 0.5``. Coordinates outside
``[0, n - 1]`` are clamped to the edge.
"""

import numpy as np


def _float_dtype(dtype):
    return np.result_type(dtype, np.float32)


def _axis_weights(coords, n):
    coords = np.clip(np.asarray(coords, dtype=np.float64), 0.0, n - 1)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    return lo, hi, coords - lo


def bilinear_sample(raster, rows, cols):
    """Evaluate ``raster`` at fractional ``(rows, cols)`` positions.

    ``rows`` and ``cols`` broadcast against each other; the result has the
    broadcast shape.
    """
    raster = np.asarray(raster)
    if raster.ndim != 2 or raster.size == 0:
        raise ValueError(f"expected a non-empty 2-D raster, got shape {raster.shape}")
    rows, cols = np.broadcast_arrays(np.asarray(rows, float), np.asarray(cols, float))
    r0, r1, wr = _axis_weights(rows, raster.shape[0])
    c0, c1, wc = _axis_weights(cols, raster.shape[1])
    data = raster.astype(np.float64, copy=False)
    top = data[r0, c0] * (1 - wc) + data[r0, c1] * wc
    bottom = data[r1, c0] * (1 - wc) + data[r1, c1] * wc
    return top * (1 - wr) + bottom * wr


def upsample_positions(n, factor):
    return (np.arange(n * factor) + 0.5) / factor - 0.5


def _interp_axis(data, factor, axis):
    n = data.shape[axis]
    lo, hi, w = _axis_weights(upsample_positions(n, factor), n)
    shape = [1, 1]
    shape[axis] = -1
    w = w.reshape(shape)
    return np.take(data, lo, axis=axis) * (1 - w) + np.take(data, hi, axis=axis) * w


def upsample_bilinear(raster, factor):
    """Upsample a 2-D raster by an integer ``factor`` with bilinear weights.

    The output has shape ``(rows * factor, cols * factor)``. ``factor == 1``
    returns an unchanged copy, and the output never leaves the input range.
    """
    if isinstance(factor, bool) or int(factor) != factor or factor < 1:
        raise ValueError(f"upsampling factor must be a positive integer, got {factor!r}")
    factor = int(factor)
    raster = np.asarray(raster)
    if raster.ndim != 2 or raster.size == 0:
        raise ValueError(f"expected a non-empty 2-D raster, got shape {raster.shape}")
    dtype = _float_dtype(raster.dtype)
    if factor == 1:
        return raster.astype(dtype, copy=True)
    # separable passes in float64, cast once at the end
    out = _interp_axis(raster.astype(np.float64), factor, 0)
    out = _interp_axis(out, factor, 1)
    return out.astype(dtype, copy=False)


def upsample_nearest(raster, factor):
    """Pixel replication, for categorical layers such as scene classification."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsampling factor must be a positive integer, got {factor!r}")
    raster = np.asarray(raster)
    return np.repeat(np.repeat(raster, int(factor), axis=0), int(factor), axis=1)
