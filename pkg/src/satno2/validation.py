"""Input checks for image stacks passed to the estimators."""

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

from .dataset import N_FUSION_CHANNELS, N_IMAGE_CHANNELS
from .s2 import TILE_SIZE


def check_stack(X, variant="fusion"):
    """Validate an (n, C, 120, 120) float stack for ``variant``.

    Fusion needs 13 channels (12 image bands plus the column patch); the
    image-only variant accepts 12 or 13 and uses the first 12.
    """
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True,
                    ensure_min_samples=1, copy=False)
    if X.ndim != 4 or X.shape[2:] != (TILE_SIZE, TILE_SIZE):
        raise ValueError(f"expected an (n, C, {TILE_SIZE}, {TILE_SIZE}) stack, got {X.shape}")
    need = N_FUSION_CHANNELS if variant == "fusion" else N_IMAGE_CHANNELS
    if variant == "fusion" and X.shape[1] != need:
        raise ValueError(f"fusion input needs {need} channels, got {X.shape[1]}")
    if variant == "image-only" and X.shape[1] not in (N_IMAGE_CHANNELS, N_FUSION_CHANNELS):
        raise ValueError(f"image-only input needs 12 (or 13) channels, got {X.shape[1]}")
    return X[:, :need]


def check_targets(X, y):
    y = check_array(y, ensure_2d=False, dtype=np.float64, ensure_all_finite=True)
    if y.ndim != 1:
        raise ValueError(f"targets must be 1-D, got shape {y.shape}")
    check_consistent_length(X, y)
    return y
