"""Input checks shared by the estimators."""
import numpy as np
from sklearn.utils import check_array

from .tensor import ShapeError


def check_images(X, size):
    """(n, H, W) float32 images of the configured size."""
    X = check_array(np.asarray(X), ensure_2d=False, allow_nd=True, dtype=np.float32)
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    if X.ndim != 3 or X.shape[1:] != (size, size):
        raise ShapeError("images", X.shape, ("n", size, size))
    return X


def check_latents(Z, dim):
    Z = check_array(Z, dtype=np.float32)
    if Z.shape[1] != dim:
        raise ShapeError("latents", Z.shape, ("n", dim))
    return Z
