"""Input validation helpers shared by the estimators and free functions."""

import numpy as np
from sklearn.utils.validation import check_array


class FormatError(ValueError):
    """A file or in-memory structure does not follow the expected layout."""


class PoseError(ValueError):
    """A sensor pose is invalid (non-orthonormal rotation, station inside geometry)."""


class ParameterError(ValueError):
    """A numeric hyperparameter is outside its admissible range."""


class EmptyImageError(ValueError):
    """No point survives the range filter, so no panorama can be built."""


def check_points(X, name="points", allow_empty=True):
    """Return ``X`` as a float64 ``(n, 3)`` array with finite entries."""
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        if not allow_empty:
            raise ParameterError(f"{name} must contain at least one point")
        return np.zeros((0, 3), dtype=np.float64)
    X = check_array(X, dtype=np.float64, ensure_2d=True, input_name=name)
    if X.shape[1] != 3:
        raise FormatError(f"{name} must have shape (n, 3), got {X.shape}")
    return X


def check_rotation(R, tol=1e-6):
    R = np.asarray(R, dtype=np.float64)
    if R.shape == (9,):
        R = R.reshape(3, 3)
    if R.shape != (3, 3):
        raise PoseError(f"rotation must be 3x3, got shape {R.shape}")
    err = np.abs(R.T @ R - np.eye(3)).max()
    if not np.isfinite(err) or err > tol:
        raise PoseError(f"rotation is not orthonormal (max |R^T R - I| = {err:.3g})")
    if np.linalg.det(R) < 0:
        raise PoseError("rotation has determinant -1 (reflection)")
    return R


def check_positive(value, name):
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ParameterError(f"{name} must be positive, got {value}")
    return value


def check_unit_interval(value, name, closed=True):
    value = float(value)
    ok = 0.0 <= value <= 1.0 if closed else 0.0 < value < 1.0
    if not ok:
        raise ParameterError(f"{name} must lie in {'[0, 1]' if closed else '(0, 1)'}, got {value}")
    return value


def check_count(value, name, minimum=1):
    if int(value) != value or value < minimum:
        raise ParameterError(f"{name} must be an integer >= {minimum}, got {value}")
    return int(value)
