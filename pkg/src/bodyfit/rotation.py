"""Axis-angle rotations: Rodrigues' formula, its analytic Jacobian, and the log map.

All functions accept stacked inputs: an array of shape (..., 3) is treated as
a batch of axis-angle vectors and returns correspondingly batched output.
"""

import numpy as np

from .errors import ValidationError

# Below this angle the trigonometric ratio factors switch to 2nd-order Taylor
# expansions, which keeps both the value and the Jacobian finite and smooth
# through the origin.
SMALL_ANGLE = 1e-8

_EYE3 = np.eye(3)
# _BASIS_SKEW[i] = d skew(w) / d w_i
_BASIS_SKEW = np.array(
    [
        [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
        [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
        [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    ]
)


def _check_axis_angle(axis_angle):
    omega = np.asarray(axis_angle, dtype=np.float64)
    if omega.shape[-1:] != (3,):
        raise ValidationError(f"axis-angle vectors must have 3 components, got shape {omega.shape}")
    if not np.all(np.isfinite(omega)):
        raise ValidationError("axis-angle input must be finite")
    return omega


def skew(vectors):
    """Cross-product matrices: skew(v) @ u == cross(v, u). Shape (..., 3) -> (..., 3, 3)."""
    v = np.asarray(vectors, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def _trig_factors(theta_sq):
    """Return a = sin(t)/t and b = (1 - cos(t))/t^2 with series fallback near zero."""
    theta = np.sqrt(theta_sq)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta_sq / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta_sq / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    return a, b


def rodrigues(axis_angle):
    """Convert axis-angle vectors to proper rotation matrices.

    Parameters
    ----------
    axis_angle : (..., 3) array
        Rotation axis scaled by the angle in radians.

    Returns
    -------
    (..., 3, 3) array
        Rotation matrices with R^T R = I and det R = 1.
    """
    omega = _check_axis_angle(axis_angle)
    theta_sq = np.sum(omega * omega, axis=-1)
    a, b = _trig_factors(theta_sq)
    k = skew(omega)
    return _EYE3 + a[..., None, None] * k + b[..., None, None] * (k @ k)


def rodrigues_jacobian(axis_angle):
    """Derivative of the row-major vectorization of rodrigues().

    Returns
    -------
    (..., 9, 3) array
        Entry [..., 3*r + c, i] is d R[r, c] / d omega_i. At the origin the
        columns are the skew basis matrices, the derivative of the
        exponential map at identity.
    """
    omega = _check_axis_angle(axis_angle)
    theta_sq = np.sum(omega * omega, axis=-1)
    theta = np.sqrt(theta_sq)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    sin, cos = np.sin(safe), np.cos(safe)

    a, b = _trig_factors(theta_sq)
    # da = d(sin t / t)/dt / t and db = d((1-cos t)/t^2)/dt / t, so that
    # d a(|w|) / d w_i = da * w_i (same for b).
    da = np.where(small, -1.0 / 3.0 + theta_sq / 30.0, (safe * cos - sin) / safe**3)
    db = np.where(small, -1.0 / 12.0 + theta_sq / 180.0, (safe * sin - 2.0 * (1.0 - cos)) / safe**4)

    k = skew(omega)
    kk = k @ k
    k_b = k[..., None, :, :]  # broadcast against the basis axis
    kk_b = kk[..., None, :, :]
    w = omega[..., :, None, None]

    # d R / d w_i = da w_i K + a E_i + db w_i K^2 + b (E_i K + K E_i)
    dr = (
        da[..., None, None, None] * w * k_b
        + a[..., None, None, None] * _BASIS_SKEW
        + db[..., None, None, None] * w * kk_b
        + b[..., None, None, None] * (_BASIS_SKEW @ k_b + k_b @ _BASIS_SKEW)
    )
    # (..., i, r, c) -> (..., r, c, i) -> (..., 9, 3)
    jac = np.moveaxis(dr, -3, -1)
    return jac.reshape(omega.shape[:-1] + (9, 3))


def rotation_log(matrix):
    """Inverse of rodrigues() with angle in [0, pi].

    Parameters
    ----------
    matrix : (..., 3, 3) array of rotation matrices.

    Returns
    -------
    (..., 3) axis-angle array with norm at most pi.
    """
    r = np.asarray(matrix, dtype=np.float64)
    if r.shape[-2:] != (3, 3):
        raise ValidationError(f"rotation matrices must be 3x3, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise ValidationError("rotation matrix input must be finite")

    trace = r[..., 0, 0] + r[..., 1, 1] + r[..., 2, 2]
    cos_t = np.clip((trace - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    # twice the dual vector of the antisymmetric part
    axis2 = np.stack(
        [
            r[..., 2, 1] - r[..., 1, 2],
            r[..., 0, 2] - r[..., 2, 0],
            r[..., 1, 0] - r[..., 0, 1],
        ],
        axis=-1,
    )
    sin_t = np.sin(theta)

    small = theta < SMALL_ANGLE
    near_pi = sin_t < 1e-6
    mid = ~(small | near_pi)

    factor = np.where(mid, theta / np.where(mid, 2.0 * sin_t, 1.0), 0.5 * (1.0 + theta**2 / 6.0))
    out = axis2 * factor[..., None]

    if np.any(near_pi & ~small):
        # Angle close to pi: the antisymmetric part vanishes, recover the axis
        # from the dominant column of R + I, which tends to 2 a a^T.
        idx = np.argwhere(near_pi & ~small)
        for index in idx:
            key = tuple(index)
            b = r[key] + _EYE3
            col = int(np.argmax(np.diag(b)))
            axis = b[:, col]
            axis = axis / np.linalg.norm(axis)
            # fix an arbitrary but deterministic sign
            nz = np.nonzero(np.abs(axis) > 1e-12)[0]
            if axis[nz[0]] < 0:
                axis = -axis
            out[key] = axis * theta[key]
    return out
