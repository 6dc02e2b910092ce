"""Supervision objectives: parameter, surface, joint, and reprojection losses.

Every loss is a plain sum (not a mean) and returns, on request, the gradient
with respect to its predicted (first) argument. Set normalize=True to divide
by the residual count when a mean is wanted for training stability.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .rotation import rodrigues, rodrigues_jacobian


@dataclass(frozen=True)
class LossConfig:
    """Weights shared by the reprojection objective and robust penalties."""

    mu: float = 10.0
    param_vertex_mix: float = 1.0
    gm_sigma: float = 100.0

    def __post_init__(self):
        if not (np.isfinite(self.mu) and self.mu > 0):
            raise ValidationError(f"mu must be finite and > 0, got {self.mu}")
        if not (np.isfinite(self.gm_sigma) and self.gm_sigma > 0):
            raise ValidationError(f"gm_sigma must be finite and > 0, got {self.gm_sigma}")


def _pair(a, b, name):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"{name} shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _finish(value, grads, want_grad, normalize, count):
    if normalize and count > 0:
        value = value / count
        grads = tuple(g / count for g in grads)
    if want_grad:
        return value, grads if len(grads) > 1 else grads[0]
    return value


def param_loss_axis_angle(theta_hat, theta, beta_hat, beta, want_grad=False, normalize=False):
    """Squared L2 over concatenated pose and shape residuals."""
    theta_hat, theta = _pair(theta_hat, theta, "theta")
    beta_hat, beta = _pair(beta_hat, beta, "beta")
    dt = theta_hat - theta
    db = beta_hat - beta
    value = float(np.sum(dt * dt) + np.sum(db * db))
    return _finish(value, (2.0 * dt, 2.0 * db), want_grad, normalize, dt.size + db.size)


def param_loss_rotmat(theta_hat, theta, beta_hat, beta, want_grad=False, normalize=False):
    """Squared Frobenius distance between per-joint rotation matrices, plus beta L2.

    Invariant to 2-pi wrap-around of either rotation's axis-angle encoding;
    the gradient reaches theta_hat through the Rodrigues Jacobian.
    """
    theta_hat, theta = _pair(theta_hat, theta, "theta")
    beta_hat, beta = _pair(beta_hat, beta, "beta")
    if theta_hat.shape[-1] % 3:
        raise ValidationError("theta length must be a multiple of 3")
    joints = theta_hat.reshape(*theta_hat.shape[:-1], -1, 3)
    r_hat = rodrigues(joints)
    r_ref = rodrigues(theta.reshape(joints.shape))
    diff = r_hat - r_ref
    db = beta_hat - beta
    value = float(np.sum(diff * diff) + np.sum(db * db))
    jac = rodrigues_jacobian(joints)  # (..., J, 9, 3)
    flat = 2.0 * diff.reshape(*joints.shape[:-1], 9)
    d_theta = np.einsum("...rk,...r->...k", jac, flat).reshape(theta_hat.shape)
    count = diff.size + db.size
    return _finish(value, (d_theta, 2.0 * db), want_grad, normalize, count)


def per_vertex_loss(vertices_hat, vertices, want_grad=False, normalize=False):
    """Sum of squared distances between corresponding mesh vertices."""
    vertices_hat, vertices = _pair(vertices_hat, vertices, "vertices")
    diff = vertices_hat - vertices
    value = float(np.sum(diff * diff))
    return _finish(value, (2.0 * diff,), want_grad, normalize, diff.shape[-2] if diff.ndim >= 2 else diff.size)


def joint_loss(joints_hat, joints, want_grad=False, normalize=False):
    """Sum of squared distances between corresponding 3D joints."""
    joints_hat, joints = _pair(joints_hat, joints, "joints")
    diff = joints_hat - joints
    value = float(np.sum(diff * diff))
    return _finish(value, (2.0 * diff,), want_grad, normalize, diff.shape[-2] if diff.ndim >= 2 else diff.size)


def reprojection_loss(kp_hat, kp, sil_hat, sil, config=None, weights=None,
                      want_grad=False, normalize=False):
    """mu * sum of keypoint squared distances + sum of squared pixel differences.

    kp arrays are (..., M, 2); sil arrays are images with matching shapes.
    Optional per-keypoint weights (e.g. detection confidences) scale the
    keypoint residuals; omitted weights reproduce the plain sum.
    """
    config = config or LossConfig()
    kp_hat, kp = _pair(kp_hat, kp, "keypoints")
    sil_hat, sil = _pair(sil_hat, sil, "silhouettes")
    dk = kp_hat - kp
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != kp_hat.shape[:-1]:
            raise ValidationError("keypoint weights must match the keypoint count")
        dk_w = dk * weights[..., None]
    else:
        dk_w = dk
    ds = sil_hat - sil
    value = float(config.mu * np.sum(dk_w * dk) + np.sum(ds * ds))
    g_kp = 2.0 * config.mu * dk_w
    g_sil = 2.0 * ds
    count = dk.shape[-2] if dk.ndim >= 2 else dk.size
    return _finish(value, (g_kp, g_sil), want_grad, normalize, count + ds.size)


def geman_mcclure(residual, sigma, want_grad=False):
    """Bounded robust penalty rho(e) = e^2 / (e^2 + sigma^2), in [0, 1)."""
    if not (np.isfinite(sigma) and sigma > 0):
        raise ValidationError(f"sigma must be finite and > 0, got {sigma}")
    e = np.asarray(residual, dtype=np.float64)
    e2 = e * e
    den = e2 + sigma * sigma
    value = e2 / den
    if not want_grad:
        return value
    grad = 2.0 * e * sigma * sigma / (den * den)
    return value, grad
