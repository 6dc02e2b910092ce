"""Shared fixtures and finite-difference helpers."""

import numpy as np
import pytest

from bodyfit import model as body_model


@pytest.fixture(scope="session")
def toy_model():
    """Default toy body used across suites."""
    return body_model.build_toy_model()


@pytest.fixture(scope="session")
def small_model():
    """Cheap low-resolution model for gradient sweeps."""
    return body_model.build_toy_model(n_vertices=120, n_joints=5, n_shape=4, seed=7)


@pytest.fixture(scope="session")
def blend_model():
    """Small model with pose blendshapes enabled."""
    return body_model.build_toy_model(
        n_vertices=120, n_joints=5, n_shape=4, seed=7, pose_blendshapes=True
    )


def central_difference(fn, x, h=1e-6):
    """Finite-difference gradient of scalar fn at x, one entry at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        save = xf[i]
        xf[i] = save + h
        up = fn(x)
        xf[i] = save - h
        down = fn(x)
        xf[i] = save
        flat[i] = (up - down) / (2.0 * h)
    return grad


def relative_gradient_error(analytic, numeric, floor=1e-6):
    """Worst elementwise |a - n| / max(|n|, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    denom = np.maximum(np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradient(fn, x, analytic, h=1e-6, tol=1e-4, floor=1e-6):
    """Assert the analytic gradient of scalar fn matches central differences."""
    numeric = central_difference(fn, x, h=h)
    err = relative_gradient_error(analytic, numeric, floor=floor)
    assert err < tol, f"gradient mismatch: relative error {err:.3e}"
    return x.size
