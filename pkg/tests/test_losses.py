"""Loss values, gradients, and the wrap-around asymmetry."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bodyfit.errors import ValidationError
from bodyfit.losses import (
    LossConfig,
    geman_mcclure,
    joint_loss,
    param_loss_axis_angle,
    param_loss_rotmat,
    per_vertex_loss,
    reprojection_loss,
)

from conftest import relative_gradient_error


def sample_params(seed, joints=4, shapes=3):
    gen = np.random.default_rng(seed)
    return (gen.normal(scale=0.5, size=3 * joints), gen.normal(scale=0.5, size=3 * joints),
            gen.normal(size=shapes), gen.normal(size=shapes))


def wrap_theta(theta):
    """Re-encode each joint rotation with its angle increased by 2 pi."""
    out = theta.reshape(-1, 3).copy()
    for row in out:
        norm = np.linalg.norm(row)
        if norm < 1e-9:
            row[0] = 2.0 * np.pi
        else:
            row *= (norm + 2.0 * np.pi) / norm
    return out.reshape(theta.shape)


def test_axis_angle_loss_value_and_grad():
    th_hat, th, be_hat, be = sample_params(0)
    value, (dt, db) = param_loss_axis_angle(th_hat, th, be_hat, be, want_grad=True)
    expect = np.sum((th_hat - th) ** 2) + np.sum((be_hat - be) ** 2)
    assert abs(value - expect) < 1e-12
    assert np.array_equal(dt, 2.0 * (th_hat - th))
    assert np.array_equal(db, 2.0 * (be_hat - be))


def test_rotmat_loss_zero_at_equal_rotations():
    th_hat, _, be, _ = sample_params(1)
    value = param_loss_rotmat(th_hat, th_hat, be, be)
    assert value < 1e-18


def test_wraparound_asymmetry():
    # re-encoding the ground truth with angle + 2 pi changes nothing for the
    # rotation-matrix loss but moves the axis-angle loss by a gross amount
    th_hat, th, be_hat, be = sample_params(2)
    wrapped = wrap_theta(th)
    rot_a = param_loss_rotmat(th_hat, th, be_hat, be)
    rot_b = param_loss_rotmat(th_hat, wrapped, be_hat, be)
    assert abs(rot_a - rot_b) < 1e-9
    aa_a = param_loss_axis_angle(th_hat, th, be_hat, be)
    aa_b = param_loss_axis_angle(th_hat, wrapped, be_hat, be)
    assert abs(aa_a - aa_b) > 4.0 * np.pi**2  # at least one joint moved by 2 pi


def test_rotmat_grad_matches_finite_differences():
    th_hat, th, be_hat, be = sample_params(3)
    _, (dt, db) = param_loss_rotmat(th_hat, th, be_hat, be, want_grad=True)
    h = 1e-6
    fd = np.zeros_like(th_hat)
    for i in range(th_hat.size):
        bump = np.zeros_like(th_hat)
        bump[i] = h
        fd[i] = (param_loss_rotmat(th_hat + bump, th, be_hat, be)
                 - param_loss_rotmat(th_hat - bump, th, be_hat, be)) / (2 * h)
    assert relative_gradient_error(dt, fd, floor=1e-4) < 1e-5
    assert np.array_equal(db, 2.0 * (be_hat - be))


def test_batched_param_losses_match_loops():
    gen = np.random.default_rng(4)
    th_hat = gen.normal(scale=0.5, size=(6, 12))
    th = gen.normal(scale=0.5, size=(6, 12))
    be_hat = gen.normal(size=(6, 3))
    be = gen.normal(size=(6, 3))
    for loss in (param_loss_axis_angle, param_loss_rotmat):
        total, (dt, db) = loss(th_hat, th, be_hat, be, want_grad=True)
        acc = 0.0
        for i in range(6):
            vi, (ti, bi) = loss(th_hat[i], th[i], be_hat[i], be[i], want_grad=True)
            acc += vi
            assert np.max(np.abs(dt[i] - ti)) < 1e-12
            assert np.max(np.abs(db[i] - bi)) < 1e-12
        assert abs(total - acc) < 1e-9


def test_vertex_and_joint_losses():
    gen = np.random.default_rng(5)
    a, b = gen.normal(size=(50, 3)), gen.normal(size=(50, 3))
    value, grad = per_vertex_loss(a, b, want_grad=True)
    assert abs(value - np.sum((a - b) ** 2)) < 1e-12
    assert np.array_equal(grad, 2.0 * (a - b))
    value, grad = joint_loss(a[:8], b[:8], want_grad=True)
    assert abs(value - np.sum((a[:8] - b[:8]) ** 2)) < 1e-12
    assert np.array_equal(grad, 2.0 * (a[:8] - b[:8]))


def test_normalize_divides_by_count():
    gen = np.random.default_rng(6)
    a, b = gen.normal(size=(10, 3)), gen.normal(size=(10, 3))
    plain, g_plain = per_vertex_loss(a, b, want_grad=True)
    norm, g_norm = per_vertex_loss(a, b, want_grad=True, normalize=True)
    assert abs(plain / 10 - norm) < 1e-12
    assert np.max(np.abs(g_plain / 10 - g_norm)) < 1e-15


def test_reprojection_loss_weights_and_grads():
    gen = np.random.default_rng(7)
    kp_hat, kp = gen.normal(size=(5, 2)), gen.normal(size=(5, 2))
    sil_hat, sil = gen.random((8, 8)), gen.random((8, 8))
    conf = gen.random(5)
    config = LossConfig(mu=10.0)
    value, (g_kp, g_sil) = reprojection_loss(
        kp_hat, kp, sil_hat, sil, config=config, weights=conf, want_grad=True
    )
    dk = kp_hat - kp
    expect = 10.0 * np.sum(conf[:, None] * dk * dk) + np.sum((sil_hat - sil) ** 2)
    assert abs(value - expect) < 1e-11
    assert np.max(np.abs(g_kp - 20.0 * conf[:, None] * dk)) < 1e-12
    assert np.max(np.abs(g_sil - 2.0 * (sil_hat - sil))) < 1e-12
    # zero confidences silence the keypoint term entirely
    value0 = reprojection_loss(kp_hat, kp, sil_hat, sil, config=config,
                               weights=np.zeros(5))
    assert abs(value0 - np.sum((sil_hat - sil) ** 2)) < 1e-12


@given(st.floats(-500.0, 500.0), st.floats(0.5, 200.0))
@settings(max_examples=80, deadline=None)
def test_geman_mcclure_bounded_and_monotone(e, sigma):
    value = geman_mcclure(e, sigma)
    assert 0.0 <= value < 1.0
    bigger = geman_mcclure(abs(e) + 1.0, sigma)
    assert bigger >= value


def test_geman_mcclure_gradient():
    sigma = 3.0
    for e in (-10.0, -1.0, 0.0, 0.5, 8.0):
        _, grad = geman_mcclure(e, sigma, want_grad=True)
        h = 1e-6
        fd = (geman_mcclure(e + h, sigma) - geman_mcclure(e - h, sigma)) / (2 * h)
        assert abs(grad - fd) < 1e-8


def test_shape_mismatch_rejected():
    with pytest.raises(ValidationError):
        per_vertex_loss(np.zeros((4, 3)), np.zeros((5, 3)))
    with pytest.raises(ValidationError):
        param_loss_rotmat(np.zeros(4), np.zeros(4), np.zeros(2), np.zeros(2))
    with pytest.raises(ValidationError):
        geman_mcclure(1.0, -1.0)
    with pytest.raises(ValidationError):
        LossConfig(mu=-1.0)
