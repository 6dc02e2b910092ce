"""Fitting objective gradients, descent behavior, and problem construction."""

import numpy as np
import pytest

from bodyfit import fitter
from bodyfit import model as body_model
from bodyfit.datagen import PoseSampler, ShapeSampler, make_record
from bodyfit.errors import NumericalError, ValidationError
from bodyfit.fitter import FitConfig, FitProblem, FitResult, fit, problem_from_record
from bodyfit.renderer import Camera

from conftest import central_difference, relative_gradient_error


@pytest.fixture(scope="module")
def posed_record(small_model):
    theta = PoseSampler(seed=21).sample(small_model, 0)
    beta = ShapeSampler(seed=21, sigma=0.5).sample(small_model, 0)
    return make_record(small_model, theta, beta)


def perturbed_problem(record, small_model, scale=0.1, anchor=True, use_mask=False):
    gen = np.random.default_rng(33)
    theta0 = record.theta + gen.normal(scale=scale, size=small_model.n_pose)
    beta0 = record.beta + gen.normal(scale=scale, size=small_model.n_shape)
    return problem_from_record(record, theta0, beta0, anchor=anchor, use_mask=use_mask)


def test_energy_gradients_match_finite_differences(small_model, posed_record):
    problem = perturbed_problem(posed_record, small_model, anchor=True, use_mask=True)
    config = FitConfig(use_silhouette=True, temperature=1.0, sigma_keypoint=20.0)
    camera = posed_record.camera
    theta = problem.theta0.copy()
    beta = problem.beta0.copy()
    cam_vec = camera.as_vector()

    _, _, grads = fitter._energy(model=small_model, problem=problem, config=config,
                                 theta=theta, beta=beta, camera=camera, want_grad=True)

    def value(th, be, cv):
        cam = Camera(cv[0], cv[1:], camera.image_size)
        v, _, _ = fitter._energy(small_model, problem, config, th, be, cam, False)
        return v

    fd_theta = central_difference(lambda t: value(t, beta, cam_vec), theta)
    fd_beta = central_difference(lambda b: value(theta, b, cam_vec), beta)
    fd_cam = central_difference(lambda c: value(theta, beta, c), cam_vec)
    assert relative_gradient_error(grads["theta"], fd_theta, floor=1e-4) < 1e-4
    assert relative_gradient_error(grads["beta"], fd_beta, floor=1e-4) < 1e-4
    assert relative_gradient_error(grads["camera"], fd_cam, floor=1e-4) < 1e-4


def test_energy_term_breakdown(small_model, posed_record):
    """Term values follow their closed forms at an arbitrary evaluation point."""
    from bodyfit.losses import geman_mcclure
    from bodyfit.renderer import project_points

    problem = perturbed_problem(posed_record, small_model, anchor=True)
    config = FitConfig(sigma_keypoint=30.0, sigma_anchor=0.4, w_anchor=2.0, w_beta=0.01)
    theta, beta = problem.theta0, problem.beta0
    value, terms, _ = fitter._energy(small_model, problem, config, theta, beta,
                                     posed_record.camera, False)

    _, joints = body_model.forward(small_model, beta, theta)
    resid = project_points(joints, posed_record.camera) - problem.keypoints
    sq = np.sum(resid**2, axis=1)
    expect_kp = float(np.dot(problem.confidences, sq / (sq + 30.0**2)))
    assert terms["keypoint"] == pytest.approx(expect_kp, rel=1e-12)

    expect_anchor = 2.0 * float(np.sum(geman_mcclure(theta - problem.anchor_theta, 0.4)))
    assert terms["anchor"] == pytest.approx(expect_anchor, rel=1e-12)
    assert terms["shape_reg"] == pytest.approx(0.01 * float(np.dot(beta, beta)), rel=1e-12)
    assert value == pytest.approx(sum(terms.values()), rel=1e-12)


def test_fit_trace_is_monotone(small_model, posed_record):
    problem = perturbed_problem(posed_record, small_model, anchor=False)
    config = FitConfig(sigma_keypoint=10.0, w_beta=0.0, max_iters=100)
    result = fit(small_model, problem, config)
    assert result.iterations == len(result.trace) - 1
    assert np.all(np.diff(result.trace) < 0)
    assert result.objective < result.trace[0]


def test_fit_at_ground_truth_is_a_fixed_point(small_model, posed_record):
    """Zero residuals and no regularizer mean a zero gradient at the start."""
    problem = problem_from_record(posed_record, posed_record.theta, posed_record.beta,
                                  anchor=False)
    config = FitConfig(w_beta=0.0)
    result = fit(small_model, problem, config)
    assert result.iterations == 0
    assert result.converged
    assert result.objective == pytest.approx(0.0, abs=1e-20)
    assert np.array_equal(result.theta, posed_record.theta)


def test_fit_recovers_pose_from_near_start(small_model, posed_record):
    problem = perturbed_problem(posed_record, small_model, scale=0.05, anchor=False)
    config = FitConfig(sigma_keypoint=10.0, w_beta=0.0, max_iters=400)
    result = fit(small_model, problem, config)
    v_hat, _ = body_model.forward(small_model, result.beta, result.theta)
    v_gt, _ = body_model.forward(small_model, posed_record.beta, posed_record.theta)
    err = float(np.linalg.norm(v_hat - v_gt, axis=1).mean())
    height = body_model.rest_height(small_model, posed_record.beta)
    assert err < 0.05 * height


def test_fit_keep_path_records_iterates(small_model, posed_record):
    problem = perturbed_problem(posed_record, small_model, anchor=False)
    config = FitConfig(sigma_keypoint=10.0, w_beta=0.0, max_iters=25, keep_path=True)
    result = fit(small_model, problem, config)
    n_params = small_model.n_pose + small_model.n_shape + 3
    assert result.path.shape == (len(result.trace), n_params)
    start = np.concatenate([problem.theta0, problem.beta0, posed_record.camera.as_vector()])
    assert np.array_equal(result.path[0], start)
    final = np.concatenate([result.theta, result.beta, result.camera.as_vector()])
    assert np.array_equal(result.path[-1], final)

    plain = fit(small_model, problem, FitConfig(sigma_keypoint=10.0, w_beta=0.0, max_iters=25))
    assert plain.path is None


def test_fit_respects_frozen_blocks(small_model, posed_record):
    problem = perturbed_problem(posed_record, small_model, anchor=False)
    config = FitConfig(sigma_keypoint=10.0, fit_shape=False, fit_camera=False, max_iters=30)
    result = fit(small_model, problem, config)
    assert np.array_equal(result.beta, problem.beta0)
    assert np.array_equal(result.camera.as_vector(), posed_record.camera.as_vector())
    assert not np.array_equal(result.theta, problem.theta0)


def test_fit_rejects_bad_start(small_model, posed_record):
    problem = perturbed_problem(posed_record, small_model)
    problem.theta0[2] = np.inf
    with pytest.raises(NumericalError):
        fit(small_model, problem)
    problem.theta0[2] = np.nan
    with pytest.raises(NumericalError):
        fit(small_model, problem)


def test_fit_result_json_roundtrip(small_model, posed_record):
    problem = perturbed_problem(posed_record, small_model)
    result = fit(small_model, problem, FitConfig(max_iters=5))
    back = FitResult.from_json(result.to_json())
    assert np.array_equal(back.theta, result.theta)
    assert np.array_equal(back.beta, result.beta)
    assert np.array_equal(back.camera.as_vector(), result.camera.as_vector())
    assert np.array_equal(back.trace, result.trace)
    assert back.iterations == result.iterations
    assert back.converged == result.converged
    assert back.terms == result.terms
    assert back.path is None


def test_problem_from_record_wiring(small_model, posed_record):
    theta0 = np.zeros(small_model.n_pose)
    beta0 = np.zeros(small_model.n_shape)
    anchored = problem_from_record(posed_record, theta0, beta0, anchor=True, use_mask=True)
    assert np.array_equal(anchored.anchor_theta, theta0)
    anchored.anchor_theta[0] = 9.0  # the anchor is a private copy
    assert theta0[0] == 0.0
    assert anchored.silhouette.dtype == np.float64
    assert np.array_equal(anchored.silhouette, posed_record.mask.astype(np.float64))

    plain = problem_from_record(posed_record, theta0, beta0, anchor=False)
    assert plain.anchor_theta is None and plain.silhouette is None


def test_problem_validation(small_model, posed_record):
    with pytest.raises(ValidationError):
        FitProblem(keypoints=np.zeros((4, 3)), theta0=np.zeros(6), beta0=np.zeros(2),
                   camera0=posed_record.camera)
    with pytest.raises(ValidationError):
        FitProblem(keypoints=np.zeros((4, 2)), theta0=np.zeros(6), beta0=np.zeros(2),
                   camera0=posed_record.camera, confidences=np.ones(3))
    with pytest.raises(ValidationError):
        FitProblem(keypoints=np.zeros((4, 2)), theta0=np.zeros(6), beta0=np.zeros(2),
                   camera0=posed_record.camera, anchor_theta=np.zeros(5))
    with pytest.raises(ValidationError):
        FitProblem(keypoints=np.zeros((4, 2)), theta0=np.zeros(6), beta0=np.zeros(2),
                   camera0=posed_record.camera, silhouette=np.zeros((3, 3)))
    with pytest.raises(ValidationError):
        fit(small_model, FitProblem(keypoints=np.zeros((2, 2)), theta0=np.zeros(6),
                                    beta0=np.zeros(2), camera0=posed_record.camera))
    with pytest.raises(ValidationError):
        FitConfig(sigma_keypoint=0.0)
    with pytest.raises(ValidationError):
        FitConfig(w_anchor=-1.0)
    with pytest.raises(ValidationError):
        FitConfig(backtrack=1.5)
