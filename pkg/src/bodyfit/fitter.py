"""Iterative refinement of body parameters against 2D evidence.

The objective combines a robust keypoint reprojection term, an optional
silhouette term, an optional robust anchor tying the pose to an initial
estimate, and a quadratic shape regularizer:

    E = w_k sum_m c_m rho(|proj(J_m) - kp_m|; sigma_k)
      + w_s sum_px (soft_sil - target)^2
      + w_a sum_i rho(theta_i - anchor_i; sigma_a)
      + w_b |beta|^2

with rho(e) = e^2 / (e^2 + sigma^2). Keypoint-only fitting is the default;
the silhouette term is opt-in. Minimization is plain gradient descent with
Armijo backtracking; all gradients are analytic.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import model as body_model
from .errors import NumericalError, ValidationError
from .losses import geman_mcclure
from .renderer import Camera, render_silhouette, render_silhouette_grad

_MIN_SCALE = 1e-9


@dataclass(frozen=True)
class FitConfig:
    """Objective weights and line-search knobs."""

    w_keypoint: float = 1.0
    w_silhouette: float = 1e-2
    w_anchor: float = 1.0
    w_beta: float = 1e-3
    sigma_keypoint: float = 100.0
    sigma_anchor: float = 0.5
    use_silhouette: bool = False
    temperature: float = 1.0
    fit_camera: bool = True
    fit_shape: bool = True
    max_iters: int = 200
    step_init: float = 1.0
    step_grow: float = 2.0
    step_max: float = 1e4
    backtrack: float = 0.5
    armijo_c: float = 1e-4
    min_step: float = 1e-14
    rel_tol: float = 1e-10
    keep_path: bool = False

    def __post_init__(self):
        for name in ("w_keypoint", "w_silhouette", "w_anchor", "w_beta"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.sigma_keypoint <= 0 or self.sigma_anchor <= 0:
            raise ValidationError("robustifier scales must be > 0")
        if not (0 < self.backtrack < 1) or not (0 < self.armijo_c < 1):
            raise ValidationError("invalid line search parameters")
        if self.max_iters < 1 or self.step_init <= 0:
            raise ValidationError("invalid iteration parameters")


@dataclass
class FitProblem:
    """Observed 2D evidence plus the starting point of the search."""

    keypoints: np.ndarray
    theta0: np.ndarray
    beta0: np.ndarray
    camera0: Camera
    confidences: np.ndarray = None
    anchor_theta: np.ndarray = None
    silhouette: np.ndarray = None

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
        if self.keypoints.ndim != 2 or self.keypoints.shape[1] != 2:
            raise ValidationError("keypoints must be (M, 2)")
        if self.confidences is None:
            self.confidences = np.ones(self.keypoints.shape[0])
        self.confidences = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        if self.confidences.shape[0] != self.keypoints.shape[0]:
            raise ValidationError("confidences must match keypoint count")
        self.theta0 = np.asarray(self.theta0, dtype=np.float64).reshape(-1)
        self.beta0 = np.asarray(self.beta0, dtype=np.float64).reshape(-1)
        if self.anchor_theta is not None:
            self.anchor_theta = np.asarray(self.anchor_theta, dtype=np.float64).reshape(-1)
            if self.anchor_theta.shape != self.theta0.shape:
                raise ValidationError("anchor_theta must match theta0 in length")
        if self.silhouette is not None:
            sil = np.asarray(self.silhouette, dtype=np.float64)
            size = self.camera0.image_size
            if sil.shape != (size, size):
                raise ValidationError(f"silhouette target must be ({size}, {size})")
            self.silhouette = sil


@dataclass
class FitResult:
    theta: np.ndarray
    beta: np.ndarray
    camera: Camera
    trace: np.ndarray            # objective value after every accepted step
    iterations: int
    converged: bool
    terms: dict = field(default_factory=dict)
    path: np.ndarray = None      # packed (theta, beta, camera) per trace entry

    @property
    def objective(self):
        return float(self.trace[-1])

    def to_json(self):
        payload = {
            "theta": [repr(float(x)) for x in self.theta],
            "beta": [repr(float(x)) for x in self.beta],
            "camera": [repr(float(x)) for x in self.camera.as_vector()],
            "image_size": self.camera.image_size,
            "trace": [repr(float(x)) for x in self.trace],
            "iterations": self.iterations,
            "converged": self.converged,
            "terms": {k: repr(float(v)) for k, v in self.terms.items()},
        }
        return json.dumps(payload, indent=1) + "\n"

    @staticmethod
    def from_json(text):
        raw = json.loads(text)
        return FitResult(
            theta=np.array([float(x) for x in raw["theta"]]),
            beta=np.array([float(x) for x in raw["beta"]]),
            camera=Camera.from_vector(
                [float(x) for x in raw["camera"]], raw["image_size"]
            ),
            trace=np.array([float(x) for x in raw["trace"]]),
            iterations=int(raw["iterations"]),
            converged=bool(raw["converged"]),
            terms={k: float(v) for k, v in raw["terms"].items()},
        )


def _energy(model, problem, config, theta, beta, camera, want_grad):
    """Objective value, per-term breakdown, and analytic parameter gradients."""
    vertices, joints, cache = body_model.forward(model, beta, theta, want_cache=True)
    terms = {}
    d_joints = np.zeros_like(joints)
    d_vertices = np.zeros_like(vertices)
    d_scale = 0.0
    d_trans = np.zeros(2)

    # robust keypoint reprojection, on the residual norm via its square
    kp_hat = camera.scale * joints[:, :2] + camera.translation
    resid = kp_hat - problem.keypoints
    sq = np.sum(resid * resid, axis=1)
    denom = sq + config.sigma_keypoint**2
    rho = sq / denom
    terms["keypoint"] = config.w_keypoint * float(np.dot(problem.confidences, rho))
    if want_grad:
        coef = (
            config.w_keypoint
            * problem.confidences
            * 2.0
            * config.sigma_keypoint**2
            / denom**2
        )
        g_kp = coef[:, None] * resid
        d_joints[:, :2] += camera.scale * g_kp
        d_scale += float(np.einsum("md,md->", g_kp, joints[:, :2]))
        d_trans += g_kp.sum(axis=0)

    # optional squared silhouette discrepancy on the soft rendering
    if config.use_silhouette and problem.silhouette is not None and config.w_silhouette > 0:
        soft = render_silhouette(vertices, model.faces, camera, config.temperature)
        diff = soft.pixels - problem.silhouette
        terms["silhouette"] = config.w_silhouette * float(np.sum(diff * diff))
        if want_grad and not soft.degenerate:
            upstream = 2.0 * config.w_silhouette * diff
            grad3 = render_silhouette_grad(
                vertices, model.faces, camera, config.temperature, upstream
            )
            d_vertices += grad3
            g2 = grad3[:, :2] / camera.scale
            d_scale += float(np.einsum("nd,nd->", g2, vertices[:, :2]))
            d_trans += g2.sum(axis=0)

    # robust anchor on pose coordinates
    d_theta_direct = np.zeros_like(theta)
    if problem.anchor_theta is not None and config.w_anchor > 0:
        diff = theta - problem.anchor_theta
        if want_grad:
            vals, dvals = geman_mcclure(diff, config.sigma_anchor, want_grad=True)
            d_theta_direct += config.w_anchor * dvals
        else:
            vals = geman_mcclure(diff, config.sigma_anchor)
        terms["anchor"] = config.w_anchor * float(np.sum(vals))

    terms["shape_reg"] = config.w_beta * float(np.dot(beta, beta))
    value = float(sum(terms.values()))
    if not want_grad:
        return value, terms, None

    d_beta_direct = 2.0 * config.w_beta * beta
    need_model_grads = np.any(d_vertices) or np.any(d_joints)
    if need_model_grads:
        d_beta, d_theta = body_model.backward(model, cache, d_vertices, d_joints)
    else:
        d_beta, d_theta = np.zeros_like(beta), np.zeros_like(theta)
    grads = {
        "theta": d_theta + d_theta_direct,
        "beta": d_beta + d_beta_direct,
        "camera": np.array([d_scale, d_trans[0], d_trans[1]]),
    }
    return value, terms, grads


def _pack(theta, beta, cam_vec):
    return np.concatenate([theta, beta, cam_vec])


def _unpack(params, n_pose, n_shape):
    return params[:n_pose], params[n_pose : n_pose + n_shape], params[n_pose + n_shape :]


def fit(model, problem, config=None):
    """Minimize the fitting objective from the problem's starting point.

    Returns a FitResult whose trace is strictly decreasing after the first
    entry. Raises NumericalError if the objective is not finite at the start.
    """
    config = config or FitConfig()
    if problem.keypoints.shape[0] != model.n_joints:
        raise ValidationError(
            f"problem has {problem.keypoints.shape[0]} keypoints, model regresses {model.n_joints}"
        )
    n_pose, n_shape = model.n_pose, model.n_shape
    size = problem.camera0.image_size

    def evaluate(params, want_grad):
        theta, beta, cam_vec = _unpack(params, n_pose, n_shape)
        if cam_vec[0] <= _MIN_SCALE:
            return np.inf, {}, None
        camera = Camera(cam_vec[0], cam_vec[1:], size)
        return _energy(model, problem, config, theta, beta, camera, want_grad)

    params = _pack(problem.theta0, problem.beta0, problem.camera0.as_vector())
    if not np.all(np.isfinite(params)):
        raise NumericalError("fit starting point has non-finite parameters")
    value, terms, grads = evaluate(params, True)
    if not np.isfinite(value):
        raise NumericalError("fit objective is not finite at the starting point")

    mask = np.ones_like(params)
    if not config.fit_shape:
        mask[n_pose : n_pose + n_shape] = 0.0
    if not config.fit_camera:
        mask[n_pose + n_shape :] = 0.0

    trace = [value]
    path = [params.copy()] if config.keep_path else None
    step = config.step_init
    converged = False
    iterations = 0
    for _ in range(config.max_iters):
        direction = grads["theta"], grads["beta"], grads["camera"]
        g = _pack(*direction) * mask
        g_norm_sq = float(np.dot(g, g))
        if g_norm_sq == 0.0:
            converged = True
            break
        accepted = False
        while step >= config.min_step:
            candidate = params - step * g
            cand_value, _, _ = evaluate(candidate, False)
            if cand_value <= value - config.armijo_c * step * g_norm_sq:
                accepted = True
                break
            step *= config.backtrack
        if not accepted:
            break
        params = candidate
        previous = value
        value, terms, grads = evaluate(params, True)
        trace.append(value)
        if path is not None:
            path.append(params.copy())
        iterations += 1
        step = min(step * config.step_grow, config.step_max)
        if previous - value <= config.rel_tol * max(1.0, abs(previous)):
            converged = True
            break

    theta, beta, cam_vec = _unpack(params, n_pose, n_shape)
    return FitResult(
        theta=theta.copy(),
        beta=beta.copy(),
        camera=Camera(cam_vec[0], cam_vec[1:], size),
        trace=np.asarray(trace),
        iterations=iterations,
        converged=converged,
        terms=terms,
        path=None if path is None else np.asarray(path),
    )


def problem_from_record(record, theta0, beta0, anchor=True, use_mask=False):
    """Build a FitProblem from a dataset record and an initial estimate."""
    theta0 = np.asarray(theta0, dtype=np.float64).reshape(-1)
    return FitProblem(
        keypoints=record.keypoints,
        confidences=record.confidences,
        theta0=theta0,
        beta0=beta0,
        camera0=record.camera,
        anchor_theta=theta0.copy() if anchor else None,
        silhouette=record.mask.astype(np.float64) if use_mask else None,
    )
