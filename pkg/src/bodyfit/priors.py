"""Networks mapping 2D evidence to body parameters, and their training.

The pose network lifts normalized keypoints (with confidences) to axis-angle
pose through two residual fully connected blocks. The shape network reads a
silhouette image through five conv + pool blocks into one residual block.
Training runs in two phases: a parameter-space loss first, optionally joined
by a mesh-space loss computed through the body model. A separate finetuning
loop optimizes reprojection error only, for datasets with 2D labels alone.
"""

from dataclasses import dataclass

import numpy as np

from . import model as body_model
from . import rng
from .errors import ValidationError
from .losses import (
    LossConfig,
    joint_loss,
    param_loss_axis_angle,
    param_loss_rotmat,
    per_vertex_loss,
    reprojection_loss,
)
from .nnet import (
    Conv2d3x3,
    Dense,
    Dropout,
    Flatten,
    LayerGraph,
    MaxPool2x2,
    Relu,
    ResidualAdd,
    Rmsprop,
)
from .renderer import IMAGE_SIZE, Keypoints2D, Silhouette

POSE_WIDTH = 1024
POSE_DROPOUT = 0.5
SHAPE_CHANNELS = (8, 16, 32, 64, 128)

# Regression heads start near zero so initial pose outputs sit inside the
# principal axis-angle shell (|theta| < pi). A head at Glorot scale emits
# multi-radian rotations whose matrix-space loss has no radial restoring
# force, letting outputs drift across 2-pi shells early in training.
HEAD_INIT_SCALE = 0.01

LOSS_VARIANTS = ("axisAngle", "rotMat", "rotMat+vertex", "rotMat+joint")

LOG_HEADER = ("step", "phase", "param_loss", "mesh_loss", "total")


# ---------------------------------------------------------------------------
# architectures


def _residual_block(layers, width, dropout):
    """Two Dense+Relu stages with an additive skip over the whole block."""
    source = len(layers) - 1
    layers.append(Dense(width, width))
    layers.append(Relu())
    if dropout:
        layers.append(Dropout(dropout))
    layers.append(Dense(width, width))
    layers.append(Relu())
    if dropout:
        layers.append(Dropout(dropout))
    layers.append(ResidualAdd(source))


def build_pose_prior(n_keypoints, n_pose, width=POSE_WIDTH, dropout=POSE_DROPOUT, seed=0):
    """Keypoint vector (3M: x, y, confidence interleaved) -> axis-angle pose."""
    if n_keypoints < 1 or n_pose < 3:
        raise ValidationError("need at least one keypoint and one joint")
    layers = [Dense(3 * n_keypoints, width)]
    _residual_block(layers, width, dropout)
    _residual_block(layers, width, dropout)
    layers.append(Dense(width, n_pose))
    graph = LayerGraph(layers, (3 * n_keypoints,), seed)
    graph.layers[-1].weight *= HEAD_INIT_SCALE
    return graph


def build_shape_prior(n_shape, channels=SHAPE_CHANNELS, image_size=IMAGE_SIZE,
                      dropout=0.0, seed=0):
    """Silhouette image (1 x S x S) -> shape coefficients."""
    if n_shape < 1:
        raise ValidationError("need at least one shape coefficient")
    if image_size % (2 ** len(channels)) != 0:
        raise ValidationError("image size must be divisible by 2^n_blocks")
    layers = []
    c_in = 1
    for c_out in channels:
        layers.append(Conv2d3x3(c_in, c_out))
        layers.append(Relu())
        layers.append(MaxPool2x2())
        c_in = c_out
    layers.append(Flatten())
    flat = c_in * (image_size // 2 ** len(channels)) ** 2
    _residual_block(layers, flat, dropout)
    layers.append(Dense(flat, n_shape))
    graph = LayerGraph(layers, (1, image_size, image_size), seed)
    graph.layers[-1].weight *= HEAD_INIT_SCALE
    return graph


# ---------------------------------------------------------------------------
# input encoding


def encode_keypoints(points, confidences, image_size=IMAGE_SIZE):
    """Map pixel coordinates to [-1, 1] and interleave with raw confidences."""
    points = np.asarray(points, dtype=np.float64)
    confidences = np.asarray(confidences, dtype=np.float64)
    normalized = 2.0 * points / image_size - 1.0
    return np.concatenate([normalized, confidences[..., None]], axis=-1).reshape(
        *points.shape[:-2], -1
    )


def pose_inputs(records, image_size=IMAGE_SIZE):
    pts = np.stack([r.keypoints for r in records])
    conf = np.stack([r.confidences for r in records])
    return encode_keypoints(pts, conf, image_size)


def shape_inputs(records):
    return np.stack([r.mask for r in records]).astype(np.float64)[:, None]


def param_targets(records):
    thetas = np.stack([r.theta for r in records])
    betas = np.stack([r.beta for r in records])
    return thetas, betas


def predict_pose(net, keypoints, confidences=None, image_size=IMAGE_SIZE):
    """Eval-mode pose estimate for one keypoint set."""
    if isinstance(keypoints, Keypoints2D):
        confidences = keypoints.confidences
        keypoints = keypoints.points
    keypoints = np.asarray(keypoints, dtype=np.float64)
    if keypoints.ndim != 2 or keypoints.shape[1] != 2:
        raise ValidationError("keypoints must be (M, 2)")
    if confidences is None:
        confidences = np.ones(keypoints.shape[0])
    x = encode_keypoints(keypoints, confidences, image_size)[None]
    if x.shape[1:] != net.input_shape:
        raise ValidationError(
            f"keypoint count mismatch: encoded {x.shape[1]}, net expects {net.input_shape[0]}"
        )
    out = net.forward(x)[0]
    if not np.all(np.isfinite(out)):
        raise ValidationError("pose prediction is not finite")
    return out


def predict_shape(net, silhouette):
    """Eval-mode shape estimate for one silhouette."""
    if isinstance(silhouette, Silhouette):
        silhouette = silhouette.pixels
    sil = np.asarray(silhouette, dtype=np.float64)
    if sil.shape != net.input_shape[1:]:
        raise ValidationError(
            f"silhouette shape {sil.shape} != net input {net.input_shape[1:]}"
        )
    out = net.forward(sil[None, None])[0]
    if not np.all(np.isfinite(out)):
        raise ValidationError("shape prediction is not finite")
    return out


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainPlan:
    """Two-phase schedule; phase 2 optionally adds a mesh-space loss."""

    phase1_steps: int = 4000
    phase2_steps: int = 6000
    batch_size: int = 256
    loss_variant: str = "rotMat"
    mix_weight: float = 1.0
    learning_rate: float = 3e-4
    lr_decay: float = 1.0       # per-step multiplier; 1.0 keeps the rate constant
    flip_augment: bool = False

    def __post_init__(self):
        if self.phase1_steps < 1 or self.phase2_steps < 1:
            raise ValidationError("phase step counts must be > 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValidationError(
                f"loss_variant must be one of {LOSS_VARIANTS}, got {self.loss_variant!r}"
            )
        if self.mix_weight < 0 or self.learning_rate <= 0:
            raise ValidationError("invalid mix weight or learning rate")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ValidationError("lr_decay must lie in (0, 1]")

    def rate_at(self, step):
        return self.learning_rate * self.lr_decay**step

    @property
    def param_loss(self):
        return param_loss_axis_angle if self.loss_variant == "axisAngle" else param_loss_rotmat

    @property
    def mesh_loss(self):
        if self.loss_variant == "rotMat+vertex":
            return per_vertex_loss
        if self.loss_variant == "rotMat+joint":
            return joint_loss
        return None


class TrainState:
    """Networks, optimizers, the global step counter, and the loss log."""

    def __init__(self, pose_net, shape_net, plan):
        self.pose_net = pose_net
        self.shape_net = shape_net
        self.pose_opt = Rmsprop(plan.learning_rate)
        self.shape_opt = Rmsprop(plan.learning_rate)
        self.step = 0
        self.log = []


def make_train_state(model, plan, width=POSE_WIDTH, channels=SHAPE_CHANNELS,
                     image_size=IMAGE_SIZE, seed=0):
    # disjoint init/dropout streams: even seeds for pose nets, odd for shape
    pose_net = build_pose_prior(model.n_joints, model.n_pose, width, seed=2 * seed)
    shape_net = build_shape_prior(
        model.n_shape, channels, image_size, seed=2 * seed + 1
    )
    return TrainState(pose_net, shape_net, plan)


def _check_dataset(records, model):
    if not records:
        raise ValidationError("dataset is empty")
    first = records[0]
    if first.theta.shape[0] != model.n_pose or first.beta.shape[0] != model.n_shape:
        raise ValidationError("dataset dimensions do not match the model")
    if first.keypoints.shape[0] != model.n_joints:
        raise ValidationError("dataset keypoint count does not match the model")


def train_steps(state, records, model, plan, phase, n_steps, seed,
                parts=("pose", "shape")):
    """Advance training by n_steps of the given phase (1 or 2).

    `parts` limits which network is trained. In parameter-loss steps the two
    networks' trajectories are independent (shared batch indices, separate
    gradients), so a pose-only and a shape-only run reproduce a joint run
    bit-exactly. Mesh losses couple the networks and require both parts.
    """
    if phase not in (1, 2):
        raise ValidationError("phase must be 1 or 2")
    _check_dataset(records, model)
    mesh_loss = plan.mesh_loss if phase == 2 else None
    do_pose = "pose" in parts
    do_shape = "shape" in parts
    if not (do_pose or do_shape):
        raise ValidationError("parts must include 'pose' or 'shape'")
    if mesh_loss is not None and not (do_pose and do_shape):
        raise ValidationError("mesh-loss steps train both networks")
    image_size = records[0].camera.image_size
    inputs_kp = pose_inputs(records, image_size) if do_pose else None
    masks = np.stack([r.mask for r in records]) if do_shape else None
    thetas, betas = param_targets(records)
    n = len(records)

    for _ in range(n_steps):
        step = state.step
        gen = rng.stream(seed, rng.DOMAIN_BATCH, step)
        idx = gen.integers(0, n, size=plan.batch_size)
        tb, bb = thetas[idx], betas[idx]
        theta_hat, beta_hat = tb, bb
        if do_pose:
            theta_hat = state.pose_net.forward(inputs_kp[idx], train=True, step=step)
        if do_shape:
            mb = masks[idx].astype(np.float64)[:, None]
            if plan.flip_augment:
                flips = gen.random(plan.batch_size) < 0.5
                mb[flips] = mb[flips][..., ::-1]
            beta_hat = state.shape_net.forward(mb, train=True, step=step)

        inv_b = 1.0 / plan.batch_size
        param_val, (d_theta, d_beta) = plan.param_loss(
            theta_hat, tb, beta_hat, bb, want_grad=True
        )
        param_val *= inv_b
        d_theta = d_theta * inv_b
        d_beta = d_beta * inv_b

        mesh_val = 0.0
        if mesh_loss is not None:
            v_hat, j_hat, cache = body_model.forward_batch(
                model, beta_hat, theta_hat, want_cache=True
            )
            v_ref, j_ref = body_model.forward_batch(model, bb, tb)
            if plan.loss_variant == "rotMat+vertex":
                raw, dm = mesh_loss(v_hat, v_ref, want_grad=True)
                db_m, dt_m = body_model.backward_batch(
                    model, cache, d_vertices=plan.mix_weight * inv_b * dm
                )
            else:
                raw, dm = mesh_loss(j_hat, j_ref, want_grad=True)
                db_m, dt_m = body_model.backward_batch(
                    model, cache, d_joints=plan.mix_weight * inv_b * dm
                )
            mesh_val = plan.mix_weight * raw * inv_b
            d_theta = d_theta + dt_m
            d_beta = d_beta + db_m

        rate = plan.rate_at(step)
        if do_pose:
            state.pose_net.backward(d_theta)
            state.pose_opt.learning_rate = rate
            state.pose_opt.step(state.pose_net.param_arrays(), state.pose_net.grad_arrays())
        if do_shape:
            state.shape_net.backward(d_beta)
            state.shape_opt.learning_rate = rate
            state.shape_opt.step(state.shape_net.param_arrays(), state.shape_net.grad_arrays())
        state.log.append((step, phase, param_val, mesh_val, param_val + mesh_val))
        state.step += 1
    return state


def train_priors(records, plan, model, width=POSE_WIDTH, channels=SHAPE_CHANNELS,
                 seed=0):
    """Run the full two-phase schedule; returns (pose_net, shape_net, log)."""
    _check_dataset(records, model)
    image_size = records[0].camera.image_size
    state = make_train_state(model, plan, width, channels, image_size, seed)
    train_steps(state, records, model, plan, 1, plan.phase1_steps, seed)
    train_steps(state, records, model, plan, 2, plan.phase2_steps, seed)
    return state.pose_net, state.shape_net, state.log


def predict_batch(pose_net, shape_net, records, image_size=IMAGE_SIZE, chunk=256):
    """Eval-mode predictions for a whole dataset: (thetas, betas)."""
    xs = pose_inputs(records, image_size)
    ms = shape_inputs(records)
    thetas, betas = [], []
    for lo in range(0, len(records), chunk):
        thetas.append(pose_net.forward(xs[lo : lo + chunk]))
        betas.append(shape_net.forward(ms[lo : lo + chunk]))
    return np.concatenate(thetas), np.concatenate(betas)


def write_loss_log(path, rows):
    with open(path, "w") as handle:
        handle.write(",".join(LOG_HEADER) + "\n")
        for step, phase, param_val, mesh_val, total in rows:
            handle.write(f"{step},{phase},{param_val!r},{mesh_val!r},{total!r}\n")


# ---------------------------------------------------------------------------
# reprojection finetuning (2D labels only)


def finetune_reprojection(pose_net, shape_net, records2d, model, steps,
                          base_records=None, plan=None, seed=0, batch_size=16,
                          learning_rate=3e-4, loss_config=None):
    """Refine the networks against 2D keypoints through the body model.

    Each step minimizes the keypoint reprojection loss on a records2d batch
    (confidences weight the residuals; cameras come from the records). When
    base_records is given, every reprojection step is followed by one
    parameter-loss step on that dataset. steps == 0 returns the networks
    untouched. Returns (pose_net, shape_net, log rows).
    """
    if steps == 0:
        return pose_net, shape_net, []
    _check_dataset(records2d, model)
    for rec in records2d:
        if rec.camera is None:
            raise ValidationError("finetuning records need camera initializations")
    plan = plan or TrainPlan(batch_size=batch_size, learning_rate=learning_rate)
    config = loss_config or LossConfig()
    image_size = records2d[0].camera.image_size
    inputs_kp = pose_inputs(records2d, image_size)
    masks = np.stack([r.mask for r in records2d])
    kp = np.stack([r.keypoints for r in records2d])
    conf = np.stack([r.confidences for r in records2d])
    cams = np.stack([r.camera.as_vector() for r in records2d])
    n = len(records2d)

    pose_opt = Rmsprop(learning_rate)
    shape_opt = Rmsprop(learning_rate)
    log = []
    zeros_sil = np.zeros((batch_size, 1))
    for t in range(steps):
        gen = rng.stream(seed, rng.DOMAIN_BATCH, t, 0)
        idx = gen.integers(0, n, size=batch_size)
        xb = inputs_kp[idx]
        mb = masks[idx].astype(np.float64)[:, None]

        theta_hat = pose_net.forward(xb, train=True, step=t)
        beta_hat = shape_net.forward(mb, train=True, step=t)
        v_hat, j_hat, cache = body_model.forward_batch(
            model, beta_hat, theta_hat, want_cache=True
        )
        scales = cams[idx, 0][:, None, None]
        trans = cams[idx, 1:][:, None, :]
        kp_hat = scales * j_hat[:, :, :2] + trans
        value, (g_kp, _) = reprojection_loss(
            kp_hat, kp[idx], zeros_sil, zeros_sil, config=config,
            weights=conf[idx], want_grad=True,
        )
        inv_b = 1.0 / batch_size
        d_joints = np.zeros_like(j_hat)
        d_joints[:, :, :2] = inv_b * scales * g_kp
        d_beta, d_theta = body_model.backward_batch(model, cache, d_joints=d_joints)
        pose_net.backward(d_theta)
        shape_net.backward(d_beta)
        pose_opt.step(pose_net.param_arrays(), pose_net.grad_arrays())
        shape_opt.step(shape_net.param_arrays(), shape_net.grad_arrays())
        log.append((t, "reproj", value * inv_b))

        if base_records is not None:
            gen2 = rng.stream(seed, rng.DOMAIN_BATCH, t, 1)
            state = TrainState(pose_net, shape_net, plan)
            state.pose_opt, state.shape_opt = pose_opt, shape_opt
            jdx = gen2.integers(0, len(base_records), size=batch_size)
            _standard_step(state, base_records, model, plan, jdx, t)
            log.append((t, "param", state.log[-1][4]))
    return pose_net, shape_net, log


def _standard_step(state, records, model, plan, idx, step):
    """One parameter-loss update on the given sample indices."""
    image_size = records[0].camera.image_size
    batch = [records[i] for i in idx]
    xb = pose_inputs(batch, image_size)
    mb = shape_inputs(batch)
    tb, bb = param_targets(batch)
    theta_hat = state.pose_net.forward(xb, train=True, step=step)
    beta_hat = state.shape_net.forward(mb, train=True, step=step)
    inv_b = 1.0 / len(batch)
    value, (d_theta, d_beta) = plan.param_loss(theta_hat, tb, beta_hat, bb, want_grad=True)
    state.pose_net.backward(d_theta * inv_b)
    state.shape_net.backward(d_beta * inv_b)
    state.pose_opt.step(state.pose_net.param_arrays(), state.pose_net.grad_arrays())
    state.shape_opt.step(state.shape_net.param_arrays(), state.shape_net.grad_arrays())
    state.log.append((step, 1, value * inv_b, 0.0, value * inv_b))
