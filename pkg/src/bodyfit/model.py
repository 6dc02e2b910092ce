"""Articulated body model: blendshapes, kinematics, skinning, and gradients.

The forward map takes shape coefficients beta and per-joint axis-angle pose
theta to a posed surface mesh and 3D joints:

1. rest shape = template + sum_b beta_b * shape_blendshape_b
2. rest joints = joint_regressor @ rest shape
3. per-joint rotations via Rodrigues' formula, chained over the kinematic tree
4. optional pose blendshape correction, coefficients vec(R_j - I), j >= 1
5. linear blend skinning
6. posed joints = joint_regressor @ posed vertices

Gradients are hand-written: `forward_jacobians` builds full Jacobian matrices
column by column (forward mode), `backward_batch` pulls a vertex/joint
cotangent back to (beta, theta) for training and fitting (reverse mode).
"""

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import DataIOError, ValidationError
from .rotation import rodrigues, rodrigues_jacobian

MAX_REGRESSOR_NONZEROS = 16

_EYE3 = np.eye(3)


# ---------------------------------------------------------------------------
# model container


@dataclass
class BodyModel:
    """Immutable-by-convention bundle of fixed model parameters.

    Attributes
    ----------
    template_vertices : (N, 3) float array, rest surface in model units
    faces : (F, 3) int array of triangle vertex indices
    shape_blendshapes : (B, N, 3) float array, orthonormal over vertices
    parents : (J,) int array, parents[0] == -1, parents[j] < j
    joint_regressor : (J, N) row-stochastic array, <= 16 nonzeros per row
    skinning_weights : (N, J) array, rows nonnegative and summing to 1
    pose_blendshapes : optional (9 * (J - 1), N, 3) float array
    joint_names : optional tuple of J names (kept for samplers and reports)
    """

    template_vertices: np.ndarray
    faces: np.ndarray
    shape_blendshapes: np.ndarray
    parents: np.ndarray
    joint_regressor: np.ndarray
    skinning_weights: np.ndarray
    pose_blendshapes: np.ndarray | None = None
    joint_names: tuple | None = None

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def n_joints(self):
        return self.parents.shape[0]

    @property
    def n_shape(self):
        return self.shape_blendshapes.shape[0]

    @property
    def n_pose(self):
        return 3 * self.n_joints

    def validate(self):
        """Check every structural invariant; raise ValidationError on the first failure.

        Returns a dict of summary statistics for reporting.
        """
        v, f = self.template_vertices, self.faces
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValidationError("template_vertices must be (N, 3)")
        if not np.all(np.isfinite(v)):
            raise ValidationError("template_vertices must be finite")
        n = v.shape[0]
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValidationError("faces must be (F, 3)")
        if f.size and (f.min() < 0 or f.max() >= n):
            raise ValidationError("faces reference invalid vertex indices")

        j = self.n_joints
        if self.parents[0] != -1:
            raise ValidationError("parents[0] must be the root sentinel -1")
        for i in range(1, j):
            if not 0 <= self.parents[i] < i:
                raise ValidationError(f"parents[{i}] = {self.parents[i]} breaks the tree ordering")

        reg = self.joint_regressor
        if reg.shape != (j, n):
            raise ValidationError(f"joint_regressor must be ({j}, {n})")
        row_sums = reg.sum(axis=1)
        if not np.allclose(row_sums, 1.0, atol=1e-9):
            raise ValidationError("joint_regressor rows must sum to 1")
        nnz = (reg != 0.0).sum(axis=1)
        if nnz.max() > MAX_REGRESSOR_NONZEROS:
            raise ValidationError(f"joint_regressor rows must have <= {MAX_REGRESSOR_NONZEROS} nonzeros")

        w = self.skinning_weights
        if w.shape != (n, j):
            raise ValidationError(f"skinning_weights must be ({n}, {j})")
        if w.min() < 0:
            raise ValidationError("skinning_weights must be nonnegative")
        if not np.allclose(w.sum(axis=1), 1.0, atol=1e-9):
            raise ValidationError("skinning_weights rows must sum to 1")

        b = self.shape_blendshapes
        if b.ndim != 3 or b.shape[1:] != (n, 3):
            raise ValidationError(f"shape_blendshapes must be (B, {n}, 3)")
        if self.pose_blendshapes is not None:
            q = 9 * (j - 1)
            if self.pose_blendshapes.shape != (q, n, 3):
                raise ValidationError(f"pose_blendshapes must be ({q}, {n}, 3)")

        _check_closed_orientable(f)
        return {
            "n_vertices": n,
            "n_faces": int(f.shape[0]),
            "n_joints": j,
            "n_shape": self.n_shape,
            "n_pose": self.n_pose,
            "regressor_max_nonzeros": int(nnz.max()),
            "has_pose_blendshapes": self.pose_blendshapes is not None,
        }

    def check_params(self, beta, theta):
        beta = np.asarray(beta, dtype=np.float64)
        theta = np.asarray(theta, dtype=np.float64)
        if beta.shape[-1] != self.n_shape:
            raise ValidationError(f"beta must have length {self.n_shape}, got {beta.shape[-1]}")
        if theta.shape[-1] != self.n_pose:
            raise ValidationError(f"theta must have length {self.n_pose}, got {theta.shape[-1]}")
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(theta))):
            raise ValidationError("beta and theta must be finite")
        return beta, theta


def _check_closed_orientable(faces):
    """Every undirected edge must appear in exactly two faces, once per direction."""
    directed = {}
    for tri in np.asarray(faces):
        a, b, c = (int(x) for x in tri)
        if a == b or b == c or a == c:
            raise ValidationError("faces must not repeat a vertex")
        for u, v in ((a, b), (b, c), (c, a)):
            if (u, v) in directed:
                raise ValidationError(f"directed edge ({u}, {v}) appears twice: not orientable")
            directed[(u, v)] = True
    for (u, v) in directed:
        if (v, u) not in directed:
            raise ValidationError(f"edge ({u}, {v}) has no opposite twin: mesh not closed")


# ---------------------------------------------------------------------------
# forward model


def _fk(rotations, rest_joints, parents):
    """Chain local rotations over the kinematic tree.

    Returns world rotations W_j and the joint displacements h_j = g_j - J_j
    (posed minus rest position). Propagating the displacement instead of the
    absolute position keeps the identity pose exact: at theta = 0 both
    W_j - I and h_j are exactly zero.

    rotations: (S, J, 3, 3), rest_joints: (S, J, 3) -> (S, J, 3, 3), (S, J, 3)
    """
    s, j = rotations.shape[:2]
    world_rot = np.empty((s, j, 3, 3))
    disp = np.empty((s, j, 3))
    world_rot[:, 0] = rotations[:, 0]
    disp[:, 0] = 0.0
    for i in range(1, j):
        p = parents[i]
        world_rot[:, i] = world_rot[:, p] @ rotations[:, i]
        bone = rest_joints[:, i] - rest_joints[:, p]
        disp[:, i] = disp[:, p] + np.einsum("sab,sb->sa", world_rot[:, p] - _EYE3, bone)
    return world_rot, disp


def forward_batch(model, betas, thetas, want_cache=False):
    """Pose a batch of parameter vectors.

    Parameters
    ----------
    model : BodyModel
    betas : (S, B) array
    thetas : (S, 3 * J) array
    want_cache : bool
        When true, also return the intermediate quantities `backward_batch`
        needs.

    Returns
    -------
    (vertices, joints[, cache]) with shapes (S, N, 3) and (S, J, 3).
    """
    betas, thetas = model.check_params(betas, thetas)
    if betas.ndim != 2 or thetas.ndim != 2 or betas.shape[0] != thetas.shape[0]:
        raise ValidationError("betas and thetas must be 2-d with a shared batch axis")
    s = betas.shape[0]
    j = model.n_joints
    n = model.n_vertices

    v_shaped = model.template_vertices + np.einsum("sb,bnd->snd", betas, model.shape_blendshapes)
    rest_joints = np.matmul(model.joint_regressor, v_shaped)
    rots = rodrigues(thetas.reshape(s, j, 3))

    if model.pose_blendshapes is not None:
        pose_feat = (rots[:, 1:] - np.eye(3)).reshape(s, 9 * (j - 1))
        v_corr = v_shaped + np.einsum("sq,qnd->snd", pose_feat, model.pose_blendshapes)
    else:
        v_corr = v_shaped

    world_rot, disp = _fk(rots, rest_joints, model.parents)

    # skinning in delta form: x -> x + D_j x + (h_j - D_j J_j) with D_j = W_j - I,
    # blended per vertex; every delta term is exactly zero at the identity pose
    delta_rot = world_rot - _EYE3
    offsets = disp - np.einsum("sjab,sjb->sja", delta_rot, rest_joints)
    per_joint = np.concatenate([delta_rot.reshape(s, j, 9), offsets], axis=2)
    blended = np.matmul(model.skinning_weights[None], per_joint)  # (S, N, 12)
    blend_delta = blended[:, :, :9].reshape(s, n, 3, 3)
    vertices = v_corr + np.einsum("snab,snb->sna", blend_delta, v_corr) + blended[:, :, 9:]
    joints = np.matmul(model.joint_regressor, vertices)

    if not want_cache:
        return vertices, joints
    cache = {
        "thetas": thetas,
        "rots": rots,
        "rest_joints": rest_joints,
        "world_rot": world_rot,
        "delta_rot": delta_rot,
        "v_corr": v_corr,
        "blend_delta": blend_delta,
    }
    return vertices, joints, cache


def forward(model, beta, theta, want_cache=False):
    """Single-sample convenience wrapper around forward_batch."""
    beta = np.asarray(beta, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    out = forward_batch(model, beta[None], theta[None], want_cache=want_cache)
    if want_cache:
        vertices, joints, cache = out
        return vertices[0], joints[0], cache
    vertices, joints = out
    return vertices[0], joints[0]


def backward_batch(model, cache, d_vertices=None, d_joints=None):
    """Pull vertex/joint cotangents back to parameters (reverse mode).

    Parameters
    ----------
    cache : dict from forward_batch(..., want_cache=True)
    d_vertices : optional (S, N, 3) array, dLoss/dVertices
    d_joints : optional (S, J, 3) array, dLoss/dJoints

    Returns
    -------
    (d_betas, d_thetas) with shapes (S, B) and (S, 3 * J).
    """
    thetas = cache["thetas"]
    rots = cache["rots"]
    rest_joints = cache["rest_joints"]
    world_rot = cache["world_rot"]
    delta_rot = cache["delta_rot"]
    v_corr = cache["v_corr"]
    blend_delta = cache["blend_delta"]
    parents = model.parents
    s, j = rots.shape[:2]
    reg = model.joint_regressor
    w = model.skinning_weights

    if d_vertices is None and d_joints is None:
        raise ValidationError("backward_batch needs at least one cotangent")
    dv = np.zeros_like(v_corr) if d_vertices is None else np.array(d_vertices, dtype=np.float64)
    if d_joints is not None:
        dv = dv + np.einsum("jn,sjd->snd", reg, np.asarray(d_joints, dtype=np.float64))

    # --- skinning, reversed (gradients w.r.t. D_j equal gradients w.r.t. W_j)
    d_corr = dv + np.einsum("snab,sna->snb", blend_delta, dv)
    d_blend_delta = np.einsum("sna,snb->snab", dv, v_corr)
    d_blend = np.concatenate([d_blend_delta.reshape(s, -1, 9), dv], axis=2)
    d_per_joint = np.einsum("nj,snx->sjx", w, d_blend)
    d_world_rot = d_per_joint[:, :, :9].reshape(s, j, 3, 3)
    d_offsets = d_per_joint[:, :, 9:]
    # offsets = disp - delta_rot @ rest_joints
    d_disp = d_offsets.copy()
    d_world_rot -= np.einsum("sja,sjb->sjab", d_offsets, rest_joints)
    d_rest = -np.einsum("sjab,sja->sjb", delta_rot, d_offsets)

    # --- kinematics, reversed (children first; children have larger indices)
    d_rots = np.empty_like(rots)
    for i in range(j - 1, 0, -1):
        p = parents[i]
        d_rots[:, i] = np.einsum("sba,sbc->sac", world_rot[:, p], d_world_rot[:, i])
        d_world_rot[:, p] += np.einsum("sab,scb->sac", d_world_rot[:, i], rots[:, i])
        bone = rest_joints[:, i] - rest_joints[:, p]
        d_world_rot[:, p] += np.einsum("sa,sb->sab", d_disp[:, i], bone)
        pulled = np.einsum("sba,sb->sa", delta_rot[:, p], d_disp[:, i])
        d_rest[:, i] += pulled
        d_rest[:, p] -= pulled
        d_disp[:, p] += d_disp[:, i]
    d_rots[:, 0] = d_world_rot[:, 0]

    # --- pose blendshapes (coefficients vec(R_i - I), i >= 1)
    if model.pose_blendshapes is not None:
        d_feat = np.einsum("qnd,snd->sq", model.pose_blendshapes, d_corr)
        d_rots[:, 1:] += d_feat.reshape(s, j - 1, 3, 3)

    jac = rodrigues_jacobian(thetas.reshape(s, j, 3))
    d_thetas = np.einsum("sjrk,sjr->sjk", jac, d_rots.reshape(s, j, 9)).reshape(s, 3 * j)

    d_shaped = d_corr + np.einsum("jn,sjd->snd", reg, d_rest)
    d_betas = np.einsum("bnd,snd->sb", model.shape_blendshapes, d_shaped)
    return d_betas, d_thetas


def backward(model, cache, d_vertices=None, d_joints=None):
    """Single-sample wrapper around backward_batch."""
    dv = None if d_vertices is None else np.asarray(d_vertices)[None]
    dj = None if d_joints is None else np.asarray(d_joints)[None]
    d_betas, d_thetas = backward_batch(model, cache, dv, dj)
    return d_betas[0], d_thetas[0]


def forward_jacobians(model, beta, theta):
    """Full first-derivative matrices of the posed vertices.

    Returns
    -------
    d_theta : (3 * N, 3 * J) array
        Rows index the row-major flattening of the (N, 3) vertex array.
    d_beta : (3 * N, B) array
    """
    beta, theta = model.check_params(beta, theta)
    n, j, b = model.n_vertices, model.n_joints, model.n_shape
    parents = model.parents
    w = model.skinning_weights
    reg = model.joint_regressor

    _, _, cache = forward(model, beta, theta, want_cache=True)
    rots = cache["rots"][0]
    rest_joints = cache["rest_joints"][0]
    world_rot = cache["world_rot"][0]
    delta_rot = cache["delta_rot"][0]
    v_corr = cache["v_corr"][0]
    blend_delta = cache["blend_delta"][0]
    jac_rot = rodrigues_jacobian(theta.reshape(j, 3))  # (J, 9, 3)

    def blend_tangent(d_world_rot, d_disp, d_corr, d_rest):
        """Differential of delta-form skinning given tangents of its inputs.

        d_world_rot: (C, J, 3, 3), d_disp: (C, J, 3),
        d_corr: (C, N, 3) or None, d_rest: (C, J, 3) or None -> (C, N, 3)
        """
        c = d_world_rot.shape[0]
        term = np.matmul(w[None], d_world_rot.reshape(c, j, 9)).reshape(c, n, 3, 3)
        out = np.einsum("cnab,nb->cna", term, v_corr)
        moved = np.einsum("cjab,jb->cja", d_world_rot, rest_joints)
        if d_rest is not None:
            moved += np.einsum("jab,cjb->cja", delta_rot, d_rest)
        out += np.matmul(w[None], d_disp - moved)
        if d_corr is not None:
            out += d_corr + np.einsum("nab,cnb->cna", blend_delta, d_corr)
        return out

    # --- theta columns: tangents of the kinematic chain
    cols = 3 * j
    d_world_rot = np.zeros((cols, j, 3, 3))
    d_disp = np.zeros((cols, j, 3))
    d_local = jac_rot.transpose(0, 2, 1).reshape(cols, 3, 3)  # column 3m+k -> dR_m/dtheta_mk
    for m in range(j):
        sl = slice(3 * m, 3 * m + 3)
        if m == 0:
            d_world_rot[sl, 0] = d_local[sl]
        else:
            d_world_rot[sl, m] = np.einsum("ab,cbd->cad", world_rot[parents[m]], d_local[sl])
    for i in range(1, j):
        p = parents[i]
        d_world_rot[:, i] += np.einsum("cab,bd->cad", d_world_rot[:, p], rots[i])
        bone = rest_joints[i] - rest_joints[p]
        d_disp[:, i] = d_disp[:, p] + np.einsum("cab,b->ca", d_world_rot[:, p], bone)

    d_corr = None
    if model.pose_blendshapes is not None:
        # column 3m+k perturbs only block m-1 of the pose feature vector
        d_feat = np.zeros((cols, 9 * (j - 1)))
        for m in range(1, j):
            d_feat[3 * m : 3 * m + 3, 9 * (m - 1) : 9 * m] = jac_rot[m].T
        d_corr = np.einsum("cq,qnd->cnd", d_feat, model.pose_blendshapes)

    dv = blend_tangent(d_world_rot, d_disp, d_corr, None)
    d_theta = dv.transpose(1, 2, 0).reshape(3 * n, cols)

    # --- beta columns: rotations fixed, rest geometry moves
    d_shaped = model.shape_blendshapes  # (B, N, 3)
    d_rest = np.einsum("jn,bnd->bjd", reg, d_shaped)
    db_disp = np.zeros((b, j, 3))
    for i in range(1, j):
        p = parents[i]
        db_disp[:, i] = db_disp[:, p] + np.einsum("ab,cb->ca", delta_rot[p], d_rest[:, i] - d_rest[:, p])
    dv_beta = blend_tangent(np.zeros((b, j, 3, 3)), db_disp, d_shaped, d_rest)
    d_beta = dv_beta.transpose(1, 2, 0).reshape(3 * n, b)
    return d_theta, d_beta


# ---------------------------------------------------------------------------
# JSON serialization (exact round trip: reals stored as repr strings)


def _reals_out(arr):
    return [repr(float(x)) for x in np.asarray(arr, dtype=np.float64).ravel()]


def _reals_in(values, shape):
    arr = np.array([float(x) for x in values], dtype=np.float64)
    return arr.reshape(shape)


def save_model(model, path):
    """Write the model to a JSON document with exactly round-tripping reals."""
    j, n = model.n_joints, model.n_vertices
    reg = model.joint_regressor
    rows, cols_idx = np.nonzero(reg)
    doc = {
        "n_vertices": n,
        "n_joints": j,
        "n_shape": model.n_shape,
        "template": _reals_out(model.template_vertices),
        "faces": np.asarray(model.faces, dtype=int).ravel().tolist(),
        "shape_blendshapes": _reals_out(model.shape_blendshapes),
        "parents": np.asarray(model.parents, dtype=int).tolist(),
        "joint_regressor": [
            [int(r), int(c), repr(float(reg[r, c]))] for r, c in zip(rows, cols_idx)
        ],
        "skinning_weights": _reals_out(model.skinning_weights),
    }
    if model.pose_blendshapes is not None:
        doc["pose_blendshapes"] = _reals_out(model.pose_blendshapes)
    if model.joint_names is not None:
        doc["joint_names"] = list(model.joint_names)
    with open(path, "w") as handle:
        json.dump(doc, handle, separators=(",", ":"))
        handle.write("\n")


def load_model(path):
    """Read a model written by save_model."""
    try:
        with open(path) as handle:
            doc = json.load(handle)
    except OSError as exc:
        raise DataIOError(f"cannot read model file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataIOError(f"model file {path} is not valid JSON: {exc}") from exc
    try:
        n = int(doc["n_vertices"])
        j = int(doc["n_joints"])
        b = int(doc["n_shape"])
        reg = np.zeros((j, n))
        for r, c, value in doc["joint_regressor"]:
            reg[int(r), int(c)] = float(value)
        model = BodyModel(
            template_vertices=_reals_in(doc["template"], (n, 3)),
            faces=np.array(doc["faces"], dtype=int).reshape(-1, 3),
            shape_blendshapes=_reals_in(doc["shape_blendshapes"], (b, n, 3)),
            parents=np.array(doc["parents"], dtype=int),
            joint_regressor=reg,
            skinning_weights=_reals_in(doc["skinning_weights"], (n, j)),
            pose_blendshapes=(
                _reals_in(doc["pose_blendshapes"], (9 * (j - 1), n, 3))
                if "pose_blendshapes" in doc
                else None
            ),
            joint_names=tuple(doc["joint_names"]) if "joint_names" in doc else None,
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise DataIOError(f"model file {path} is malformed: {exc}") from exc
    model.validate()
    return model


# ---------------------------------------------------------------------------
# procedural toy humanoid


@dataclass
class ToyModelSpec:
    """Build request for the procedural humanoid.

    n_joints counts articulated joints beyond the root, so theta has
    3 * (n_joints + 1) entries.
    """

    n_vertices: int = 600
    n_joints: int = 15
    n_shape: int = 10
    seed: int = 0
    pose_blendshapes: bool = False
    pose_blendshape_scale: float = 0.02


# name, parent, rest position (x right, y toward the feet, z forward)
_JOINT_TABLE = [
    ("pelvis", None, (0.0, 0.0, 0.0)),
    ("chest", "pelvis", (0.0, -0.35, 0.0)),
    ("neck", "chest", (0.0, -0.55, 0.0)),
    ("head", "neck", (0.0, -0.64, 0.0)),
    ("l_hip", "pelvis", (0.09, 0.02, 0.0)),
    ("r_hip", "pelvis", (-0.09, 0.02, 0.0)),
    ("l_knee", "l_hip", (0.10, 0.45, 0.0)),
    ("r_knee", "r_hip", (-0.10, 0.45, 0.0)),
    ("l_ankle", "l_knee", (0.105, 0.85, 0.0)),
    ("r_ankle", "r_knee", (-0.105, 0.85, 0.0)),
    ("l_shoulder", "chest", (0.17, -0.50, 0.0)),
    ("r_shoulder", "chest", (-0.17, -0.50, 0.0)),
    ("l_elbow", "l_shoulder", (0.29, -0.27, 0.0)),
    ("r_elbow", "r_shoulder", (-0.29, -0.27, 0.0)),
    ("l_wrist", "l_elbow", (0.38, -0.04, 0.0)),
    ("r_wrist", "r_elbow", (-0.38, -0.04, 0.0)),
    ("l_foot", "l_ankle", (0.105, 0.93, 0.09)),
    ("r_foot", "r_ankle", (-0.105, 0.93, 0.09)),
    ("l_hand", "l_wrist", (0.44, 0.03, 0.0)),
    ("r_hand", "r_wrist", (-0.44, 0.03, 0.0)),
    ("l_toe", "l_foot", (0.105, 0.96, 0.17)),
    ("r_toe", "r_foot", (-0.105, 0.96, 0.17)),
    ("l_fingers", "l_hand", (0.49, 0.08, 0.0)),
    ("r_fingers", "r_hand", (-0.49, 0.08, 0.0)),
]

MAX_TOY_JOINTS = len(_JOINT_TABLE) - 1

# part: capsule joint pair, end radii, skinning bind pair, blend window on the
# axial parameter, and a relative resolution weight
_PART_TABLE = [
    ("torso", "pelvis", "chest", 0.16, 0.14, 0.30, 0.85, 3.2),
    ("head", "head", None, 0.11, 0.11, 0.0, 1.0, 1.6),
    ("neck", "neck", "head", 0.045, 0.05, 0.2, 0.8, 0.5),
    ("l_thigh", "l_hip", "l_knee", 0.075, 0.055, 0.55, 0.95, 1.4),
    ("r_thigh", "r_hip", "r_knee", 0.075, 0.055, 0.55, 0.95, 1.4),
    ("l_shin", "l_knee", "l_ankle", 0.05, 0.035, 0.55, 0.95, 1.2),
    ("r_shin", "r_knee", "r_ankle", 0.05, 0.035, 0.55, 0.95, 1.2),
    ("l_clavicle", "chest", "l_shoulder", 0.055, 0.05, 0.35, 0.9, 0.6),
    ("r_clavicle", "chest", "r_shoulder", 0.055, 0.05, 0.35, 0.9, 0.6),
    ("l_upper_arm", "l_shoulder", "l_elbow", 0.047, 0.038, 0.55, 0.95, 1.0),
    ("r_upper_arm", "r_shoulder", "r_elbow", 0.047, 0.038, 0.55, 0.95, 1.0),
    ("l_forearm", "l_elbow", "l_wrist", 0.035, 0.028, 0.55, 0.95, 0.9),
    ("r_forearm", "r_elbow", "r_wrist", 0.035, 0.028, 0.55, 0.95, 0.9),
    ("l_foot_part", "l_ankle", "l_foot", 0.035, 0.03, 0.4, 0.9, 0.5),
    ("r_foot_part", "r_ankle", "r_foot", 0.035, 0.03, 0.4, 0.9, 0.5),
    ("l_hand_part", "l_wrist", "l_hand", 0.03, 0.026, 0.4, 0.9, 0.5),
    ("r_hand_part", "r_wrist", "r_hand", 0.03, 0.026, 0.4, 0.9, 0.5),
    ("l_toe_part", "l_foot", "l_toe", 0.026, 0.02, 0.4, 0.9, 0.4),
    ("r_toe_part", "r_foot", "r_toe", 0.026, 0.02, 0.4, 0.9, 0.4),
    ("l_finger_part", "l_hand", "l_fingers", 0.022, 0.015, 0.4, 0.9, 0.4),
    ("r_finger_part", "r_hand", "r_fingers", 0.022, 0.015, 0.4, 0.9, 0.4),
]

_MIN_SEGMENTS = 5
_MIN_RINGS = 5


def _capsule(a, b, radius_a, radius_b, segments, rings):
    """Tapered capsule mesh from a to b: two hemispherical caps and a body.

    Returns (vertices, faces, axial_t) where axial_t is the unclamped axial
    parameter of each vertex (0 at a, 1 at b), used for skinning ramps.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    axis = b - a
    length = np.linalg.norm(axis)
    if length < 1e-12:
        axis_n = np.array([0.0, 1.0, 0.0])
    else:
        axis_n = axis / length
    # deterministic frame orthogonal to the axis
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(axis_n)))] = 1.0
    u = np.cross(axis_n, helper)
    u /= np.linalg.norm(u)
    w = np.cross(axis_n, u)

    # distribute rings over cap A, body, cap B proportionally to arc lengths,
    # keeping at least two rings per cap and one body ring (rings >= 5)
    arc_a = 0.5 * np.pi * radius_a
    arc_b = 0.5 * np.pi * radius_b
    total = arc_a + arc_b + max(length, 1e-6)
    rings_a = max(2, int(round(rings * arc_a / total)))
    rings_b = max(2, int(round(rings * arc_b / total)))
    while rings_a + rings_b > rings - 1:
        if rings_a >= rings_b and rings_a > 2:
            rings_a -= 1
        elif rings_b > 2:
            rings_b -= 1
        else:
            raise ValidationError("capsule needs at least 5 rings")
    rings_body = rings - rings_a - rings_b

    centers, radii = [], []
    for i in range(1, rings_a + 1):
        # sweep cap A from near the pole to the equator ring at a
        ang = 0.5 * np.pi * i / rings_a
        centers.append(a - radius_a * np.cos(ang) * axis_n)
        radii.append(radius_a * np.sin(ang))
    for i in range(1, rings_body + 1):
        t = i / (rings_body + 1)
        centers.append(a + t * length * axis_n)
        radii.append(radius_a + (radius_b - radius_a) * t)
    for i in range(rings_b):
        # sweep cap B from the equator ring at b toward the pole
        ang = 0.5 * np.pi * i / rings_b
        centers.append(b + radius_b * np.sin(ang) * axis_n)
        radii.append(radius_b * np.cos(ang))

    angles = 2.0 * np.pi * np.arange(segments) / segments
    circle = np.cos(angles)[:, None] * u + np.sin(angles)[:, None] * w

    verts = [a - radius_a * axis_n]
    for center, radius in zip(centers, radii):
        verts.extend(center + radius * circle)
    verts.append(b + radius_b * axis_n)
    verts = np.array(verts)

    faces = []
    top = len(verts) - 1
    n_rings = len(centers)
    for k in range(segments):
        nk = (k + 1) % segments
        faces.append((0, 1 + nk, 1 + k))
    for ring in range(n_rings - 1):
        base0 = 1 + ring * segments
        base1 = base0 + segments
        for k in range(segments):
            nk = (k + 1) % segments
            faces.append((base0 + k, base0 + nk, base1 + k))
            faces.append((base0 + nk, base1 + nk, base1 + k))
    base = 1 + (n_rings - 1) * segments
    for k in range(segments):
        nk = (k + 1) % segments
        faces.append((base + k, base + nk, top))
    faces = np.array(faces, dtype=int)

    if length < 1e-12:
        axial_t = np.full(len(verts), 0.5)
    else:
        axial_t = (verts - a) @ axis_n / length

    # normalize winding to outward (positive enclosed volume)
    centroid = verts.mean(axis=0)
    shifted = verts - centroid
    tri = shifted[faces]
    volume = np.einsum("fa,fa->f", np.cross(tri[:, 0], tri[:, 1]), tri[:, 2]).sum() / 6.0
    if volume < 0:
        faces = faces[:, ::-1].copy()
    return verts, faces, axial_t


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _segment_distance(points, a, b):
    """Distance from points (N, 3) to segment ab, and the closest points."""
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        t = np.zeros(len(points))
    else:
        t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1), closest


def _shape_fields(verts, joint_pos, joint_index, n_shape, seed):
    """Smooth displacement fields, later orthonormalized into blendshapes."""
    x, y, z = verts[:, 0], verts[:, 1], verts[:, 2]
    zero = np.zeros_like(y)
    fields = [np.stack([zero, y, zero], axis=1)]  # height
    fields.append(np.stack([x, zero, z], axis=1))  # width

    lower = 1.0 / (1.0 + np.exp(-y / 0.08))
    fields.append(np.stack([zero, y * lower, zero], axis=1))  # lower-body stretch

    if "head" in joint_index:
        center = joint_pos[joint_index["head"]] + np.array([0.0, -0.10, 0.0])
        g = np.exp(-np.sum((verts - center) ** 2, axis=1) / (2 * 0.12**2))
        fields.append((verts - center) * g[:, None])  # head size

    mid = np.array([0.0, -0.17, 0.0])
    g = np.exp(-((y - mid[1]) ** 2) / (2 * 0.18**2))
    fields.append(np.stack([x * g, np.zeros_like(y), z * g], axis=1))  # torso girth

    g = np.exp(-((y - 0.05) ** 2) / (2 * 0.10**2))
    fields.append(np.stack([np.zeros_like(y), np.zeros_like(y), 0.5 * g], axis=1))  # belly

    for pair in (("l_shoulder", "l_wrist"), ("r_shoulder", "r_wrist")):
        if pair[0] in joint_index and pair[1] in joint_index:
            dist, closest = _segment_distance(verts, joint_pos[joint_index[pair[0]]], joint_pos[joint_index[pair[1]]])
            g = np.exp(-(dist**2) / (2 * 0.06**2))
            fields.append((verts - closest) * g[:, None])  # arm girth
    for pair in (("l_hip", "l_ankle"), ("r_hip", "r_ankle")):
        if pair[0] in joint_index and pair[1] in joint_index:
            dist, closest = _segment_distance(verts, joint_pos[joint_index[pair[0]]], joint_pos[joint_index[pair[1]]])
            g = np.exp(-(dist**2) / (2 * 0.08**2))
            fields.append((verts - closest) * g[:, None])  # leg girth

    gen = rng.stream(seed, rng.DOMAIN_FIELD)
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    while len(fields) < n_shape:
        bump = np.zeros_like(verts)
        for _ in range(3):
            center = gen.uniform(lo, hi)
            width = gen.uniform(0.10, 0.30)
            direction = gen.normal(size=3)
            direction /= np.linalg.norm(direction)
            g = np.exp(-np.sum((verts - center) ** 2, axis=1) / (2 * width**2))
            bump += g[:, None] * direction
        fields.append(bump)
    return fields[:n_shape] if n_shape <= len(fields) else fields


def _orthonormalize(fields, n_shape, n_vertices):
    mat = np.stack([f.ravel() for f in fields], axis=1)  # (3N, B_raw)
    if mat.shape[1] < n_shape:
        raise ValidationError("not enough independent shape fields")
    norms = np.linalg.norm(mat, axis=0)
    if norms.min() < 1e-12:
        raise ValidationError("degenerate shape field")
    q, r = np.linalg.qr(mat / norms)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    if np.abs(np.diag(r)).min() < 1e-6:
        raise ValidationError("shape fields are linearly dependent; lower n_shape")
    # contiguous so built and JSON-loaded models take identical einsum paths
    return np.ascontiguousarray(q[:, :n_shape].T.reshape(n_shape, n_vertices, 3))


def _resolve_budgets(part_specs, n_vertices):
    """Pick per-part (segments, rings) so vertex counts sum exactly to n_vertices.

    Each part consumes segments * rings + 2 vertices. Every part gets the
    minimum first and the surplus is split by weight, so the targets never
    overcommit the budget; an exact search over the three highest-weight
    parts then absorbs the rounding remainder.
    """
    weights = np.array([spec[-1] for spec in part_specs])
    minimum = _MIN_SEGMENTS * _MIN_RINGS + 2
    if n_vertices < minimum * len(part_specs):
        raise ValidationError(
            f"n_vertices={n_vertices} is too small for {len(part_specs)} body parts "
            f"(need at least {minimum * len(part_specs)})"
        )
    surplus = n_vertices - minimum * len(part_specs)
    targets = minimum + np.floor(surplus * weights / weights.sum()).astype(int)

    dims = []
    for target in targets:
        body = target - 2
        segments = int(np.clip(round(np.sqrt(body / 1.8)), _MIN_SEGMENTS, 48))
        rings = max(_MIN_RINGS, body // segments)
        dims.append([segments, rings])
    dims = np.array(dims, dtype=int)

    # the three highest-weight parts absorb the remainder exactly
    i0, i1, i2 = np.argsort(-weights)[:3]
    fixed = sum(int(dims[i, 0] * dims[i, 1]) + 2 for i in range(len(dims)) if i not in (i0, i1, i2))
    need = n_vertices - fixed - 6  # product budget for the three parts
    if need < 3 * _MIN_SEGMENTS * _MIN_RINGS:
        raise ValidationError(f"n_vertices={n_vertices} is too small for this joint count")

    def spans(i):
        s0, r0 = dims[i]
        s_span = range(max(_MIN_SEGMENTS, s0 - 2), s0 + 3)
        r_span = range(max(_MIN_RINGS, r0 - 8), r0 + 16)
        return s_span, r_span

    best = None
    s_span0, r_span0 = spans(i0)
    s_span1, r_span1 = spans(i1)
    s_span2, _ = spans(i2)
    s2_base, r2_base = dims[i2]
    for s0, r0, s1, r1 in itertools.product(s_span0, r_span0, s_span1, r_span1):
        rem = need - s0 * r0 - s1 * r1
        if rem < _MIN_SEGMENTS * _MIN_RINGS:
            continue
        for s2 in s_span2:
            if rem % s2:
                continue
            r2 = rem // s2
            if r2 < _MIN_RINGS:
                continue
            cost = (
                abs(r0 - dims[i0, 1]) + abs(r1 - dims[i1, 1]) + abs(r2 - r2_base)
                + 4 * (abs(s0 - dims[i0, 0]) + abs(s1 - dims[i1, 0]) + abs(s2 - s2_base))
            )
            if best is None or cost < best[0]:
                best = (cost, (s0, r0), (s1, r1), (s2, r2))
    if best is None:
        raise ValidationError(
            f"cannot distribute n_vertices={n_vertices} over {len(part_specs)} parts; "
            "try a nearby vertex count"
        )
    for i, (s, r) in zip((i0, i1, i2), best[1:]):
        dims[i] = (s, r)
    assert int(np.sum(dims[:, 0] * dims[:, 1] + 2)) == n_vertices
    return dims


def build_toy_model(spec=None, **kwargs):
    """Build the deterministic capsule-limb humanoid.

    Accepts a ToyModelSpec or keyword arguments with the same fields.
    """
    if spec is None:
        spec = ToyModelSpec(**kwargs)
    elif kwargs:
        raise ValidationError("pass either a ToyModelSpec or keyword arguments, not both")
    if spec.n_joints < 3:
        raise ValidationError("n_joints must be at least 3")
    if spec.n_joints > MAX_TOY_JOINTS:
        raise ValidationError(f"the toy skeleton supports at most {MAX_TOY_JOINTS} joints")
    if spec.n_shape < 1:
        raise ValidationError("n_shape must be at least 1")
    if spec.n_vertices < 50:
        raise ValidationError("n_vertices must be at least 50")

    n_total_joints = spec.n_joints + 1
    table = _JOINT_TABLE[:n_total_joints]
    names = [row[0] for row in table]
    joint_index = {name: i for i, name in enumerate(names)}
    parents = np.array([-1] + [joint_index[row[1]] for row in table[1:]], dtype=int)
    joint_pos = np.array([row[2] for row in table])

    part_specs = [
        part for part in _PART_TABLE
        if part[1] in joint_index and (part[2] is None or part[2] in joint_index)
    ]
    dims = _resolve_budgets(part_specs, spec.n_vertices)

    verts_all, faces_all = [], []
    bind_rows = []  # (bind_a, bind_b, ramp weight toward b) per vertex
    offset = 0
    for (name, ja, jb, ra, rb, lo, hi, _w), (segments, rings) in zip(part_specs, dims):
        pa = joint_pos[joint_index[ja]]
        if jb is None:  # head: near-spherical capsule below the joint
            center = pa + np.array([0.0, -0.10, 0.0])
            a = center + np.array([0.0, 0.03, 0.0])
            b = center - np.array([0.0, 0.03, 0.0])
            v, f, t = _capsule(a, b, ra, rb, segments, rings)
            wb = np.ones(len(v))
            bind_a = bind_b = joint_index[ja]
        else:
            pb = joint_pos[joint_index[jb]]
            v, f, t = _capsule(pa, pb, ra, rb, segments, rings)
            wb = _smoothstep((np.clip(t, 0.0, 1.0) - lo) / max(hi - lo, 1e-9))
            bind_a = joint_index[ja]
            bind_b = joint_index[jb]
        verts_all.append(v)
        faces_all.append(f + offset)
        for k in range(len(v)):
            bind_rows.append((bind_a, bind_b, wb[k]))
        offset += len(v)

    verts = np.concatenate(verts_all)
    faces = np.concatenate(faces_all)
    assert verts.shape[0] == spec.n_vertices

    weights = np.zeros((spec.n_vertices, n_total_joints))
    for i, (bind_a, bind_b, wb) in enumerate(bind_rows):
        weights[i, bind_a] += 1.0 - wb
        weights[i, bind_b] += wb

    # joint regressor: uniform average of the nearest surface vertices
    k_near = min(12, spec.n_vertices)
    regressor = np.zeros((n_total_joints, spec.n_vertices))
    for j in range(n_total_joints):
        dist = np.linalg.norm(verts - joint_pos[j], axis=1)
        nearest = np.argsort(dist, kind="stable")[:k_near]
        regressor[j, nearest] = 1.0 / k_near

    fields = _shape_fields(verts, joint_pos, joint_index, spec.n_shape, spec.seed)
    blendshapes = _orthonormalize(fields, spec.n_shape, spec.n_vertices)

    pose_blend = None
    if spec.pose_blendshapes:
        gen = rng.stream(spec.seed, rng.DOMAIN_FIELD, 1)
        q = 9 * (n_total_joints - 1)
        lo, hi = verts.min(axis=0), verts.max(axis=0)
        pose_blend = np.zeros((q, spec.n_vertices, 3))
        for qi in range(q):
            center = gen.uniform(lo, hi)
            width = gen.uniform(0.15, 0.40)
            direction = gen.normal(size=3)
            direction /= np.linalg.norm(direction)
            g = np.exp(-np.sum((verts - center) ** 2, axis=1) / (2 * width**2))
            pose_blend[qi] = spec.pose_blendshape_scale * g[:, None] * direction

    model = BodyModel(
        template_vertices=verts,
        faces=faces,
        shape_blendshapes=blendshapes,
        parents=parents,
        joint_regressor=regressor,
        skinning_weights=weights,
        pose_blendshapes=pose_blend,
        joint_names=tuple(names),
    )
    model.validate()
    return model


def rest_height(model, beta=None):
    """Vertical extent of the rest-pose body, optionally shaped by beta."""
    verts = model.template_vertices
    if beta is not None:
        beta = np.asarray(beta, dtype=np.float64)
        verts = verts + np.einsum("b,bnd->nd", beta, model.shape_blendshapes)
    return float(verts[:, 1].max() - verts[:, 1].min())
