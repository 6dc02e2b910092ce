"""Synthetic training-pair generation: sample body parameters, pose the
model, project from several viewpoints, and emit (keypoints + confidences,
silhouette) -> (theta, beta) records.

Record i combines base sample i // V with viewpoint i % V, so one base pose
appears once per yaw angle, differing only in global rotation. All sampling
uses counter-based streams keyed by (seed, domain, record index): records
are reproducible in isolation and independent of generation order.
"""

import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion
from scipy.special import ndtr, ndtri

from . import model as body_model
from . import rng
from .errors import DataIOError, EndOfDataError, ValidationError
from .renderer import Camera, pack_mask_bits, project_points, rasterize_mask, unpack_mask_bits
from .rotation import rodrigues, rotation_log

MAGIC = b"BFD1"

# fraction of the image height the projected body should occupy
FIT_FRACTION = 0.8


# ---------------------------------------------------------------------------
# samplers


def _truncated_normal(gen, lo, hi, mean, sigma, size):
    """Inverse-CDF sampling of Normal(mean, sigma^2) restricted to [lo, hi]."""
    a = ndtr((lo - mean) / sigma)
    b = ndtr((hi - mean) / sigma)
    u = gen.uniform(a, b, size=size)
    return mean + sigma * ndtri(u)


# (lo, hi, mean, sigma) per axis; hinge joints move about one axis only
_SWING_SMALL = (-0.3, 0.3, 0.0, 0.15)
_SWING_WIDE = (-1.2, 1.2, 0.0, 0.55)
_HINGE = (0.0, 2.3, 0.5, 0.6)

# hinge axis: knees swing about x (legs run along y), elbows about y
_HINGE_AXES = {"knee": 0, "elbow": 1}


def _joint_limits(name):
    """Per-axis (lo, hi, mean, sigma) rows for one joint, by anatomical name."""
    rows = np.zeros((3, 4))
    for part, axis in _HINGE_AXES.items():
        if part in name:
            rows[axis] = _HINGE
            return rows
    wide = ("shoulder" in name) or ("hip" in name)
    rows[:] = _SWING_WIDE if wide else _SWING_SMALL
    return rows


@dataclass(frozen=True)
class PoseSampler:
    """Draws per-joint axis-angle poses.

    Procedural mode samples each axis from a truncated Gaussian whose limits
    depend on the joint name (gentle spine/head sway, wide shoulders/hips,
    one-axis hinges for elbows and knees). File mode replays rows of a plain
    text matrix with one theta vector per line.
    """

    seed: int = 0
    mode: str = "procedural"
    theta_file: str = None
    limit_overrides: dict = None
    _table: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.mode not in ("procedural", "file"):
            raise ValidationError(f"unknown pose sampler mode {self.mode!r}")
        if self.mode == "file":
            if self.theta_file is None:
                raise ValidationError("file mode needs theta_file")
            try:
                table = np.loadtxt(self.theta_file, dtype=np.float64, ndmin=2)
            except OSError as exc:
                raise DataIOError(f"cannot read pose file {self.theta_file}: {exc}") from exc
            except ValueError as exc:
                raise DataIOError(f"malformed pose file {self.theta_file}: {exc}") from exc
            if not np.all(np.isfinite(table)):
                raise DataIOError(f"pose file {self.theta_file} has non-finite entries")
            object.__setattr__(self, "_table", table)

    def limits_for(self, model):
        """(J, 3, 4) truncation table aligned with the model's joints."""
        names = model.joint_names or tuple(f"joint{i}" for i in range(model.n_joints))
        rows = np.stack([_joint_limits(name) for name in names])
        for name, spec in (self.limit_overrides or {}).items():
            hits = [i for i, n in enumerate(names) if name in n]
            if not hits:
                raise ValidationError(f"limit override {name!r} matches no joint")
            for i in hits:
                rows[i] = np.asarray(spec, dtype=np.float64).reshape(-1, 4)
        return rows

    def sample(self, model, index):
        if self.mode == "file":
            if index >= self._table.shape[0]:
                raise EndOfDataError(
                    f"pose file exhausted: record {index} of {self._table.shape[0]}"
                )
            theta = self._table[index]
            if theta.shape[0] != model.n_pose:
                raise ValidationError(
                    f"pose file row length {theta.shape[0]} != model pose size {model.n_pose}"
                )
            return theta.copy()
        gen = rng.stream(self.seed, rng.DOMAIN_POSE, index)
        table = self.limits_for(model)
        theta = np.zeros((model.n_joints, 3))
        for j in range(model.n_joints):
            for axis in range(3):
                lo, hi, mean, sigma = table[j, axis]
                if hi > lo:
                    theta[j, axis] = _truncated_normal(gen, lo, hi, mean, sigma, None)
        return theta.reshape(-1)


@dataclass(frozen=True)
class ShapeSampler:
    """beta ~ Normal(0, diag(sigma^2)) truncated at +-3 sigma per coordinate."""

    seed: int = 0
    sigma: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma > 0):
            raise ValidationError(f"shape sigma must be finite and > 0, got {self.sigma}")

    def sample(self, model, index):
        gen = rng.stream(self.seed, rng.DOMAIN_SHAPE, index)
        return _truncated_normal(
            gen, -3.0 * self.sigma, 3.0 * self.sigma, 0.0, self.sigma, model.n_shape
        )


@dataclass(frozen=True)
class NoiseSpec:
    """Detector-imperfection simulation for keypoints and masks."""

    keypoint_sigma: float = 1.5
    keypoint_dropout: float = 0.05
    silhouette_radius: int = 0

    def __post_init__(self):
        if self.keypoint_sigma < 0 or not (0.0 <= self.keypoint_dropout <= 1.0):
            raise ValidationError("invalid noise spec")

    @property
    def is_zero(self):
        return (
            self.keypoint_sigma == 0.0
            and self.keypoint_dropout == 0.0
            and self.silhouette_radius == 0
        )


ZERO_NOISE = NoiseSpec(0.0, 0.0, 0)


# ---------------------------------------------------------------------------
# records


@dataclass
class DatasetRecord:
    """One training pair: 2D evidence plus the parameters that produced it."""

    theta: np.ndarray
    beta: np.ndarray
    camera: Camera
    keypoints: np.ndarray      # (M, 2) pixels, possibly noisy
    confidences: np.ndarray    # (M,) in [0, 1]
    mask: np.ndarray           # (size, size) bool, possibly noisy


def apply_noise(record, noise, gen):
    """Perturb a record's 2D evidence; returns a new record.

    Keypoints get Gaussian offsets with confidence exp(-|offset|^2 / (2 sigma^2));
    dropped keypoints move to the image center with confidence 0. A nonzero
    silhouette radius erodes (< 0) or dilates (> 0) the mask.
    """
    if noise.is_zero:
        return record
    kp = record.keypoints.copy()
    conf = record.confidences.copy()
    m = kp.shape[0]
    if noise.keypoint_sigma > 0:
        offsets = gen.normal(0.0, noise.keypoint_sigma, size=(m, 2))
        kp += offsets
        conf = conf * np.exp(
            -np.sum(offsets * offsets, axis=1) / (2.0 * noise.keypoint_sigma**2)
        )
    if noise.keypoint_dropout > 0:
        dropped = gen.random(m) < noise.keypoint_dropout
        center = record.camera.image_size / 2.0
        kp[dropped] = (center, center)
        conf = np.where(dropped, 0.0, conf)
    mask = record.mask
    if noise.silhouette_radius:
        op = binary_dilation if noise.silhouette_radius > 0 else binary_erosion
        mask = op(mask, iterations=abs(int(noise.silhouette_radius)))
    return replace(record, keypoints=kp, confidences=conf, mask=mask)


def fit_camera(vertices, image_size=None, fraction=FIT_FRACTION):
    """Scale and center the posed mesh to occupy `fraction` of the image height."""
    from .renderer import IMAGE_SIZE

    size = IMAGE_SIZE if image_size is None else int(image_size)
    vertices = np.asarray(vertices, dtype=np.float64)
    height = vertices[:, 1].max() - vertices[:, 1].min()
    if not np.isfinite(height) or height <= 0:
        raise ValidationError("posed mesh has no vertical extent; cannot fit camera")
    scale = fraction * size / height
    center = 0.5 * (vertices.max(axis=0) + vertices.min(axis=0))
    translation = size / 2.0 - scale * center[:2]
    return Camera(scale, translation, size)


def make_record(model, theta, beta, yaw=0.0, noise=ZERO_NOISE, noise_gen=None,
                image_size=None):
    """Pose, auto-fit the camera, project, rasterize, and optionally add noise."""
    theta = np.asarray(theta, dtype=np.float64).copy()
    if yaw != 0.0:
        turn = rodrigues(np.array([0.0, float(yaw), 0.0]))
        theta[:3] = rotation_log(turn @ rodrigues(theta[:3]))
    vertices, joints = body_model.forward(model, beta, theta)
    camera = fit_camera(vertices, image_size)
    keypoints = project_points(joints, camera)
    mask = rasterize_mask(vertices, model.faces, camera)
    record = DatasetRecord(
        theta=theta,
        beta=np.asarray(beta, dtype=np.float64).copy(),
        camera=camera,
        keypoints=keypoints,
        confidences=np.ones(keypoints.shape[0]),
        mask=mask,
    )
    if noise.is_zero:
        return record
    if noise_gen is None:
        raise ValidationError("noisy records need a noise RNG")
    return apply_noise(record, noise, noise_gen)


def generate_dataset(model, pose_sampler, shape_sampler, count, viewpoints=(0.0,),
                     noise=ZERO_NOISE, image_size=None):
    """Build `count` records; record i = base sample i // V at yaw i % V."""
    if count < 1:
        raise ValidationError("count must be >= 1")
    viewpoints = tuple(float(v) for v in viewpoints)
    if not viewpoints:
        raise ValidationError("need at least one viewpoint yaw angle")
    records = []
    for i in range(count):
        base, view = divmod(i, len(viewpoints))
        theta = pose_sampler.sample(model, base)
        beta = shape_sampler.sample(model, base)
        noise_gen = rng.stream(pose_sampler.seed, rng.DOMAIN_NOISE, i)
        records.append(
            make_record(model, theta, beta, viewpoints[view], noise, noise_gen, image_size)
        )
    return records


# ---------------------------------------------------------------------------
# binary dataset file: magic, u32 count, fixed-size records


def record_byte_size(n_pose, n_shape, n_keypoints, image_size=64):
    mask_bytes = (image_size * image_size + 7) // 8
    return 8 * (n_pose + n_shape + 3 + 3 * n_keypoints) + mask_bytes


def write_dataset(path, records):
    if not records:
        raise ValidationError("refusing to write an empty dataset")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(records)))
    for rec in records:
        row = np.concatenate([
            rec.theta,
            rec.beta,
            rec.camera.as_vector(),
            np.column_stack([rec.keypoints, rec.confidences]).ravel(),
        ])
        buf.write(np.ascontiguousarray(row, dtype="<f8").tobytes())
        buf.write(pack_mask_bits(rec.mask))
    try:
        with open(path, "wb") as handle:
            handle.write(buf.getvalue())
    except OSError as exc:
        raise DataIOError(f"cannot write dataset {path}: {exc}") from exc


def read_dataset(path, n_pose, n_shape, n_keypoints, image_size=64):
    """Read records written by write_dataset; dimensions come from the model."""
    try:
        with open(path, "rb") as handle:
            blob = handle.read()
    except OSError as exc:
        raise DataIOError(f"cannot read dataset {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise DataIOError(f"{path} is not a dataset file (bad magic)")
    (count,) = struct.unpack_from("<I", blob, 4)
    rec_size = record_byte_size(n_pose, n_shape, n_keypoints, image_size)
    expected = 8 + count * rec_size
    if len(blob) != expected:
        raise DataIOError(
            f"{path} has {len(blob)} bytes, expected {expected} for {count} records"
        )
    mask_bytes = (image_size * image_size + 7) // 8
    records = []
    offset = 8
    for _ in range(count):
        reals = np.frombuffer(
            blob, dtype="<f8", count=n_pose + n_shape + 3 + 3 * n_keypoints, offset=offset
        ).astype(np.float64)
        offset += reals.size * 8
        mask = unpack_mask_bits(blob[offset : offset + mask_bytes], (image_size, image_size))
        offset += mask_bytes
        theta = reals[:n_pose]
        beta = reals[n_pose : n_pose + n_shape]
        cam = Camera.from_vector(reals[n_pose + n_shape : n_pose + n_shape + 3], image_size)
        kp3 = reals[n_pose + n_shape + 3 :].reshape(n_keypoints, 3)
        records.append(
            DatasetRecord(theta, beta, cam, kp3[:, :2].copy(), kp3[:, 2].copy(), mask)
        )
    return records


def dataset_to_json(records):
    """Debug mirror of the binary format (reals as repr strings)."""
    out = []
    for rec in records:
        out.append({
            "theta": [repr(float(x)) for x in rec.theta],
            "beta": [repr(float(x)) for x in rec.beta],
            "camera": [repr(float(x)) for x in rec.camera.as_vector()],
            "keypoints": [
                [repr(float(x)), repr(float(y)), repr(float(c))]
                for (x, y), c in zip(rec.keypoints, rec.confidences)
            ],
            "mask_hex": pack_mask_bits(rec.mask).hex(),
        })
    return json.dumps({"records": out}, indent=1) + "\n"
