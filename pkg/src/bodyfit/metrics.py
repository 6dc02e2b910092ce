"""Evaluation measures: per-vertex error, aligned joint error, mask scores."""

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ValidationError

_RANK_TOL = 1e-9


@dataclass
class EvalReport:
    """Aggregate metrics over an evaluation set."""

    mean_per_vertex_error: float
    reconstruction_error: float
    seg_accuracy: float
    seg_f1: float
    sample_count: int

    def validate(self):
        values = [self.mean_per_vertex_error, self.reconstruction_error,
                  self.seg_accuracy, self.seg_f1]
        if not all(np.isfinite(v) for v in values):
            raise ValidationError("EvalReport fields must be finite")
        if not (0.0 <= self.seg_accuracy <= 1.0 and 0.0 <= self.seg_f1 <= 1.0):
            raise ValidationError("segmentation scores must lie in [0, 1]")
        if self.sample_count < 0:
            raise ValidationError("sample_count must be nonnegative")

    def to_json(self):
        return json.dumps({
            "mean_per_vertex_error": self.mean_per_vertex_error,
            "reconstruction_error": self.reconstruction_error,
            "seg_accuracy": self.seg_accuracy,
            "seg_f1": self.seg_f1,
            "sample_count": self.sample_count,
        }, indent=1, sort_keys=True) + "\n"

    def to_csv_row(self):
        fields = [self.mean_per_vertex_error, self.reconstruction_error,
                  self.seg_accuracy, self.seg_f1, self.sample_count]
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in fields)

    CSV_HEADER = "mean_per_vertex_error,reconstruction_error,seg_accuracy,seg_f1,sample_count"


def _pair(a, b, name):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"{name} shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mean_per_vertex_error(vertices_hat, vertices):
    """Mean Euclidean distance between corresponding vertices (not squared)."""
    vertices_hat, vertices = _pair(vertices_hat, vertices, "vertices")
    return float(np.linalg.norm(vertices_hat - vertices, axis=-1).mean())


def similarity_align(points, target):
    """Least-squares similarity transform (s, R, t) mapping points onto target.

    Minimizes sum ||s R x_i + t - y_i||^2. Raises DegenerateInputError when
    either centered point set has rank < 2, which leaves the rotation
    underdetermined.
    """
    x, y = _pair(points, target, "points")
    if x.ndim != 2 or x.shape[1] != 3 or x.shape[0] < 3:
        raise ValidationError("similarity alignment needs at least 3 points in 3D")
    mx = x.mean(axis=0)
    my = y.mean(axis=0)
    xc = x - mx
    yc = y - my
    for centered in (xc, yc):
        sv = np.linalg.svd(centered, compute_uv=False)
        if sv[0] <= 0.0 or sv[1] <= _RANK_TOL * sv[0]:
            raise DegenerateInputError("joint set is rank-deficient; alignment undefined")
    cov = yc.T @ xc / x.shape[0]
    u, d, vt = np.linalg.svd(cov)
    flip = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        flip[-1] = -1.0
    rot = u @ np.diag(flip) @ vt
    var_x = float(np.sum(xc * xc)) / x.shape[0]
    scale = float(np.sum(d * flip)) / var_x
    trans = my - scale * rot @ mx
    return scale, rot, trans


def reconstruction_error(joints_hat, joints):
    """Mean joint distance after similarity-Procrustes aligning the prediction."""
    scale, rot, trans = similarity_align(joints_hat, joints)
    aligned = scale * np.asarray(joints_hat, dtype=np.float64) @ rot.T + trans
    return float(np.linalg.norm(aligned - np.asarray(joints, dtype=np.float64), axis=-1).mean())


def segmentation_scores(mask_hat, mask):
    """(accuracy, foreground F1); F1 defined as 1.0 when both masks are empty."""
    mask_hat = np.asarray(mask_hat)
    mask = np.asarray(mask)
    if mask_hat.shape != mask.shape:
        raise ValidationError(f"mask shapes differ: {mask_hat.shape} vs {mask.shape}")
    a = mask_hat.astype(bool)
    b = mask.astype(bool)
    accuracy = float(np.mean(a == b))
    tp = float(np.sum(a & b))
    fp = float(np.sum(a & ~b))
    fn = float(np.sum(~a & b))
    if tp + fp + fn == 0.0:
        return accuracy, 1.0
    f1 = 2.0 * tp / (2.0 * tp + fp + fn)
    return accuracy, f1
