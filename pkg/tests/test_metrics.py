"""Metric oracles: Procrustes alignment, per-vertex error, mask scores."""

import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from bodyfit.errors import DegenerateInputError, ValidationError
from bodyfit.metrics import (
    EvalReport,
    mean_per_vertex_error,
    reconstruction_error,
    segmentation_scores,
    similarity_align,
)


def random_cloud(seed, n=12):
    return np.random.default_rng(seed).normal(size=(n, 3))


def horn_alignment(x, y):
    """Independent similarity fit: quaternion eigenproblem for the rotation,
    then closed-form scale and translation given that rotation."""
    mx, my = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mx, y - my
    m = xc.T @ yc  # correlation of source against target
    sxx, sxy, sxz = m[0]
    syx, syy, syz = m[1]
    szx, szy, szz = m[2]
    n = np.array([
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ])
    vals, vecs = np.linalg.eigh(n)
    w, qx, qy, qz = vecs[:, np.argmax(vals)]
    rot = Rotation.from_quat([qx, qy, qz, w]).as_matrix()
    scale = float(np.sum(yc * (xc @ rot.T)) / np.sum(xc * xc))
    trans = my - scale * rot @ mx
    return scale, rot, trans


def test_mean_per_vertex_error_closed_form():
    a = np.zeros((2, 2, 3))
    b = np.zeros((2, 2, 3))
    b[..., 0] = [[3.0, 4.0], [0.0, 12.0]]
    b[0, 0, 1] = 4.0  # first pair distance 5
    assert mean_per_vertex_error(a, b) == pytest.approx((5.0 + 4.0 + 0.0 + 12.0) / 4.0)
    with pytest.raises(ValidationError):
        mean_per_vertex_error(np.zeros((2, 3)), np.zeros((3, 3)))


def test_similarity_align_recovers_known_transform():
    x = random_cloud(3)
    rot_true = Rotation.from_rotvec([0.3, -1.1, 0.7]).as_matrix()
    y = 1.7 * x @ rot_true.T + np.array([0.2, -0.5, 3.0])
    scale, rot, trans = similarity_align(x, y)
    assert scale == pytest.approx(1.7, abs=1e-9)
    assert np.allclose(rot, rot_true, atol=1e-9)
    assert np.allclose(trans, [0.2, -0.5, 3.0], atol=1e-9)
    assert np.allclose(rot @ rot.T, np.eye(3), atol=1e-12)


def test_similarity_align_matches_quaternion_oracle():
    """Noisy correspondence: SVD solution must match Horn's eigen solution."""
    gen = np.random.default_rng(11)
    x = random_cloud(5)
    y = 0.6 * x @ Rotation.from_rotvec([1.0, 0.2, -0.4]).as_matrix().T
    y += gen.normal(scale=0.05, size=x.shape) + np.array([1.0, 2.0, -0.7])
    scale, rot, trans = similarity_align(x, y)
    scale_o, rot_o, trans_o = horn_alignment(x, y)
    assert scale == pytest.approx(scale_o, abs=1e-9)
    assert np.allclose(rot, rot_o, atol=1e-9)
    assert np.allclose(trans, trans_o, atol=1e-9)

    # the fit must be a local optimum: nudging scale only increases the cost
    def cost(s):
        return np.sum((s * x @ rot.T + trans - y) ** 2)

    assert cost(scale) <= cost(scale * 1.001) + 1e-12
    assert cost(scale) <= cost(scale * 0.999) + 1e-12


def test_similarity_align_mirror_stays_proper():
    """A mirrored target must still yield det(R) = +1, never a reflection."""
    x = random_cloud(7)
    y = x.copy()
    y[:, 2] *= -1.0
    _, rot, _ = similarity_align(x, y)
    assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-9)


def test_similarity_align_degenerate_inputs():
    line = np.outer(np.arange(5, dtype=np.float64), [1.0, 2.0, 0.5])
    with pytest.raises(DegenerateInputError):
        similarity_align(line, random_cloud(1, n=5))
    with pytest.raises(DegenerateInputError):
        similarity_align(random_cloud(2, n=5), line)
    with pytest.raises(ValidationError):
        similarity_align(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        similarity_align(np.zeros((4, 2)), np.zeros((4, 2)))


def test_reconstruction_error_prediction_side_invariance():
    """Similarity-transforming the prediction must not change the score."""
    gen = np.random.default_rng(13)
    target = random_cloud(17)
    pred = target + gen.normal(scale=0.1, size=target.shape)
    base = reconstruction_error(pred, target)
    moved = 2.3 * pred @ Rotation.from_rotvec([0.2, 0.9, -1.3]).as_matrix().T + [5.0, -1.0, 0.4]
    assert reconstruction_error(moved, target) == pytest.approx(base, abs=1e-9)
    assert reconstruction_error(target, target) == pytest.approx(0.0, abs=1e-12)

    # the reference side sets the scale: doubling the target doubles the score
    assert reconstruction_error(pred, 2.0 * target) == pytest.approx(2.0 * base, rel=1e-9)


def test_segmentation_scores_counts():
    mask = np.array([[1, 1], [0, 0]], dtype=bool)
    pred = np.array([[1, 0], [1, 0]], dtype=bool)
    accuracy, f1 = segmentation_scores(pred, mask)
    assert accuracy == 0.5  # one TP, one TN
    assert f1 == pytest.approx(2 * 1 / (2 * 1 + 1 + 1))
    assert segmentation_scores(mask, mask) == (1.0, 1.0)
    empty = np.zeros((2, 2), dtype=bool)
    assert segmentation_scores(empty, empty) == (1.0, 1.0)
    accuracy, f1 = segmentation_scores(empty, mask)
    assert accuracy == 0.5 and f1 == 0.0
    with pytest.raises(ValidationError):
        segmentation_scores(np.zeros((2, 2)), np.zeros((2, 3)))


def test_eval_report_roundtrip_and_validation():
    report = EvalReport(
        mean_per_vertex_error=0.125,
        reconstruction_error=0.0625,
        seg_accuracy=0.875,
        seg_f1=0.8,
        sample_count=40,
    )
    report.validate()
    doc = json.loads(report.to_json())
    assert doc["mean_per_vertex_error"] == 0.125
    assert doc["sample_count"] == 40

    row = report.to_csv_row()
    values = row.split(",")
    assert len(values) == len(EvalReport.CSV_HEADER.split(","))
    assert float(values[0]) == 0.125 and int(values[4]) == 40

    bad = EvalReport(0.1, 0.1, 1.5, 0.5, 4)
    with pytest.raises(ValidationError):
        bad.validate()
    with pytest.raises(ValidationError):
        EvalReport(np.nan, 0.1, 0.5, 0.5, 4).validate()
    with pytest.raises(ValidationError):
        EvalReport(0.1, 0.1, 0.5, 0.5, -1).validate()
