"""Weak-perspective projection and a differentiable soft silhouette.

Projection drops depth: p = scale * (x, y) + translation. The image origin is
the top-left corner, x points rightward, y downward, and pixel (row, col) has
its center at (col + 0.5, row + 0.5).

The soft silhouette assigns each pixel sigmoid(-d / temperature) where d is
the exact signed distance from the pixel center to the boundary of the union
of all projected triangles, negative inside. Boundary pieces keep provenance
to the vertices that created them (fold edges, plus clip points where one
projected edge enters another triangle), so the gradient of the rendered
image with respect to the 3D vertices is analytic, not approximate.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ValidationError

IMAGE_SIZE = 64

_AREA_EPS = 1e-12   # projected triangles flatter than this have no interior
_SLOPE_EPS = 1e-12  # half-plane value slopes flatter than this are constant
_SPAN_EPS = 1e-9    # boundary pieces shorter than this (in t) are dropped
_DIST_EPS = 1e-12   # pixel sitting exactly on a boundary point: no gradient


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Camera:
    """Weak-perspective camera: pixels = scale * (x, y) + translation."""

    scale: float
    translation: np.ndarray
    image_size: int = IMAGE_SIZE

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValidationError(f"camera scale must be finite and > 0, got {self.scale}")
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if t.shape != (2,) or not np.all(np.isfinite(t)):
            raise ValidationError("camera translation must be a finite 2-vector")
        object.__setattr__(self, "translation", t)
        if int(self.image_size) < 1:
            raise ValidationError("image_size must be a positive integer")
        object.__setattr__(self, "image_size", int(self.image_size))

    def as_vector(self):
        """(scale, tx, ty) packed for optimizers."""
        return np.array([self.scale, self.translation[0], self.translation[1]])

    @staticmethod
    def from_vector(vec, image_size=IMAGE_SIZE):
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.shape != (3,):
            raise ValidationError("camera vector must have 3 entries (scale, tx, ty)")
        return Camera(float(vec[0]), vec[1:], image_size)


@dataclass
class Silhouette:
    """Soft occupancy image in [0, 1] with a threshold-0.5 binary view."""

    pixels: np.ndarray
    degenerate: bool = False

    @property
    def binary(self):
        return self.pixels >= 0.5


@dataclass
class Keypoints2D:
    """Projected joints in pixels with per-point confidences in [0, 1]."""

    points: np.ndarray
    confidences: np.ndarray = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or not np.all(np.isfinite(pts)):
            raise ValidationError("keypoints must be a finite (M, 2) array")
        self.points = pts
        if self.confidences is None:
            self.confidences = np.ones(pts.shape[0])
        conf = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
        if conf.shape[0] != pts.shape[0]:
            raise ValidationError("confidences must match the number of keypoints")
        if not np.all(np.isfinite(conf)) or conf.min() < 0 or conf.max() > 1:
            raise ValidationError("confidences must lie in [0, 1]")
        self.confidences = conf


# ---------------------------------------------------------------------------
# projection


def project_points(points, camera):
    """Weak perspective: p = scale * (x, y) + translation; depth dropped."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise ValidationError("points must have a trailing axis of size 3")
    if not np.all(np.isfinite(pts)):
        raise ValidationError("points must be finite")
    return camera.scale * pts[..., :2] + camera.translation


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _pixel_centers(size):
    half = np.arange(size) + 0.5
    xs, ys = np.meshgrid(half, half)
    return np.stack([xs.ravel(), ys.ravel()], axis=1)  # index r * size + c


# ---------------------------------------------------------------------------
# hard coverage (point-in-union test at pixel centers)


def _kept_triangles(pts2, faces):
    faces = np.asarray(faces, dtype=int)
    if faces.size == 0:
        return faces.reshape(0, 3), np.empty(0), np.empty(0, dtype=int)
    tri = pts2[faces]
    area2 = _cross2(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    kept = np.nonzero(np.abs(area2) > _AREA_EPS)[0]
    return faces[kept], area2[kept], kept


def rasterize_mask(vertices, faces, camera):
    """Hard binary coverage of the projected triangle union at pixel centers.

    Bit-identical to render_silhouette(...).binary for the same inputs.
    """
    pts2 = project_points(vertices, camera)
    faces_kept, area2, _ = _kept_triangles(pts2, np.asarray(faces, dtype=int))
    return _coverage(pts2, faces_kept, area2, camera.image_size)


def _coverage(pts2, faces_kept, area2, size):
    covered = np.zeros(size * size, dtype=bool)
    if faces_kept.shape[0] == 0:
        return covered.reshape(size, size)
    tri = pts2[faces_kept]
    orient = np.sign(area2)

    lo = np.ceil(tri.min(axis=1) - 0.5).astype(int)   # first center >= min
    hi = np.floor(tri.max(axis=1) - 0.5).astype(int)  # last center <= max
    lo = np.clip(lo, 0, size - 1)
    hi = np.clip(hi, -1, size - 1)
    width = hi - lo + 1
    ok = (width > 0).all(axis=1)
    tri, orient, lo, hi, width = tri[ok], orient[ok], lo[ok], hi[ok], width[ok]

    wmax = int(width.max(initial=0))
    done = np.zeros(tri.shape[0], dtype=bool)
    for bucket in (4, 8, 16, 32, 64, size):
        if bucket > max(wmax, 4) and bucket != size:
            continue
        sel = ~done & (width.max(axis=1) <= bucket)
        done |= sel
        idx = np.nonzero(sel)[0]
        if idx.size == 0:
            continue
        offs = np.arange(bucket)
        xs = lo[idx, 0][:, None] + offs[None, :]          # (Fb, w)
        ys = lo[idx, 1][:, None] + offs[None, :]
        px = xs[:, None, :] + 0.5                          # (Fb, 1, w)
        py = ys[:, :, None] + 0.5                          # (Fb, w, 1)
        a, b, c = tri[idx, 0], tri[idx, 1], tri[idx, 2]
        o = orient[idx][:, None, None]

        def edge_ok(p0, p1):
            return o * (
                (p1[:, 0] - p0[:, 0])[:, None, None] * (py - p0[:, 1][:, None, None])
                - (p1[:, 1] - p0[:, 1])[:, None, None] * (px - p0[:, 0][:, None, None])
            ) >= 0.0

        inside = edge_ok(a, b) & edge_ok(b, c) & edge_ok(c, a)
        inside &= (xs <= hi[idx, 0][:, None])[:, None, :]
        inside &= (ys <= hi[idx, 1][:, None])[:, :, None]
        flat = ys[:, :, None] * size + xs[:, None, :]
        covered[flat[inside]] = True
        if done.all():
            break
    return covered.reshape(size, size)


# ---------------------------------------------------------------------------
# union boundary as provenance-tracked sub-segments


def _candidate_edges(pts2, faces):
    """Edges that can carry union boundary: open edges and fold edges.

    For each undirected edge, if the two adjacent faces project with their
    third vertices on the same side (or degenerately), parts of the edge may
    lie on the union boundary; strictly opposite sides mean the union covers
    both sides locally. Returns (u, v, f1, f2) rows, f2 = -1 for open edges.
    """
    third = {}
    owner = {}
    for fi, (a, b, c) in enumerate(faces):
        for u, v, w in ((a, b, c), (b, c, a), (c, a, b)):
            if (u, v) in third:
                raise ValidationError("mesh has a duplicated directed edge")
            third[(u, v)] = w
            owner[(u, v)] = fi
    rows = []
    seen = set()
    for (u, v), w1 in third.items():
        key = (min(u, v), max(u, v))
        if key in seen:
            continue
        seen.add(key)
        e = pts2[v] - pts2[u]
        if e[0] * e[0] + e[1] * e[1] <= _AREA_EPS:
            continue
        if (v, u) in third:
            w2 = third[(v, u)]
            c1 = _cross2(e, pts2[w1] - pts2[u])
            c2 = _cross2(e, pts2[w2] - pts2[u])
            if c1 * c2 < 0.0:
                continue  # interior edge: faces fall on both sides
            rows.append((u, v, owner[(u, v)], owner[(v, u)]))
        else:
            rows.append((u, v, owner[(u, v)], -1))
    return np.array(rows, dtype=int).reshape(-1, 4)


def _covered_intervals(pts2, cand, faces_kept, kept_ids):
    """For each candidate edge, t-intervals hidden inside other triangles.

    Returns per-edge lists of (lo, hi, cutter_lo, cutter_hi) where cutters
    are (c, d) vertex-index pairs of the triangle edge crossed at that bound.
    """
    n_edge = cand.shape[0]
    n_face = faces_kept.shape[0]
    if n_edge == 0 or n_face == 0:
        return [[] for _ in range(n_edge)]

    pu = pts2[cand[:, 0]]  # (E, 2)
    pv = pts2[cand[:, 1]]
    tri = pts2[faces_kept]                     # (F, 3, 2)
    ea = tri                                    # edge origins (k = 0, 1, 2)
    ed = tri[:, [1, 2, 0]] - tri                # edge directions
    orient = np.sign(_cross2(ed[:, 0], tri[:, 2] - tri[:, 0]))  # (F,)

    def halfplane(p):
        rel = p[:, None, None, :] - ea[None]   # (E, F, 3, 2)
        return orient[None, :, None] * _cross2(ed[None], rel)

    s0 = halfplane(pu)
    s1 = halfplane(pv)
    ds = s1 - s0
    steep = np.abs(ds) > _SLOPE_EPS
    tcut = np.divide(-s0, np.where(steep, ds, 1.0))
    lower = np.where(steep & (ds > 0), tcut, -np.inf)
    upper = np.where(steep & (ds < 0), tcut, np.inf)
    const_empty = ~steep & (s0 <= 0.0)

    lo = lower.max(axis=2)
    klo = lower.argmax(axis=2)
    hi = upper.min(axis=2)
    khi = upper.argmin(axis=2)
    empty = const_empty.any(axis=2)
    empty |= np.maximum(lo, 0.0) >= np.minimum(hi, 1.0) - _SLOPE_EPS

    # a face never hides its own edge
    kept_pos = {int(f): i for i, f in enumerate(kept_ids)}
    for e in range(n_edge):
        for f in (cand[e, 2], cand[e, 3]):
            pos = kept_pos.get(int(f))
            if pos is not None:
                empty[e, pos] = True

    nxt = [1, 2, 0]
    out = []
    for e in range(n_edge):
        rows = []
        for f in np.nonzero(~empty[e])[0]:
            k0, k1 = int(klo[e, f]), int(khi[e, f])
            cut_lo = (int(faces_kept[f, k0]), int(faces_kept[f, nxt[k0]]))
            cut_hi = (int(faces_kept[f, k1]), int(faces_kept[f, nxt[k1]]))
            rows.append([max(float(lo[e, f]), 0.0), min(float(hi[e, f]), 1.0), cut_lo, cut_hi])
        out.append(rows)
    return out


def _boundary_segments(pts2, faces):
    """Exact union-boundary pieces with endpoint provenance.

    Returns a dict of arrays over S sub-segments:
      u, v : (S,) parent edge vertex indices
      q0, q1 : (S, 2) endpoint coordinates
      cut0, cut1 : (S, 2) cutter vertex pairs, (-1, -1) for original vertices
    """
    faces = np.asarray(faces, dtype=int)
    faces_kept, _, kept_ids = _kept_triangles(pts2, faces)
    cand = _candidate_edges(pts2, faces)
    intervals = _covered_intervals(pts2, cand, faces_kept, kept_ids)

    u_l, v_l, q0_l, q1_l, cut0_l, cut1_l = [], [], [], [], [], []
    none = (-1, -1)
    for e in range(cand.shape[0]):
        u, v = int(cand[e, 0]), int(cand[e, 1])
        pu, pv = pts2[u], pts2[v]
        rows = sorted(intervals[e], key=lambda r: (r[0], r[1]))
        merged = []
        for lo, hi, clo, chi in rows:
            if merged and lo <= merged[-1][1] + _SLOPE_EPS:
                if hi > merged[-1][1]:
                    merged[-1][1] = hi
                    merged[-1][3] = chi
            else:
                merged.append([lo, hi, clo, chi])
        spans = []
        t_prev, cut_prev = 0.0, none
        for lo, hi, clo, chi in merged:
            spans.append((t_prev, lo, cut_prev, clo))
            t_prev, cut_prev = hi, chi
        spans.append((t_prev, 1.0, cut_prev, none))
        for t0, t1, c0, c1 in spans:
            if t1 - t0 <= _SPAN_EPS:
                continue
            q0 = pu if t0 <= 0.0 else pu + t0 * (pv - pu)
            q1 = pv if t1 >= 1.0 else pu + t1 * (pv - pu)
            u_l.append(u)
            v_l.append(v)
            q0_l.append(q0)
            q1_l.append(q1)
            cut0_l.append(c0 if t0 > 0.0 else none)
            cut1_l.append(c1 if t1 < 1.0 else none)
    return {
        "u": np.array(u_l, dtype=int),
        "v": np.array(v_l, dtype=int),
        "q0": np.array(q0_l).reshape(-1, 2),
        "q1": np.array(q1_l).reshape(-1, 2),
        "cut0": np.array(cut0_l, dtype=int).reshape(-1, 2),
        "cut1": np.array(cut1_l, dtype=int).reshape(-1, 2),
    }


def _distance_field(centers, q0, q1, chunk=128):
    """Distance from each center to the nearest sub-segment.

    Returns (dist, argmin segment, unclamped foot parameter on that segment).
    """
    p = centers.shape[0]
    best = np.full(p, np.inf)
    arg = np.zeros(p, dtype=int)
    foot = np.zeros(p)
    for start in range(0, q0.shape[0], chunk):
        a = q0[start : start + chunk]
        d = q1[start : start + chunk] - a
        len2 = np.einsum("sd,sd->s", d, d)
        rel = centers[:, None, :] - a[None]
        s_raw = np.einsum("psd,sd->ps", rel, d) / len2
        s_cl = np.clip(s_raw, 0.0, 1.0)
        diff = rel - s_cl[:, :, None] * d[None]
        dist = np.sqrt(np.einsum("psd,psd->ps", diff, diff))
        local = dist.argmin(axis=1)
        rows = np.arange(p)
        cand = dist[rows, local]
        better = cand < best
        best[better] = cand[better]
        arg[better] = local[better] + start
        foot[better] = s_raw[rows, local][better]
    return best, arg, foot


# ---------------------------------------------------------------------------
# rendering


def _render_internals(vertices, faces, camera):
    pts2 = project_points(vertices, camera)
    faces = np.asarray(faces, dtype=int)
    size = camera.image_size
    faces_kept, area2, _ = _kept_triangles(pts2, faces)
    if faces_kept.shape[0] == 0:
        return None
    covered = _coverage(pts2, faces_kept, area2, size).ravel()
    segs = _boundary_segments(pts2, faces)
    centers = _pixel_centers(size)
    sign = np.where(covered, -1.0, 1.0)
    if segs["u"].size == 0:
        dist = np.full(centers.shape[0], np.inf)
        arg = np.zeros(centers.shape[0], dtype=int)
        foot = np.zeros(centers.shape[0])
    else:
        dist, arg, foot = _distance_field(centers, segs["q0"], segs["q1"])
    return {
        "pts2": pts2,
        "centers": centers,
        "sign": sign,
        "dist": dist,
        "arg": arg,
        "foot": foot,
        "segs": segs,
    }


def _check_temperature(temperature):
    if not (np.isfinite(temperature) and temperature > 0):
        raise ValidationError(f"temperature must be finite and > 0, got {temperature}")


def render_silhouette(vertices, faces, camera, temperature=1.0):
    """Soft occupancy image: sigmoid(-signed_distance / temperature) per pixel."""
    _check_temperature(temperature)
    size = camera.image_size
    core = _render_internals(vertices, faces, camera)
    if core is None:
        return Silhouette(np.zeros((size, size)), degenerate=True)
    signed = core["sign"] * core["dist"]
    with np.errstate(invalid="ignore"):
        pixels = expit(np.where(np.isinf(signed), np.sign(signed) * 1e9, signed) / -temperature)
    return Silhouette(pixels.reshape(size, size))


def _intersection_pullback(pu, pv, pc, pd, gq):
    """Pull dLoss/dq back through q = line(pu, pv) x line(pc, pd).

    All inputs (P, 2); returns gradients for the four generating points.
    """

    def rot(a):  # d cross(a, b) / da
        return np.stack([a[:, 1], -a[:, 0]], axis=1)

    def perp(a):  # d cross(b, a) / da
        return np.stack([-a[:, 1], a[:, 0]], axis=1)

    e = pv - pu
    f = pd - pc
    g = pc - pu
    den = _cross2(e, f)
    safe = np.where(np.abs(den) > _SLOPE_EPS, den, 1.0)
    t = _cross2(g, f) / safe
    live = (np.abs(den) > _SLOPE_EPS)[:, None]

    dAdu = -rot(f)
    dAdc = rot(f) - perp(g)
    dAdd = perp(g)
    dDdu = -rot(f)
    dDdv = rot(f)
    dDdc = -perp(e)
    dDdd = perp(e)

    tq = np.einsum("pd,pd->p", gq, e)[:, None]  # dLoss/dt
    t_ = t[:, None]
    s_ = safe[:, None]
    gu = (gq * (1.0 - t_) + tq * (dAdu - t_ * dDdu) / s_) * live
    gv = (gq * t_ + tq * (0.0 - t_ * dDdv) / s_) * live
    gc = (tq * (dAdc - t_ * dDdc) / s_) * live
    gd = (tq * (dAdd - t_ * dDdd) / s_) * live
    return gu, gv, gc, gd


def render_silhouette_grad(vertices, faces, camera, temperature, upstream):
    """d(sum(upstream * silhouette)) / d(vertices), exact for the soft image."""
    _check_temperature(temperature)
    vertices = np.asarray(vertices, dtype=np.float64)
    size = camera.image_size
    up = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if up.shape[0] != size * size:
        raise ValidationError(f"upstream must have {size}x{size} entries")
    grad3 = np.zeros_like(vertices)
    core = _render_internals(vertices, faces, camera)
    if core is None or core["segs"]["u"].size == 0 or np.isinf(core["dist"]).all():
        return grad3

    sign, dist, arg, foot = core["sign"], core["dist"], core["arg"], core["foot"]
    segs = core["segs"]
    centers = core["centers"]
    signed = sign * dist
    occ = expit(np.where(np.isinf(signed), np.sign(signed) * 1e9, signed) / -temperature)
    # d loss / d dist, treating the inside sign as locally constant
    g_dist = up * occ * (1.0 - occ) * (-sign / temperature)
    active = (np.abs(g_dist) > 0.0) & (dist > _DIST_EPS) & np.isfinite(dist)

    pts2 = core["pts2"]
    g2 = np.zeros((vertices.shape[0], 2))

    u_idx = segs["u"][arg]
    v_idx = segs["v"][arg]
    interior = active & (foot > 0.0) & (foot < 1.0)
    if interior.any():
        w = np.nonzero(interior)[0]
        pu = pts2[u_idx[w]]
        pv = pts2[v_idx[w]]
        p = centers[w]
        e = pv - pu
        r = p - pu
        c = _cross2(e, r)
        ln = np.sqrt(np.einsum("pd,pd->p", e, e))
        sc = np.sign(c)
        gd = g_dist[w]
        # dist = |cross(e, r)| / |e|
        dcdu = np.stack([e[:, 1] - r[:, 1], r[:, 0] - e[:, 0]], axis=1)
        dcdv = np.stack([r[:, 1], -r[:, 0]], axis=1)
        dldu = -e / ln[:, None]
        dldv = e / ln[:, None]
        absd = np.abs(c) / ln
        coef = gd / ln
        gu = coef[:, None] * (sc[:, None] * dcdu - absd[:, None] * dldu)
        gv = coef[:, None] * (sc[:, None] * dcdv - absd[:, None] * dldv)
        np.add.at(g2, u_idx[w], gu)
        np.add.at(g2, v_idx[w], gv)

    for is_start in (True, False):
        if is_start:
            mask = active & (foot <= 0.0)
            q = segs["q0"][arg]
            cut = segs["cut0"][arg]
        else:
            mask = active & (foot >= 1.0)
            q = segs["q1"][arg]
            cut = segs["cut1"][arg]
        if not mask.any():
            continue
        w = np.nonzero(mask)[0]
        p = centers[w]
        diff = q[w] - p
        gq = (g_dist[w] / dist[w])[:, None] * diff  # d|p - q|/dq
        plain = cut[w, 0] < 0
        if plain.any():
            own = u_idx[w][plain] if is_start else v_idx[w][plain]
            np.add.at(g2, own, gq[plain])
        cutp = ~plain
        if cutp.any():
            ws = w[cutp]
            pu = pts2[u_idx[ws]]
            pv = pts2[v_idx[ws]]
            pc = pts2[cut[ws, 0]]
            pd = pts2[cut[ws, 1]]
            gu, gv, gc, gd_ = _intersection_pullback(pu, pv, pc, pd, gq[cutp])
            np.add.at(g2, u_idx[ws], gu)
            np.add.at(g2, v_idx[ws], gv)
            np.add.at(g2, cut[ws, 0], gc)
            np.add.at(g2, cut[ws, 1], gd_)

    grad3[:, :2] = camera.scale * g2
    return grad3


# ---------------------------------------------------------------------------
# image and mask serialization


def write_pgm(path, pixels):
    """Binary PGM (P5, maxval 255); values must lie in [0, 1]."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim != 2 or not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise ValidationError("PGM export expects a finite 2-d array in [0, 1]")
    quant = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as handle:
        handle.write(header)
        handle.write(quant.tobytes())


def pack_mask_bits(mask):
    """Row-major bit packing, most significant bit first."""
    mask = np.asarray(mask, dtype=bool)
    return np.packbits(mask.ravel(), bitorder="big").tobytes()


def unpack_mask_bits(data, shape):
    """Inverse of pack_mask_bits for a known mask shape."""
    count = int(shape[0]) * int(shape[1])
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=count, bitorder="big")
    return bits.reshape(shape).astype(bool)
