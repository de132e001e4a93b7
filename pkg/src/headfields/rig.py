"""Procedural blendshape head rig.

Builds a head-shaped triangle mesh with localized linear expression bases,
a weighted jaw rotation, semantic landmarks, and per-vertex colors. Also
answers the mesh-proximity queries (closest surface point, barycentric
pseudo-ground-truth deformation) needed as a weak geometric prior.

Geometry conventions: +x is the subject's right, +y up, +z toward the
camera. All vertices live inside the unit cube [-0.5, 0.5]^3; the
canonical configuration is zero expression and zero jaw.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import ConvexHull

MIN_VERTICES = 200
MIN_EXPRESSIONS = 10
LANDMARK_COUNTS = (5, 34)


@dataclass(frozen=True)
class BlendshapeRig:
    vertices_mean: np.ndarray        # (V, 3)
    faces: np.ndarray                # (F, 3) int
    expr_bases: np.ndarray           # (V, 3, E)
    jaw_pivot: np.ndarray            # (3,)
    jaw_region_weights: np.ndarray   # (V,) in [0, 1]
    landmark_vertex_ids: np.ndarray  # (N_l,) int
    landmark_names: tuple            # (N_l,) semantic tags like "eye_outer_r"
    vertex_colors: np.ndarray        # (V, 3) in [0, 1]
    seed: int = 0

    @property
    def num_vertices(self):
        return self.vertices_mean.shape[0]

    @property
    def num_expressions(self):
        return self.expr_bases.shape[2]

    @property
    def num_landmarks(self):
        return self.landmark_vertex_ids.shape[0]

    @property
    def mean_edge_length(self):
        v, f = self.vertices_mean, self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return float(np.linalg.norm(v[e[:, 0]] - v[e[:, 1]], axis=1).mean())

    def bounding_box(self, inflate=0.0):
        lo = self.vertices_mean.min(axis=0)
        hi = self.vertices_mean.max(axis=0)
        pad = inflate * (hi - lo)
        return lo - pad, hi + pad

    def canonical_landmarks(self):
        return self.vertices_mean[self.landmark_vertex_ids].copy()


@dataclass(frozen=True)
class MeshState:
    vertices: np.ndarray          # (V, 3) deformed positions
    source_expression: np.ndarray
    source_jaw: np.ndarray
    faces: np.ndarray = field(repr=False, default=None)


# 34 semantic anchors (name, x, y) on the front of the face; z is resolved
# against the head surface. Mirrored pairs carry _l / _r suffixes.
_ANCHORS_34 = [
    ("brow_inner_l", 0.06, 0.17), ("brow_mid_l", 0.12, 0.19), ("brow_outer_l", 0.18, 0.16),
    ("brow_inner_r", -0.06, 0.17), ("brow_mid_r", -0.12, 0.19), ("brow_outer_r", -0.18, 0.16),
    ("eye_inner_l", 0.05, 0.09), ("eye_center_l", 0.11, 0.10), ("eye_outer_l", 0.17, 0.09),
    ("eye_lower_l", 0.11, 0.05),
    ("eye_inner_r", -0.05, 0.09), ("eye_center_r", -0.11, 0.10), ("eye_outer_r", -0.17, 0.09),
    ("eye_lower_r", -0.11, 0.05),
    ("nose_bridge", 0.0, 0.08), ("nose_tip", 0.0, -0.02),
    ("nose_ala_l", 0.06, -0.05), ("nose_ala_r", -0.06, -0.05),
    ("mouth_corner_l", 0.10, -0.16), ("mouth_corner_r", -0.10, -0.16),
    ("lip_top_mid", 0.0, -0.12), ("lip_top_l", 0.05, -0.13), ("lip_top_r", -0.05, -0.13),
    ("lip_bottom_mid", 0.0, -0.20), ("lip_bottom_l", 0.05, -0.19), ("lip_bottom_r", -0.05, -0.19),
    ("chin", 0.0, -0.30), ("jaw_l", 0.17, -0.22), ("jaw_r", -0.17, -0.22),
    ("cheek_l", 0.17, -0.04), ("cheek_r", -0.17, -0.04),
    ("forehead_mid", 0.0, 0.28), ("forehead_l", 0.12, 0.26), ("forehead_r", -0.12, 0.26),
]

# Sparse 5-landmark variant: eye centers, mouth corners, lower-lip midpoint.
_ANCHOR_NAMES_5 = ["eye_center_l", "eye_center_r",
                   "mouth_corner_l", "mouth_corner_r", "lip_bottom_mid"]

# Expression basis recipe: (name, anchor, direction, radius, magnitude, side)
# side: "l" keeps x>0 support only, "r" keeps x<0 only, None is unrestricted.
_BASIS_RECIPES = [
    ("lid_close_l", "eye_center_l", (0.0, -1.0, 0.15), 0.085, 0.030, "l"),
    ("lid_close_r", "eye_center_r", (0.0, -1.0, 0.15), 0.085, 0.030, "r"),
    ("brow_raise_l", "brow_mid_l", (0.0, 1.0, 0.25), 0.10, 0.032, "l"),
    ("brow_raise_r", "brow_mid_r", (0.0, 1.0, 0.25), 0.10, 0.032, "r"),
    ("smile_pull_l", "mouth_corner_l", (0.8, 0.5, 0.1), 0.10, 0.034, "l"),
    ("smile_pull_r", "mouth_corner_r", (-0.8, 0.5, 0.1), 0.10, 0.034, "r"),
    ("lip_lower_drop", "lip_bottom_mid", (0.0, -1.0, 0.0), 0.11, 0.036, None),
    ("lip_pucker", "lip_top_mid", (0.0, -0.2, 1.0), 0.09, 0.028, None),
    ("lip_upper_raise", "lip_top_mid", (0.0, 1.0, 0.1), 0.08, 0.026, None),
    ("mouth_wide", "lip_bottom_mid", (0.0, -0.4, -0.8), 0.13, 0.030, None),
    ("cheek_puff", "cheek_l", (0.3, 0.0, 1.0), 0.12, 0.028, None),
    ("forehead_raise", "forehead_mid", (0.0, 0.6, 0.8), 0.14, 0.026, None),
    ("nose_wrinkle", "nose_bridge", (0.0, 0.3, 1.0), 0.07, 0.022, None),
    ("chin_raise", "chin", (0.0, 1.0, 0.4), 0.09, 0.028, None),
    ("blink_both", "nose_bridge", (0.0, -1.0, 0.1), 0.16, 0.020, None),
    ("jaw_clench", "jaw_l", (0.0, 0.4, 0.6), 0.13, 0.022, None),
]


def generate_rig(seed, V=642, E=16, N_l=34):
    """Deterministically build a synthetic blendshape head.

    The mesh is a Fibonacci-sphere point set triangulated by its convex
    hull (manifold, every edge on exactly two faces) and sculpted into a
    head shape. Expression bases have geodesic-ball support; at least
    ceil(E/3) of them are strictly one-sided so asymmetric control stays
    observable.
    """
    if V < MIN_VERTICES:
        raise ValueError(f"V must be >= {MIN_VERTICES}, got {V}")
    if E < MIN_EXPRESSIONS:
        raise ValueError(f"E must be >= {MIN_EXPRESSIONS}, got {E}")
    if N_l not in LANDMARK_COUNTS:
        raise ValueError(f"N_l must be one of {LANDMARK_COUNTS}, got {N_l}")

    rng = np.random.default_rng(seed)
    verts, faces = _head_mesh(V)

    geo = _geodesic_distances(verts, faces)
    anchors = {name: _surface_vertex(verts, x, y) for name, x, y in _ANCHORS_34}

    bases = _expression_bases(verts, geo, anchors, E, rng)
    jaw_pivot, jaw_w = _jaw_rig(verts)
    colors = _face_colors(verts, anchors, geo, rng)

    # Landmark choice consumes no rng so N_l=5 and N_l=34 rigs share
    # identical meshes and bases for the same seed.
    if N_l == 34:
        names = tuple(n for n, _, _ in _ANCHORS_34)
    else:
        names = tuple(_ANCHOR_NAMES_5)
    lm_ids = _unique_ids([anchors[n] for n in names], verts)

    return BlendshapeRig(
        vertices_mean=verts,
        faces=faces,
        expr_bases=bases,
        jaw_pivot=jaw_pivot,
        jaw_region_weights=jaw_w,
        landmark_vertex_ids=lm_ids,
        landmark_names=names,
        vertex_colors=colors,
        seed=seed,
    )


def _head_mesh(V):
    """Fibonacci sphere of exactly V vertices, hull-triangulated, sculpted."""
    i = np.arange(V, dtype=np.float64)
    golden = (1 + 5 ** 0.5) / 2
    y = 1 - 2 * (i + 0.5) / V
    r = np.sqrt(1 - y * y)
    theta = 2 * np.pi * i / golden
    pts = np.stack([r * np.cos(theta), y, r * np.sin(theta)], axis=1)

    hull = ConvexHull(pts)
    faces = hull.simplices.copy()
    # orient every triangle outward (hull orientation is not guaranteed)
    tri = pts[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    c = tri.mean(axis=1)
    flip = np.einsum("ij,ij->i", n, c) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]

    v = pts.copy()
    # ellipsoid head proportions
    v[:, 0] *= 0.34
    v[:, 1] *= 0.43
    v[:, 2] *= 0.36
    # push a nose out of the front midface
    d_nose = np.linalg.norm(v[:, :2] - np.array([0.0, -0.02]), axis=1)
    v[:, 2] += 0.055 * np.exp(-(d_nose / 0.07) ** 2) * (v[:, 2] > 0)
    # flatten the back of the skull a touch and narrow the chin
    v[:, 2] += 0.04 * np.clip(-v[:, 2] - 0.2, 0, None)
    chin = np.clip((-v[:, 1] - 0.20) / 0.23, 0, 1)
    v[:, 0] *= 1.0 - 0.25 * chin
    return v, faces.astype(np.int64)


def _geodesic_distances(verts, faces):
    """All-pairs shortest edge-path distances (dense, desk-scale meshes)."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    w = np.linalg.norm(verts[e[:, 0]] - verts[e[:, 1]], axis=1)
    V = verts.shape[0]
    g = csr_matrix((np.concatenate([w, w]),
                    (np.concatenate([e[:, 0], e[:, 1]]),
                     np.concatenate([e[:, 1], e[:, 0]]))), shape=(V, V))
    return dijkstra(g, directed=False)


def _surface_vertex(verts, x, y):
    """Vertex nearest to the frontal anchor (x, y), preferring +z."""
    score = (verts[:, 0] - x) ** 2 + (verts[:, 1] - y) ** 2 - 0.05 * verts[:, 2]
    score[verts[:, 2] < 0.0] = np.inf
    return int(np.argmin(score))


def _unique_ids(ids, verts):
    """De-collide landmark ids (nudge duplicates to their nearest free vertex)."""
    out, used = [], set()
    for vid in ids:
        if vid in used:
            d = np.linalg.norm(verts - verts[vid], axis=1)
            for alt in np.argsort(d):
                if int(alt) not in used:
                    vid = int(alt)
                    break
        out.append(vid)
        used.add(vid)
    return np.array(out, dtype=np.int64)


def _expression_bases(verts, geo, anchors, E, rng):
    V = verts.shape[0]
    bases = np.zeros((V, 3, E))
    recipes = list(_BASIS_RECIPES)
    extra = 0
    while len(recipes) < E:
        # extra bases beyond the recipe table: random localized bumps
        recipes.append((f"extra_{extra}", None, None, 0.10, 0.024, None))
        extra += 1

    for k, (name, anchor, direction, radius, mag, side) in enumerate(recipes[:E]):
        if anchor is None:
            center = int(rng.integers(0, V))
            direction = rng.normal(size=3)
        else:
            center = anchors[anchor]
            direction = np.asarray(direction, dtype=np.float64)
        direction = direction / np.linalg.norm(direction)
        scale = mag * rng.uniform(0.85, 1.15)
        d = geo[center]
        fall = np.where(d < radius, np.cos(0.5 * np.pi * np.clip(d / radius, 0, 1)) ** 2, 0.0)
        disp = fall[:, None] * direction[None, :] * scale
        if side == "l":
            disp[verts[:, 0] <= 0.0] = 0.0
        elif side == "r":
            disp[verts[:, 0] >= 0.0] = 0.0
        bases[:, :, k] = disp
    return bases


def _jaw_rig(verts):
    pivot = np.array([0.0, -0.04, -0.10])
    below = np.clip((-0.06 - verts[:, 1]) / 0.16, 0.0, 1.0)
    front = np.clip((verts[:, 2] + 0.12) / 0.20, 0.0, 1.0)
    w = (below * front) ** 2
    return pivot, np.clip(w, 0.0, 1.0)


def _face_colors(verts, anchors, geo, rng):
    V = verts.shape[0]
    colors = np.tile(np.array([0.80, 0.62, 0.52]), (V, 1))

    def paint(center, radius, rgb, strength=1.0):
        fall = np.clip(1.0 - geo[center] / radius, 0.0, 1.0) ** 1.5 * strength
        colors[:] = colors * (1 - fall[:, None]) + np.asarray(rgb)[None, :] * fall[:, None]

    for side in ("l", "r"):
        paint(anchors[f"eye_center_{side}"], 0.065, (0.15, 0.12, 0.12))
        paint(anchors[f"brow_mid_{side}"], 0.075, (0.28, 0.20, 0.14), 0.85)
        paint(anchors[f"cheek_{side}"], 0.10, (0.85, 0.52, 0.45), 0.4)
    paint(anchors["lip_top_mid"], 0.075, (0.66, 0.28, 0.28), 0.9)
    paint(anchors["lip_bottom_mid"], 0.075, (0.66, 0.28, 0.28), 0.9)
    paint(anchors["nose_tip"], 0.05, (0.86, 0.62, 0.50), 0.5)

    colors += rng.uniform(-0.035, 0.035, size=(V, 3))
    return np.clip(colors, 0.0, 1.0)


# -- deformation -------------------------------------------------------


def _rotation_matrix(angles):
    """XYZ euler rotation (radians)."""
    rx, ry, rz = angles
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def deform_mesh(rig, e, jaw=(0.0, 0.0, 0.0)):
    """Linear basis blend followed by the weighted jaw rotation.

    vertices = mean + sum_k e_k * basis_k, then each vertex is moved
    toward its jaw-rotated image proportionally to its jaw weight. The
    result is exactly affine in e at fixed jaw.
    """
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (rig.num_expressions,):
        raise ValueError(f"expression must have shape ({rig.num_expressions},), got {e.shape}")
    jaw = np.asarray(jaw, dtype=np.float64)
    v = rig.vertices_mean + rig.expr_bases @ e
    if np.any(jaw != 0.0):
        R = _rotation_matrix(jaw)
        rotated = (v - rig.jaw_pivot) @ R.T + rig.jaw_pivot
        w = rig.jaw_region_weights[:, None]
        v = v + w * (rotated - v)
    return MeshState(vertices=v, source_expression=e.copy(), source_jaw=jaw.copy(),
                     faces=rig.faces)


def landmark_positions(rig, mesh):
    return mesh.vertices[rig.landmark_vertex_ids]


# -- closest point on the mesh surface --------------------------------


def closest_surface_points(mesh, points, candidate_faces=None):
    """Exact closest surface points for a batch of queries (brute force).

    Returns (x_m (N,3), face_ids (N,), barycentric (N,3), distances (N,)).
    Candidates per triangle are the interior plane projection (when its
    barycentric coordinates are admissible) and the three edge segments;
    the closest point on a triangle is always among them.

    `candidate_faces` (N, K) restricts each query to a face subset (used
    with a centroid kd-tree to keep per-iteration prior queries cheap).
    """
    P = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if candidate_faces is not None:
        return _closest_on_candidates(mesh, P, np.asarray(candidate_faces))
    tri = mesh.vertices[mesh.faces]           # (F, 3, 3)
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e0, e1 = v1 - v0, v2 - v0
    a = np.einsum("ij,ij->i", e0, e0)
    b = np.einsum("ij,ij->i", e0, e1)
    c = np.einsum("ij,ij->i", e1, e1)
    det = np.maximum(a * c - b * b, 1e-300)

    # d2 of interior projection, per (point, face)
    w = P[:, None, :] - v0[None, :, :]        # (N, F, 3)
    d = np.einsum("nfj,fj->nf", w, e0)
    e = np.einsum("nfj,fj->nf", w, e1)
    s = (c * d - b * e) / det
    t = (a * e - b * d) / det
    inside = (s >= 0) & (t >= 0) & (s + t <= 1)

    proj = v0[None] + s[..., None] * e0[None] + t[..., None] * e1[None]
    d2_int = np.einsum("nfj,nfj->nf", P[:, None] - proj, P[:, None] - proj)
    d2_int = np.where(inside, d2_int, np.inf)

    def edge_d2(pa, pb):
        ab = pb - pa                          # (F, 3)
        denom = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-300)
        ap = P[:, None, :] - pa[None]
        u = np.clip(np.einsum("nfj,fj->nf", ap, ab) / denom, 0.0, 1.0)
        q = pa[None] + u[..., None] * ab[None]
        diff = P[:, None] - q
        return np.einsum("nfj,nfj->nf", diff, diff), u

    d2_01, u01 = edge_d2(v0, v1)
    d2_12, u12 = edge_d2(v1, v2)
    d2_20, u20 = edge_d2(v2, v0)

    d2_all = np.stack([d2_int, d2_01, d2_12, d2_20])  # (4, N, F)
    d2_best_face = d2_all.min(axis=0)
    face_ids = np.argmin(d2_best_face, axis=1)
    n_idx = np.arange(P.shape[0])
    which = np.argmin(d2_all[:, n_idx, face_ids], axis=0)

    # reconstruct barycentric coordinates on the winning face
    bary = np.zeros((P.shape[0], 3))
    sf, tf = s[n_idx, face_ids], t[n_idx, face_ids]
    bary_int = np.stack([1 - sf - tf, sf, tf], axis=1)
    for code, (ua, ia, ib) in enumerate([(u01, 0, 1), (u12, 1, 2), (u20, 2, 0)], start=1):
        m = which == code
        bary[m, ia] = 1 - ua[n_idx, face_ids][m]
        bary[m, ib] = ua[n_idx, face_ids][m]
    m0 = which == 0
    bary[m0] = bary_int[m0]
    bary = np.clip(bary, 0.0, 1.0)
    bary /= bary.sum(axis=1, keepdims=True)

    corners = mesh.vertices[mesh.faces[face_ids]]      # (N, 3, 3)
    x_m = np.einsum("nk,nkj->nj", bary, corners)
    dist = np.linalg.norm(P - x_m, axis=1)
    return x_m, face_ids, bary, dist


def _closest_on_candidates(mesh, P, cand):
    """Same candidate math as the brute force, on per-query face subsets."""
    N, K = cand.shape
    tri = mesh.vertices[mesh.faces[cand]]     # (N, K, 3, 3)
    v0, v1, v2 = tri[:, :, 0], tri[:, :, 1], tri[:, :, 2]
    e0, e1 = v1 - v0, v2 - v0
    a = np.einsum("nkj,nkj->nk", e0, e0)
    b = np.einsum("nkj,nkj->nk", e0, e1)
    c = np.einsum("nkj,nkj->nk", e1, e1)
    det = np.maximum(a * c - b * b, 1e-300)

    w = P[:, None, :] - v0
    d = np.einsum("nkj,nkj->nk", w, e0)
    e = np.einsum("nkj,nkj->nk", w, e1)
    s = (c * d - b * e) / det
    t = (a * e - b * d) / det
    inside = (s >= 0) & (t >= 0) & (s + t <= 1)
    proj = v0 + s[..., None] * e0 + t[..., None] * e1
    diff = P[:, None] - proj
    d2_int = np.where(inside, np.einsum("nkj,nkj->nk", diff, diff), np.inf)

    def edge_d2(pa, pb):
        ab = pb - pa
        denom = np.maximum(np.einsum("nkj,nkj->nk", ab, ab), 1e-300)
        ap = P[:, None, :] - pa
        u = np.clip(np.einsum("nkj,nkj->nk", ap, ab) / denom, 0.0, 1.0)
        q = pa + u[..., None] * ab
        dq = P[:, None] - q
        return np.einsum("nkj,nkj->nk", dq, dq), u

    d2_01, u01 = edge_d2(v0, v1)
    d2_12, u12 = edge_d2(v1, v2)
    d2_20, u20 = edge_d2(v2, v0)
    d2_all = np.stack([d2_int, d2_01, d2_12, d2_20])    # (4, N, K)
    kbest = np.argmin(d2_all.min(axis=0), axis=1)
    n_idx = np.arange(N)
    which = np.argmin(d2_all[:, n_idx, kbest], axis=0)
    face_ids = cand[n_idx, kbest]

    bary = np.zeros((N, 3))
    sf, tf = s[n_idx, kbest], t[n_idx, kbest]
    m0 = which == 0
    bary[m0] = np.stack([1 - sf - tf, sf, tf], axis=1)[m0]
    for code, (ua, ia, ib) in enumerate([(u01, 0, 1), (u12, 1, 2), (u20, 2, 0)], start=1):
        m = which == code
        bary[m, ia] = 1 - ua[n_idx, kbest][m]
        bary[m, ib] = ua[n_idx, kbest][m]
    bary = np.clip(bary, 0.0, 1.0)
    bary /= bary.sum(axis=1, keepdims=True)

    corners = mesh.vertices[mesh.faces[face_ids]]
    x_m = np.einsum("nk,nkj->nj", bary, corners)
    dist = np.linalg.norm(P - x_m, axis=1)
    return x_m, face_ids, bary, dist


def face_centroid_tree(mesh):
    """KD-tree over triangle centroids; pair with closest_surface_points."""
    from scipy.spatial import cKDTree

    centroids = mesh.vertices[mesh.faces].mean(axis=1)
    return cKDTree(centroids)


def closest_surface_point(mesh, x):
    """Single-query closest surface point: (x_m, face_id, barycentric)."""
    x_m, fid, bary, _ = closest_surface_points(mesh, np.asarray(x)[None])
    return x_m[0], int(fid[0]), bary[0]


def pseudo_gt_deformation(rig, mesh, face_id, barycentric):
    """Observed-to-canonical vertex delta interpolated at a surface point.

    For each triangle corner the delta is canonical minus deformed
    position, matching the x_can = t + x_obs convention of the warp.
    """
    ids = rig.faces[face_id]
    delta = rig.vertices_mean[ids] - mesh.vertices[ids]
    b = np.asarray(barycentric)
    if b.ndim == 1:
        return b @ delta
    return np.einsum("nk,nkj->nj", b, delta)
