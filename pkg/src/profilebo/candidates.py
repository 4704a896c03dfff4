"""Triangulation candidates over the nuisance space and their control-axis product.

Internal candidates sit at the centroids of the Delaunay simplices of the
projected design. Fringe candidates start on the triangulation's boundary
and travel toward the edge of the unit cube, stopping at ``fringe_frac`` of
the distance to it: one per hull facet (from the facet centroid along its
outward normal) and one per cube corner (from the nearest hull vertex toward
that corner). With a single nuisance input the candidates reduce to
midpoints plus two fringe points.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from profilebo.errors import DegeneracyError, InvalidArgument

__all__ = [
    "Triangulation",
    "Tricands",
    "CandidateSet",
    "delaunay",
    "tricands",
    "tricands_plus",
    "dedupe",
    "ray_exit",
    "write_candidates_csv",
]

INTERNAL = "internal"
FRINGE = "fringe"
VOLUME_TOL = 1e-12
DEDUPE_TOL = 1e-9


@dataclass(frozen=True)
class Triangulation:
    """Delaunay triangulation of ``m`` points in ``k`` dimensions.

    ``simplices`` index rows of ``vertices`` with ``k + 1`` entries each;
    ``hull_facets`` hold ``k`` indices per boundary facet and
    ``facet_normals`` the matching outward unit normals.
    """

    vertices: np.ndarray
    simplices: np.ndarray
    hull_facets: np.ndarray
    facet_normals: np.ndarray

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    def volumes(self) -> np.ndarray:
        return simplex_volumes(self.vertices, self.simplices)


def simplex_volumes(vertices, simplices) -> np.ndarray:
    P = vertices[simplices]
    k = vertices.shape[1]
    E = P[:, 1:, :] - P[:, :1, :]
    return np.abs(np.linalg.det(E)) / math.factorial(k)


def _keep_mask(points, tol):
    drop = np.zeros(points.shape[0], dtype=bool)
    for i, j in sorted(cKDTree(points).query_pairs(tol, p=np.inf)):
        if not drop[i]:
            drop[j] = True
    return ~drop


def dedupe(points, tol: float = DEDUPE_TOL) -> np.ndarray:
    """Drop rows within ``tol`` (max-norm) of an earlier kept row; order kept."""
    points = np.atleast_2d(points)
    return points[_keep_mask(points, tol)]


def _affine_rank(points, tol=1e-10):
    centered = points - points.mean(axis=0)
    if points.shape[0] < 2:
        return 0, centered
    s = np.linalg.svd(centered, compute_uv=False)
    return int(np.sum(s > tol * max(1.0, s[0]))), centered


def _outward_normal(facet_pts, interior):
    E = facet_pts[1:] - facet_pts[0]
    _, _, Vt = np.linalg.svd(E, full_matrices=True)
    n = Vt[-1]
    if n @ (facet_pts.mean(axis=0) - interior) < 0:
        n = -n
    return n / np.linalg.norm(n)


def delaunay(points) -> Triangulation:
    """Delaunay triangulation of a point set in ``k >= 1`` dimensions.

    In one dimension the simplices are consecutive sorted pairs. Otherwise
    the triangulation comes from Qhull (lower convex hull of the points
    lifted onto a paraboloid); zero-volume simplices are discarded.

    Raises
    ------
    DegeneracyError
        If the points span an affine subspace of lower dimension.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m, k = pts.shape
    if m < k + 1:
        raise DegeneracyError(f"need at least {k + 1} points in {k} dimensions, got {m}")
    rank, _ = _affine_rank(pts)
    if rank < k:
        centroid = pts.mean(axis=0)
        raise DegeneracyError(
            f"points lie in a {rank}-dimensional affine subspace through "
            f"{np.round(centroid, 6).tolist()}"
        )
    if k == 1:
        order = np.argsort(pts[:, 0], kind="stable")
        simplices = np.column_stack([order[:-1], order[1:]])
        facets = np.array([[order[0]], [order[-1]]])
        normals = np.array([[-1.0], [1.0]])
        return Triangulation(pts, simplices, facets, normals)
    try:
        tri = Delaunay(pts)
    except QhullError as err:
        raise DegeneracyError(f"qhull could not triangulate the points: {err}") from None
    simplices = tri.simplices[simplex_volumes(pts, tri.simplices) > VOLUME_TOL]
    facets = np.asarray(tri.convex_hull)
    interior = pts[np.unique(facets)].mean(axis=0)
    normals = np.array([_outward_normal(pts[f], interior) for f in facets])
    return Triangulation(pts, np.sort(simplices, axis=1), facets, normals)


def ray_exit(origin, direction) -> float:
    """Distance along ``direction`` from ``origin`` to the unit-cube boundary."""
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    t = np.inf
    for o, u in zip(origin, direction):
        if u > 0:
            t = min(t, (1.0 - o) / u)
        elif u < 0:
            t = min(t, -o / u)
    return max(float(t), 0.0)


@dataclass(frozen=True)
class Tricands:
    """Tagged nuisance-space candidates.

    ``origins`` holds, for each fringe candidate, the boundary point it was
    pushed from (internal candidates carry their own location).
    """

    points: np.ndarray
    tags: np.ndarray
    origins: np.ndarray
    triangulation: Triangulation | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def internal(self) -> np.ndarray:
        return self.points[self.tags == INTERNAL]

    @property
    def fringe(self) -> np.ndarray:
        return self.points[self.tags == FRINGE]


def _tricands_1d(values, frac):
    v = np.unique(values)
    pts, tags, origins = [], [], []
    for a, b in zip(v[:-1], v[1:]):
        pts.append(0.5 * (a + b))
        tags.append(INTERNAL)
        origins.append(0.5 * (a + b))
    lo, hi = v[0], v[-1]
    pts += [lo - frac * lo, hi + frac * (1.0 - hi)]
    tags += [FRINGE, FRINGE]
    origins += [lo, hi]
    return np.array(pts), np.array(tags), np.array(origins)


def _fallback(X, frac):
    # per-dimension 1-D tricands embedded at the design mean
    center = X.mean(axis=0)
    pts, tags, origins = [], [], []
    for j in range(X.shape[1]):
        p1, t1, o1 = _tricands_1d(X[:, j], frac)
        for p, t, o in zip(p1, t1, o1):
            row, orow = center.copy(), center.copy()
            row[j], orow[j] = p, o
            pts.append(row)
            origins.append(orow)
            tags.append(t)
    return np.array(pts), np.array(tags), np.array(origins)


def tricands(X_nuis, fringe_frac: float = 0.9) -> Tricands:
    """Triangulation candidates for a design projected on the nuisance space.

    Parameters
    ----------
    X_nuis : array of shape (m, k)
        Design rows in ``[0, 1]^k``.
    fringe_frac : float in (0, 1]
        Fraction of the distance from the triangulation boundary to the
        cube boundary at which fringe candidates are placed.
    """
    if not 0.0 < fringe_frac <= 1.0:
        raise InvalidArgument(f"fringe_frac must lie in (0, 1], got {fringe_frac}")
    X = dedupe(np.atleast_2d(np.asarray(X_nuis, dtype=float)))
    m, k = X.shape
    if k == 1:
        pts, tags, origins = _tricands_1d(X[:, 0], fringe_frac)
        pts, origins = pts[:, None], origins[:, None]
        return Tricands(np.clip(pts, 0, 1), tags, origins, delaunay(X) if m >= 2 else None)
    try:
        tri = delaunay(X)
    except DegeneracyError:
        pts, tags, origins = _fallback(X, fringe_frac)
        return _finish(pts, tags, origins, None)

    P = tri.vertices
    pts = list(P[tri.simplices].mean(axis=1))
    origins = list(pts)
    tags = [INTERNAL] * len(pts)
    for f, nrm in zip(tri.hull_facets, tri.facet_normals):
        o = P[f].mean(axis=0)
        pts.append(o + fringe_frac * ray_exit(o, nrm) * nrm)
        origins.append(o)
        tags.append(FRINGE)
    hull_idx = np.unique(tri.hull_facets)
    for corner in itertools.product((0.0, 1.0), repeat=k):
        corner = np.array(corner)
        dist = np.linalg.norm(P[hull_idx] - corner, axis=1)
        v = P[hull_idx[int(np.argmin(dist))]]
        if np.max(np.abs(corner - v)) <= DEDUPE_TOL:
            continue
        pts.append(v + fringe_frac * (corner - v))
        origins.append(v)
        tags.append(FRINGE)
    return _finish(np.array(pts), np.array(tags), np.array(origins), tri)


def _finish(pts, tags, origins, tri):
    keep = _keep_mask(pts, DEDUPE_TOL)
    return Tricands(np.clip(pts[keep], 0.0, 1.0), tags[keep], origins[keep], tri)


@dataclass(frozen=True)
class CandidateSet:
    """Control-axis values crossed with nuisance tricands.

    ``full`` stacks one block of ``len(tri_cands)`` rows per axis value, in
    axis order, with the control value inserted at ``control_index``.
    """

    tri_cands: np.ndarray
    tags: np.ndarray
    xstar_axis: np.ndarray
    full: np.ndarray
    control_index: int

    @property
    def n_per_slice(self) -> int:
        return self.tri_cands.shape[0]

    def slice_rows(self, j: int) -> slice:
        c = self.n_per_slice
        return slice(j * c, (j + 1) * c)


def tricands_plus(X_n, control_index: int, axis, fringe_frac: float = 0.9) -> CandidateSet:
    """Kronecker product of control values ``axis`` with nuisance tricands."""
    X_n = np.atleast_2d(np.asarray(X_n, dtype=float))
    axis = np.atleast_1d(np.asarray(axis, dtype=float))
    if not 0 <= control_index < X_n.shape[1]:
        raise InvalidArgument(f"control_index {control_index} out of range")
    if np.any(axis < 0) or np.any(axis > 1):
        raise InvalidArgument("control axis values must lie in [0, 1]")
    tc = tricands(np.delete(X_n, control_index, axis=1), fringe_frac)
    c = len(tc)
    block = np.tile(tc.points, (axis.shape[0], 1))
    full = np.insert(block, control_index, np.repeat(axis, c), axis=1)
    return CandidateSet(tc.points, tc.tags, axis, full, control_index)


def write_candidates_csv(fh, points, tags, header=None) -> None:
    """Write candidate rows plus a tag column to an open text stream."""
    points = np.atleast_2d(points)
    if header is None:
        header = [f"x{j + 1}" for j in range(points.shape[1])]
    w = csv.writer(fh)
    w.writerow(list(header) + ["tag"])
    for p, t in zip(points, tags):
        w.writerow([repr(float(v)) for v in p] + [str(t)])
