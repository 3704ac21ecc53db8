"""Triangular meshes and P1 finite elements for the thin-plate-spline field.

The spatial prior is the FEM discretization of the Laplacian SPDE:
``Q = G C^{-1} G`` with ``G`` the P1 stiffness matrix and ``C`` the lumped
(diagonal) mass matrix, under natural boundary conditions.  A buffer around
the convex hull of the sites keeps boundary effects away from the data.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sps
from scipy.spatial import ConvexHull, Delaunay, QhullError, cKDTree

from .errors import MeshError
from .gmrf import PrecisionModel, _symmetrize

MAX_VERTICES = 100_000


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray  # (nv, 2)
    triangles: np.ndarray  # (nt, 3), counterclockwise

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def edges(self) -> np.ndarray:
        t = self.triangles
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def max_edge_length(self) -> float:
        e = self.edges()
        return float(np.max(np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)))


@dataclass(frozen=True, eq=False)
class FemMatrices:
    C: sps.csr_matrix  # lumped mass, diagonal
    G: sps.csr_matrix  # stiffness

    @property
    def mass(self) -> np.ndarray:
        return self.C.diagonal()


def _bbox_diag(points):
    span = points.max(axis=0) - points.min(axis=0)
    return float(np.hypot(*span))


def _hull_buffer(points, extension):
    # points on the outward offset of the convex hull: for each hull vertex,
    # one point along each adjacent edge normal and one along their bisector
    hull = ConvexHull(points)
    ring = points[hull.vertices]  # counterclockwise for 2-D hulls
    out = []
    k = len(ring)
    for i in range(k):
        prev_pt, pt, next_pt = ring[i - 1], ring[i], ring[(i + 1) % k]
        normals = []
        for a, b in ((prev_pt, pt), (pt, next_pt)):
            d = b - a
            n = np.array([d[1], -d[0]])
            normals.append(n / np.linalg.norm(n))
        bis = normals[0] + normals[1]
        bis /= np.linalg.norm(bis)
        out.extend([pt + extension * normals[0], pt + extension * bis, pt + extension * normals[1]])
    return np.unique(np.round(np.array(out), 12), axis=0)


def _lattice_fill(points, spacing):
    # equilateral lattice inside the hull of ``points``, thinned near existing points
    lo, hi = points.min(axis=0), points.max(axis=0)
    dy = spacing * np.sqrt(3) / 2
    rows = np.arange(lo[1], hi[1] + dy, dy)
    cols = np.arange(lo[0], hi[0] + spacing, spacing)
    gx, gy = np.meshgrid(cols, rows)
    gx = gx + (np.arange(len(rows)) % 2)[:, None] * spacing / 2
    cand = np.column_stack([gx.ravel(), gy.ravel()])
    hull = Delaunay(points[ConvexHull(points).vertices])
    cand = cand[hull.find_simplex(cand) >= 0]
    if len(cand) == 0:
        return cand
    dist, _ = cKDTree(points).query(cand)
    return cand[dist > 0.5 * spacing]


def _rows_in(a, b):
    # which rows of a also occur in b
    bs = {tuple(r) for r in b}
    return np.array([tuple(r) in bs for r in a], dtype=bool)


def _triangulate(points):
    try:
        tri = Delaunay(points, qhull_options="Qbb Qc Qz Q12")
    except QhullError as exc:
        raise MeshError("sites are degenerate (collinear or coincident)") from exc
    simplices = tri.simplices.copy()
    mesh = TriMesh(points, simplices)
    a = mesh.areas()
    flip = a < 0
    simplices[flip] = simplices[flip][:, [0, 2, 1]]
    mesh = TriMesh(points, simplices)
    scale = _bbox_diag(points) ** 2
    keep = np.abs(mesh.areas()) > 1e-14 * scale
    return TriMesh(points, simplices[keep])


def build_mesh(sites, max_edge: float | None = None, hull_extension: float | None = None,
               max_vertices: int = MAX_VERTICES) -> TriMesh:
    """Delaunay mesh over ``sites`` with a hull buffer, refined to ``max_edge``.

    Defaults: ``max_edge`` is 1/20 and ``hull_extension`` 1/5 of the site
    bounding-box diagonal.  Long edges are split at their midpoints and the
    point set re-triangulated until no edge exceeds ``max_edge``.  The result
    depends only on the inputs.
    """
    sites = np.asarray(sites, dtype=float)
    if sites.ndim != 2 or sites.shape[1] != 2 or len(sites) < 3:
        raise MeshError("build_mesh needs at least 3 planar sites")
    pts = np.unique(sites, axis=0)
    if len(pts) < 3:
        raise MeshError("fewer than 3 distinct sites")
    centered = pts - pts.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-12 * max(_bbox_diag(pts), 1.0)) < 2:
        raise MeshError("sites are collinear")
    diag = _bbox_diag(pts)
    if hull_extension is None:
        hull_extension = 0.2 * diag
    if max_edge is None:
        max_edge = diag / 20
    if hull_extension > 0:
        buffer = _hull_buffer(pts, hull_extension)
        pts = np.vstack([pts, buffer[~_rows_in(buffer, pts)]])
    refine = np.isfinite(max_edge) and max_edge > 0
    if refine:
        fill = _lattice_fill(pts, spacing=0.9 * max_edge)
        if len(fill) + len(pts) > max_vertices:
            raise MeshError(
                f"refinement to max_edge={max_edge:.3g} exceeds {max_vertices} vertices")
        pts = np.vstack([pts, fill])

    mesh = _triangulate(pts)
    if refine:
        while True:
            e = mesh.edges()
            p0, p1 = mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]]
            long_ = np.linalg.norm(p1 - p0, axis=1) > max_edge
            if not np.any(long_):
                break
            mids = 0.5 * (p0[long_] + p1[long_])
            pts = np.vstack([mesh.vertices, mids])
            if len(pts) > max_vertices:
                raise MeshError(
                    f"refinement to max_edge={max_edge:.3g} exceeds {max_vertices} vertices")
            mesh = _triangulate(pts)
    return mesh


def assemble_fem(mesh: TriMesh) -> FemMatrices:
    """Lumped mass and P1 stiffness matrices."""
    v, t = mesh.vertices, mesh.triangles
    area = mesh.areas()
    if np.any(area <= 0):
        raise MeshError("mesh contains degenerate or clockwise triangles",
                        offending=np.flatnonzero(area <= 0))
    p = v[t]
    # b_i = y_j - y_k, c_i = x_k - x_j over cyclic (i, j, k)
    b = np.stack([p[:, 1, 1] - p[:, 2, 1], p[:, 2, 1] - p[:, 0, 1], p[:, 0, 1] - p[:, 1, 1]], axis=1)
    c = np.stack([p[:, 2, 0] - p[:, 1, 0], p[:, 0, 0] - p[:, 2, 0], p[:, 1, 0] - p[:, 0, 0]], axis=1)
    local = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (4 * area[:, None, None])
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_vertices
    G = sps.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    # element rows sum to zero analytically; remove the rounding residue
    G = (G - sps.diags(G @ np.ones(n))).tocsr()
    mass = np.bincount(t.ravel(), weights=np.repeat(area / 3, 3), minlength=n)
    if np.any(mass <= 0):
        raise MeshError("mesh has vertices not attached to any triangle",
                        offending=np.flatnonzero(mass <= 0))
    return FemMatrices(sps.diags(mass, format="csr"), _symmetrize(G))


def tps_precision(fem: FemMatrices) -> PrecisionModel:
    """Thin-plate-spline structure ``G C^{-1} G``; null space: constants."""
    Cinv = sps.diags(1.0 / fem.mass)
    Q = _symmetrize(fem.G @ Cinv @ fem.G)
    n = Q.shape[0]
    return PrecisionModel(Q, np.ones((1, n)), np.ones((1, n)), name="tps")


def barycentric(mesh: TriMesh, locations, chunk: int = 512):
    """Containing triangle and barycentric weights for each location.

    Returns ``(tri_index, weights)``; ``tri_index`` is -1 outside the mesh.
    """
    loc = np.atleast_2d(np.asarray(locations, dtype=float))
    p = mesh.vertices[mesh.triangles]
    x0 = p[:, 0]
    T = np.stack([p[:, 1] - x0, p[:, 2] - x0], axis=2)  # (nt, 2, 2)
    det = T[:, 0, 0] * T[:, 1, 1] - T[:, 0, 1] * T[:, 1, 0]
    inv = np.empty_like(T)
    inv[:, 0, 0] = T[:, 1, 1] / det
    inv[:, 1, 1] = T[:, 0, 0] / det
    inv[:, 0, 1] = -T[:, 0, 1] / det
    inv[:, 1, 0] = -T[:, 1, 0] / det
    tol = 1e-12
    tri_index = np.full(len(loc), -1)
    weights = np.zeros((len(loc), 3))
    for start in range(0, len(loc), chunk):
        q = loc[start:start + chunk]
        rel = q[:, None, :] - x0[None, :, :]
        lam12 = np.einsum("tij,ptj->pti", inv, rel)
        lam = np.concatenate([1 - lam12.sum(axis=2, keepdims=True), lam12], axis=2)
        inside = np.all(lam >= -tol, axis=2)
        # prefer the triangle with the largest minimum weight (robust on shared edges)
        score = np.where(inside, lam.min(axis=2), -np.inf)
        best = np.argmax(score, axis=1)
        found = np.isfinite(score[np.arange(len(q)), best])
        idx = np.arange(start, start + len(q))
        tri_index[idx[found]] = best[found]
        w = lam[np.arange(len(q)), best]
        w = np.clip(w, 0.0, None)
        w /= w.sum(axis=1, keepdims=True)
        weights[idx[found]] = w[found]
    return tri_index, weights


def projector(mesh: TriMesh, locations) -> sps.csr_matrix:
    """Sparse ``(n_locations, n_vertices)`` barycentric interpolation matrix."""
    loc = np.atleast_2d(np.asarray(locations, dtype=float))
    tri, w = barycentric(mesh, loc)
    outside = np.flatnonzero(tri < 0)
    if outside.size:
        pts = ", ".join(f"({x:.6g}, {y:.6g})" for x, y in loc[outside[:10]])
        raise MeshError(f"{outside.size} location(s) outside the mesh hull: {pts}",
                        offending=loc[outside])
    cols = mesh.triangles[tri]
    rows = np.repeat(np.arange(len(loc)), 3)
    A = sps.coo_matrix((w.ravel(), (rows, cols.ravel())), shape=(len(loc), mesh.n_vertices)).tocsr()
    A.eliminate_zeros()
    return A


def write_mesh(mesh: TriMesh, path) -> None:
    """Plain-text export: a vertex table ``id x y`` then a triangle table ``v1 v2 v3``."""
    buf = io.StringIO()
    buf.write(f"# vertices {mesh.n_vertices}\n")
    for i, (x, y) in enumerate(mesh.vertices):
        buf.write(f"{i} {float(x)!r} {float(y)!r}\n")
    buf.write(f"# triangles {len(mesh.triangles)}\n")
    for a, b, c in mesh.triangles:
        buf.write(f"{a} {b} {c}\n")
    Path(path).write_text(buf.getvalue())


def read_mesh(path) -> TriMesh:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split()
    nv = int(header[2])
    verts = np.array([[float(v) for v in line.split()[1:3]] for line in lines[1:1 + nv]])
    nt = int(lines[1 + nv].split()[2])
    tris = np.array([[int(v) for v in line.split()] for line in lines[2 + nv:2 + nv + nt]],
                    dtype=np.int64).reshape(-1, 3)
    return TriMesh(verts, tris)
