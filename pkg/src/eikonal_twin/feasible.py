"""Admissible PMJ region: whole myocardium or a subendocardial band.

In band mode the region is ``{x in myocardium : dist(x, S_e) <= d_pmj}``
where ``S_e`` is the endocardium minus the basal rim and an RV inferior
sector.  Projection goes through the closest point on ``S_e`` and then
moves back towards the query point by at most ``d_pmj``.  That is exact
for flat walls and a close approximation on the smooth synthetic shell.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np

from scipy.spatial import cKDTree

from ._geometry import closest_point_on_triangle, closest_points_in_candidates
from .eikonal import PMJSet
from .mesh import GeometryError, TetMesh, sample_triangles

_LOGGER = logging.getLogger(__name__)

MODES = ("band", "unrestricted")
ENDO = ("endo_lv", "endo_rv")
EPI = ("epi",)
MEMBER_TOL = 1e-9
_BISECT_STEPS = 40
_TOWARD_TOL = 1e-4  # mm
_RAY_FRACTIONS = (1.0, 0.75, 0.5, 0.25, 0.0)
_CLOUD_NEIGHBOURS = 64
_POLISH_MIN_STEP = 0.01
_POLISH_STARTS = 4
_DISTINCT_MM = 1.0
_CERTIFY_TOL = 0.05  # mm, half the 0.1 mm near-optimality budget
_COMPASS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)
                     if (i, j, k) != (0, 0, 0)], dtype=float)
_COMPASS /= np.linalg.norm(_COMPASS, axis=1)[:, None]


class TriangleIndex:
    """Exact closest-point queries on a triangle set with a centroid KD-tree prefilter.

    A triangle can only beat the nearest centroid distance ``d0`` if its
    centroid lies within ``d0 + r`` where ``r`` bounds the triangle radius.
    """

    def __init__(self, vertices, tris):
        self.vertices = vertices
        self.tris = np.ascontiguousarray(tris, dtype=np.int64)
        cent = vertices[self.tris].mean(axis=1)
        self.radius = float(np.linalg.norm(vertices[self.tris] - cent[:, None], axis=2).max())
        self.tree = cKDTree(cent)

    def query(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if len(pts) == 0:
            return np.empty((0, 3)), np.empty(0), np.empty(0, dtype=np.int64)
        d0, _ = self.tree.query(pts)
        cands = self.tree.query_ball_point(pts, d0 + self.radius + 1e-9)
        counts = np.fromiter((len(c) for c in cands), dtype=np.int64, count=len(pts))
        ptr = np.concatenate([[0], np.cumsum(counts)])
        flat = np.fromiter(itertools.chain.from_iterable(cands), dtype=np.int64, count=int(ptr[-1]))
        return closest_points_in_candidates(pts, self.vertices, self.tris, ptr, flat)


@dataclass
class FeasibleRegion:
    mesh: TetMesh
    mode: str
    source: np.ndarray        # S_e triangles (heart vertex ids)
    sampling: np.ndarray      # triangles used to draw initial positions
    d_pmj: float = 2.5
    basal_cutoff: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"constraint mode must be one of {MODES}, got {self.mode!r}")
        if self.d_pmj <= 0:
            raise ValueError("d_pmj must be positive")
        if len(self.source) == 0 or len(self.sampling) == 0:
            raise GeometryError("feasible region has no source surface left after masking")
        self._source_index = TriangleIndex(self.mesh.vertices, self.source)
        self._boundary_index = None
        self._cloud = None

    # ------------------------------------------------------------- queries
    def distance_to_source(self, points) -> np.ndarray:
        return self._source_index.query(points)[1]

    def inside_mesh(self, points) -> np.ndarray:
        tets, _ = self.mesh.locate_points(points)
        return tets >= 0

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        ok = self.inside_mesh(pts)
        if self.mode == "band":
            ok &= self.distance_to_source(pts) <= self.d_pmj + MEMBER_TOL
        return ok

    # ---------------------------------------------------------- projection
    def project_points(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float)).copy()
        member = self.contains(pts)
        todo = np.nonzero(~member)[0]
        if len(todo) == 0:
            return pts
        if self.mode == "unrestricted":
            if self._boundary_index is None:
                self._boundary_index = TriangleIndex(self.mesh.vertices, self.mesh.boundary_faces)
            pts[todo] = self._boundary_index.query(pts[todo])[0]
            return pts
        q, dist, _ = self._source_index.query(pts[todo])
        pts[todo] = self._band_points(pts[todo], q, dist)
        return pts

    def _band_points(self, p, q, dist) -> np.ndarray:
        """Move from the closest source point towards ``p`` by at most ``d_pmj``.

        When that leaves the myocardium, bisect for the deepest point of the
        segment that is still inside.
        """
        safe = np.where(dist > 0, dist, 1.0)
        u = np.where((dist > 0)[:, None], (p - q) / safe[:, None], 0.0)
        s_hi = np.minimum(dist, self.d_pmj)
        out = q + s_hi[:, None] * u
        bad = ~self.inside_mesh(out)
        if bad.any():
            qb, ub = q[bad], u[bad]
            lo = np.zeros(int(bad.sum()))
            hi = s_hi[bad]
            for _ in range(_BISECT_STEPS):
                mid = 0.5 * (lo + hi)
                ok = self.inside_mesh(qb + mid[:, None] * ub)
                lo = np.where(ok, mid, lo)
                hi = np.where(ok, hi, mid)
            out[bad] = qb + lo[:, None] * ub
            # certified when the clipped point meets a lower bound on dist(p, region)
            lower = dist[bad] - self.d_pmj
            outside = ~self.inside_mesh(p[bad])
            if outside.any():
                if self._boundary_index is None:
                    self._boundary_index = TriangleIndex(self.mesh.vertices, self.mesh.boundary_faces)
                rows = np.nonzero(bad)[0][outside]
                qb, db, _ = self._boundary_index.query(p[rows])
                lower[outside] = np.maximum(lower[outside], db)
                # the closest boundary point is optimal whenever it is admissible
                hit = self.contains(qb)
                out[rows[hit]] = qb[hit]
            gap = np.linalg.norm(out[bad] - p[bad], axis=1)
            for i, g, lb in zip(np.nonzero(bad)[0], gap, lower):
                if g > lb + _CERTIFY_TOL:
                    out[i] = self._global_search(p[i], out[i])
        return out

    def _toward(self, x, members) -> np.ndarray:
        """Bisect each segment from a member point back to the non-member ``x``."""
        hi = np.array(members, dtype=float).reshape(-1, 3)
        lo = np.broadcast_to(x, hi.shape).copy()
        length = float(np.linalg.norm(hi - lo, axis=1).max(initial=0.0))
        steps = int(np.ceil(np.log2(max(length, _TOWARD_TOL) / _TOWARD_TOL)))
        for _ in range(steps):
            mid = 0.5 * (lo + hi)
            ok = self.contains(mid)
            hi = np.where(ok[:, None], mid, hi)
            lo = np.where(ok[:, None], lo, mid)
        return hi

    def _polish(self, x, starts) -> np.ndarray:
        """Compass search from several members at once for the member closest to ``x``.

        Every trial point that is admissible gets pulled back towards ``x``
        along its segment; a start keeps its step while it improves and
        halves it otherwise.
        """
        Y = np.array(starts, dtype=float).reshape(-1, 3)
        best = np.linalg.norm(Y - x, axis=1)
        step = 0.25 * best
        nd = len(_COMPASS)
        while True:
            live = np.nonzero((step > _POLISH_MIN_STEP) & (best > 0))[0]
            if len(live) == 0:
                break
            trial = (Y[live, None, :] + step[live, None, None] * _COMPASS).reshape(-1, 3)
            owner = np.repeat(live, nd)
            ok = self.contains(trial)
            improved = np.zeros(len(Y), dtype=bool)
            if ok.any():
                pulled = self._toward(x, trial[ok])
                gap = np.linalg.norm(pulled - x, axis=1)
                for j, g, y in zip(owner[ok], gap, pulled):
                    if g < best[j] - _TOWARD_TOL:
                        Y[j], best[j], improved[j] = y, g, True
            step[live[~improved[live]]] *= 0.5
        return Y[int(np.argmin(best))]

    def _member_cloud(self):
        """KD-tree over admissible mesh points (vertices, centroids, edge midpoints)."""
        if self._cloud is None:
            m = self.mesh
            V = m.vertices
            pts = np.vstack([V, m.centroids, 0.5 * (V[m.edges[:, 0]] + V[m.edges[:, 1]])])
            pts = pts[self.contains(pts)]
            self._cloud = (pts, cKDTree(pts)) if len(pts) else (pts, None)
        return self._cloud

    def _ray_candidates(self, x, radius) -> np.ndarray:
        """Points ``c + s u`` on rays from nearby source triangles towards ``x``."""
        idx = self._source_index
        near = idx.tree.query_ball_point(x, radius + self.d_pmj + idx.radius + 1e-9)
        if not near:
            return np.zeros((0, 3))
        tris = idx.tris[np.sort(np.asarray(near, dtype=np.int64))]
        V = self.mesh.vertices
        c = np.array([closest_point_on_triangle(x, V[t[0]], V[t[1]], V[t[2]]) for t in tris])
        r = x - c
        dist = np.linalg.norm(r, axis=1)
        u = r / np.where(dist > 0, dist, 1.0)[:, None]
        step = np.minimum(dist, self.d_pmj)
        cands = np.concatenate([c + (f * step)[:, None] * u for f in _RAY_FRACTIONS])
        return cands[self.contains(cands)]

    def _cloud_candidates(self, x, radius) -> np.ndarray:
        pts, tree = self._member_cloud()
        if tree is None:
            return np.zeros((0, 3))
        d, j = tree.query(x, min(_CLOUD_NEIGHBOURS, len(pts)))
        j = np.atleast_1d(j)[np.atleast_1d(d) < radius]
        return self._toward(x, pts[j]) if len(j) else np.zeros((0, 3))

    def _global_search(self, x, start) -> np.ndarray:
        """Closest member when no ray from the nearest source point reaches it.

        Happens when that source point lies across a cavity or a masked
        patch.  Candidates come from rays off nearby source triangles and
        from admissible mesh points pulled back towards ``x``; the best few
        distinct ones are refined by compass search.
        """
        radius = float(np.linalg.norm(x - start))
        cands = np.vstack([start[None], self._ray_candidates(x, radius),
                           self._cloud_candidates(x, radius)])
        gap = np.linalg.norm(cands - x, axis=1)
        chosen = []
        for k in np.argsort(gap, kind="stable"):
            if all(np.linalg.norm(cands[k] - cands[c]) > _DISTINCT_MM for c in chosen):
                chosen.append(int(k))
            if len(chosen) == _POLISH_STARTS:
                break
        return self._polish(x, cands[chosen])

    def project(self, pmjs: PMJSet) -> PMJSet:
        """Closest admissible positions; timings clamped to t >= 0."""
        pos = self.project_points(pmjs.positions)
        return PMJSet(pos, np.maximum(pmjs.timings, 0.0), pmjs.active.copy())

    # ------------------------------------------------------------ sampling
    def sample_initial(self, n: int, time_range, seed: int) -> PMJSet:
        """Area-uniform positions on the sampling surface, uniform timings."""
        if n < 1:
            raise ValueError("need at least one PMJ")
        t0, t1 = (float(x) for x in time_range)
        if t1 < t0:
            raise ValueError("time range must satisfy t0 <= t_end")
        ss_pos, ss_t = np.random.SeedSequence(seed).spawn(2)
        pos = sample_triangles(self.mesh.vertices, self.sampling, n,
                               int(ss_pos.generate_state(1)[0]))
        t = np.random.default_rng(ss_t).uniform(t0, t1, n)
        return PMJSet(pos, t)


def _centroids(mesh: TetMesh, tris) -> np.ndarray:
    return mesh.vertices[tris].mean(axis=1)


def _surfaces(mesh: TetMesh, names) -> list:
    return [(n, mesh.surfaces[n]) for n in names if n in mesh.surfaces and len(mesh.surfaces[n])]


def build_region(mesh: TetMesh, mode: str = "band", d_pmj: float = 2.5, basal_cutoff: float = 0.1,
                 rv_inferior_mask=None, geometry=None) -> FeasibleRegion:
    """Assemble the admissible region on the ventricular mesh.

    ``geometry`` supplies ``apicobasal(points)`` (0 apex, 1 base) and
    ``rv_sector_angle(points)`` in degrees; it is needed whenever a basal
    cutoff or an RV mask is requested.  ``rv_inferior_mask`` is an angular
    sector ``(lo, hi)`` removed from ``endo_rv``, or None.
    """
    if not 0.0 <= basal_cutoff < 1.0:
        raise ValueError("basal_cutoff must lie in [0, 1)")
    endo = _surfaces(mesh, ENDO)
    if not endo:
        raise GeometryError("mesh has no endocardial surfaces")
    if (basal_cutoff > 0 or rv_inferior_mask is not None) and geometry is None:
        raise ValueError("apico-basal/RV masking needs the heart geometry")
    parts = []
    for name, tris in endo:
        keep = np.ones(len(tris), dtype=bool)
        cent = _centroids(mesh, tris)
        if basal_cutoff > 0:
            keep &= geometry.apicobasal(cent) <= 1.0 - basal_cutoff
        if rv_inferior_mask is not None and name == "endo_rv":
            lo, hi = (float(a) % 360.0 for a in rv_inferior_mask)
            ang = geometry.rv_sector_angle(cent)
            in_sector = (ang >= lo) & (ang <= hi) if lo <= hi else (ang >= lo) | (ang <= hi)
            keep &= ~in_sector
        parts.append(tris[keep])
    source = np.concatenate(parts) if parts else np.zeros((0, 3), dtype=np.int64)
    if mode == "band":
        sampling = source
    else:
        sampling = np.concatenate([t for _, t in endo + _surfaces(mesh, EPI)])
    _LOGGER.debug("feasible region %s: %d source triangles", mode, len(source))
    return FeasibleRegion(mesh, mode, source, sampling, float(d_pmj), float(basal_cutoff))
