"""Anisotropic eikonal solver with PMJ seeding.

Activation times solve ``sqrt(grad(tau)^T M grad(tau)) = 1`` with point
sources ``tau(x_i) = t_i``.  The discrete solver applies the Hopf-Lax update
over the faces opposite each vertex as a synchronous (Jacobi) fixed-point
iteration starting from ``tau = inf`` away from the seeds.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _eikonal_kernels as K
from .mesh import GeometryError, TetMesh, VelocityField, write_vtk

_LOGGER = logging.getLogger(__name__)

METHODS = {"exact": K.METHOD_EXACT, "fista": K.METHOD_FISTA}

# local vertex order of the face opposite each tet corner
_OPPOSITE = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])


@dataclass
class PMJSet:
    """PMJ positions (mm), timings (ms) and post-solve activity flags."""

    positions: np.ndarray
    timings: np.ndarray
    active: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=float).reshape(-1, 3)
        self.timings = np.array(self.timings, dtype=float).reshape(-1)
        if len(self.positions) != len(self.timings):
            raise ValueError("positions and timings differ in length")
        if np.any(self.timings < 0) or not np.all(np.isfinite(self.timings)):
            raise ValueError("PMJ timings must be finite and >= 0")
        if self.active is None:
            self.active = np.ones(len(self.timings), dtype=bool)
        else:
            self.active = np.array(self.active, dtype=bool).reshape(-1)

    @property
    def count(self) -> int:
        return len(self.timings)

    def copy(self) -> "PMJSet":
        return PMJSet(self.positions.copy(), self.timings.copy(), self.active.copy())

    def to_csv(self, path, extra: dict | None = None) -> None:
        extra = extra or {}
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pmj_id", "x", "y", "z", "t_ms", "active", *extra])
            for i in range(self.count):
                x, y, z = self.positions[i]
                w.writerow([i, repr(float(x)), repr(float(y)), repr(float(z)),
                            repr(float(self.timings[i])), int(self.active[i]),
                            *[repr(float(v[i])) for v in extra.values()]])

    @classmethod
    def from_csv(cls, path) -> "PMJSet":
        with Path(path).open() as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: no PMJs")
        pos = [[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows]
        t = [float(r["t_ms"]) for r in rows]
        act = [bool(int(r.get("active", 1))) for r in rows]
        return cls(pos, t, act)


@dataclass
class Seeding:
    """Initial values from PMJs: per-vertex seed times and their sources."""

    values: np.ndarray          # (n,) seed time per vertex, inf if unseeded
    source: np.ndarray          # (n,) PMJ index owning the seed, -1 if none
    tets: np.ndarray            # (N,) containing tet per PMJ, -1 if outside
    coords: np.ndarray          # (N, 4) barycentric coordinates
    # d(seed time)/d(position) for every vertex that holds a seed
    grads: np.ndarray = field(default=None, repr=False)

    @property
    def inside(self) -> np.ndarray:
        return self.tets >= 0


@dataclass
class Provenance:
    """How each vertex attains its converged value."""

    kind: np.ndarray       # 0 unreached, 1 seed, 2 face
    parents: np.ndarray    # (n, 3) face vertices for kind 2
    lam: np.ndarray        # (n, 3) face minimiser weights
    tet: np.ndarray        # element whose metric gives the last segment
    dist: np.ndarray       # metric length of the last segment
    replay: np.ndarray     # value reproduced by the record


@dataclass
class ActivationMap:
    tau: np.ndarray
    activator: np.ndarray
    iterations: int
    residual: float
    converged: bool
    pmj_active: np.ndarray
    seeding: Seeding
    provenance: Provenance
    tolerance: float

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["vertex_id", "tau_ms", "activator"])
            for i, (t, a) in enumerate(zip(self.tau, self.activator)):
                w.writerow([i, repr(float(t)), int(a)])

    def write_vtk(self, path, mesh: TetMesh) -> None:
        write_vtk(path, mesh, point_data={"tau_ms": self.tau, "activator": self.activator})


def read_activation_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1].copy(), data[:, 2].astype(np.int64)


class EikonalSolver:
    """Precomputed Hopf-Lax neighbourhoods for one mesh and velocity field.

    The structures are read-only after construction, so one instance serves
    any number of solves.

    Parameters
    ----------
    method
        ``"exact"`` solves each face subproblem in closed form;
        ``"fista"`` runs ``fista_iters`` projected FISTA steps.
    """

    def __init__(self, mesh: TetMesh, velocity: VelocityField, method: str = "exact",
                 fista_iters: int = 10):
        if method not in METHODS:
            raise ValueError(f"unknown local solver {method!r}; choose from {sorted(METHODS)}")
        if len(velocity.frames) != mesh.n_tets:
            raise ValueError("velocity field and mesh disagree on the number of tets")
        self.mesh = mesh
        self.velocity = velocity
        self.method = method
        self.fista_iters = int(fista_iters)
        self._build()

    def _build(self) -> None:
        mesh = self.mesh
        tets = mesh.tets
        m = mesh.n_tets
        owner = np.repeat(np.arange(m), 4)
        corner = np.tile(np.arange(4), m)
        vert = tets.ravel()
        order = np.lexsort((owner, vert))
        owner, corner, vert = owner[order], corner[order], vert[order]
        opp = tets[owner[:, None], _OPPOSITE[corner]]
        X = mesh.vertices
        E = X[opp] - X[vert][:, None, :]                       # (nnz, 3 face verts, 3)
        D = self.velocity.inverses[owner]
        Q = np.einsum("eki,eij,elj->ekl", E, D, E)
        Q = 0.5 * (Q + Q.transpose(0, 2, 1))
        # lower bound of the metric distance from the vertex to its opposite face
        ones = np.ones(3)
        u = np.linalg.solve(Q, np.broadcast_to(ones, (len(Q), 3))[..., None])[..., 0]
        lb = 1.0 / np.sqrt(u.sum(axis=1))
        counts = np.bincount(vert, minlength=mesh.n_vertices)
        self.vptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.opp = np.ascontiguousarray(opp, dtype=np.int64)
        self.entry_tet = owner
        self.Q = np.ascontiguousarray(Q)
        self.lb = np.ascontiguousarray(lb * (1.0 - 1e-12))
        self.nptr, self.nidx = mesh.vertex_neighbors

    # ------------------------------------------------------------------ seeding
    def seed(self, pmjs: PMJSet) -> Seeding:
        """Seed times on the corners of each PMJ's containing tet.

        A vertex seeded by several PMJs keeps the earliest time; exact ties
        go to the smallest PMJ index.
        """
        n = self.mesh.n_vertices
        values = np.full(n, np.inf)
        source = np.full(n, -1, dtype=np.int64)
        grads = np.zeros((n, 3))
        tets, coords = self.mesh.locate_points(pmjs.positions)
        Minv = self.velocity.inverses
        for i in range(pmjs.count):
            t = tets[i]
            if t < 0:
                continue
            p = pmjs.positions[i]
            for v in self.mesh.tets[t]:
                d = self.mesh.vertices[v] - p
                Dd = Minv[t] @ d
                dist = float(np.sqrt(d @ Dd))
                val = pmjs.timings[i] + dist
                if val < values[v]:
                    values[v] = val
                    source[v] = i
                    grads[v] = -Dd / dist if dist > 0 else 0.0
        return Seeding(values, source, tets, coords, grads)

    # ------------------------------------------------------------------ solve
    def solve(self, pmjs: PMJSet, tolerance: float = 1e-4, max_iters: int = 5000) -> ActivationMap:
        if tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if pmjs.count == 0:
            raise GeometryError("no PMJs given")
        seeding = self.seed(pmjs)
        if not seeding.inside.any():
            raise GeometryError("no PMJ lies inside the domain")
        n_out = int((~seeding.inside).sum())
        if n_out:
            _LOGGER.warning("%d PMJ(s) outside the mesh are ignored; project them first", n_out)
        tau = seeding.values.copy()
        seeded = np.isfinite(tau)
        active = np.zeros(len(tau), dtype=bool)
        for v in np.nonzero(seeded)[0]:
            active[self.nidx[self.nptr[v]:self.nptr[v + 1]]] = True
        method = METHODS[self.method]
        iters, resid = K.jacobi_solve(self.vptr, self.opp, self.Q, self.lb, self.nptr, self.nidx,
                                      tau, active, float(tolerance), int(max_iters), method,
                                      self.fista_iters)
        converged = bool(resid < tolerance)
        if not converged:
            _LOGGER.warning("eikonal solve stopped after %d sweeps (max change %.3e ms)", iters, resid)
        kind, parents, lam, entry, dist, replay = K.provenance(
            self.vptr, self.opp, self.Q, self.lb, tau, seeding.values, method, self.fista_iters)
        tet = np.where(entry >= 0, self.entry_tet[np.maximum(entry, 0)], -1)
        prov = Provenance(kind, parents, lam, tet, dist, replay)
        activator = _activators(tau, prov, seeding.source)
        pmj_active = np.zeros(pmjs.count, dtype=bool)
        src = seeding.source[kind == 1]
        pmj_active[np.unique(src)] = True
        return ActivationMap(tau, activator, int(iters), float(resid), converged, pmj_active,
                             seeding, prov, float(tolerance))

    def local_hopf_lax(self, v: int, tau: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        """Hopf-Lax candidate for vertex ``v`` given the current map.

        Returns (min of the candidate and ``tau[v]``, face vertex ids, weights).
        Face ids are -1 when no face improves on ``tau[v]``.
        """
        lam = np.zeros(3)
        tau = np.asarray(tau, dtype=float)
        val, e = K.vertex_update(int(v), self.vptr, self.opp, self.Q, self.lb, tau,
                                 METHODS[self.method], self.fista_iters, lam, np.zeros(3))
        if e < 0 or not val < tau[v]:
            return float(tau[v]), np.full(3, -1), np.zeros(3)
        return float(val), self.opp[e].copy(), lam


def face_minimum(a, x, face, Minv, method: str = "exact", fista_iters: int = 10):
    """Minimise ``a . lam + |x - face^T lam|_{M^-1}`` over barycentric ``lam``.

    ``face`` is a (3, 3) array of face vertex coordinates.  Returns (value, lam).
    """
    E = np.asarray(face, dtype=float) - np.asarray(x, dtype=float)
    Q = E @ np.asarray(Minv, dtype=float) @ E.T
    Q = np.ascontiguousarray(0.5 * (Q + Q.T))
    lam = np.zeros(3)
    val = K.face_min(np.asarray(a, dtype=float), Q, METHODS[method], int(fista_iters), lam)
    return float(val), lam


def _activators(tau, prov: Provenance, seed_source) -> np.ndarray:
    """Activator index: follow the heaviest face weight back to a seed."""
    act = np.empty(len(tau), dtype=np.int64)
    order = np.argsort(tau, kind="stable")
    K.trace_activators(order, prov.kind, prov.parents, prov.lam, seed_source, act)
    return act


def solve(mesh: TetMesh, velocity: VelocityField, pmjs: PMJSet, tolerance: float = 1e-4,
          max_iters: int = 5000, method: str = "exact", fista_iters: int = 10) -> ActivationMap:
    """One-shot convenience wrapper around :class:`EikonalSolver`."""
    return EikonalSolver(mesh, velocity, method, fista_iters).solve(pmjs, tolerance, max_iters)
