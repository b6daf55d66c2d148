"""Backpropagation through a converged activation map.

At convergence each vertex value is either a seed time ``t_j + |x_v - p_j|_D``
or a Hopf-Lax face value ``lam . tau[parents] + |x_v - face(lam)|_D``.  By the
envelope theorem the minimiser ``lam`` may be frozen when differentiating,
so ``d tau_v / d tau_parents = lam`` and the tape is a sparse linear system
``tau = J tau + (seed terms)``.  Cotangents are pulled back by solving
``(I - J)^T w = c``; the rows of ``J`` sum to one, which makes the timing
gradients a partition of the cotangent mass.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _eikonal_kernels as K
from .eikonal import ActivationMap, PMJSet
from .mesh import TetMesh

_LOGGER = logging.getLogger(__name__)

# barycentric margin below which a PMJ counts as sitting on a tet boundary
BOUNDARY_MARGIN = 1e-9
BACKPROP_TOL = 1e-15
BACKPROP_MAX_PASSES = 200


class StaleTapeError(RuntimeError):
    """The tape does not belong to the given mesh or PMJ set."""


def pmj_fingerprint(mesh: TetMesh, pmjs: PMJSet) -> str:
    h = hashlib.sha1(mesh.fingerprint.encode())
    h.update(np.ascontiguousarray(pmjs.positions).tobytes())
    h.update(np.ascontiguousarray(pmjs.timings).tobytes())
    return h.hexdigest()


@dataclass
class AdjointTape:
    """Provenance of every vertex value of one converged solve."""

    tau: np.ndarray
    kind: np.ndarray
    parents: np.ndarray
    lam: np.ndarray
    tet: np.ndarray
    dist: np.ndarray
    seed_value: np.ndarray
    seed_source: np.ndarray
    seed_grads: np.ndarray
    n_pmj: int
    causal: bool
    on_boundary: np.ndarray
    fingerprint: str

    @classmethod
    def from_solution(cls, mesh: TetMesh, pmjs: PMJSet, amap: ActivationMap) -> "AdjointTape":
        prov = amap.provenance
        seeding = amap.seeding
        face = prov.kind == 2
        # causal when every weighted parent is strictly earlier than its child
        causal = True
        if face.any():
            tp = amap.tau[prov.parents[face]]
            late = (prov.lam[face] > 0) & ~(tp < amap.tau[face][:, None])
            causal = not late.any()
        on_boundary = seeding.inside & (seeding.coords.min(axis=1) < BOUNDARY_MARGIN)
        if on_boundary.any():
            _LOGGER.info("%d PMJ(s) on a tet boundary: position gradients are one-sided",
                         int(on_boundary.sum()))
        return cls(amap.tau, prov.kind, prov.parents, prov.lam, prov.tet, prov.dist,
                   seeding.values, seeding.source, seeding.grads, pmjs.count, causal,
                   on_boundary, pmj_fingerprint(mesh, pmjs))

    def check(self, mesh: TetMesh | None = None, pmjs: PMJSet | None = None) -> None:
        if mesh is not None and pmjs is not None and pmj_fingerprint(mesh, pmjs) != self.fingerprint:
            raise StaleTapeError("tape was recorded for a different mesh or PMJ set")

    def _system(self):
        """Sparse ``I - J`` over all vertices."""
        n = len(self.tau)
        face = np.nonzero(self.kind == 2)[0]
        rows = np.repeat(face, 3)
        cols = self.parents[face].ravel()
        vals = self.lam[face].ravel()
        keep = vals != 0
        J = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))
        return (sp.identity(n, format="csr") - J).tocsc()

    def replay(self) -> np.ndarray:
        """Recompute tau from the records alone."""
        rhs = np.where(self.kind == 1, self.seed_value, self.dist)
        reached = self.kind > 0
        out = np.full(len(self.tau), np.inf)
        if self.causal:
            out[reached] = rhs[reached]
            face = np.nonzero(self.kind == 2)[0]
            for v in face[np.argsort(self.tau[face], kind="stable")]:
                nz = self.lam[v] != 0
                out[v] = self.lam[v, nz] @ out[self.parents[v, nz]] + self.dist[v]
            return out
        A = self._system()[reached][:, reached]
        out[reached] = spla.spsolve(A.tocsc(), rhs[reached])
        return out

    def backprop(self, cotangent) -> np.ndarray:
        """Adjoint vertex weights ``w`` with ``w = c + J^T w``."""
        c = np.asarray(cotangent, dtype=float)
        if c.shape != self.tau.shape:
            raise ValueError("cotangent must hold one value per vertex")
        c = np.where(self.kind == 0, 0.0, c)
        order = np.argsort(-np.where(self.kind == 0, -np.inf, self.tau), kind="stable")
        w, passes = K.backprop_ordered(order, self.kind, self.parents, self.lam, c,
                                       BACKPROP_TOL, BACKPROP_MAX_PASSES)
        if passes >= BACKPROP_MAX_PASSES:
            _LOGGER.warning("adjoint propagation hit %d passes; falling back to a sparse solve", passes)
            w = spla.spsolve(self._system().T.tocsc(), c)
        return w

    def pullback(self, cotangent) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(d/dt per PMJ, d/dx per PMJ, vertex adjoint) for ``sum_v c_v tau_v``."""
        w = self.backprop(cotangent)
        seeded = np.nonzero(self.kind == 1)[0]
        src = self.seed_source[seeded]
        gt = np.bincount(src, weights=w[seeded], minlength=self.n_pmj)
        gx = np.zeros((self.n_pmj, 3))
        np.add.at(gx, src, w[seeded, None] * self.seed_grads[seeded])
        return gt, gx, w


def _checked(tape: AdjointTape, mesh, pmjs) -> AdjointTape:
    tape.check(mesh, pmjs)
    return tape


def grad_tau_wrt_timings(tape: AdjointTape, cotangent, mesh: TetMesh | None = None,
                         pmjs: PMJSet | None = None) -> np.ndarray:
    """d(sum_v c_v tau_v)/d t_i for every PMJ; inactive PMJs get exactly 0."""
    return _checked(tape, mesh, pmjs).pullback(cotangent)[0]


def grad_tau_wrt_positions(tape: AdjointTape, cotangent, mesh: TetMesh | None = None,
                           pmjs: PMJSet | None = None) -> np.ndarray:
    """d(sum_v c_v tau_v)/d x_i as an (N, 3) array.

    PMJs flagged in ``tape.on_boundary`` get the gradient of the tet that
    was chosen during location (one-sided).
    """
    return _checked(tape, mesh, pmjs).pullback(cotangent)[1]


def region_of_influence(tape: AdjointTape, mesh: TetMesh) -> tuple[np.ndarray, np.ndarray]:
    """Tissue volume (mm^3) activated by each PMJ and the activity flags.

    Computed as the timing gradient of the lumped-volume integral of tau, so
    the volumes add up to the mesh volume.
    """
    if len(tape.tau) != mesh.n_vertices:
        raise StaleTapeError("tape and mesh have different vertex counts")
    vol = np.where(tape.kind == 0, 0.0, mesh.lumped_volumes)
    roi = tape.pullback(vol)[0]
    active = np.zeros(tape.n_pmj, dtype=bool)
    active[np.unique(tape.seed_source[tape.kind == 1])] = True
    return roi, active


def roi_concentration(roi, fraction: float = 0.95) -> int:
    """Smallest number of PMJs whose combined ROI reaches ``fraction`` of the total."""
    roi = np.sort(np.asarray(roi, dtype=float))[::-1]
    total = roi.sum()
    if total <= 0:
        return 0
    return int(np.searchsorted(np.cumsum(roi), fraction * total * (1 - 1e-12)) + 1)


def write_roi_csv(path, pmjs: PMJSet, roi, active) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pmj_id", "x", "y", "z", "t_ms", "roi_mm3", "active"])
        for i in range(pmjs.count):
            x, y, z = pmjs.positions[i]
            w.writerow([i, repr(float(x)), repr(float(y)), repr(float(z)),
                        repr(float(pmjs.timings[i])), repr(float(roi[i])), int(active[i])])
