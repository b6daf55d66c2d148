"""P1 finite elements on the torso: pseudo-bidomain potentials and lead fields.

Both problems share the stiffness matrix ``K`` of the bulk conductivity
(``G_i + G_e`` in the ventricles, isotropic elsewhere) with natural boundary
conditions, so they are only defined up to a constant.  The constant is
fixed by ``c^T phi = 0`` with ``c`` the lumped torso-surface mass, i.e. the
surface integral of the potential vanishes.

Sign and scale: with ``K phi = -A_i V_m`` and ``K Z = w`` reciprocity gives
``w^T phi = -Z^T A_i V_m``.  Lead vectors are stored as
``B = -scale * A_i Z`` so that ``B . V_m`` equals ``scale * sum_e w_e phi(x_e)``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .mesh import BLOOD, LUNG, TORSO, VENTRICLE, TetMesh, triangle_areas

_LOGGER = logging.getLogger(__name__)

LEAD_SCALE = 0.32


class SolverError(RuntimeError):
    """Linear solver failure (non-convergence or singular assembly)."""


@dataclass(frozen=True)
class ConductivityTable:
    """Conductivities in S/m."""

    g_i_f: float = 0.34
    g_i_s: float = 0.06
    g_i_n: float = 0.06
    g_e_f: float = 0.12
    g_e_s: float = 0.08
    g_e_n: float = 0.08
    torso: float = 0.22
    blood: float = 0.7
    lung: float = 0.0389

    def __post_init__(self):
        if min(asdict(self).values()) <= 0:
            raise ValueError("conductivities must be positive")

    def intracellular(self, frames) -> np.ndarray:
        g = np.array([self.g_i_f, self.g_i_s, self.g_i_n])
        return np.einsum("k,tki,tkj->tij", g, frames, frames)

    def extracellular(self, frames) -> np.ndarray:
        g = np.array([self.g_e_f, self.g_e_s, self.g_e_n])
        return np.einsum("k,tki,tkj->tij", g, frames, frames)

    def bulk(self, labels, ventricle_frames) -> np.ndarray:
        """Per-tet conductivity tensor over the whole torso mesh."""
        labels = np.asarray(labels)
        G = np.zeros((len(labels), 3, 3))
        iso = {TORSO: self.torso, BLOOD: self.blood, LUNG: self.lung}
        for lab, g in iso.items():
            G[labels == lab] = g * np.eye(3)
        vm = labels == VENTRICLE
        if vm.sum() != len(ventricle_frames):
            raise ValueError("need one fibre frame per ventricular tet")
        G[vm] = self.intracellular(ventricle_frames) + self.extracellular(ventricle_frames)
        unknown = ~np.isin(labels, [VENTRICLE, TORSO, BLOOD, LUNG])
        if unknown.any():
            raise ValueError(f"unknown region label(s) {np.unique(labels[unknown])}")
        return G


def p1_gradients(mesh: TetMesh, tet_ids=None) -> np.ndarray:
    """Gradients of the four barycentric hat functions per tet, (m, 4, 3)."""
    tets = mesh.tets if tet_ids is None else mesh.tets[tet_ids]
    X = mesh.vertices[tets]
    E = (X[:, 1:] - X[:, :1]).transpose(0, 2, 1)      # columns are edges
    Einv = np.linalg.inv(E)                              # rows: grads of lam1..lam3
    g = np.empty((len(tets), 4, 3))
    g[:, 1:] = Einv
    g[:, 0] = -Einv.sum(axis=1)
    return g


def assemble_stiffness(mesh: TetMesh, tensors, tet_ids=None) -> sp.csr_matrix:
    """Sum over tets of vol * grad(psi)^T G grad(psi), in global numbering."""
    ids = np.arange(mesh.n_tets) if tet_ids is None else np.asarray(tet_ids)
    g = p1_gradients(mesh, ids)
    vol = mesh.volumes[ids]
    Ke = np.einsum("t,tai,tij,tbj->tab", vol, g, np.asarray(tensors), g)
    tets = mesh.tets[ids]
    rows = np.repeat(tets, 4, axis=1).ravel()
    cols = np.tile(tets, (1, 4)).ravel()
    n = mesh.n_vertices
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    K.sum_duplicates()
    K.sort_indices()
    return K


def surface_mass(vertices, tris) -> np.ndarray:
    """Lumped P1 mass on a triangle set: a third of each area per corner."""
    c = np.zeros(len(vertices))
    np.add.at(c, np.asarray(tris).ravel(), np.repeat(triangle_areas(vertices, tris) / 3.0, 3))
    return c


def constrained_pcg(K, b, c, tol=1e-10, maxiter=20000, diag=None, x0=None):
    """Jacobi-preconditioned CG for a singular SPD system with constant kernel.

    The right-hand side and every residual are projected onto the complement
    of the constants; the returned solution satisfies ``c^T x = 0``.
    Returns (x, iterations, relative residual).
    """
    n = K.shape[0]
    b = np.asarray(b, dtype=float)
    b = b - b.mean()
    nb = np.linalg.norm(b)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    if nb == 0.0:
        return np.zeros(n), 0, 0.0
    dinv = 1.0 / (K.diagonal() if diag is None else diag)
    r = b - K @ x if x0 is not None else b.copy()
    r -= r.mean()
    if np.linalg.norm(r) / nb < tol:
        x -= (c @ x) / c.sum()
        return x, 0, float(np.linalg.norm(r) / nb)
    z = dinv * r
    p = z.copy()
    rz = r @ z
    it = 0
    rel = 1.0
    while it < maxiter:
        it += 1
        Kp = K @ p
        pKp = p @ Kp
        if pKp <= 0:
            raise SolverError("matrix is not positive definite on the constraint complement")
        alpha = rz / pKp
        x += alpha * p
        r -= alpha * Kp
        r -= r.mean()  # keep the residual orthogonal to the kernel
        rel = np.linalg.norm(r) / nb
        if rel < tol:
            break
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if rel >= tol:
        raise SolverError(f"CG did not converge in {maxiter} iterations (residual {rel:.2e})")
    x -= (c @ x) / c.sum()
    return x, it, rel


class TorsoModel:
    """Assembled torso operators for one anatomy.

    Parameters
    ----------
    torso
        Full torso mesh with region labels and a ``torso_skin`` surface.
    heart_vertices
        Torso vertex id of each heart-mesh vertex.
    ventricle_frames
        Fibre frames of the ventricular tets in torso order.
    """

    def __init__(self, torso: TetMesh, heart_vertices, ventricle_frames,
                 conductivities: ConductivityTable = ConductivityTable(), tol: float = 1e-10,
                 maxiter: int = 20000):
        self.mesh = torso
        self.heart_vertices = np.asarray(heart_vertices, dtype=np.int64)
        self.conductivities = conductivities
        self.tol = tol
        self.maxiter = maxiter
        labels = torso.region_labels
        G = conductivities.bulk(labels, ventricle_frames)
        self.K = assemble_stiffness(torso, G)
        vt = np.nonzero(labels == VENTRICLE)[0]
        Ai = assemble_stiffness(torso, conductivities.intracellular(ventricle_frames), vt)
        # A_i only couples heart vertices; keep the columns for them
        self.Ai = Ai[:, self.heart_vertices].tocsr()
        self.skin = torso.surface("torso_skin")
        self.skin_vertices = np.unique(self.skin)
        self.c = surface_mass(torso.vertices, self.skin)
        self._check_connected()
        self._lu = None

    def _check_connected(self) -> None:
        ncomp, _ = connected_components(self.K, directed=False)
        if ncomp != 1:
            raise SolverError(f"torso mesh has {ncomp} disconnected components")

    # ---------------------------------------------------------------- solves
    def solve(self, rhs, method: str = "cg") -> np.ndarray:
        """Solve K x = rhs with c^T x = 0 (rhs must sum to zero)."""
        rhs = np.asarray(rhs, dtype=float)
        if method == "cg":
            x, it, rel = constrained_pcg(self.K, rhs, self.c, self.tol, self.maxiter)
            _LOGGER.debug("CG: %d iterations, residual %.2e", it, rel)
            return x
        if method == "direct":
            return self._direct(rhs)
        raise ValueError(f"unknown method {method!r}")

    def _direct(self, rhs):
        # ground vertex 0 to remove the kernel, then restore the constraint
        if self._lu is None:
            n = self.K.shape[0]
            keep = np.arange(1, n)
            self._lu = spla.splu(self.K[keep][:, keep].tocsc(), permc_spec="MMD_AT_PLUS_A")
        rhs = np.atleast_2d(np.asarray(rhs, dtype=float).T).T
        rhs = rhs - rhs.mean(axis=0)
        x = np.zeros_like(rhs)
        x[1:] = self._lu.solve(rhs[1:])
        x -= (self.c @ x) / self.c.sum()
        return x[:, 0] if x.shape[1] == 1 else x

    def pseudo_bidomain_rhs(self, vm_heart) -> np.ndarray:
        return -(self.Ai @ np.asarray(vm_heart, dtype=float))

    def solve_pseudo_bidomain(self, vm_heart, method: str = "cg") -> np.ndarray:
        """Extracellular/torso potential (mV) for one V_m snapshot on the heart."""
        return self.solve(self.pseudo_bidomain_rhs(vm_heart), method)

    def point_loads(self, electrode_vertices, weights) -> np.ndarray:
        weights = np.asarray(weights, dtype=float)
        if abs(weights.sum()) > 1e-12 * max(1.0, np.abs(weights).sum()):
            raise ValueError("lead weights must sum to zero")
        rhs = np.zeros(self.mesh.n_vertices)
        np.add.at(rhs, np.asarray(electrode_vertices), weights)
        return rhs

    def solve_lead_field(self, electrode_vertices, weights, method: str = "cg") -> np.ndarray:
        """Lead field on the whole torso mesh for one lead."""
        return self.solve(self.point_loads(electrode_vertices, weights), method)

    def precompute_B(self, Z_full, scale: float = LEAD_SCALE) -> np.ndarray:
        """Lead vector on heart vertices from a full-mesh lead field."""
        return -scale * (self.Ai.T @ np.asarray(Z_full, dtype=float))

    def electrode_readout(self, phi, electrode_vertices, weights, scale: float = LEAD_SCALE):
        return scale * float(np.asarray(weights) @ np.asarray(phi)[np.asarray(electrode_vertices)])

    def bspm(self, vm_series, method: str = "direct", scale: float = LEAD_SCALE) -> np.ndarray:
        """Torso-skin potentials (skin vertices x samples) for a V_m series.

        Scaled like the lead vectors so that BSPMs and ECGs share amplitudes.
        """
        vm_series = np.atleast_2d(np.asarray(vm_series, dtype=float).T).T
        rhs = -(self.Ai @ vm_series)
        if method == "direct":
            phi = self._direct(rhs)
            phi = phi[:, None] if phi.ndim == 1 else phi
        else:
            phi = np.column_stack([self.solve(rhs[:, k], "cg") for k in range(rhs.shape[1])])
        return scale * phi[self.skin_vertices]


# ---------------------------------------------------------------- electrodes

LIMB = ("RA", "LA", "LL", "RL")

# fractions of the torso box (x: right -> left, y: anterior -> posterior, z: inferior -> superior)
DEFAULT_ELECTRODES = {
    "RA": (0.05, 0.5, 0.95),
    "LA": (0.95, 0.5, 0.95),
    "LL": (0.9, 0.5, 0.05),
    "RL": (0.1, 0.5, 0.05),
    "V1": (0.45, 0.0, 0.62),
    "V2": (0.55, 0.0, 0.62),
    "V3": (0.61, 0.0, 0.57),
    "V4": (0.67, 0.0, 0.52),
    "V5": (0.78, 0.0, 0.52),
    "V6": (1.0, 0.3, 0.52),
}

VEST_GRIDS = {32: (4, 4), 64: (8, 4), 128: (8, 8)}
VEST_EXTENT = {"x": (0.15, 0.85), "z": (0.3, 0.8)}


@dataclass
class LeadSet:
    """Electrodes, lead weights and precomputed lead vectors."""

    layout: str
    names: list
    electrode_names: list
    electrode_positions: np.ndarray
    electrode_vertices: np.ndarray
    weights: np.ndarray                 # (L, E)
    B: np.ndarray | None = None         # (L, n_heart)
    Z: np.ndarray | None = field(default=None, repr=False)  # (L, n_heart)
    scale: float = LEAD_SCALE

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=float))
        if self.weights.shape != (len(self.names), len(self.electrode_names)):
            raise ValueError("weights must be (leads, electrodes)")
        bad = np.abs(self.weights.sum(axis=1)) > 1e-12
        if bad.any():
            raise ValueError(f"lead weights do not sum to zero for {np.array(self.names)[bad]}")

    @property
    def n_leads(self) -> int:
        return len(self.names)

    def subset(self, names) -> "LeadSet":
        idx = [self.names.index(n) for n in names]
        return LeadSet(self.layout, list(names), self.electrode_names, self.electrode_positions,
                       self.electrode_vertices, self.weights[idx],
                       None if self.B is None else self.B[idx],
                       None if self.Z is None else self.Z[idx], self.scale)

    def save(self, path) -> None:
        """ASCII archive: header lines then one section per array."""
        with Path(path).open("w") as fh:
            fh.write(f"#layout {self.layout}\n#scale {float(self.scale)!r}\n")
            fh.write("#leads " + " ".join(self.names) + "\n")
            fh.write("#electrodes\n")
            for name, v, p in zip(self.electrode_names, self.electrode_vertices,
                                  self.electrode_positions):
                fh.write(f"{name} {int(v)} " + " ".join(repr(float(x)) for x in p) + "\n")
            fh.write("#weights\n")
            for row in self.weights:
                fh.write(" ".join(repr(float(x)) for x in row) + "\n")
            if self.B is not None:
                fh.write(f"#B {self.B.shape[1]}\n")
                for row in self.B:
                    fh.write(" ".join(repr(float(x)) for x in row) + "\n")

    @classmethod
    def load(cls, path) -> "LeadSet":
        lines = Path(path).read_text().splitlines()
        head, i = {}, 0
        while i < len(lines) and lines[i].startswith("#") and lines[i] != "#electrodes":
            key, _, val = lines[i][1:].partition(" ")
            head[key] = val
            i += 1
        names = head["leads"].split()
        i += 1
        enames, everts, epos = [], [], []
        while not lines[i].startswith("#"):
            parts = lines[i].split()
            enames.append(parts[0])
            everts.append(int(parts[1]))
            epos.append([float(x) for x in parts[2:5]])
            i += 1
        i += 1
        W = np.array([[float(x) for x in lines[i + k].split()] for k in range(len(names))])
        i += len(names)
        B = None
        if i < len(lines) and lines[i].startswith("#B"):
            B = np.array([[float(x) for x in lines[i + 1 + k].split()] for k in range(len(names))])
        return cls(head["layout"], names, enames, np.array(epos), np.array(everts, dtype=np.int64),
                   W, B, None, float(head["scale"]))


def _snap(mesh: TetMesh, points) -> tuple[np.ndarray, np.ndarray]:
    skin = np.unique(mesh.surface("torso_skin"))
    tree = cKDTree(mesh.vertices[skin])
    _, k = tree.query(np.atleast_2d(points))
    return skin[k], mesh.vertices[skin[k]]


def _box(mesh: TetMesh):
    lo = mesh.vertices.min(axis=0)
    return lo, mesh.vertices.max(axis=0) - lo


def limb_weights(electrodes: list) -> tuple[list, np.ndarray]:
    idx = {n: i for i, n in enumerate(electrodes)}
    rows = {
        "I": {"LA": 1, "RA": -1},
        "II": {"LL": 1, "RA": -1},
        "III": {"LL": 1, "LA": -1},
        "aVR": {"RA": 1, "LA": -0.5, "LL": -0.5},
        "aVL": {"LA": 1, "RA": -0.5, "LL": -0.5},
        "aVF": {"LL": 1, "RA": -0.5, "LA": -0.5},
    }
    W = np.zeros((len(rows), len(electrodes)))
    for r, spec in enumerate(rows.values()):
        for n, w in spec.items():
            W[r, idx[n]] = w
    return list(rows), W


def _unipolar(electrodes: list, targets: list) -> np.ndarray:
    """Weights of unipolar leads against Wilson's central terminal."""
    idx = {n: i for i, n in enumerate(electrodes)}
    W = np.zeros((len(targets), len(electrodes)))
    for r, n in enumerate(targets):
        W[r, idx[n]] += 1.0
        for limb in ("RA", "LA", "LL"):
            W[r, idx[limb]] -= 1.0 / 3.0
    return W


def vest_positions(mesh: TetMesh, n: int, extent=None) -> tuple[list, np.ndarray]:
    if n not in VEST_GRIDS:
        raise ValueError(f"vest size must be one of {sorted(VEST_GRIDS)}")
    extent = extent or VEST_EXTENT
    lo, size = _box(mesh)
    nx, nz = VEST_GRIDS[n]
    xs = np.linspace(*extent["x"], nx)
    zs = np.linspace(*extent["z"], nz)[::-1]
    names, pts = [], []
    for side, yfrac in (("F", 0.0), ("B", 1.0)):
        k = 0
        for z in zs:
            for x in xs:
                k += 1
                names.append(f"{side}{k:02d}")
                pts.append(lo + size * np.array([x, yfrac, z]))
    return names, np.array(pts)


def make_leadset(mesh: TetMesh, layout: str, electrodes: dict | None = None,
                 vest_extent: dict | None = None) -> LeadSet:
    """Electrodes and weights for ``limb4``, ``ecg12`` or ``vest32/64/128``.

    Electrode positions are fractions of the torso bounding box and snap to
    the nearest torso-skin vertex.  Lead vectors are filled in later by
    :func:`compute_lead_vectors`.
    """
    spec = dict(DEFAULT_ELECTRODES)
    spec.update(electrodes or {})
    lo, size = _box(mesh)

    def place(names):
        return np.array([lo + size * np.asarray(spec[n], dtype=float) for n in names])

    if layout == "limb4":
        enames = list(LIMB)
        names, W = limb_weights(enames)
        pts = place(enames)
    elif layout == "ecg12":
        enames = list(LIMB) + [f"V{i}" for i in range(1, 7)]
        names, Wl = limb_weights(enames)
        pre = [f"V{i}" for i in range(1, 7)]
        W = np.vstack([Wl, _unipolar(enames, pre)])
        names = names + pre
        pts = place(enames)
    elif layout.startswith("vest"):
        try:
            n = int(layout[4:])
        except ValueError:
            raise ValueError(f"unknown lead layout {layout!r}") from None
        vnames, vpts = vest_positions(mesh, n, vest_extent)
        enames = ["RA", "LA", "LL"] + vnames
        W = _unipolar(enames, vnames)
        names = vnames
        pts = np.vstack([place(["RA", "LA", "LL"]), vpts])
    else:
        raise ValueError(f"unknown lead layout {layout!r}; use limb4, ecg12, vest32, vest64 or vest128")
    verts, snapped = _snap(mesh, pts)
    return LeadSet(layout, names, enames, snapped, verts, W)


def compute_lead_vectors(model: TorsoModel, leadset: LeadSet, method: str = "cg",
                         keep_fields: bool = False) -> LeadSet:
    """Fill ``leadset.B`` (and optionally the lead fields on the heart)."""
    return compute_lead_vectors_many(model, [leadset], method, keep_fields)[0]


def compute_lead_vectors_many(model: TorsoModel, leadsets, method: str = "cg",
                              keep_fields: bool = False) -> list:
    """Lead vectors for several layouts with one solve per distinct electrode vertex.

    Every electrode field is solved against a common reference vertex; since
    lead weights sum to zero the reference drops out of each lead field.
    """
    verts = np.unique(np.concatenate([ls.electrode_vertices for ls in leadsets]))
    ref, others = verts[0], verts[1:]
    n = model.mesh.n_vertices
    rhs = np.zeros((n, len(others)))
    rhs[others, np.arange(len(others))] = 1.0
    rhs[ref, :] -= 1.0
    if len(others) == 0:
        F = np.zeros((n, 0))
    elif method == "direct":
        F = model._direct(rhs)
        F = F[:, None] if F.ndim == 1 else F
    else:
        F = np.column_stack([model.solve(rhs[:, k], "cg") for k in range(len(others))])
    col = {int(v): k for k, v in enumerate(others)}
    for ls in leadsets:
        W = np.zeros((ls.n_leads, len(others)))
        for e, v in enumerate(ls.electrode_vertices):
            if int(v) != ref:
                W[:, col[int(v)]] += ls.weights[:, e]
        Zfull = F @ W.T
        ls.B = np.ascontiguousarray(-ls.scale * (model.Ai.T @ Zfull).T)
        if keep_fields:
            ls.Z = np.ascontiguousarray(Zfull[model.heart_vertices].T)
    return list(leadsets)


def write_bspm_csv(path, phi_skin, skin_vertices) -> None:
    """Single BSPM snapshot as ``vertex_id,phi_mV``."""
    with Path(path).open("w") as fh:
        fh.write("vertex_id,phi_mV\n")
        for v, p in zip(skin_vertices, phi_skin):
            fh.write(f"{int(v)},{float(p)!r}\n")
