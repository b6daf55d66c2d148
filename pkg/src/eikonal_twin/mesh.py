"""Tetrahedral mesh container, anisotropic velocity tensors and geometry queries.

Units: millimetres for geometry, milliseconds for time and m/s (= mm/ms) for
conduction velocities, so travel times come out in ms without conversion.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ._geometry import closest_points_on_soup, locate_in_candidates

_LOGGER = logging.getLogger(__name__)

INSIDE_TOL = 1e-9

# region labels used by the synthetic anatomy and the torso solver
VENTRICLE = 1
TORSO = 2
BLOOD = 3
LUNG = 4


class GeometryError(ValueError):
    """Raised for degenerate or inconsistent mesh geometry."""


@dataclass
class Location:
    """Result of a point-location query."""

    inside: bool
    tet: int = -1
    coords: np.ndarray | None = None
    nearest: np.ndarray | None = None
    distance: float = 0.0


def signed_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    a = vertices[tets[:, 0]]
    e1 = vertices[tets[:, 1]] - a
    e2 = vertices[tets[:, 2]] - a
    e3 = vertices[tets[:, 3]] - a
    return np.einsum("ij,ij->i", e1, np.cross(e2, e3)) / 6.0


def face_keys(faces: np.ndarray, n_vertices: int) -> np.ndarray:
    """Orientation-independent int64 key per triangle (valid below ~2M vertices)."""
    f = np.sort(faces, axis=1).astype(np.int64)
    n = np.int64(n_vertices)
    return (f[:, 0] * n + f[:, 1]) * n + f[:, 2]


def triangle_areas(vertices: np.ndarray, tris: np.ndarray) -> np.ndarray:
    a = vertices[tris[:, 0]]
    n = np.cross(vertices[tris[:, 1]] - a, vertices[tris[:, 2]] - a)
    return 0.5 * np.linalg.norm(n, axis=1)


class TetMesh:
    """Linear tetrahedral mesh with named triangle surfaces and region labels.

    Parameters
    ----------
    vertices
        (n, 3) coordinates in mm.
    tets
        (m, 4) vertex indices; every element must have positive signed volume.
    surfaces
        Mapping name -> (k, 3) triangle index array.
    region_labels
        (m,) integer label per tet (see module constants).
    """

    def __init__(self, vertices, tets, surfaces=None, region_labels=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.tets = np.ascontiguousarray(tets, dtype=np.int64)
        if self.tets.ndim != 2 or self.tets.shape[1] != 4:
            raise GeometryError("tets must be an (m, 4) array")
        if self.tets.size and (self.tets.min() < 0 or self.tets.max() >= len(self.vertices)):
            raise GeometryError("tet references a missing vertex")
        self.surfaces = {k: np.ascontiguousarray(v, dtype=np.int64).reshape(-1, 3)
                         for k, v in (surfaces or {}).items()}
        for name, tris in self.surfaces.items():
            if tris.size and (tris.min() < 0 or tris.max() >= len(self.vertices)):
                raise GeometryError(f"surface {name!r} references a missing vertex")
        if region_labels is None:
            region_labels = np.full(len(self.tets), VENTRICLE, dtype=np.int64)
        self.region_labels = np.asarray(region_labels, dtype=np.int64)
        vols = self.volumes
        if np.any(vols <= 0.0):
            bad = int(np.argmin(vols))
            raise GeometryError(f"tet {bad} has non-positive volume {vols[bad]:.3e}")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @cached_property
    def volumes(self) -> np.ndarray:
        return signed_volumes(self.vertices, self.tets)

    @property
    def total_volume(self) -> float:
        return float(self.volumes.sum())

    @cached_property
    def lumped_volumes(self) -> np.ndarray:
        """Each tet gives a quarter of its volume to each of its vertices."""
        out = np.zeros(self.n_vertices)
        np.add.at(out, self.tets.ravel(), np.repeat(self.volumes / 4.0, 4))
        return out

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha1(self.vertices.tobytes())
        h.update(self.tets.tobytes())
        return h.hexdigest()

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.tets].mean(axis=1)

    @cached_property
    def vertex_to_tet(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR adjacency (indptr, tet indices) sorted by tet index per vertex."""
        flat = self.tets.ravel()
        owner = np.repeat(np.arange(self.n_tets), 4)
        order = np.lexsort((owner, flat))
        counts = np.bincount(flat, minlength=self.n_vertices)
        indptr = np.concatenate([[0], np.cumsum(counts)])
        return indptr, owner[order]

    @cached_property
    def edges(self) -> np.ndarray:
        e = np.stack([self.tets[:, [0, 0, 0, 1, 1, 2]], self.tets[:, [1, 2, 3, 2, 3, 3]]], axis=-1)
        e = np.sort(e.reshape(-1, 2), axis=1)
        n = np.int64(self.n_vertices)
        key = np.unique(e[:, 0] * n + e[:, 1])
        return np.column_stack([key // n, key % n])

    @cached_property
    def vertex_neighbors(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR vertex-vertex adjacency over mesh edges."""
        e = self.edges
        both = np.concatenate([e, e[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        counts = np.bincount(both[:, 0], minlength=self.n_vertices)
        return np.concatenate([[0], np.cumsum(counts)]), both[:, 1].copy()

    @cached_property
    def boundary_faces(self) -> np.ndarray:
        """Faces owned by exactly one tet, oriented outward."""
        loc = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
        faces = self.tets[:, loc].reshape(-1, 3)
        key = face_keys(faces, self.n_vertices)
        _, inv, counts = np.unique(key, return_inverse=True, return_counts=True)
        return faces[counts[inv.ravel()] == 1]

    @cached_property
    def _inv_edges(self) -> np.ndarray:
        a = self.vertices[self.tets[:, 0]]
        E = np.stack([self.vertices[self.tets[:, k]] - a for k in (1, 2, 3)], axis=2)
        return np.linalg.inv(E)

    @cached_property
    def _centroid_tree(self) -> cKDTree:
        return cKDTree(self.centroids)

    @cached_property
    def _max_circumradius(self) -> float:
        d = np.linalg.norm(self.vertices[self.tets] - self.centroids[:, None, :], axis=2)
        return float(d.max())

    def surface(self, name: str) -> np.ndarray:
        try:
            return self.surfaces[name]
        except KeyError:
            raise KeyError(f"unknown surface {name!r}; have {sorted(self.surfaces)}") from None

    def surface_area(self, name: str) -> float:
        return float(triangle_areas(self.vertices, self.surface(name)).sum())

    def locate_point(self, p) -> Location:
        """Find the tet containing ``p`` and its barycentric coordinates.

        Points outside the mesh report the closest boundary point and the
        distance to it.
        """
        p = np.asarray(p, dtype=float)
        # every tet whose centroid is within the largest circumradius is a candidate
        cand = np.array(sorted(self._centroid_tree.query_ball_point(p, self._max_circumradius + 1e-9)),
                        dtype=np.int64)
        t, lam = locate_in_candidates(p, cand, self.tets, self.vertices, self._inv_edges, INSIDE_TOL)
        if t >= 0:
            self._check_tet(t)
            return Location(True, int(t), lam)
        q, d, _ = closest_points_on_soup(p[None, :], self.vertices, self.boundary_faces)
        return Location(False, nearest=q[0], distance=float(d[0]))

    def locate_points(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised location: (tet index or -1, (n, 4) coordinates)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        tets = np.full(len(points), -1, dtype=np.int64)
        coords = np.zeros((len(points), 4))
        cands = self._centroid_tree.query_ball_point(points, self._max_circumradius + 1e-9)
        for i, c in enumerate(cands):
            c = np.array(sorted(c), dtype=np.int64)
            t, lam = locate_in_candidates(points[i], c, self.tets, self.vertices,
                                          self._inv_edges, INSIDE_TOL)
            tets[i] = t
            coords[i] = lam
        return tets, coords

    def _check_tet(self, t: int) -> None:
        if self.volumes[t] <= 1e-14 * self._max_circumradius ** 3:
            raise GeometryError(f"degenerate tet {t}")

    def closest_on_surface(self, points, name: str):
        """(closest points, distances, triangle ids) on a named surface."""
        tris = self.surface(name)
        if len(tris) == 0:
            raise GeometryError(f"surface {name!r} is empty")
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return closest_points_on_soup(pts, self.vertices, tris)

    def surface_distance(self, p, name: str) -> float:
        _, d, _ = self.closest_on_surface(p, name)
        return float(d[0])

    def sample_surface_uniform(self, name: str, count: int, seed: int) -> np.ndarray:
        """Area-weighted uniform samples on a named surface (deterministic per seed)."""
        if count < 1:
            raise ValueError("count must be >= 1")
        tris = self.surface(name)
        return sample_triangles(self.vertices, tris, count, seed)

    def submesh(self, tet_mask) -> tuple["TetMesh", np.ndarray]:
        """Mesh restricted to the selected tets plus the old->new vertex map.

        Returns (mesh, kept vertex ids in the parent numbering). Surfaces are
        carried over when all their vertices survive.
        """
        tet_mask = np.asarray(tet_mask, dtype=bool)
        tets = self.tets[tet_mask]
        keep = np.unique(tets)
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[keep] = np.arange(len(keep))
        surfaces = {}
        for name, tris in self.surfaces.items():
            m = np.all(remap[tris] >= 0, axis=1)
            if m.any():
                surfaces[name] = remap[tris[m]]
        sub = TetMesh(self.vertices[keep], remap[tets], surfaces, self.region_labels[tet_mask])
        return sub, keep


def sample_triangles(vertices: np.ndarray, tris: np.ndarray, count: int, seed: int) -> np.ndarray:
    if len(tris) == 0:
        raise GeometryError("cannot sample an empty surface")
    rng = np.random.default_rng(seed)
    areas = triangle_areas(vertices, tris)
    k = rng.choice(len(tris), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    a, b, c = (vertices[tris[k, j]] for j in range(3))
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


@dataclass
class VelocityField:
    """Per-tet orthonormal fibre frames and conduction velocities.

    ``frames[t]`` holds the rows (f, s, n); ``speeds[t]`` holds (v_f, v_s, v_n)
    in m/s.
    """

    frames: np.ndarray
    speeds: np.ndarray
    _tensors: np.ndarray | None = field(default=None, repr=False)
    _inverses: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=float).reshape(-1, 3, 3)
        self.speeds = np.broadcast_to(np.asarray(self.speeds, dtype=float),
                                      (len(self.frames), 3)).copy()
        if np.any(self.speeds <= 0):
            raise ValueError("conduction velocities must be positive")
        gram = np.einsum("tij,tkj->tik", self.frames, self.frames)
        err = np.abs(gram - np.eye(3)).max() if len(gram) else 0.0
        if err > 1e-10:
            raise GeometryError(f"fibre frames not orthonormal (max error {err:.2e})")

    @classmethod
    def isotropic(cls, n_tets: int, speed: float = 1.0) -> "VelocityField":
        return cls(np.broadcast_to(np.eye(3), (n_tets, 3, 3)), np.full((n_tets, 3), speed))

    @classmethod
    def uniform(cls, n_tets: int, frame, speeds) -> "VelocityField":
        frame = np.asarray(frame, dtype=float)
        return cls(np.broadcast_to(frame, (n_tets, 3, 3)), np.broadcast_to(speeds, (n_tets, 3)))

    @property
    def tensors(self) -> np.ndarray:
        """M = sum_k v_k^2 e_k (x) e_k per tet."""
        if self._tensors is None:
            self._tensors = np.einsum("tk,tki,tkj->tij", self.speeds ** 2, self.frames, self.frames)
        return self._tensors

    @property
    def inverses(self) -> np.ndarray:
        """M^-1, the metric used for travel times."""
        if self._inverses is None:
            self._inverses = np.ascontiguousarray(
                np.einsum("tk,tki,tkj->tij", self.speeds ** -2.0, self.frames, self.frames))
        return self._inverses

    def element_tensor(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        return self.tensors[t], self.inverses[t]

    def scaled(self, factor: float) -> "VelocityField":
        return VelocityField(self.frames, self.speeds * factor)


# ---------------------------------------------------------------- file I/O


def write_mesh(path, mesh: TetMesh, velocity: VelocityField | None = None) -> None:
    """Write the ASCII mesh format (#vertices, #tets, #fibers, #surface <name>)."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write("#vertices\n")
        np.savetxt(fh, mesh.vertices, fmt="%.17g")
        fh.write("#tets\n")
        np.savetxt(fh, np.column_stack([mesh.tets, mesh.region_labels]), fmt="%d")
        if velocity is not None:
            fh.write("#fibers\n")
            np.savetxt(fh, velocity.frames[:, :2, :].reshape(-1, 6), fmt="%.17g")
        for name in sorted(mesh.surfaces):
            fh.write(f"#surface {name}\n")
            np.savetxt(fh, mesh.surfaces[name], fmt="%d")


def read_mesh(path) -> tuple[TetMesh, np.ndarray | None]:
    """Read the ASCII mesh format; returns (mesh, per-tet frames or None).

    Frames are rebuilt from (f, s) with n = f x s.
    """
    sections: dict[str, list[str]] = {}
    current = None
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                current = line[1:].strip()
                sections.setdefault(current, [])
            elif current is None:
                raise GeometryError(f"{path}: data before first section header")
            else:
                sections[current].append(line)

    def arr(name, dtype, width):
        rows = sections.get(name, [])
        if not rows:
            return np.zeros((0, width), dtype=dtype)
        return np.loadtxt(rows, dtype=dtype, ndmin=2)

    if "vertices" not in sections or "tets" not in sections:
        raise GeometryError(f"{path}: missing #vertices or #tets section")
    verts = arr("vertices", float, 3)
    tl = arr("tets", np.int64, 5)
    surfaces = {k.split(None, 1)[1]: arr(k, np.int64, 3)
                for k in sections if k.startswith("surface ")}
    mesh = TetMesh(verts, tl[:, :4], surfaces, tl[:, 4])
    frames = None
    if "fibers" in sections:
        fs = arr("fibers", float, 6)
        f, s = fs[:, :3], fs[:, 3:]
        frames = np.stack([f, s, np.cross(f, s)], axis=1)
    return mesh, frames


def write_vtk(path, mesh: TetMesh, point_data: dict | None = None, cell_data: dict | None = None) -> None:
    """Legacy ASCII VTK unstructured grid (write-only, for external viewers)."""
    with Path(path).open("w") as fh:
        fh.write("# vtk DataFile Version 3.0\neikonal-twin mesh\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_vertices} double\n")
        np.savetxt(fh, mesh.vertices, fmt="%.9g")
        fh.write(f"CELLS {mesh.n_tets} {5 * mesh.n_tets}\n")
        np.savetxt(fh, np.column_stack([np.full(mesh.n_tets, 4), mesh.tets]), fmt="%d")
        fh.write(f"CELL_TYPES {mesh.n_tets}\n")
        np.savetxt(fh, np.full(mesh.n_tets, 10), fmt="%d")
        cell_data = dict(cell_data or {})
        cell_data.setdefault("region", mesh.region_labels)
        fh.write(f"CELL_DATA {mesh.n_tets}\n")
        for name, values in cell_data.items():
            _write_vtk_array(fh, name, np.asarray(values))
        if point_data:
            fh.write(f"POINT_DATA {mesh.n_vertices}\n")
            for name, values in point_data.items():
                _write_vtk_array(fh, name, np.asarray(values))


def _write_vtk_array(fh, name: str, values: np.ndarray) -> None:
    if values.ndim == 2 and values.shape[1] == 3:
        fh.write(f"VECTORS {name} double\n")
        np.savetxt(fh, values, fmt="%.9g")
    else:
        fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
        np.savetxt(fh, np.nan_to_num(values.astype(float), posinf=-1.0), fmt="%.9g")
