"""Synthetic anatomy: structured test meshes and a ventricles-in-torso model.

The torso is a graded rectilinear grid split into Kuhn tetrahedra. Tissue
labels are assigned per tet from its centroid against analytic ellipsoids,
so the ventricles are a tet-resolution approximation of a biventricular
half-ellipsoid shell. Apico-basal position, transmural depth and the RV
inferior sector are all evaluated analytically from the ellipsoid model.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .mesh import (BLOOD, LUNG, TORSO, VENTRICLE, GeometryError, TetMesh, VelocityField, face_keys,
                   signed_volumes)

_LOGGER = logging.getLogger(__name__)

# mean unique-edge length of a Kuhn-split cube of unit spacing
KUHN_EDGE_FACTOR = (3.0 + 3.0 * np.sqrt(2.0) + np.sqrt(3.0)) / 7.0

_KUHN_PATHS = list(itertools.permutations(range(3)))


def rectilinear_tets(xs, ys, zs) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and Kuhn-split tets (6 per hexahedral cell) of a rectilinear grid."""
    xs, ys, zs = (np.asarray(a, dtype=float) for a in (xs, ys, zs))
    nx, ny, nz = len(xs), len(ys), len(zs)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    verts = np.column_stack([X.ravel(order="F"), Y.ravel(order="F"), Z.ravel(order="F")])

    def vid(i, j, k):
        return i + nx * (j + ny * k)

    I, J, K = np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), np.arange(nz - 1), indexing="ij")
    I, J, K = I.ravel(order="F"), J.ravel(order="F"), K.ravel(order="F")
    blocks = []
    for perm in _KUHN_PATHS:
        off = np.zeros(3, dtype=np.int64)
        corners = [vid(I, J, K)]
        for axis in perm:
            off[axis] += 1
            corners.append(vid(I + off[0], J + off[1], K + off[2]))
        blocks.append(np.stack(corners, axis=1))
    tets = np.stack(blocks, axis=1).reshape(-1, 4)
    vol = signed_volumes(verts, tets)
    neg = vol < 0
    tets[neg] = tets[neg][:, [0, 1, 3, 2]]
    return verts, tets


def cube_mesh(n_cells: int, size: float = 1.0, origin=(0.0, 0.0, 0.0)) -> TetMesh:
    """Kuhn-split cube [origin, origin + size]^3 with ``n_cells`` cells per side.

    The single surface ``boundary`` holds every outer face.
    """
    if n_cells < 1 or size <= 0:
        raise GeometryError("cube needs n_cells >= 1 and size > 0")
    axes = [o + np.linspace(0.0, size, n_cells + 1) for o in origin]
    verts, tets = rectilinear_tets(*axes)
    mesh = TetMesh(verts, tets)
    mesh.surfaces["boundary"] = mesh.boundary_faces
    return mesh


def graded_axis(lo, hi, fine_lo, fine_hi, h_fine, h_coarse, growth=1.25) -> np.ndarray:
    """Axis coordinates: uniform ``h_fine`` on [fine_lo, fine_hi], growing to ``h_coarse`` outside."""
    fine_lo, fine_hi = max(lo, fine_lo), min(hi, fine_hi)
    n_fine = max(1, int(np.ceil((fine_hi - fine_lo) / h_fine - 1e-9)))
    core = np.linspace(fine_lo, fine_hi, n_fine + 1)

    def outward(start, stop, sign):
        pts = []
        x, h = start, h_fine
        while True:
            h = min(h * growth, h_coarse)
            nxt = x + sign * h
            if sign * (stop - nxt) < 0.5 * h:
                break
            pts.append(nxt)
            x = nxt
        if sign * (stop - x) > 1e-9:
            pts.append(stop)
        return pts

    left = outward(fine_lo, lo, -1.0)[::-1]
    right = outward(fine_hi, hi, 1.0)
    return np.array(left + list(core) + right)


def _rotation(angles_deg) -> np.ndarray:
    ax, ay, az = np.radians(angles_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass
class AnatomyParams:
    """Geometry of the synthetic torso model (mm, degrees).

    The heart frame has its base plane at z = 0 and the apex towards -z.
    Torso axes: +x patient left, +y posterior, +z superior.
    """

    h_ventricle: float = 1.25
    h_torso: float = 2.28
    lv_outer: tuple = (24.0, 24.0, 42.0)
    lv_inner: tuple = (15.0, 15.0, 36.0)
    rv: bool = True
    rv_center: tuple = (-15.0, -3.0, 0.0)
    rv_outer: tuple = (26.0, 26.0, 38.0)
    rv_inner: tuple = (21.0, 21.5, 33.0)
    torso_size: tuple = (150.0, 110.0, 170.0)
    base_center: tuple = (78.0, 55.0, 105.0)
    orientation_deg: tuple = (-30.0, -30.0, 30.0)
    lungs: bool = True
    fiber_endo_deg: float = -60.0
    fiber_epi_deg: float = 60.0
    rv_inferior_sector_deg: tuple = (200.0, 280.0)

    def validate(self) -> None:
        if self.h_ventricle <= 0 or self.h_torso <= 0:
            raise GeometryError("mesh resolutions must be positive")
        for name in ("lv_outer", "lv_inner", "torso_size") + (("rv_outer", "rv_inner") if self.rv else ()):
            if min(getattr(self, name)) <= 0:
                raise GeometryError(f"{name} must have positive semi-axes/sizes")
        if any(i >= o for i, o in zip(self.lv_inner, self.lv_outer)):
            raise GeometryError("lv_inner must lie strictly inside lv_outer")
        if self.rv and any(i >= o for i, o in zip(self.rv_inner, self.rv_outer)):
            raise GeometryError("rv_inner must lie strictly inside rv_outer")

    def scaled(self, factor: float, **overrides) -> "AnatomyParams":
        """Copy with every length multiplied by ``factor`` (resolutions included)."""
        d = asdict(self)
        for k in ("lv_outer", "lv_inner", "rv_center", "rv_outer", "rv_inner", "torso_size",
                  "base_center"):
            d[k] = tuple(factor * np.asarray(d[k], dtype=float))
        d["h_ventricle"] *= factor
        d["h_torso"] *= factor
        d.update(overrides)
        return AnatomyParams(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "AnatomyParams":
        known = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()
                 if k in cls.__dataclass_fields__}
        return cls(**known)


def _rho(p, axes, center=(0.0, 0.0, 0.0)):
    q = (p - np.asarray(center)) / np.asarray(axes)
    return np.sqrt((q ** 2).sum(axis=-1))


@dataclass
class HeartGeometry:
    """Analytic description of the ventricles; maps world points to heart coordinates."""

    params: AnatomyParams
    rotation: np.ndarray = field(init=False)
    origin: np.ndarray = field(init=False)

    def __post_init__(self):
        self.rotation = _rotation(self.params.orientation_deg)
        self.origin = np.asarray(self.params.base_center, dtype=float)

    def to_local(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - self.origin) @ self.rotation

    def to_world_vectors(self, v) -> np.ndarray:
        return v @ self.rotation.T

    def classify(self, pts_local) -> np.ndarray:
        """Tissue label per local point (VENTRICLE, BLOOD or 0 for none)."""
        p = self.params
        below = pts_local[:, 2] <= 0.0
        in_lv_o = _rho(pts_local, p.lv_outer) <= 1.0
        in_lv_i = _rho(pts_local, p.lv_inner) <= 1.0
        lab = np.zeros(len(pts_local), dtype=np.int64)
        lab[below & in_lv_o] = VENTRICLE
        lab[below & in_lv_i] = BLOOD
        if p.rv:
            in_rv_o = _rho(pts_local, p.rv_outer, p.rv_center) <= 1.0
            in_rv_i = _rho(pts_local, p.rv_inner, p.rv_center) <= 1.0
            lab[below & in_rv_o & ~in_lv_o] = VENTRICLE
            lab[below & in_rv_i & ~in_lv_o] = BLOOD
        return lab

    def in_rv_cavity(self, pts_local) -> np.ndarray:
        p = self.params
        if not p.rv:
            return np.zeros(len(pts_local), dtype=bool)
        return (_rho(pts_local, p.rv_inner, p.rv_center) <= 1.0) & (_rho(pts_local, p.lv_outer) > 1.0)

    def apicobasal(self, pts) -> np.ndarray:
        """0 at the LV apex, 1 at the base plane."""
        z = self.to_local(pts)[:, 2]
        return np.clip(1.0 + z / self.params.lv_outer[2], 0.0, 1.0)

    def rv_sector_angle(self, pts) -> np.ndarray:
        """Angle (deg, [0, 360)) around the RV long axis in the heart frame."""
        q = self.to_local(pts) - np.asarray(self.params.rv_center)
        return np.degrees(np.arctan2(q[:, 1], q[:, 0])) % 360.0

    def fiber_frames(self, pts_world) -> np.ndarray:
        """Rule-based (f, s, n) frames, fibre angle varying linearly endo -> epi."""
        p = self.params
        loc = self.to_local(pts_world)
        frames = np.empty((len(loc), 3, 3))
        in_lv = _rho(loc, p.lv_outer) <= 1.0
        if not p.rv:
            in_lv[:] = True
        for mask, inner, outer, center in (
                (in_lv, p.lv_inner, p.lv_outer, (0.0, 0.0, 0.0)),
                (~in_lv, p.rv_inner, p.rv_outer, p.rv_center)):
            if not mask.any():
                continue
            q = loc[mask] - np.asarray(center)
            ri = _rho(q, inner)
            ro = _rho(q, outer)
            e = np.clip((ri - 1.0) / np.maximum((ri - 1.0) + (1.0 - ro), 1e-12), 0.0, 1.0)
            axes = np.asarray(inner) + e[:, None] * (np.asarray(outer) - np.asarray(inner))
            n = q / axes ** 2
            n /= np.linalg.norm(n, axis=1, keepdims=True)
            c = np.cross(np.array([0.0, 0.0, 1.0]), n)
            cn = np.linalg.norm(c, axis=1)
            c[cn < 1e-8] = [1.0, 0.0, 0.0]
            c -= (c * n).sum(axis=1, keepdims=True) * n
            c /= np.linalg.norm(c, axis=1, keepdims=True)
            lon = np.cross(n, c)
            alpha = np.radians(p.fiber_endo_deg + (p.fiber_epi_deg - p.fiber_endo_deg) * e)
            f = np.cos(alpha)[:, None] * c + np.sin(alpha)[:, None] * lon
            s = n
            nn = np.cross(f, s)
            frames[mask] = np.stack([f, s, nn], axis=1)
        # rows are vectors: rotate each row into the torso frame
        return np.einsum("tkj,ij->tki", frames, self.rotation)

    def shell_volume_analytic(self) -> float:
        """Exact LV half-ellipsoid shell volume (valid when the RV is disabled)."""
        p = self.params
        return 2.0 / 3.0 * np.pi * (np.prod(p.lv_outer) - np.prod(p.lv_inner))


@dataclass
class Anatomy:
    """Torso mesh, ventricular submesh and the analytic heart description."""

    torso: TetMesh
    heart: TetMesh
    heart_vertices: np.ndarray  # heart vertex -> torso vertex
    frames: np.ndarray  # per heart tet
    geometry: HeartGeometry

    def velocity(self, v_f=0.61, v_s=0.225, v_n=0.225) -> VelocityField:
        return VelocityField(self.frames, np.array([v_f, v_s, v_n]))


def _face_neighbors(tets: np.ndarray):
    """For every (tet, local face) the tet on the other side (-1 on the boundary)."""
    loc = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
    keys = face_keys(tets[:, loc].reshape(-1, 3), int(tets.max()) + 1)
    order = np.argsort(keys, kind="stable")
    fs = keys[order]
    same = fs[1:] == fs[:-1]
    other = np.full(len(keys), -1, dtype=np.int64)
    i = np.nonzero(same)[0]
    a, b = order[i], order[i + 1]
    other[a] = b // 4
    other[b] = a // 4
    return other.reshape(-1, 4)


def build_anatomy(params: AnatomyParams | None = None) -> Anatomy:
    params = params or AnatomyParams()
    params.validate()
    geo = HeartGeometry(params)
    # heart bounding box in the torso frame from the rotated ellipsoid extents
    th, ph = np.meshgrid(np.linspace(0, 2 * np.pi, 73), np.linspace(0.5 * np.pi, np.pi, 37))
    unit = np.column_stack([(np.sin(ph) * np.cos(th)).ravel(), (np.sin(ph) * np.sin(th)).ravel(),
                            np.cos(ph).ravel()])
    shell = [unit * params.lv_outer]
    if params.rv:
        shell.append(np.asarray(params.rv_center) + unit * params.rv_outer)
    world = np.concatenate(shell) @ geo.rotation.T + geo.origin
    margin = 2.0 * params.h_ventricle
    lo, hi = world.min(axis=0) - margin, world.max(axis=0) + margin
    h_grid = params.h_ventricle / KUHN_EDGE_FACTOR
    hc = max(params.h_torso / KUHN_EDGE_FACTOR, h_grid)
    axes = [graded_axis(0.0, params.torso_size[d], lo[d], hi[d], h_grid, hc) for d in range(3)]
    if any(lo[d] < 0 or hi[d] > params.torso_size[d] for d in range(3)):
        raise GeometryError("heart does not fit inside the torso box")
    verts, tets = rectilinear_tets(*axes)
    cent = verts[tets].mean(axis=1)
    labels = np.full(len(tets), TORSO, dtype=np.int64)
    if params.lungs:
        L = np.asarray(params.torso_size)
        for side in (-1.0, 1.0):
            c = np.array([L[0] * (0.5 + 0.3 * side), L[1] * 0.6, L[2] * 0.6])
            ax = np.array([0.16 * L[0], 0.3 * L[1], 0.3 * L[2]])
            labels[_rho(cent, ax, c) <= 1.0] = LUNG
    heart_lab = geo.classify(geo.to_local(cent))
    labels[heart_lab > 0] = heart_lab[heart_lab > 0]
    torso = TetMesh(verts, tets, {}, labels)
    torso.surfaces["torso_skin"] = torso.boundary_faces

    vmask = labels == VENTRICLE
    if not vmask.any():
        raise GeometryError("ventricular region is empty at this resolution")
    # classify ventricle boundary faces by the label on the other side
    nbr = _face_neighbors(tets)
    loc = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
    vt = np.nonzero(vmask)[0]
    faces = tets[vt][:, loc]  # (k, 4, 3)
    other = nbr[vt]
    other_lab = np.where(other >= 0, labels[np.maximum(other, 0)], 0)
    bnd = other_lab != VENTRICLE
    faces, other, other_lab = faces[bnd], other[bnd], other_lab[bnd]
    other_cent = cent[np.maximum(other, 0)]
    other_loc = geo.to_local(other_cent)
    is_blood = other_lab == BLOOD
    is_rv = geo.in_rv_cavity(other_loc)
    is_base = (~is_blood) & (other_loc[:, 2] > 0.0)
    surf = {
        "endo_lv": faces[is_blood & ~is_rv],
        "endo_rv": faces[is_blood & is_rv],
        "epi": faces[~is_blood & ~is_base],
        "base": faces[is_base],
    }
    for name, tri in surf.items():
        torso.surfaces[name] = tri

    heart, keep = torso.submesh(vmask)
    heart.surfaces.pop("torso_skin", None)
    frames = geo.fiber_frames(heart.centroids)
    _LOGGER.info("anatomy: torso %d verts / %d tets, heart %d verts / %d tets",
                 torso.n_vertices, torso.n_tets, heart.n_vertices, heart.n_tets)
    return Anatomy(torso, heart, keep, frames, geo)


def mean_edge_length(mesh: TetMesh) -> float:
    e = mesh.edges
    return float(np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1).mean())
