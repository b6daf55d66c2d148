from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eikonal_twin.adjoint import (AdjointTape, StaleTapeError, grad_tau_wrt_positions,
                                  grad_tau_wrt_timings, region_of_influence, roi_concentration,
                                  write_roi_csv)
from eikonal_twin.anatomy import cube_mesh
from eikonal_twin.eikonal import EikonalSolver, PMJSet
from eikonal_twin.mesh import VelocityField

TOL = 1e-12


def aniso(mesh, seed=0):
    R = np.linalg.qr(np.random.default_rng(seed).normal(size=(3, 3)))[0]
    return VelocityField.uniform(mesh.n_tets, R, [0.61, 0.225, 0.225])


@pytest.fixture(scope="module")
def cube6():
    return cube_mesh(6, 6.0)


def tape_for(solver, pmjs):
    amap = solver.solve(pmjs, TOL)
    return AdjointTape.from_solution(solver.mesh, pmjs, amap), amap


def weighted(solver, pmjs, w):
    tau = solver.solve(pmjs, TOL).tau
    return float(w @ tau), solver.solve(pmjs, TOL).activator


def fd_timing(solver, pmjs, w, i, h=1e-3):
    """Central difference, or None when the activator map changes (tie)."""
    p, m = pmjs.copy(), pmjs.copy()
    p.timings[i] += h
    m.timings[i] -= h
    fp, ap = weighted(solver, p, w)
    fm, am = weighted(solver, m, w)
    if not np.array_equal(ap, am):
        return None
    return (fp - fm) / (2 * h)


def fd_position(solver, pmjs, w, i, direction, h=1e-3):
    p, m = pmjs.copy(), pmjs.copy()
    p.positions[i] += h * direction
    m.positions[i] -= h * direction
    tp, _ = solver.mesh.locate_points(p.positions[i:i + 1])
    tm, _ = solver.mesh.locate_points(m.positions[i:i + 1])
    if tp[0] != tm[0]:
        return None  # crossed a tet face
    fp, ap = weighted(solver, p, w)
    fm, am = weighted(solver, m, w)
    if not np.array_equal(ap, am):
        return None
    return (fp - fm) / (2 * h)


# ------------------------------------------------------------ trivial cases

def test_single_pmj_timing_gradient_is_weight_sum(cube6):
    s = EikonalSolver(cube6, aniso(cube6))
    p = PMJSet([[2.2, 3.1, 1.7]], [1.0])
    tape, _ = tape_for(s, p)
    g = grad_tau_wrt_timings(tape, np.ones(cube6.n_vertices), cube6, p)
    assert abs(g[0] - cube6.n_vertices) < 1e-9


def test_two_pmjs_partition_weight(cube6):
    s = EikonalSolver(cube6, aniso(cube6, 1))
    p = PMJSet([[1.2, 1.1, 1.7], [4.5, 4.6, 4.1]], [0.0, 0.5])
    tape, amap = tape_for(s, p)
    w = np.random.default_rng(0).uniform(0, 1, cube6.n_vertices)
    g = grad_tau_wrt_timings(tape, w)
    assert amap.pmj_active.all()
    assert abs(g.sum() - w.sum()) < 1e-9 * w.sum()


def test_partition_of_unity_per_vertex(cube6):
    s = EikonalSolver(cube6, aniso(cube6, 2))
    rng = np.random.default_rng(1)
    p = PMJSet(rng.uniform(0.2, 5.8, (5, 3)), rng.uniform(0, 3, 5))
    tape, _ = tape_for(s, p)
    for v in rng.choice(cube6.n_vertices, 30, replace=False):
        e = np.zeros(cube6.n_vertices)
        e[v] = 1.0
        assert abs(grad_tau_wrt_timings(tape, e).sum() - 1.0) < 1e-12


def test_inactive_pmj_gets_zero_gradients(cube6):
    s = EikonalSolver(cube6, VelocityField.isotropic(cube6.n_tets))
    p = PMJSet([[1.0, 1.0, 1.0], [5.0, 5.0, 5.0]], [0.0, 30.0])
    tape, amap = tape_for(s, p)
    assert not amap.pmj_active[1]
    w = np.ones(cube6.n_vertices)
    assert grad_tau_wrt_timings(tape, w)[1] == 0.0
    assert np.all(grad_tau_wrt_positions(tape, w)[1] == 0.0)


def test_isotropic_position_gradient_direction(cube6):
    s = EikonalSolver(cube6, VelocityField.isotropic(cube6.n_tets))
    p = PMJSet([[2.3, 2.6, 2.45]], [0.0])
    tape, amap = tape_for(s, p)
    tet = amap.seeding.tets[0]
    v = int(cube6.tets[tet][0])
    e = np.zeros(cube6.n_vertices)
    e[v] = 1.0
    g = grad_tau_wrt_positions(tape, e)[0]
    u = cube6.vertices[v] - p.positions[0]
    assert np.allclose(g, -u / np.linalg.norm(u), atol=1e-6)


def test_replay_reproduces_tau(cube6):
    s = EikonalSolver(cube6, aniso(cube6, 4))
    rng = np.random.default_rng(3)
    p = PMJSet(rng.uniform(0.2, 5.8, (6, 3)), rng.uniform(0, 3, 6))
    tape, amap = tape_for(s, p)
    assert np.max(np.abs(tape.replay() - amap.tau)) < 1e-12 * max(1.0, amap.tau.max())


def test_stale_tape_detected(cube6):
    s = EikonalSolver(cube6, aniso(cube6))
    p = PMJSet([[2.0, 2.0, 2.0]], [0.0])
    tape, _ = tape_for(s, p)
    q = p.copy()
    q.timings[0] = 1.0
    with pytest.raises(StaleTapeError):
        grad_tau_wrt_timings(tape, np.ones(cube6.n_vertices), cube6, q)
    with pytest.raises(StaleTapeError):
        region_of_influence(tape, cube_mesh(3, 6.0))


# ------------------------------------------------------------ finite differences

def test_timing_gradients_match_central_differences(cube6):
    s = EikonalSolver(cube6, aniso(cube6, 5))
    rng = np.random.default_rng(11)
    p = PMJSet(rng.uniform(0.2, 5.8, (20, 3)), rng.uniform(0, 10, 20))
    w = rng.uniform(0, 1, cube6.n_vertices)
    tape, amap = tape_for(s, p)
    g = grad_tau_wrt_timings(tape, w)
    checked = 0
    for i in range(p.count):
        fd = fd_timing(s, p, w, i)
        if fd is None:
            continue
        checked += 1
        assert abs(g[i] - fd) <= 1e-3 * max(abs(fd), 1e-6)
    assert checked >= 10


def test_position_gradients_match_central_differences(cube6):
    s = EikonalSolver(cube6, aniso(cube6, 6))
    rng = np.random.default_rng(12)
    p = PMJSet(rng.uniform(0.2, 5.8, (20, 3)), rng.uniform(0, 10, 20))
    w = rng.uniform(0, 1, cube6.n_vertices)
    tape, amap = tape_for(s, p)
    G = grad_tau_wrt_positions(tape, w)
    checked = 0
    for i in np.nonzero(amap.pmj_active)[0]:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        fd = fd_position(s, p, w, i, d)
        if fd is None:
            continue
        checked += 1
        assert abs(G[i] @ d - fd) <= 1e-2 * max(abs(fd), 1e-6)
    assert checked >= 3


def test_envelope_inactive_perturbation(cube6):
    s = EikonalSolver(cube6, VelocityField.isotropic(cube6.n_tets))
    p = PMJSet([[1.0, 1.0, 1.0], [5.0, 5.0, 5.0]], [0.0, 30.0])
    w = np.random.default_rng(2).uniform(0, 1, cube6.n_vertices)
    base, _ = weighted(s, p, w)
    q = p.copy()
    q.timings[1] += 0.5
    q.positions[1] += [0.05, -0.03, 0.02]
    assert abs(weighted(s, q, w)[0] - base) < 1e-12 * abs(base)


# ------------------------------------------------------------ region of influence

@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_roi_partitions_volume(seed, n):
    m = cube_mesh(5, 5.0)
    s = EikonalSolver(m, aniso(m, seed % 7))
    rng = np.random.default_rng(seed)
    p = PMJSet(rng.uniform(0.1, 4.9, (n, 3)), rng.uniform(0, 8, n))
    tape, amap = tape_for(s, p)
    roi, active = region_of_influence(tape, m)
    assert abs(roi.sum() - m.total_volume) <= 1e-9 * m.total_volume
    assert np.array_equal(active, roi > 0)
    assert np.array_equal(active, amap.pmj_active)


def test_single_pmj_roi_is_total_volume(cube6):
    s = EikonalSolver(cube6, aniso(cube6))
    p = PMJSet([[3.3, 3.1, 2.9]], [0.0])
    tape, _ = tape_for(s, p)
    roi, _ = region_of_influence(tape, cube6)
    assert abs(roi[0] - cube6.total_volume) < 1e-9 * cube6.total_volume


def test_symmetric_pmjs_equal_roi():
    m = cube_mesh(6, 6.0)
    s = EikonalSolver(m, VelocityField.isotropic(m.n_tets))
    # point reflection through the cube centre maps the Kuhn mesh onto itself
    a = np.array([1.3, 1.7, 2.2])
    p = PMJSet([a, 6.0 - a], [0.0, 0.0])
    tape, _ = tape_for(s, p)
    roi, _ = region_of_influence(tape, m)
    assert abs(roi[0] - roi[1]) <= m.lumped_volumes.max()


def test_roi_concentration():
    assert roi_concentration([50, 30, 15, 5]) == 3
    assert roi_concentration([100, 0, 0]) == 1
    assert roi_concentration([0, 0]) == 0


def test_roi_csv(tmp_path, cube6):
    s = EikonalSolver(cube6, aniso(cube6))
    p = PMJSet([[1.0, 1.0, 1.0], [5.0, 5.0, 5.0]], [0.0, 30.0])
    tape, _ = tape_for(s, p)
    roi, active = region_of_influence(tape, cube6)
    write_roi_csv(tmp_path / "roi.csv", p, roi, active)
    lines = (tmp_path / "roi.csv").read_text().splitlines()
    assert lines[0] == "pmj_id,x,y,z,t_ms,roi_mm3,active"
    assert lines[2].endswith(",0.0,0")
