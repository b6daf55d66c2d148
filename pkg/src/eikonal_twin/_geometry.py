"""Compiled geometry kernels: closest points on triangles and tet location."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def closest_point_on_triangle(p, a, b, c):
    """Closest point to ``p`` on triangle ``abc`` (Ericson, Real-Time Collision Detection 5.1.5)."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = ab @ ap
    d2 = ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return a.copy()
    bp = p - b
    d3 = ab @ bp
    d4 = ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return b.copy()
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        v = d1 / (d1 - d3)
        return a + v * ab
    cp = p - c
    d5 = ab @ cp
    d6 = ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return c.copy()
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        w = d2 / (d2 - d6)
        return a + w * ac
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return b + w * (c - b)
    denom = 1.0 / (va + vb + vc)
    v = vb * denom
    w = vc * denom
    return a + ab * v + ac * w


@njit(cache=True)
def closest_points_on_soup(points, verts, tris):
    """For each point, the closest point over a triangle set.

    Returns (closest points, distances, triangle index). Exhaustive scan, so
    the result is exact up to rounding and independent of any acceleration
    structure.
    """
    n = points.shape[0]
    out = np.empty((n, 3))
    dist = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        p = points[i]
        best = np.inf
        best_k = -1
        best_q = np.zeros(3)
        for k in range(tris.shape[0]):
            a = verts[tris[k, 0]]
            b = verts[tris[k, 1]]
            c = verts[tris[k, 2]]
            # cheap sphere rejection before the exact test
            cx = (a + b + c) / 3.0
            ra = max(np.sqrt(((a - cx) ** 2).sum()),
                     max(np.sqrt(((b - cx) ** 2).sum()), np.sqrt(((c - cx) ** 2).sum())))
            dc = np.sqrt(((p - cx) ** 2).sum()) - ra
            if dc > best:
                continue
            q = closest_point_on_triangle(p, a, b, c)
            d = np.sqrt(((p - q) ** 2).sum())
            if d < best:
                best = d
                best_k = k
                best_q = q
        out[i] = best_q
        dist[i] = best
        idx[i] = best_k
    return out, dist, idx


@njit(cache=True)
def closest_points_in_candidates(points, verts, tris, ptr, cand):
    """Like closest_points_on_soup but point ``i`` only scans ``cand[ptr[i]:ptr[i+1]]``."""
    n = points.shape[0]
    out = np.empty((n, 3))
    dist = np.empty(n)
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        p = points[i]
        best = np.inf
        best_k = -1
        best_q = np.zeros(3)
        for j in range(ptr[i], ptr[i + 1]):
            k = cand[j]
            q = closest_point_on_triangle(p, verts[tris[k, 0]], verts[tris[k, 1]], verts[tris[k, 2]])
            d = np.sqrt(((p - q) ** 2).sum())
            if d < best or (d == best and k < best_k):
                best = d
                best_k = k
                best_q = q
        out[i] = best_q
        dist[i] = best
        idx[i] = best_k
    return out, dist, idx


@njit(cache=True)
def barycentric(p, tet_inv, v0):
    """Barycentric coordinates of p given the inverse edge matrix of a tet."""
    r = tet_inv @ (p - v0)
    lam = np.empty(4)
    lam[1] = r[0]
    lam[2] = r[1]
    lam[3] = r[2]
    lam[0] = 1.0 - r[0] - r[1] - r[2]
    return lam


@njit(cache=True)
def locate_in_candidates(p, candidates, tets, verts, inv_edges, tol):
    """First tet among ``candidates`` containing p (best min-coordinate wins).

    Returns (tet index or -1, barycentric coords).
    """
    best_t = -1
    best_min = -np.inf
    best_lam = np.zeros(4)
    for j in range(candidates.shape[0]):
        t = candidates[j]
        lam = barycentric(p, inv_edges[t], verts[tets[t, 0]])
        m = lam.min()
        if m >= -tol and m > best_min:
            best_min = m
            best_t = t
            best_lam = lam
    return best_t, best_lam
