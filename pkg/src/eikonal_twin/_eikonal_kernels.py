"""Compiled kernels for the Hopf-Lax fixed-point eikonal solver.

Every vertex ``v`` owns one entry per incident tet: the three vertices of the
face opposite ``v`` and the 3x3 Gram matrix ``Q = E^T M^-1 E`` where the
columns of ``E`` are the face vertices minus ``x_v``.  For barycentric
weights ``lam`` on the face the metric distance is ``sqrt(lam^T Q lam)``, so
the local problem is

    min_{lam in simplex}  a . lam + sqrt(lam^T Q lam)

with ``a`` the current arrival times on the face vertices.
"""
from __future__ import annotations

import numpy as np
from numba import njit

METHOD_EXACT = 0
METHOD_FISTA = 1

_NEG_TOL = 1e-12


@njit(cache=True)
def _project_simplex(y, mask, out):
    """Euclidean projection of y onto the simplex spanned by the masked coords."""
    vals = np.empty(3)
    k = 0
    for i in range(3):
        if mask[i]:
            vals[k] = y[i]
            k += 1
    srt = np.sort(vals[:k])[::-1]
    css = 0.0
    theta = 0.0
    for j in range(k):
        css += srt[j]
        t = (css - 1.0) / (j + 1)
        if srt[j] - t > 0.0:
            theta = t
    for i in range(3):
        out[i] = max(y[i] - theta, 0.0) if mask[i] else 0.0


@njit(cache=True)
def _objective(b, Q, lam):
    q = 0.0
    v = 0.0
    for i in range(3):
        v += b[i] * lam[i]
        for j in range(3):
            q += lam[i] * Q[i, j] * lam[j]
    return v + np.sqrt(max(q, 0.0))


@njit(cache=True)
def _edge_min(bi, bj, qii, qij, qjj):
    """Minimum over the segment between two face vertices: (value, weight on i)."""
    best = bi + np.sqrt(qii)
    w = 1.0
    vj = bj + np.sqrt(qjj)
    if vj < best:
        best = vj
        w = 0.0
    det = qii * qjj - qij * qij
    if det <= 0.0:
        return best, w
    u0 = (qjj - qij) / det
    u1 = (qii - qij) / det
    alpha = u0 + u1
    beta = u0 * bi + u1 * bj
    gamma = (qjj * bi * bi - 2.0 * qij * bi * bj + qii * bj * bj) / det
    disc = beta * beta - alpha * (gamma - 1.0)
    if disc <= 0.0 or alpha <= 0.0:
        return best, w
    sd = np.sqrt(disc)
    nu = (beta + sd) / alpha
    m0 = (qjj * (nu - bi) - qij * (nu - bj)) / det
    m1 = (qii * (nu - bj) - qij * (nu - bi)) / det
    if m0 < -_NEG_TOL * sd or m1 < -_NEG_TOL * sd or nu >= best:
        return best, w
    m0 = max(m0, 0.0)
    m1 = max(m1, 0.0)
    return nu, m0 / (m0 + m1)


@njit(cache=True)
def face_min_exact(a0, a1, a2, Q, lam):
    """Closed-form face minimum; same contract as :func:`face_min`."""
    f0 = a0 < np.inf
    f1 = a1 < np.inf
    f2 = a2 < np.inf
    lam[0] = 0.0
    lam[1] = 0.0
    lam[2] = 0.0
    amin = min(a0, min(a1, a2))
    if amin == np.inf:
        return np.inf
    b0 = a0 - amin if f0 else 0.0
    b1 = a1 - amin if f1 else 0.0
    b2 = a2 - amin if f2 else 0.0
    if f0 and f1 and f2:
        q00, q01, q02 = Q[0, 0], Q[0, 1], Q[0, 2]
        q11, q12, q22 = Q[1, 1], Q[1, 2], Q[2, 2]
        c00 = q11 * q22 - q12 * q12
        c01 = q02 * q12 - q01 * q22
        c02 = q01 * q12 - q02 * q11
        c11 = q00 * q22 - q02 * q02
        c12 = q01 * q02 - q00 * q12
        c22 = q00 * q11 - q01 * q01
        det = q00 * c00 + q01 * c01 + q02 * c02
        if det > 0.0:
            u0 = (c00 + c01 + c02) / det
            u1 = (c01 + c11 + c12) / det
            u2 = (c02 + c12 + c22) / det
            alpha = u0 + u1 + u2
            beta = u0 * b0 + u1 * b1 + u2 * b2
            w0 = (c00 * b0 + c01 * b1 + c02 * b2) / det
            w1 = (c01 * b0 + c11 * b1 + c12 * b2) / det
            w2 = (c02 * b0 + c12 * b1 + c22 * b2) / det
            gamma = b0 * w0 + b1 * w1 + b2 * w2
            disc = beta * beta - alpha * (gamma - 1.0)
            if disc > 0.0 and alpha > 0.0:
                sd = np.sqrt(disc)
                nu = (beta + sd) / alpha
                m0 = nu * u0 - w0
                m1 = nu * u1 - w1
                m2 = nu * u2 - w2
                tol = -_NEG_TOL * sd
                if m0 >= tol and m1 >= tol and m2 >= tol:
                    # stationary point inside the simplex: global minimum (convexity)
                    m0 = max(m0, 0.0)
                    m1 = max(m1, 0.0)
                    m2 = max(m2, 0.0)
                    s = m0 + m1 + m2
                    lam[0] = m0 / s
                    lam[1] = m1 / s
                    lam[2] = m2 / s
                    return nu + amin
        best, w = _edge_min(b0, b1, q00, q01, q11)
        lam[0] = w
        lam[1] = 1.0 - w
        v, w = _edge_min(b0, b2, q00, q02, q22)
        if v < best:
            best = v
            lam[0] = w
            lam[1] = 0.0
            lam[2] = 1.0 - w
        v, w = _edge_min(b1, b2, q11, q12, q22)
        if v < best:
            best = v
            lam[0] = 0.0
            lam[1] = w
            lam[2] = 1.0 - w
        return best + amin
    if f0 and f1:
        best, w = _edge_min(b0, b1, Q[0, 0], Q[0, 1], Q[1, 1])
        lam[0] = w
        lam[1] = 1.0 - w
    elif f0 and f2:
        best, w = _edge_min(b0, b2, Q[0, 0], Q[0, 2], Q[2, 2])
        lam[0] = w
        lam[2] = 1.0 - w
    elif f1 and f2:
        best, w = _edge_min(b1, b2, Q[1, 1], Q[1, 2], Q[2, 2])
        lam[1] = w
        lam[2] = 1.0 - w
    elif f0:
        best = np.sqrt(Q[0, 0])
        lam[0] = 1.0
    elif f1:
        best = np.sqrt(Q[1, 1])
        lam[1] = 1.0
    else:
        best = np.sqrt(Q[2, 2])
        lam[2] = 1.0
    return best + amin


@njit(cache=True)
def face_min(a, Q, method, n_iter, lam):
    """Minimise ``a.lam + sqrt(lam^T Q lam)`` over the simplex.

    Face vertices with ``a = inf`` are excluded.  Returns the minimum (inf if
    all are excluded) and writes the minimiser into ``lam``.
    """
    if method == METHOD_EXACT:
        return face_min_exact(a[0], a[1], a[2], Q, lam)
    amin = np.inf
    nfin = 0
    for i in range(3):
        if a[i] < np.inf:
            nfin += 1
            if a[i] < amin:
                amin = a[i]
    lam[:] = 0.0
    if nfin == 0:
        return np.inf
    b = np.empty(3)
    mask = np.zeros(3, dtype=np.bool_)
    for i in range(3):
        if a[i] < np.inf:
            b[i] = a[i] - amin
            mask[i] = True
        else:
            b[i] = 0.0
    # best vertex
    best = np.inf
    for i in range(3):
        if mask[i]:
            v = b[i] + np.sqrt(Q[i, i])
            if v < best:
                best = v
                lam[:] = 0.0
                lam[i] = 1.0
    if nfin == 1:
        return best + amin
    # projected FISTA with a fixed iteration count, warm-started at the best vertex
    trace = 0.0
    for i in range(3):
        if mask[i]:
            trace += Q[i, i]
    dmin2 = np.inf
    for i in range(3):
        if mask[i]:
            dmin2 = min(dmin2, Q[i, i])
    # step size from the Hessian bound Q / r, with r bounded below by the
    # distance to the affine hull of the face: min lam^T Q lam = 1 / (1^T Q^-1 1)
    hull = np.inf
    idx = np.zeros(3, dtype=np.int64)
    k = 0
    for i in range(3):
        if mask[i]:
            idx[k] = i
            k += 1
    if k == 2:
        i, j = idx[0], idx[1]
        det = Q[i, i] * Q[j, j] - Q[i, j] * Q[i, j]
        den = Q[i, i] + Q[j, j] - 2.0 * Q[i, j]
        if den > 0.0:
            hull = det / den
    else:
        a00, a01, a02 = Q[0, 0], Q[0, 1], Q[0, 2]
        a11, a12, a22 = Q[1, 1], Q[1, 2], Q[2, 2]
        c00 = a11 * a22 - a12 * a12
        c01 = a02 * a12 - a01 * a22
        c02 = a01 * a12 - a02 * a11
        c11 = a00 * a22 - a02 * a02
        c12 = a01 * a02 - a00 * a12
        c22 = a00 * a11 - a01 * a01
        det = a00 * c00 + a01 * c01 + a02 * c02
        s = c00 + c11 + c22 + 2.0 * (c01 + c02 + c12)
        if s > 0.0:
            hull = det / s
    if not hull > 0.0 or hull == np.inf:
        hull = dmin2
    L = trace / np.sqrt(hull)
    x = lam.copy()
    x_prev = lam.copy()
    y = lam.copy()
    t = 1.0
    grad = np.empty(3)
    for _ in range(n_iter):
        q = 0.0
        for i in range(3):
            for j in range(3):
                q += y[i] * Q[i, j] * y[j]
        r = np.sqrt(max(q, 1e-300))
        for i in range(3):
            g = b[i]
            for j in range(3):
                g += Q[i, j] * y[j] / r
            grad[i] = y[i] - g / L
        x_prev[:] = x
        _project_simplex(grad, mask, x)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        for i in range(3):
            y[i] = x[i] + (t - 1.0) / t_new * (x[i] - x_prev[i])
        t = t_new
    v = _objective(b, Q, x)
    if v < best:
        best = v
        lam[:] = x
    return best + amin


@njit(cache=True)
def vertex_update(v, vptr, opp, Q, lb, tau, method, n_iter, lam_out, lam):
    """Hopf-Lax candidate for vertex v: (value, entry), entry -1 when no face is reachable.

    ``lam`` is scratch space of length 3.
    """
    best = np.inf
    best_e = -1
    a = lam_out  # placeholder to type the FISTA branch
    for e in range(vptr[v], vptr[v + 1]):
        a0 = tau[opp[e, 0]]
        a1 = tau[opp[e, 1]]
        a2 = tau[opp[e, 2]]
        amin = min(a0, min(a1, a2))
        if amin == np.inf or amin + lb[e] >= best:
            continue
        if method == METHOD_EXACT:
            val = face_min_exact(a0, a1, a2, Q[e], lam)
        else:
            a = np.empty(3)
            a[0] = a0
            a[1] = a1
            a[2] = a2
            val = face_min(a, Q[e], method, n_iter, lam)
        if val < best:
            best = val
            best_e = e
            lam_out[0] = lam[0]
            lam_out[1] = lam[1]
            lam_out[2] = lam[2]
    return best, best_e


@njit(cache=True)
def jacobi_solve(vptr, opp, Q, lb, nptr, nidx, tau, active, tol, max_iters, method, n_iter):
    """Synchronous fixed-point sweeps, in place on ``tau``.

    ``active`` marks the vertices to evaluate in the first sweep.  A vertex
    whose neighbours did not change keeps its value, so skipping it gives the
    same iterates as a full sweep.  Returns (sweeps, last max decrease).
    """
    n = tau.shape[0]
    new = tau.copy()
    changed = np.zeros(n, dtype=np.bool_)
    lam = np.zeros(3)
    scratch = np.zeros(3)
    it = 0
    maxdec = np.inf
    while it < max_iters:
        it += 1
        maxdec = 0.0
        nchanged = 0
        for v in range(n):
            if not active[v]:
                continue
            val, _ = vertex_update(v, vptr, opp, Q, lb, tau, method, n_iter, lam, scratch)
            if val < tau[v]:
                dec = tau[v] - val
                new[v] = val
                changed[v] = True
                nchanged += 1
                if dec > maxdec:
                    maxdec = dec
        active[:] = False
        for v in range(n):
            if changed[v]:
                tau[v] = new[v]
                for k in range(nptr[v], nptr[v + 1]):
                    active[nidx[k]] = True
                changed[v] = False
        if maxdec < tol:
            break
    return it, maxdec


@njit(cache=True)
def provenance(vptr, opp, Q, lb, tau, seed_val, method, n_iter):
    """Record how each vertex attains its value in the converged map.

    kind: 0 = unreached, 1 = seed, 2 = face.  For faces, ``parents`` holds
    the opposite vertices, ``lam`` the minimiser, ``entry`` the neighbourhood
    entry and ``dist`` the metric length of the last segment.  ``replay`` is
    the value the record reproduces; the seed wins exact ties.
    """
    n = tau.shape[0]
    kind = np.zeros(n, dtype=np.int8)
    parents = np.full((n, 3), -1, dtype=np.int64)
    lams = np.zeros((n, 3))
    entry = np.full(n, -1, dtype=np.int64)
    dist = np.zeros(n)
    replay = np.full(n, np.inf)
    lam = np.zeros(3)
    scratch = np.zeros(3)
    for v in range(n):
        val, e = vertex_update(v, vptr, opp, Q, lb, tau, method, n_iter, lam, scratch)
        if seed_val[v] <= val and seed_val[v] < np.inf:
            kind[v] = 1
            replay[v] = seed_val[v]
        elif e >= 0:
            kind[v] = 2
            replay[v] = val
            entry[v] = e
            q = 0.0
            for i in range(3):
                parents[v, i] = opp[e, i]
                lams[v, i] = lam[i]
                for j in range(3):
                    q += lam[i] * Q[e, i, j] * lam[j]
            dist[v] = np.sqrt(q)
    return kind, parents, lams, entry, dist, replay


@njit(cache=True)
def backprop_ordered(order, kind, parents, lams, c, tol, max_passes):
    """Solve ``w = c + J^T w`` by pushing weights to parents in ``order``.

    ``order`` lists vertices by decreasing tau, so for causal records one
    pass is exact.  Contributions to parents that were already visited are
    collected and propagated again in further passes until they fall below
    ``tol`` relative to the accumulated weights.  Returns (w, passes).
    """
    n = kind.shape[0]
    rank = np.empty(n, dtype=np.int64)
    for ii in range(n):
        rank[order[ii]] = ii
    w = np.zeros(n)
    cur = c.copy()
    nxt = np.zeros(n)
    passes = 0
    while passes < max_passes:
        passes += 1
        late = 0.0
        for ii in range(n):
            v = order[ii]
            x = cur[v]
            if x == 0.0:
                continue
            cur[v] = 0.0
            w[v] += x
            if kind[v] != 2:
                continue
            for k in range(3):
                lk = lams[v, k]
                if lk == 0.0:
                    continue
                p = parents[v, k]
                if rank[p] > ii:
                    cur[p] += lk * x
                else:
                    nxt[p] += lk * x
                    late = max(late, abs(lk * x))
        scale = 0.0
        for v in range(n):
            scale = max(scale, abs(w[v]))
        if late <= tol * scale:
            for v in range(n):
                w[v] += nxt[v]
            break
        tmp = cur
        cur = nxt
        nxt = tmp
    return w, passes


@njit(cache=True)
def trace_activators(order, kind, parents, lams, seed_source, act):
    """Follow the heaviest face weight back to a seed, visiting vertices in ``order``."""
    n = order.shape[0]
    for v in range(kind.shape[0]):
        act[v] = seed_source[v] if kind[v] == 1 else -1
    for sweep in range(n):
        missing = 0
        for ii in range(n):
            v = order[ii]
            if kind[v] != 2 or act[v] >= 0:
                continue
            k = 0
            for j in range(1, 3):
                if lams[v, j] > lams[v, k]:
                    k = j
            act[v] = act[parents[v, k]]
            if act[v] < 0:
                missing += 1
        if missing == 0:
            break
