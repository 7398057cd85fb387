"""Pure-numpy implementations of the hot kernels.

These mirror the compiled kernels in ``_ckernels.pyx`` operation by
operation and are used when the extension is not built (or when
``POTMFG_BACKEND=python`` is set).  Loops over nodes and paths are
vectorised; loops over time steps stay in Python.
"""

from __future__ import annotations

import numpy as np


def phi_value(r, theta, delta, keps, k0):
    """Non-increasing repulsion rate with cubic Hermite blends between plateaus."""
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        s1 = (r - theta) / theta
        s2 = (r - delta) / delta
    conds = [r <= theta, r < 2 * theta, r <= delta, r < 2 * delta]
    choices = [
        np.full_like(r, keps),
        keps + (k0 - keps) * s1 * s1 * (3.0 - 2.0 * s1),
        np.full_like(r, k0),
        k0 * (1.0 - s2 * s2 * (3.0 - 2.0 * s2)),
    ]
    return np.select(conds, choices, default=0.0)


def interp_points(lookup, N, n, values, pts):
    """Barycentric interpolation in the Kuhn triangulation of cumulative coordinates."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    npts = pts.shape[0]
    y = np.clip(pts, 0.0, None)
    s = y.sum(axis=1, keepdims=True)
    y = np.where(s > 1.0, y / np.where(s > 0, s, 1.0), y)
    u = np.clip(np.cumsum(y, axis=1) * N, None, float(N))
    u = np.maximum.accumulate(u, axis=1)
    base = np.minimum(np.floor(u), N - 1).astype(np.int64)
    r = u - base
    order = np.argsort(-r, axis=1, kind="stable")
    rs = np.take_along_axis(r, order, axis=1)
    rows = np.arange(npts)
    strides = (N + 1) ** np.arange(n, dtype=np.int64)
    vert = base.copy()
    out = np.zeros((npts, values.shape[1]))
    total = np.zeros(npts)
    for kk in range(n + 1):
        if kk > 0:
            vert[rows, order[:, kk - 1]] += 1
        if kk == 0:
            wt = 1.0 - rs[:, 0]
        elif kk == n:
            wt = rs[:, n - 1]
        else:
            wt = rs[:, kk - 1] - rs[:, kk]
        counts = np.diff(vert, axis=1, prepend=0)
        valid = (wt > 0) & np.all(counts >= 0, axis=1) & (vert[:, n - 1] <= N)
        flat = np.where(valid, np.clip(counts, 0, N) @ strides, 0)
        node = np.where(valid, lookup[flat], -1)
        valid &= node >= 0
        out[valid] += wt[valid, None] * values[node[valid]]
        total[valid] += wt[valid]
    return out / total[:, None]


def hjb_backward(p, nbr, h, terminal, running, phi, cap, eps, dt, nsteps, save_every):
    """Explicit monotone backward scheme for the (possibly degenerate-viscous) HJB.

    One step: ``v <- v + dt * (running + sum_{i!=j} p_i [(a+phi_j) D_ij + a^2/2]
    + (eps^2/2) sum_{i<j} p_i p_j D2_ij)`` with ``D_ij`` the forward lattice
    difference for a unit move of mass from i to j and ``a = clip(-D_ij, 0, cap)``.
    """
    nn, d = p.shape
    nsave = nsteps // save_every + 1
    out = np.empty((nsave, nn))
    v = np.array(terminal, dtype=float)
    out[0] = v
    moves = []
    for i in range(d):
        for j in range(d):
            if i != j:
                m = np.flatnonzero(p[:, i] > 0)
                moves.append((m, nbr[m, i, j], p[m, i], phi[m, j]))
    pairs = []
    for i in range(d):
        for j in range(i + 1, d):
            m = np.flatnonzero(p[:, i] * p[:, j] > 0)
            pairs.append((m, nbr[m, i, j], nbr[m, j, i], 0.5 * eps * eps * p[m, i] * p[m, j] / (h * h)))
    for step in range(nsteps):
        acc = np.array(running, dtype=float)
        for m, y, pi, ph in moves:
            D = (v[y] - v[m]) / h
            a = np.clip(-D, 0.0, cap)
            acc[m] += pi * ((a + ph) * D + 0.5 * a * a)
        if eps > 0:
            for m, y1, y2, wgt in pairs:
                acc[m] += wgt * (v[y1] - 2.0 * v[m] + v[y2])
        v = v + dt * acc
        if (step + 1) % save_every == 0:
            out[(step + 1) // save_every] = v
    return out


def linear_backward(p, nbr, h, terminal, rates, source, eps, dt, nsteps, save_every):
    """Explicit scheme for a linear backward Kimura equation with upwind transport.

    ``rates[s, x, i, j]`` and ``source[s, x]`` are given on output slices
    (slice s at step ``s * save_every``) and interpolated linearly in steps.
    """
    nn, d = p.shape
    ns = rates.shape[0]
    nsave = nsteps // save_every + 1
    out = np.empty((nsave, nn))
    v = np.array(terminal, dtype=float)
    out[0] = v
    moves = []
    for i in range(d):
        for j in range(d):
            if i != j:
                m = np.flatnonzero(p[:, i] > 0)
                moves.append((i, j, m, nbr[m, i, j], p[m, i]))
    pairs = []
    for i in range(d):
        for j in range(i + 1, d):
            m = np.flatnonzero(p[:, i] * p[:, j] > 0)
            pairs.append((m, nbr[m, i, j], nbr[m, j, i], 0.5 * eps * eps * p[m, i] * p[m, j] / (h * h)))
    for step in range(nsteps):
        pos = step / save_every
        s0 = min(int(np.floor(pos)), ns - 1)
        w = pos - s0 if s0 + 1 < ns else 0.0
        s1 = min(s0 + 1, ns - 1)
        acc = (1.0 - w) * source[s0] + w * source[s1]
        for i, j, m, y, pi in moves:
            r = (1.0 - w) * rates[s0, m, i, j] + w * rates[s1, m, i, j]
            acc[m] += pi * r * ((v[y] - v[m]) / h)
        if eps > 0:
            for m, y1, y2, wgt in pairs:
                acc[m] += wgt * (v[y1] - 2.0 * v[m] + v[y2])
        v = v + dt * acc
        if (step + 1) % save_every == 0:
            out[(step + 1) // save_every] = v
    return out


def _time_slot(t, t0s, dts, ns):
    if ns == 1:
        return 0, 0.0
    pos = (t - t0s) / dts
    pos = min(max(pos, 0.0), ns - 1.0)
    s0 = int(np.floor(pos))
    if s0 >= ns - 1:
        return ns - 1, 0.0
    return s0, pos - s0


def _field_at(arr, t, t0s, dts, lookup, N, n, x):
    s0, w = _time_slot(t, t0s, dts, arr.shape[0])
    vals = interp_points(lookup, N, n, arr[s0], x)
    if w > 0.0:
        vals = (1.0 - w) * vals + w * interp_points(lookup, N, n, arr[s0 + 1], x)
    return vals


def simulate_chunk(p0s, q0s, with_q, noise, t0, dt, nsteps, save_every, eps, cap, theta, delta,
                   keps, k0, mode, vfield, vt0, vdt, alpha_sl, alt0, aldt, aux, at0, adt,
                   aux_theta, lookup, N, n, inv_delta, p_out, q_out, acc, status):
    """Euler-Maruyama for a chunk of Wright-Fisher paths (vectorised over paths)."""
    B, d = p0s.shape
    p = p0s.copy()
    q = q0s.copy()
    pairs = [(a, b) for a in range(d) for b in range(a + 1, d)]
    has_aux = aux.shape[1] > 0
    alive = np.ones(B, dtype=bool)

    def evaluate(t, p, q):
        x = p[:, :n]
        if mode == 0:
            V = _field_at(vfield, t, vt0, vdt, lookup, N, n, x)
            alpha = np.clip(V[:, :, None] - V[:, None, :], 0.0, cap)
        else:
            s0, _ = _time_slot(t, alt0, aldt, alpha_sl.shape[0])
            alpha = np.broadcast_to(alpha_sl[s0], (p.shape[0], d, d)).copy()
        for a in range(d):
            alpha[:, a, a] = 0.0
        lag = 0.5 * np.sum(alpha * alpha, axis=2)
        ip = np.sum(p * lag, axis=1)
        iq = np.sum(q * lag, axis=1)
        ixi = np.zeros(p.shape[0])
        if has_aux:
            A = _field_at(aux, t, at0, adt, lookup, N, n, x)
            ip = ip + A[:, 0]
            iq = iq + np.sum(q * A[:, 1 : 1 + d], axis=1)
            if aux_theta:
                ixi = np.sum(q * A[:, 1 + d : 1 + 2 * d], axis=1)
        small = p <= inv_delta
        inv = np.where(small, 1.0 / np.maximum(p, 1e-300), 0.0).sum(axis=1)
        return alpha, ip, iq, ixi, inv

    alpha, ip0, iq0, ix0, in0 = evaluate(t0, p, q)
    p_out[:, 0] = p
    q_out[:, 0] = q
    sq = np.sqrt(dt)
    for k in range(nsteps):
        t = t0 + k * dt
        ph = phi_value(p, theta, delta, keps, k0)
        drift_p = np.zeros_like(p)
        drift_q = np.zeros_like(q)
        for a in range(d):
            for b in range(d):
                if b == a:
                    continue
                drift_p[:, a] += p[:, b] * (ph[:, a] + alpha[:, b, a]) - p[:, a] * (ph[:, b] + alpha[:, a, b])
                drift_q[:, a] += q[:, b] * (ph[:, a] + alpha[:, b, a]) - q[:, a] * (ph[:, b] + alpha[:, a, b])
        noise_p = np.zeros_like(p)
        noise_q = np.zeros_like(q)
        for c, (a, b) in enumerate(pairs):
            xi = noise[:, k, c] * sq * eps
            s = np.sqrt(np.maximum(p[:, a], 0.0) * np.maximum(p[:, b], 0.0))
            noise_p[:, a] += s * xi
            noise_p[:, b] -= s * xi
            if with_q:
                for e, sign in ((a, 1.0), (b, -1.0)):
                    pos = p[:, e] > 0
                    ratio = np.where(pos, q[:, e] / np.where(pos, p[:, e], 1.0), 0.0)
                    bad = (~pos) & (q[:, e] != 0)
                    status[bad & alive] |= 2
                    if sign > 0:
                        noise_q[:, e] += ratio * s * xi
                    else:
                        noise_q[:, e] -= ratio * s * xi
        p_new = p + dt * drift_p + noise_p
        q_new = q + dt * drift_q + noise_q
        jump = np.max(np.abs(p_new - p), axis=1) > 0.5
        newly = jump & alive
        status[newly] |= 1
        alive &= ~jump
        acc[:, 4] += np.where(alive, np.sum(np.maximum(-p_new, 0.0), axis=1), 0.0)
        acc[:, 5] += np.where(alive, np.sum(np.maximum(-q_new, 0.0), axis=1), 0.0)
        cp = np.maximum(p_new, 0.0)
        tot = cp.sum(axis=1, keepdims=True)
        p_next = cp / tot
        q_next = np.maximum(q_new, 0.0) / tot
        p = np.where(alive[:, None], p_next, p)
        q = np.where(alive[:, None], q_next, q)
        alpha, ip1, iq1, ix1, in1 = evaluate(t + dt, p, q)
        half = 0.5 * dt
        acc[:, 0] += np.where(alive, half * (ip0 + ip1), 0.0)
        acc[:, 1] += np.where(alive, half * (iq0 + iq1), 0.0)
        acc[:, 2] += np.where(alive, half * (ix0 + ix1), 0.0)
        acc[:, 3] += np.where(alive, half * (in0 + in1), 0.0)
        ip0, iq0, ix0, in0 = ip1, iq1, ix1, in1
        if (k + 1) % save_every == 0:
            j = (k + 1) // save_every
            p_out[:, j] = p
            q_out[:, j] = q
    return status
