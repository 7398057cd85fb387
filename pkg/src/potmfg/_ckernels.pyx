# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.

Same algorithms and argument conventions as ``_pykernels``; the time-step
loops run without the GIL so path shards can be processed by threads.
"""

import numpy as np
from libc.math cimport sqrt, floor, fabs

cdef enum:
    MAXD = 8


cdef inline double phi_eval(double r, double theta, double delta, double keps, double k0) noexcept nogil:
    cdef double s
    if r <= theta:
        return keps
    if r < 2.0 * theta:
        s = (r - theta) / theta
        return keps + (k0 - keps) * s * s * (3.0 - 2.0 * s)
    if r <= delta:
        return k0
    if r < 2.0 * delta:
        s = (r - delta) / delta
        return k0 * (1.0 - s * s * (3.0 - 2.0 * s))
    return 0.0


def phi_value(r, double theta, double delta, double keps, double k0):
    arr = np.asarray(r, dtype=float)
    flat = np.ascontiguousarray(arr).ravel()
    out = np.empty_like(flat)
    cdef const double[::1] src = flat
    cdef double[::1] dst = out
    cdef Py_ssize_t i
    for i in range(src.shape[0]):
        dst[i] = phi_eval(src[i], theta, delta, keps, k0)
    return out.reshape(arr.shape)


cdef int locate(const double* x, long n, long N, const long* lookup, long* idx, double* w) noexcept nogil:
    """Vertices and barycentric weights of the lattice simplex containing x."""
    cdef double xs[MAXD]
    cdef double u[MAXD]
    cdef double r[MAXD]
    cdef long base[MAXD]
    cdef long order[MAXD]
    cdef long vert[MAXD]
    cdef double s = 0.0, acc = 0.0, tot = 0.0, wt
    cdef long m, a, c, key, kk, cnt = 0, flat, prev, stride, cval, node
    cdef int valid
    for m in range(n):
        xs[m] = x[m] if x[m] > 0.0 else 0.0
        s += xs[m]
    if s > 1.0:
        for m in range(n):
            xs[m] = xs[m] / s
    for m in range(n):
        acc += xs[m]
        u[m] = acc * N
        if u[m] > N:
            u[m] = N
        if m > 0 and u[m] < u[m - 1]:
            u[m] = u[m - 1]
    for m in range(n):
        base[m] = <long> floor(u[m])
        if base[m] > N - 1:
            base[m] = N - 1
        r[m] = u[m] - base[m]
        order[m] = m
        vert[m] = base[m]
    for a in range(1, n):
        key = order[a]
        c = a - 1
        while c >= 0 and r[order[c]] < r[key]:
            order[c + 1] = order[c]
            c -= 1
        order[c + 1] = key
    for kk in range(n + 1):
        if kk > 0:
            vert[order[kk - 1]] += 1
        if kk == 0:
            wt = 1.0 - r[order[0]]
        elif kk == n:
            wt = r[order[n - 1]]
        else:
            wt = r[order[kk - 1]] - r[order[kk]]
        if wt <= 0.0:
            continue
        valid = 1
        flat = 0
        prev = 0
        stride = 1
        for m in range(n):
            cval = vert[m] - prev
            prev = vert[m]
            if cval < 0:
                valid = 0
                break
            flat += cval * stride
            stride *= (N + 1)
        if valid == 0 or vert[n - 1] > N:
            continue
        node = lookup[flat]
        if node < 0:
            continue
        idx[cnt] = node
        w[cnt] = wt
        tot += wt
        cnt += 1
    for c in range(cnt):
        w[c] = w[c] / tot
    return cnt


def interp_points(const long[::1] lookup, long N, long n, const double[:, ::1] values, const double[:, ::1] pts):
    cdef Py_ssize_t npts = pts.shape[0], k = values.shape[1], i, c, j
    out = np.zeros((npts, k))
    cdef double[:, ::1] o = out
    cdef long idx[MAXD]
    cdef double w[MAXD]
    cdef int cnt
    with nogil:
        for i in range(npts):
            cnt = locate(&pts[i, 0], n, N, &lookup[0], idx, w)
            for c in range(cnt):
                for j in range(k):
                    o[i, j] += w[c] * values[idx[c], j]
    return out


def hjb_backward(const double[:, ::1] p, const long[:, :, ::1] nbr, double h, const double[::1] terminal,
                 const double[::1] running, const double[:, ::1] phi, double cap, double eps,
                 double dt, long nsteps, long save_every):
    cdef Py_ssize_t nn = p.shape[0], d = p.shape[1]
    cdef long nsave = nsteps // save_every + 1
    out = np.empty((nsave, nn))
    cur = np.array(terminal, dtype=float)
    nxt = np.empty(nn)
    cdef double[:, ::1] o = out
    cdef double[::1] vc = cur
    cdef double[::1] vn = nxt
    cdef double[::1] tmp
    cdef double v, acc, pi, D, a, wgt, half_e2 = 0.5 * eps * eps, h2 = h * h
    cdef Py_ssize_t x, i, j
    cdef long step
    o[0, :] = vc
    with nogil:
        for step in range(nsteps):
            for x in range(nn):
                v = vc[x]
                acc = running[x]
                for i in range(d):
                    pi = p[x, i]
                    if pi <= 0.0:
                        continue
                    for j in range(d):
                        if j == i:
                            continue
                        D = (vc[nbr[x, i, j]] - v) / h
                        a = -D
                        if a < 0.0:
                            a = 0.0
                        elif a > cap:
                            a = cap
                        acc += pi * ((a + phi[x, j]) * D + 0.5 * a * a)
                if eps > 0.0:
                    for i in range(d):
                        for j in range(i + 1, d):
                            if p[x, i] * p[x, j] > 0.0:
                                wgt = half_e2 * p[x, i] * p[x, j] / h2
                                acc += wgt * (vc[nbr[x, i, j]] - 2.0 * v + vc[nbr[x, j, i]])
                vn[x] = v + dt * acc
            tmp = vc
            vc = vn
            vn = tmp
            if (step + 1) % save_every == 0:
                o[(step + 1) // save_every, :] = vc
    return out


def linear_backward(const double[:, ::1] p, const long[:, :, ::1] nbr, double h, const double[::1] terminal,
                    const double[:, :, :, ::1] rates, const double[:, ::1] source, double eps,
                    double dt, long nsteps, long save_every):
    cdef Py_ssize_t nn = p.shape[0], d = p.shape[1]
    cdef long ns = rates.shape[0]
    cdef long nsave = nsteps // save_every + 1
    out = np.empty((nsave, nn))
    cur = np.array(terminal, dtype=float)
    nxt = np.empty(nn)
    cdef double[:, ::1] o = out
    cdef double[::1] vc = cur
    cdef double[::1] vn = nxt
    cdef double[::1] tmp
    cdef double v, acc, pi, r, wgt, pos, w, half_e2 = 0.5 * eps * eps, h2 = h * h
    cdef Py_ssize_t x, i, j
    cdef long step, s0, s1
    o[0, :] = vc
    with nogil:
        for step in range(nsteps):
            pos = (<double> step) / save_every
            s0 = <long> floor(pos)
            if s0 > ns - 1:
                s0 = ns - 1
            if s0 + 1 < ns:
                w = pos - s0
                s1 = s0 + 1
            else:
                w = 0.0
                s1 = s0
            for x in range(nn):
                v = vc[x]
                acc = (1.0 - w) * source[s0, x] + w * source[s1, x]
                for i in range(d):
                    pi = p[x, i]
                    if pi <= 0.0:
                        continue
                    for j in range(d):
                        if j == i:
                            continue
                        r = (1.0 - w) * rates[s0, x, i, j] + w * rates[s1, x, i, j]
                        acc += pi * r * ((vc[nbr[x, i, j]] - v) / h)
                if eps > 0.0:
                    for i in range(d):
                        for j in range(i + 1, d):
                            if p[x, i] * p[x, j] > 0.0:
                                wgt = half_e2 * p[x, i] * p[x, j] / h2
                                acc += wgt * (vc[nbr[x, i, j]] - 2.0 * v + vc[nbr[x, j, i]])
                vn[x] = v + dt * acc
            tmp = vc
            vc = vn
            vn = tmp
            if (step + 1) % save_every == 0:
                o[(step + 1) // save_every, :] = vc
    return out


cdef inline void time_slot(double t, double t0s, double dts, long ns, long* s0, double* w) noexcept nogil:
    cdef double pos
    if ns == 1:
        s0[0] = 0
        w[0] = 0.0
        return
    pos = (t - t0s) / dts
    if pos < 0.0:
        pos = 0.0
    if pos > ns - 1.0:
        pos = ns - 1.0
    s0[0] = <long> floor(pos)
    if s0[0] >= ns - 1:
        s0[0] = ns - 1
        w[0] = 0.0
    else:
        w[0] = pos - s0[0]


cdef void field_eval(const double[:, :, ::1] arr, double t, double t0s, double dts, long cnt,
                     const long* idx, const double* wts, Py_ssize_t k, double* out) noexcept nogil:
    cdef long s0, c
    cdef double w, val
    cdef Py_ssize_t j
    time_slot(t, t0s, dts, arr.shape[0], &s0, &w)
    for j in range(k):
        val = 0.0
        for c in range(cnt):
            val += wts[c] * arr[s0, idx[c], j]
        if w > 0.0:
            val = (1.0 - w) * val
            for c in range(cnt):
                val += w * wts[c] * arr[s0 + 1, idx[c], j]
        out[j] = val
    return


cdef void evaluate(double t, const double* p, const double* q, long d, long mode,
                   const double[:, :, ::1] vfield, double vt0, double vdt,
                   const double[:, :, ::1] alpha_sl, double alt0, double aldt,
                   const double[:, :, ::1] aux, double at0, double adt, long aux_theta, int has_aux,
                   const long* lookup, long N, long n, double cap, double inv_delta,
                   double* alpha, double* integ) noexcept nogil:
    """Feedback rates (d x d, row-major) and running integrands at (t, p, q)."""
    cdef long idx[MAXD]
    cdef double wts[MAXD]
    cdef double V[MAXD]
    cdef double A[2 * MAXD + 1]
    cdef long cnt, a, b, s0
    cdef double w, r, lag, ip = 0.0, iq = 0.0, ixi = 0.0, inv = 0.0, pa
    cnt = locate(p, n, N, lookup, idx, wts)
    if mode == 0:
        field_eval(vfield, t, vt0, vdt, cnt, idx, wts, d, V)
        for a in range(d):
            for b in range(d):
                r = V[a] - V[b]
                if a == b or r < 0.0:
                    r = 0.0
                elif r > cap:
                    r = cap
                alpha[a * d + b] = r
    else:
        time_slot(t, alt0, aldt, alpha_sl.shape[0], &s0, &w)
        for a in range(d):
            for b in range(d):
                alpha[a * d + b] = 0.0 if a == b else alpha_sl[s0, a, b]
    for a in range(d):
        lag = 0.0
        for b in range(d):
            lag += alpha[a * d + b] * alpha[a * d + b]
        lag = 0.5 * lag
        ip += p[a] * lag
        iq += q[a] * lag
    if has_aux:
        field_eval(aux, t, at0, adt, cnt, idx, wts, aux.shape[2], A)
        ip = ip + A[0]
        lag = 0.0
        for a in range(d):
            lag += q[a] * A[1 + a]
        iq = iq + lag
        if aux_theta:
            for a in range(d):
                ixi += q[a] * A[1 + d + a]
    for a in range(d):
        pa = p[a]
        if pa <= inv_delta:
            inv += 1.0 / (pa if pa > 1e-300 else 1e-300)
    integ[0] = ip
    integ[1] = iq
    integ[2] = ixi
    integ[3] = inv


def simulate_chunk(const double[:, ::1] p0s, const double[:, ::1] q0s, bint with_q,
                   const double[:, :, ::1] noise, double t0, double dt, long nsteps, long save_every,
                   double eps, double cap, double theta, double delta, double keps, double k0,
                   long mode, const double[:, :, ::1] vfield, double vt0, double vdt,
                   const double[:, :, ::1] alpha_sl, double alt0, double aldt,
                   const double[:, :, ::1] aux, double at0, double adt, long aux_theta,
                   const long[::1] lookup, long N, long n, double inv_delta,
                   double[:, :, ::1] p_out, double[:, :, ::1] q_out, double[:, ::1] acc, long[::1] status):
    cdef Py_ssize_t B = p0s.shape[0]
    cdef long d = p0s.shape[1]
    cdef int has_aux = 1 if aux.shape[1] > 0 else 0
    cdef double p[MAXD]
    cdef double q[MAXD]
    cdef double pn[MAXD]
    cdef double qn[MAXD]
    cdef double drp[MAXD]
    cdef double drq[MAXD]
    cdef double nzp[MAXD]
    cdef double nzq[MAXD]
    cdef double ph[MAXD]
    cdef double alpha[MAXD * MAXD]
    cdef double I0[4]
    cdef double I1[4]
    cdef double sq = sqrt(dt), t, xi, s, tot, ratio, half = 0.5 * dt, jump
    cdef Py_ssize_t path, c
    cdef long k, a, b, pair, j, last_saved
    if d > MAXD:
        raise ValueError("too many states for the compiled kernel")
    with nogil:
        for path in range(B):
            for a in range(d):
                p[a] = p0s[path, a]
                q[a] = q0s[path, a]
                p_out[path, 0, a] = p[a]
                q_out[path, 0, a] = q[a]
            last_saved = 0
            evaluate(t0, p, q, d, mode, vfield, vt0, vdt, alpha_sl, alt0, aldt, aux, at0, adt,
                     aux_theta, has_aux, &lookup[0], N, n, cap, inv_delta, alpha, I0)
            for k in range(nsteps):
                t = t0 + k * dt
                for a in range(d):
                    ph[a] = phi_eval(p[a], theta, delta, keps, k0)
                for a in range(d):
                    drp[a] = 0.0
                    drq[a] = 0.0
                    nzp[a] = 0.0
                    nzq[a] = 0.0
                    for b in range(d):
                        if b == a:
                            continue
                        drp[a] += p[b] * (ph[a] + alpha[b * d + a]) - p[a] * (ph[b] + alpha[a * d + b])
                        drq[a] += q[b] * (ph[a] + alpha[b * d + a]) - q[a] * (ph[b] + alpha[a * d + b])
                pair = 0
                for a in range(d):
                    for b in range(a + 1, d):
                        xi = noise[path, k, pair] * sq * eps
                        s = sqrt((p[a] if p[a] > 0.0 else 0.0) * (p[b] if p[b] > 0.0 else 0.0))
                        nzp[a] += s * xi
                        nzp[b] -= s * xi
                        if with_q:
                            if p[a] > 0.0:
                                ratio = q[a] / p[a]
                            else:
                                ratio = 0.0
                                if q[a] != 0.0:
                                    status[path] |= 2
                            nzq[a] += ratio * s * xi
                            if p[b] > 0.0:
                                ratio = q[b] / p[b]
                            else:
                                ratio = 0.0
                                if q[b] != 0.0:
                                    status[path] |= 2
                            nzq[b] -= ratio * s * xi
                        pair += 1
                jump = 0.0
                for a in range(d):
                    pn[a] = p[a] + dt * drp[a] + nzp[a]
                    qn[a] = q[a] + dt * drq[a] + nzq[a]
                    if fabs(pn[a] - p[a]) > jump:
                        jump = fabs(pn[a] - p[a])
                if jump > 0.5:
                    status[path] |= 1
                    break
                tot = 0.0
                for a in range(d):
                    if pn[a] < 0.0:
                        acc[path, 4] += -pn[a]
                        pn[a] = 0.0
                    if qn[a] < 0.0:
                        acc[path, 5] += -qn[a]
                        qn[a] = 0.0
                    tot += pn[a]
                for a in range(d):
                    p[a] = pn[a] / tot
                    q[a] = qn[a] / tot
                evaluate(t + dt, p, q, d, mode, vfield, vt0, vdt, alpha_sl, alt0, aldt, aux, at0, adt,
                         aux_theta, has_aux, &lookup[0], N, n, cap, inv_delta, alpha, I1)
                for c in range(4):
                    acc[path, c] += half * (I0[c] + I1[c])
                    I0[c] = I1[c]
                if (k + 1) % save_every == 0:
                    last_saved = (k + 1) // save_every
                    for a in range(d):
                        p_out[path, last_saved, a] = p[a]
                        q_out[path, last_saved, a] = q[a]
            for j in range(last_saved + 1, p_out.shape[1]):
                for a in range(d):
                    p_out[path, j, a] = p[a]
                    q_out[path, j, a] = q[a]
    return np.asarray(status)
