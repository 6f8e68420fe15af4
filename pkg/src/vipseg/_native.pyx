# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_fallback.py``.

Matrix products go through BLAS (``scipy.linalg.cython_blas``); everything
else is fused per row so one image is scored without temporaries of size
[n, C, C].
"""

import numpy as np

from libc.math cimport exp, log, INFINITY
from scipy.linalg.cython_blas cimport dgemm

IMPLEMENTATION = "cython"

AGG_FREE_ENERGY = 0
AGG_MAX = 1
AGG_MEAN = 2


cdef void _matmul(double[:, ::1] a, double[:, ::1] b, double[:, ::1] out) noexcept nogil:
    # row-major out = a @ b, expressed as column-major out^T = b^T a^T
    cdef int m = <int>b.shape[1]
    cdef int n = <int>a.shape[0]
    cdef int k = <int>a.shape[1]
    cdef double one = 1.0, zero = 0.0
    cdef char trans = b'N'
    if m == 0 or n == 0:
        return
    dgemm(&trans, &trans, &m, &n, &k, &one, &b[0, 0], &m, &a[0, 0], &k, &zero, &out[0, 0], &m)


def softmax_rows(z):
    cdef double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef Py_ssize_t n = zv.shape[0], k = zv.shape[1], i, j
    out = np.empty((n, k))
    cdef double[:, ::1] ov = out
    cdef double top, tot
    with nogil:
        for i in range(n):
            top = zv[i, 0]
            for j in range(1, k):
                if zv[i, j] > top:
                    top = zv[i, j]
            tot = 0.0
            for j in range(k):
                ov[i, j] = exp(zv[i, j] - top)
                tot += ov[i, j]
            for j in range(k):
                ov[i, j] /= tot
    return out


def transition_matrix(a, double alpha):
    cdef double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0], m = av.shape[1], i, j
    out = np.empty((n, m))
    cdef double[:, ::1] ov = out
    cdef double deg
    cdef int isolated = 0
    with nogil:
        for i in range(n):
            deg = 0.0
            for j in range(m):
                ov[i, j] = av[i, j] ** alpha
                deg += ov[i, j]
            if deg <= 0.0:
                isolated += 1
                for j in range(m):
                    ov[i, j] = 0.0
                ov[i, i] = 1.0
            else:
                for j in range(m):
                    ov[i, j] /= deg
    return out, isolated


def propagate(w, m, int beta):
    cdef double[:, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    arr = np.array(m, dtype=np.float64, order="C", copy=True)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[:, None].copy()
    cdef double[:, ::1] cur = arr
    cdef double[:, ::1] nxt = np.empty_like(arr)
    cdef double[:, ::1] tmp
    cdef int step
    with nogil:
        for step in range(beta):
            _matmul(wv, cur, nxt)
            tmp = cur
            cur = nxt
            nxt = tmp
    res = np.asarray(cur)
    return res[:, 0] if squeeze else res


def score_substitutions(canon, cand, cand_class, w, int beta, double threshold):
    cdef double[:, ::1] zc = np.ascontiguousarray(canon, dtype=np.float64)
    cdef double[:, ::1] zq = np.ascontiguousarray(cand, dtype=np.float64)
    cdef long[::1] cls = np.ascontiguousarray(cand_class, dtype=np.int64)
    cdef double[:, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t n = zc.shape[0], c_n = zc.shape[1], q_n = zq.shape[1]
    cdef Py_ssize_t i, j, c, q

    rr_a = np.empty((n, c_n))
    pp_a = np.empty((n, c_n))
    ee_a = np.empty((n, c_n))
    m_a = np.empty((n, q_n))
    ent_a = np.empty((n, q_n))
    cdef double[:, ::1] rr = rr_a, pp = pp_a, ee = ee_a, mm = m_a, ent = ent_a
    cdef double top, second, r, p, e, x, big, s_rest, own, tot, h
    cdef Py_ssize_t top_j

    with nogil:
        for i in range(n):
            top = -INFINITY
            second = -INFINITY
            top_j = -1
            for j in range(c_n):
                x = zc[i, j]
                if x > top:
                    second = top
                    top = x
                    top_j = j
                elif x > second:
                    second = x
            for c in range(c_n):
                r = second if c == top_j else top
                p = 0.0
                e = 0.0
                if r > -INFINITY:
                    for j in range(c_n):
                        if j != c:
                            x = exp(zc[i, j] - r)
                            p += x
                            e += x * zc[i, j]
                rr[i, c] = r
                pp[i, c] = p
                ee[i, c] = e
            for q in range(q_n):
                c = cls[q]
                x = zq[i, q]
                r = rr[i, c]
                big = x if x > r else r
                s_rest = exp(r - big) if r > -INFINITY else 0.0
                own = exp(x - big)
                tot = pp[i, c] * s_rest + own
                mm[i, q] = own / tot
                h = big + log(tot) - (ee[i, c] * s_rest + own * x) / tot
                ent[i, q] = h if h > 0.0 else 0.0

    mt_a = propagate(wv, m_a, beta)
    cdef double[:, ::1] mt = mt_a
    vg_a = np.full(q_n, np.nan)
    sc_a = np.full(q_n, np.nan)
    count_a = np.zeros(q_n, dtype=np.int64)
    cdef double[::1] vg = vg_a, sc = sc_a
    cdef long[::1] cnt = count_a
    cdef double inter, s_m, s_t, ent_sum, den
    cdef long k
    with nogil:
        for q in range(q_n):
            inter = 0.0
            s_m = 0.0
            s_t = 0.0
            ent_sum = 0.0
            k = 0
            for i in range(n):
                if mm[i, q] >= threshold:
                    k += 1
                    inter += mm[i, q] * mt[i, q]
                    s_m += mm[i, q]
                    s_t += mt[i, q]
                    ent_sum += ent[i, q]
            cnt[q] = k
            if k > 0:
                den = s_m + s_t - inter
                vg[q] = inter / den if den > 0.0 else 0.0
                sc[q] = ent_sum / k
    return vg_a, sc_a, count_a


cdef void _free_energy_row(double[:, ::1] s, Py_ssize_t i, Py_ssize_t lo, Py_ssize_t hi,
                           double[::1] weight, double tau, double* out) noexcept nogil:
    cdef Py_ssize_t k
    cdef double top = -INFINITY, tot = 0.0, v
    for k in range(lo, hi):
        v = weight[k] * s[i, k]
        if v > top:
            top = v
    for k in range(lo, hi):
        tot += exp(tau * (weight[k] * s[i, k] - top))
    out[0] = top + log(tot) / tau


def free_energy(s, double tau):
    cdef double[:, ::1] sv = np.ascontiguousarray(s, dtype=np.float64)
    cdef Py_ssize_t n = sv.shape[0], k = sv.shape[1], i
    cdef double[::1] ones = np.ones(k)
    out = np.empty(n)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            _free_energy_row(sv, i, 0, k, ones, tau, &ov[i])
    return out


def aggregate_groups(probs, gsim, group_ptr, double tau, int mode):
    cdef double[:, ::1] pv = np.ascontiguousarray(probs, dtype=np.float64)
    cdef double[::1] gv = np.ascontiguousarray(gsim, dtype=np.float64)
    cdef long[::1] ptr = np.ascontiguousarray(group_ptr, dtype=np.int64)
    cdef Py_ssize_t n = pv.shape[0], n_cls = ptr.shape[0] - 1, i, c, k, lo, hi
    out = np.empty((n, n_cls))
    cdef double[:, ::1] ov = out
    cdef double[::1] delta = np.empty(pv.shape[1])
    cdef double gmax, tot, v
    with nogil:
        for c in range(n_cls):
            lo = ptr[c]
            hi = ptr[c + 1]
            if mode == 0:  # AGG_FREE_ENERGY
                gmax = -INFINITY
                for k in range(lo, hi):
                    if gv[k] > gmax:
                        gmax = gv[k]
                tot = 0.0
                for k in range(lo, hi):
                    delta[k] = exp(gv[k] - gmax)
                    tot += delta[k]
                for k in range(lo, hi):
                    delta[k] /= tot
                for i in range(n):
                    _free_energy_row(pv, i, lo, hi, delta, tau, &ov[i, c])
            elif mode == 1:  # AGG_MAX
                for i in range(n):
                    v = pv[i, lo]
                    for k in range(lo + 1, hi):
                        if pv[i, k] > v:
                            v = pv[i, k]
                    ov[i, c] = v
            else:
                for i in range(n):
                    v = 0.0
                    for k in range(lo, hi):
                        v += pv[i, k]
                    ov[i, c] = v / (hi - lo)
    return out
