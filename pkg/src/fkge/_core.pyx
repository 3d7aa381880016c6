# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled TransE kernels; semantics mirror ``fkge._core_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt

cnp.import_array()


cdef inline double _sign(double x) noexcept nogil:
    return <double>(x > 0) - <double>(x < 0)


def transe_sgd_epoch(double[:, ::1] E, double[:, ::1] R, const long long[:, ::1] pos,
                     const long long[:, ::1] neg, Py_ssize_t batch_size, double lr,
                     double margin, int p):
    """One epoch of margin-ranking SGD over pre-shuffled positives/negatives, in place."""
    cdef Py_ssize_t n = pos.shape[0], d = E.shape[1]
    cdef Py_ssize_t start, stop, b, i, j, k, row
    cdef double sp, sn, diff, w, nrm, val
    cdef double[:, ::1] gp = np.zeros((batch_size, d))
    cdef double[:, ::1] gn = np.zeros((batch_size, d))
    cdef double[::1] vp = np.zeros(d)
    cdef double[::1] vn = np.zeros(d)
    cdef char[::1] active = np.zeros(batch_size, dtype=np.int8)
    cdef char[::1] touched = np.zeros(E.shape[0], dtype=np.int8)
    cdef long long[::1] touched_rows = np.zeros(4 * batch_size, dtype=np.int64)
    cdef Py_ssize_t n_touched
    cdef double total = 0.0

    with nogil:
        start = 0
        while start < n:
            stop = start + batch_size
            if stop > n:
                stop = n
            b = stop - start
            w = 1.0 / b
            for i in range(b):
                sp = 0.0
                sn = 0.0
                for j in range(d):
                    vp[j] = E[pos[start + i, 0], j] + R[pos[start + i, 1], j] - E[pos[start + i, 2], j]
                    vn[j] = E[neg[start + i, 0], j] + R[neg[start + i, 1], j] - E[neg[start + i, 2], j]
                    if p == 1:
                        sp += fabs(vp[j])
                        sn += fabs(vn[j])
                    else:
                        sp += vp[j] * vp[j]
                        sn += vn[j] * vn[j]
                if p != 1:
                    sp = sqrt(sp)
                    sn = sqrt(sn)
                diff = margin + sp - sn
                active[i] = diff > 0
                if diff > 0:
                    total += diff
                    for j in range(d):
                        if p == 1:
                            gp[i, j] = _sign(vp[j]) * w
                            gn[i, j] = _sign(vn[j]) * (-w)
                        else:
                            gp[i, j] = (vp[j] / sp if sp > 0 else 0.0) * w
                            gn[i, j] = (vn[j] / sn if sn > 0 else 0.0) * (-w)
            n_touched = 0
            # positives: heads, tails, relations; then negatives in the same order
            for k in range(2):
                for i in range(b):
                    if not active[i]:
                        continue
                    for j in range(d):
                        val = gp[i, j] if k == 0 else gn[i, j]
                        if k == 0:
                            E[pos[start + i, 0], j] += -lr * val
                        else:
                            E[neg[start + i, 0], j] += -lr * val
                for i in range(b):
                    if not active[i]:
                        continue
                    for j in range(d):
                        val = gp[i, j] if k == 0 else gn[i, j]
                        if k == 0:
                            E[pos[start + i, 2], j] += -lr * (-val)
                        else:
                            E[neg[start + i, 2], j] += -lr * (-val)
                for i in range(b):
                    if not active[i]:
                        continue
                    for j in range(d):
                        val = gp[i, j] if k == 0 else gn[i, j]
                        if k == 0:
                            R[pos[start + i, 1], j] += -lr * val
                        else:
                            R[neg[start + i, 1], j] += -lr * val
                for i in range(b):
                    if not active[i]:
                        continue
                    for j in range(0, 3, 2):
                        row = pos[start + i, j] if k == 0 else neg[start + i, j]
                        if not touched[row]:
                            touched[row] = 1
                            touched_rows[n_touched] = row
                            n_touched += 1
            for i in range(n_touched):
                row = touched_rows[i]
                touched[row] = 0
                nrm = 0.0
                for j in range(d):
                    nrm += E[row, j] * E[row, j]
                nrm = sqrt(nrm)
                if nrm > 1.0:
                    for j in range(d):
                        E[row, j] = E[row, j] / nrm
            start = stop
    return total / n if n else 0.0


def transe_candidate_scores(const double[:, ::1] E, const double[:, ::1] R,
                            const long long[::1] anchor, const long long[::1] rel,
                            int p, bint predict_head):
    """Scores of every entity as the missing head (or tail) for each query."""
    cdef Py_ssize_t q = anchor.shape[0], n = E.shape[0], d = E.shape[1]
    cdef Py_ssize_t a, e, j
    cdef double s, v
    out_arr = np.empty((q, n))
    cdef double[:, ::1] out = out_arr
    cdef double[::1] base = np.empty(d)
    with nogil:
        for a in range(q):
            for j in range(d):
                if predict_head:
                    base[j] = R[rel[a], j] - E[anchor[a], j]
                else:
                    base[j] = E[anchor[a], j] + R[rel[a], j]
            for e in range(n):
                s = 0.0
                for j in range(d):
                    if predict_head:
                        v = E[e, j] + base[j]
                    else:
                        v = base[j] - E[e, j]
                    if p == 1:
                        s += fabs(v)
                    else:
                        s += v * v
                out[a, e] = s if p == 1 else sqrt(s)
    return out_arr
