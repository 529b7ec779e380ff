# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled HMM inference kernels (log-space forward-backward and Viterbi).

Same signatures and results as ``_kernels_py``.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, INFINITY

from .errors import EmissionUnderflowError

cnp.import_array()

BACKEND = "cython"


cdef inline double _lse(double* x, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef double m = -INFINITY, s = 0.0
    for i in range(n):
        if x[i] > m:
            m = x[i]
    if m == -INFINITY:
        return -INFINITY
    for i in range(n):
        s += exp(x[i] - m)
    return m + log(s)


def forward_backward(log_pi, log_A, log_B):
    cdef double[::1] lpi = np.ascontiguousarray(log_pi, dtype=np.float64)
    cdef double[:, :, ::1] lA = np.ascontiguousarray(log_A, dtype=np.float64)
    cdef double[:, ::1] lB = np.ascontiguousarray(log_B, dtype=np.float64)
    cdef Py_ssize_t T = lB.shape[0], N = lB.shape[1]
    cdef Py_ssize_t t, i, n, bad = -1
    gamma_arr = np.empty((T, N))
    xi_arr = np.empty((max(T - 1, 0), N, N))
    filt_arr = np.empty((T, N))
    alpha_arr = np.empty((T, N))
    beta_arr = np.zeros((T, N))
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] beta = beta_arr
    cdef double[:, ::1] gamma = gamma_arr
    cdef double[:, :, ::1] xi = xi_arr
    cdef double[:, ::1] filt = filt_arr
    cdef double[::1] norm = np.empty(T)
    cdef double[::1] buf = np.empty(N)
    cdef double[::1] nxt = np.empty(N)
    cdef double ll, v

    with nogil:
        for n in range(N):
            alpha[0, n] = lpi[n] + lB[0, n]
        norm[0] = _lse(&alpha[0, 0], N)
        if norm[0] == -INFINITY:
            bad = 0
        t = 1
        while bad < 0 and t < T:
            for n in range(N):
                for i in range(N):
                    buf[i] = alpha[t - 1, i] + lA[t - 1, i, n]
                alpha[t, n] = _lse(&buf[0], N) + lB[t, n]
            norm[t] = _lse(&alpha[t, 0], N)
            if norm[t] == -INFINITY:
                bad = t
            t += 1
    if bad >= 0:
        raise EmissionUnderflowError(bad)
    ll = norm[T - 1]

    with nogil:
        for t in range(T - 2, -1, -1):
            for n in range(N):
                nxt[n] = lB[t + 1, n] + beta[t + 1, n]
            for i in range(N):
                for n in range(N):
                    buf[n] = lA[t, i, n] + nxt[n]
                beta[t, i] = _lse(&buf[0], N)
            for i in range(N):
                for n in range(N):
                    v = alpha[t, i] + lA[t, i, n] + nxt[n] - ll
                    xi[t, i, n] = exp(v) if v > -INFINITY else 0.0
        for t in range(T):
            for n in range(N):
                v = alpha[t, n] + beta[t, n] - ll
                gamma[t, n] = exp(v) if v > -INFINITY else 0.0
                v = alpha[t, n] - norm[t]
                filt[t, n] = exp(v) if v > -INFINITY else 0.0
    return float(ll), gamma_arr, xi_arr, filt_arr


def viterbi(log_pi, log_A, log_B):
    cdef double[::1] lpi = np.ascontiguousarray(log_pi, dtype=np.float64)
    cdef double[:, :, ::1] lA = np.ascontiguousarray(log_A, dtype=np.float64)
    cdef double[:, ::1] lB = np.ascontiguousarray(log_B, dtype=np.float64)
    cdef Py_ssize_t T = lB.shape[0], N = lB.shape[1]
    cdef Py_ssize_t t, i, n, best, bad = -1
    back_arr = np.zeros((T, N), dtype=np.intp)
    path_arr = np.empty(T, dtype=np.intp)
    cdef Py_ssize_t[:, ::1] back = back_arr
    cdef Py_ssize_t[::1] path = path_arr
    cdef double[::1] delta = np.empty(N)
    cdef double[::1] nd = np.empty(N)
    cdef double v, bv, m

    with nogil:
        m = -INFINITY
        for n in range(N):
            delta[n] = lpi[n] + lB[0, n]
            if delta[n] > m:
                m = delta[n]
        if m == -INFINITY:
            bad = 0
        t = 1
        while bad < 0 and t < T:
            m = -INFINITY
            for n in range(N):
                best = 0
                bv = delta[0] + lA[t - 1, 0, n]
                for i in range(1, N):
                    v = delta[i] + lA[t - 1, i, n]
                    if v > bv:
                        bv = v
                        best = i
                back[t, n] = best
                nd[n] = bv + lB[t, n]
                if nd[n] > m:
                    m = nd[n]
            for n in range(N):
                delta[n] = nd[n]
            if m == -INFINITY:
                bad = t
            t += 1
    if bad >= 0:
        raise EmissionUnderflowError(bad)
    best = 0
    for n in range(1, N):
        if delta[n] > delta[best]:
            best = n
    path[T - 1] = best
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path_arr, float(delta[best])


def logistic_q(X, a, b, beta):
    """``sum a*log(sig(eta)) + (b-a)*log(1-sig(eta))`` and its gradient, ``eta = X @ beta``."""
    cdef double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[::1] w = np.ascontiguousarray(beta, dtype=np.float64)
    cdef Py_ssize_t R = x.shape[0], D = x.shape[1], r, d
    grad_arr = np.zeros(D)
    cdef double[::1] grad = grad_arr
    cdef double q = 0.0, eta, e, sp, sig, coef
    with nogil:
        for r in range(R):
            eta = 0.0
            for d in range(D):
                eta += x[r, d] * w[d]
            e = exp(-eta if eta >= 0 else eta)
            sp = (eta if eta > 0 else 0.0) + log1p(e)
            sig = 1.0 / (1.0 + e) if eta >= 0 else e / (1.0 + e)
            q += av[r] * eta - bv[r] * sp
            coef = av[r] - bv[r] * sig
            for d in range(D):
                grad[d] += coef * x[r, d]
    return q, grad_arr
