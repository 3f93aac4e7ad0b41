# cython: language_level=3
"""Compiled versions of the inner loops.

Every function here has a numpy twin in ``_fallback`` with the same
signature; the two are cross-checked in the test suite.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, exp, sqrt, M_PI

cnp.import_array()


cdef inline double _gain_sq(double wk, double wn, double zeta) nogil:
    cdef double r = wn / wk
    cdef double a = 1.0 - r * r
    cdef double b = 2.0 * zeta * r
    return 1.0 / (a * a + b * b)


def band_nll_single(double[:, ::1] fre, double[:, ::1] fim, double[::1] omega_k,
                    double omega_sq, double zeta, double s, double se,
                    double[::1] phi):
    """Single-mode band NLL with E_k = s*|h_k|^2 phi phi^T + se*I."""
    cdef Py_ssize_t nb = fre.shape[0], no = fre.shape[1], k, j
    cdef double wn = sqrt(omega_sq)
    cdef double pn = 0.0, total = 0.0
    cdef double d, lam, pr, pi_, f2, base
    for j in range(no):
        pn += phi[j] * phi[j]
    base = no * log(M_PI) + (no - 1) * log(se)
    for k in range(nb):
        d = s * _gain_sq(omega_k[k], wn, zeta)
        lam = se + d * pn
        pr = 0.0
        pi_ = 0.0
        f2 = 0.0
        for j in range(no):
            pr += phi[j] * fre[k, j]
            pi_ += phi[j] * fim[k, j]
            f2 += fre[k, j] * fre[k, j] + fim[k, j] * fim[k, j]
        total += base + log(lam) + (f2 - d * (pr * pr + pi_ * pi_) / lam) / se
    return total


def band_reduced_single(double[:, ::1] fre, double[:, ::1] fim, double[::1] omega_k,
                        double omega_sq, double zeta, double s, double se):
    """Shape-free part of the single-mode NLL.

    Returns ``(c, A)`` such that for unit ``phi`` the NLL equals
    ``c - phi @ A @ phi``.
    """
    cdef Py_ssize_t nb = fre.shape[0], no = fre.shape[1], k, i, j
    cdef double wn = sqrt(omega_sq)
    cdef double const = 0.0, d, w, f2
    cdef double base = no * log(M_PI) + (no - 1) * log(se)
    out = np.zeros((no, no))
    cdef double[:, ::1] a = out
    for k in range(nb):
        d = s * _gain_sq(omega_k[k], wn, zeta)
        w = d / (se * (se + d))
        f2 = 0.0
        for i in range(no):
            f2 += fre[k, i] * fre[k, i] + fim[k, i] * fim[k, i]
            for j in range(i + 1):
                a[i, j] += w * (fre[k, i] * fre[k, j] + fim[k, i] * fim[k, j])
        const += base + log(se + d) + f2 / se
    for i in range(no):
        for j in range(i):
            a[j, i] = a[i, j]
    return const, out


def mixture_loglik(double[:, ::1] draws, double[:, ::1] means,
                   double[:, :, ::1] chol_inv, double[::1] logdet):
    """log sum_m N(draws[m] | means[n], cov[n]) for every n.

    ``chol_inv[n]`` is the inverse lower Cholesky factor of ``cov[n]``.
    """
    cdef Py_ssize_t n_part = means.shape[0], m_draw = draws.shape[0]
    cdef Py_ssize_t dim = draws.shape[1], n, m, i, j
    cdef double q, z, acc, best, c0 = 0.5 * dim * log(2.0 * M_PI)
    out = np.empty(n_part)
    cdef double[::1] res = out
    cdef double[::1] diff = np.empty(dim)
    cdef double[::1] qs = np.empty(m_draw)
    for n in range(n_part):
        best = -1e300
        for m in range(m_draw):
            for i in range(dim):
                diff[i] = draws[m, i] - means[n, i]
            q = 0.0
            for i in range(dim):
                z = 0.0
                for j in range(i + 1):
                    z += chol_inv[n, i, j] * diff[j]
                q += z * z
            qs[m] = -0.5 * q
            if qs[m] > best:
                best = qs[m]
        acc = 0.0
        for m in range(m_draw):
            acc += exp(qs[m] - best)
        res[n] = best + log(acc) - 0.5 * logdet[n] - c0
    return out
