"""Gaussian product identities and degenerate-covariance densities.

Covariances may be rank deficient (unit-norm mode shapes have no variance
along themselves), so inverses are Moore-Penrose pseudo-inverses and
log-determinants are pseudo-determinants over the retained spectrum.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonIdentifiableDirection

PINV_RTOL = 1e-10
RANGE_RTOL = 1e-8
LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Gaussian:
    """Multivariate normal with possibly singular covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean size {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def sym(a):
    a = np.asarray(a, dtype=float)
    return 0.5 * (a + a.T)


def psd_eig(cov, rtol=PINV_RTOL):
    """Eigen-decomposition of a symmetric PSD matrix with a relative cutoff.

    Returns ``(w, v, keep)`` where ``keep`` flags eigenvalues above
    ``rtol * max(w)``.
    """
    w, v = np.linalg.eigh(sym(cov))
    top = w.max() if w.size else 0.0
    keep = w > rtol * top if top > 0 else np.zeros_like(w, dtype=bool)
    return w, v, keep


def pinv(cov, rtol=PINV_RTOL):
    """Symmetric pseudo-inverse with eigenvalue cutoff ``rtol * max``."""
    w, v, keep = psd_eig(cov, rtol)
    vk = v[:, keep]
    return (vk / w[keep]) @ vk.T


def pinv_logdet(cov, rtol=PINV_RTOL):
    """Return ``(pinv, log pseudo-determinant, rank, range projector)``."""
    w, v, keep = psd_eig(cov, rtol)
    vk = v[:, keep]
    return (vk / w[keep]) @ vk.T, float(np.sum(np.log(w[keep]))), int(keep.sum()), vk @ vk.T


def _check_dims(n, *mats):
    for a in mats:
        if np.shape(a) != (n, n):
            raise ValueError(f"dimension mismatch: expected {(n, n)}, got {np.shape(a)}")


def product_marginal(likelihood_cov, prior: Gaussian) -> Gaussian:
    """Marginal of ``x`` when ``x | mu ~ N(mu, S)`` and ``mu ~ prior``: ``N(mu0, S + S0)``."""
    s = np.atleast_2d(np.asarray(likelihood_cov, float))
    _check_dims(prior.dim, s)
    return Gaussian(prior.mean.copy(), sym(s + prior.cov))


def product_posterior(obs, likelihood_cov, prior: Gaussian) -> Gaussian:
    """Posterior of ``mu`` given ``obs ~ N(mu, S)`` and ``mu ~ prior``.

    Equivalent to the precision form
    ``cov = (S^-1 + S0^-1)^-1``, ``mean = cov (S^-1 obs + S0^-1 mu0)`` but
    written through ``(S + S0)^+`` so that a singular ``S`` or ``S0``
    (exact observation or exact prior along some direction) is handled
    without inverting either factor.

    Raises
    ------
    NonIdentifiableDirection
        If ``S + S0`` is singular, i.e. both covariances vanish along a
        common direction.
    """
    x = np.atleast_1d(np.asarray(obs, float))
    s = np.atleast_2d(np.asarray(likelihood_cov, float))
    s0 = prior.cov
    _check_dims(prior.dim, s)
    if x.shape != (prior.dim,):
        raise ValueError("obs dimension mismatch")
    tot = sym(s + s0)
    w, v, keep = psd_eig(tot)
    if not np.all(keep):
        raise NonIdentifiableDirection("likelihood and prior covariances share a null direction",
                                       rank=int(keep.sum()), dim=prior.dim)
    tinv = (v / w) @ v.T
    mean = s @ tinv @ prior.mean + s0 @ tinv @ x
    cov = sym(s0 @ tinv @ s)
    return Gaussian(mean, cov)


def log_pdf(g: Gaussian, x) -> float:
    """Log density, using the pseudo-inverse/pseudo-determinant if singular.

    Returns ``-inf`` when ``x - mean`` leaves the covariance range by more
    than ``1e-8`` relative to its norm.
    """
    x = np.atleast_1d(np.asarray(x, float))
    if x.shape != g.mean.shape:
        raise ValueError("dimension mismatch")
    r = x - g.mean
    ci, logdet, rank, proj = pinv_logdet(g.cov)
    off = r - proj @ r
    rn = np.linalg.norm(r)
    if rn > 0 and np.linalg.norm(off) > RANGE_RTOL * rn:
        return -np.inf
    return float(-0.5 * (rank * LOG2PI + logdet + r @ ci @ r))


def log_pdf_scalar(x, mean, var):
    """Univariate normal log density (``var > 0``)."""
    return -0.5 * (LOG2PI + np.log(var) + (x - mean) ** 2 / var)
