"""Numpy implementations of the inner loops (used when the extension is absent)."""
import numpy as np
from scipy.special import logsumexp


def _gain_sq(omega_k, omega_sq, zeta):
    r = np.sqrt(omega_sq) / omega_k
    return 1.0 / ((1.0 - r * r) ** 2 + (2.0 * zeta * r) ** 2)


def band_nll_single(fre, fim, omega_k, omega_sq, zeta, s, se, phi):
    """Single-mode band NLL with E_k = s*|h_k|^2 phi phi^T + se*I."""
    no = fre.shape[1]
    d = s * _gain_sq(omega_k, omega_sq, zeta)
    lam = se + d * (phi @ phi)
    proj = (fre @ phi) ** 2 + (fim @ phi) ** 2
    f2 = np.einsum("ij,ij->i", fre, fre) + np.einsum("ij,ij->i", fim, fim)
    base = no * np.log(np.pi) + (no - 1) * np.log(se)
    return float(np.sum(base + np.log(lam) + (f2 - d * proj / lam) / se))


def band_reduced_single(fre, fim, omega_k, omega_sq, zeta, s, se):
    """Shape-free part of the single-mode NLL, see the compiled twin."""
    no = fre.shape[1]
    d = s * _gain_sq(omega_k, omega_sq, zeta)
    w = d / (se * (se + d))
    a = (fre * w[:, None]).T @ fre + (fim * w[:, None]).T @ fim
    f2 = np.einsum("ij,ij->i", fre, fre) + np.einsum("ij,ij->i", fim, fim)
    base = no * np.log(np.pi) + (no - 1) * np.log(se)
    const = float(np.sum(base + np.log(se + d) + f2 / se))
    return const, 0.5 * (a + a.T)


def mixture_loglik(draws, means, chol_inv, logdet, chunk=256):
    """log sum_m N(draws[m] | means[n], cov[n]) for every n."""
    dim = draws.shape[1]
    out = np.empty(means.shape[0])
    for start in range(0, means.shape[0], chunk):
        sl = slice(start, start + chunk)
        diff = draws[None, :, :] - means[sl, None, :]
        z = np.einsum("nij,nmj->nmi", chol_inv[sl], diff)
        q = -0.5 * np.einsum("nmi,nmi->nm", z, z)
        out[sl] = logsumexp(q, axis=1) - 0.5 * logdet[sl] - 0.5 * dim * np.log(2 * np.pi)
    return out
