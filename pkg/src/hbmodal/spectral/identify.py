"""Per-band Bayesian FFT identification of one well-separated mode.

For one mode in a band the PSD matrix is rank one plus noise,
``E_k = S D_k phi phi^T + S_e I`` with ``D_k = |h_k|^2``.  For fixed
``(omega_sq, zeta, S, S_e)`` the best unit ``phi`` is the principal
eigenvector of a real weighted spectral matrix, so the search runs over
four scalars only.  Covariances come from a central finite-difference
Hessian of the full NLL, with the shape block restricted to the tangent
space of the unit sphere.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .. import _kernels
from ..errors import FlatLikelihood, ModalIdFailed
from ..fem import canonical_sign
from .data import ModalDataset, TimeHistoryDataset
from .psd import FFTData, fft_of_response

log = logging.getLogger(__name__)

MIN_BINS = 5
#: relative central-difference step for the Hessian
HESS_STEP = 1e-4


@dataclass
class BandFit:
    omega_sq: float
    zeta: float
    s_force: float
    s_err: float
    phi: np.ndarray
    cov: np.ndarray          # (4 + n_o) covariance in (omega_sq, zeta, S, S_e, phi)
    nll: float
    n_bins: int

    @property
    def var_omega_sq(self) -> float:
        return float(self.cov[0, 0])

    @property
    def cov_phi(self) -> np.ndarray:
        return self.cov[4:, 4:]

    @property
    def cov_nuisance(self) -> np.ndarray:
        return self.cov[1:4, 1:4]

    def correlation(self) -> np.ndarray:
        sd = np.sqrt(np.clip(np.diag(self.cov), 0, None))
        sd = np.where(sd > 0, sd, 1.0)
        return self.cov / np.outer(sd, sd)


class _Band:
    """FFT data restricted to one band, with cached real/imag parts."""

    def __init__(self, fft: FFTData, idx):
        f = fft.values[idx]
        self.fre = np.ascontiguousarray(f.real)
        self.fim = np.ascontiguousarray(f.imag)
        self.omega = np.ascontiguousarray(fft.omega[idx])
        self.n_bins, self.n_o = self.fre.shape

    def nll(self, omega_sq, zeta, s, se, phi):
        return _kernels.band_nll_single(self.fre, self.fim, self.omega, omega_sq, zeta, s, se,
                                        np.ascontiguousarray(phi, dtype=float))

    def reduced(self, omega_sq, zeta, s, se):
        c, a = _kernels.band_reduced_single(self.fre, self.fim, self.omega, omega_sq, zeta, s, se)
        w, v = np.linalg.eigh(a)
        return c - w[-1], v[:, -1]

    def spectral_matrices(self):
        return (np.einsum("ki,kj->kij", self.fre, self.fre)
                + np.einsum("ki,kj->kij", self.fim, self.fim))


def _initial_guess(band: _Band):
    g = band.spectral_matrices()
    lam = np.linalg.eigvalsh(g)  # ascending per bin
    top = lam[:, -1]
    width = max(1, min(5, band.n_bins // 10))
    sm = np.convolve(top, np.ones(2 * width + 1) / (2 * width + 1), mode="same")
    kp = int(np.argmax(sm))
    wp = band.omega[kp]
    if band.n_o > 1:
        se = float(np.mean(lam[:, :-1]))
    else:
        se = float(np.quantile(top, 0.1))
    se = max(se, 1e-12 * max(top.max(), 1e-300))
    half = se + 0.5 * (sm[kp] - se)
    lo = kp
    while lo > 0 and sm[lo] > half:
        lo -= 1
    hi = kp
    while hi < band.n_bins - 1 and sm[hi] > half:
        hi += 1
    bw = max(band.omega[hi] - band.omega[lo], band.omega[1] - band.omega[0])
    zeta = float(np.clip(bw / (2 * wp), 1e-4, 0.2))
    s = max(float(sm[kp] - se) * 4 * zeta ** 2, 1e-6 * se)
    return wp ** 2, zeta, s, se


def _fd_hessian(fun, x, steps):
    n = x.size
    f0 = fun(x)
    h = np.zeros((n, n))
    e = np.eye(n) * steps
    fp = np.array([fun(x + e[i]) for i in range(n)])
    fm = np.array([fun(x - e[i]) for i in range(n)])
    for i in range(n):
        h[i, i] = (fp[i] - 2 * f0 + fm[i]) / steps[i] ** 2
        for j in range(i):
            v = (fun(x + e[i] + e[j]) - fun(x + e[i] - e[j])
                 - fun(x - e[i] + e[j]) + fun(x - e[i] - e[j])) / (4 * steps[i] * steps[j])
            h[i, j] = h[j, i] = v
    return h


def _fd_gradient(fun, x, steps):
    return np.array([(fun(x + s * ei) - fun(x - s * ei)) / (2 * s)
                     for s, ei in zip(steps, np.eye(x.size))])


def fit_band(fft: FFTData, idx, band_id=0, max_iter=4000) -> BandFit:
    """Identify one mode from the FFT bins ``idx``.

    Raises
    ------
    ModalIdFailed
        On optimizer non-convergence.
    FlatLikelihood
        If the projected Hessian is not positive definite.
    """
    idx = np.asarray(idx, int)
    if idx.size < MIN_BINS:
        raise ModalIdFailed(f"band has {idx.size} FFT bins, need at least {MIN_BINS}", band=band_id)
    band = _Band(fft, idx)
    x0 = np.log(_initial_guess(band))

    def obj(y):
        return band.reduced(*np.exp(y))[0]

    res = minimize(obj, x0, method="Nelder-Mead",
                   options={"xatol": 1e-9, "fatol": 1e-10, "maxiter": max_iter, "maxfev": 2 * max_iter})
    y = res.x
    res2 = minimize(obj, y, method="BFGS", options={"gtol": 1e-8, "maxiter": max_iter})
    if np.isfinite(res2.fun) and res2.fun <= res.fun:
        y = res2.x
    # Newton polish in log coordinates; finite differences on a 4-D function are cheap
    steps = np.full(4, 1e-4)
    for _ in range(20):
        g = _fd_gradient(obj, y, steps)
        hl = _fd_hessian(obj, y, steps)
        try:
            dy = -np.linalg.solve(hl, g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(dy)):
            break
        f0 = obj(y)
        t = 1.0
        while t > 1e-4 and not obj(y + t * dy) <= f0:
            t *= 0.5
        if t <= 1e-4:
            break
        y = y + t * dy
        if np.max(np.abs(t * dy)) < 1e-10:
            break
    # convergence is judged by the Newton step, which is insensitive to the
    # truncation error of the gradient on a sharply curved optimum
    g = _fd_gradient(obj, y, steps)
    hl = _fd_hessian(obj, y, steps)
    try:
        newton = np.linalg.solve(hl, g)
    except np.linalg.LinAlgError:
        newton = np.full(4, np.inf)
    if not np.all(np.isfinite(y)) or not np.max(np.abs(newton)) < 1e-5:
        raise ModalIdFailed("optimizer did not converge", band=band_id,
                            newton_step=float(np.max(np.abs(newton))))
    omega_sq, zeta, s, se = np.exp(y)
    if not 0 < zeta < 1:
        raise ModalIdFailed("damping ratio outside (0, 1)", band=band_id, zeta=float(zeta))
    nll, phi = band.reduced(omega_sq, zeta, s, se)
    phi = canonical_sign(phi)

    x_hat = np.concatenate([[omega_sq, zeta, s, se], phi])

    def full(x):
        p = x[4:]
        return band.nll(x[0], x[1], x[2], x[3], p / np.linalg.norm(p))

    scale = np.concatenate([np.abs(x_hat[:4]), np.ones(band.n_o)])
    h = _fd_hessian(full, x_hat, HESS_STEP * scale)
    # restrict to the tangent space of the sphere at phi
    q = np.linalg.svd(np.eye(band.n_o) - np.outer(phi, phi))[0][:, : band.n_o - 1]
    basis = np.zeros((4 + band.n_o, 3 + band.n_o))
    basis[:4, :4] = np.eye(4)
    basis[4:, 4:] = q
    ht = basis.T @ h @ basis
    ht = 0.5 * (ht + ht.T)
    try:
        lt = np.linalg.cholesky(ht)
    except np.linalg.LinAlgError:
        raise FlatLikelihood("projected Hessian not positive definite", band=band_id) from None
    li = np.linalg.inv(lt)
    cov = basis @ (li.T @ li) @ basis.T
    cov = 0.5 * (cov + cov.T)
    return BandFit(omega_sq=float(omega_sq), zeta=float(zeta), s_force=float(s), s_err=float(se),
                   phi=phi, cov=cov, nll=float(nll), n_bins=band.n_bins)


def identify_modal_parameters(data: TimeHistoryDataset, bands, n_modes=None,
                              return_fits: bool = False):
    """Identify one mode per frequency band.

    Parameters
    ----------
    data : TimeHistoryDataset
    bands : sequence of (f_lo, f_hi)
        Frequency bands in Hz, one mode each.
    n_modes : int, optional
        Must equal ``len(bands)`` if given.

    Returns
    -------
    ModalDataset
        MPVs and identification covariances; with ``return_fits`` also the
        list of per-band :class:`BandFit`.
    """
    bands = [tuple(map(float, b)) for b in bands]
    if n_modes is not None and n_modes != len(bands):
        raise ValueError("one mode per band: n_modes must equal len(bands)")
    fft = fft_of_response(data)
    fits = []
    for b, (lo, hi) in enumerate(bands):
        idx = fft.band_indices(lo, hi)
        if idx.size < MIN_BINS:
            raise ModalIdFailed(f"band [{lo}, {hi}] Hz has {idx.size} FFT bins, need {MIN_BINS}", band=b)
        fits.append(fit_band(fft, idx, band_id=b))
        log.debug("band %d: f=%.6g Hz zeta=%.4g", b, np.sqrt(fits[-1].omega_sq) / (2 * np.pi), fits[-1].zeta)
    ds = ModalDataset(
        omega_sq_hat=[f.omega_sq for f in fits],
        phi_hat=[f.phi for f in fits],
        cov_omega_sq=[f.var_omega_sq for f in fits],
        cov_phi=[f.cov_phi for f in fits],
        observed_dofs=tuple(data.observed_dofs for _ in fits),
        dataset_id=data.dataset_id,
        nuisance_hat=[{"zeta": f.zeta, "s_force": f.s_force, "s_err": f.s_err} for f in fits],
        cov_nuisance=[f.cov_nuisance for f in fits],
    )
    return (ds, fits) if return_fits else ds
