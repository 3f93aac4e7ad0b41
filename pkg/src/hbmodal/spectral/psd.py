"""Scaled FFT, theoretical PSD matrix and the FFT-domain likelihood.

Scaling convention: ``F_k = sqrt(dt / N) * sum_j y_j exp(-2 pi i j k / N)``
for ``k = 0 .. N//2 - 1`` at ``omega_k = 2 pi k / (N dt)``.  With it,
white noise of variance ``v`` has ``E|F_k|^2 = v dt``, so PSD levels are
two-sided densities per Hz, and ``sum_k |F_k|^2`` over all ``N`` bins
equals ``dt * sum_j y_j^2``.

The modal transfer function is the acceleration one,
``h = 1 / (1 - r^2 - 2 i zeta r)`` with ``r = omega_n / omega_k``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _kernels
from ..errors import InvalidSpectralModel
from .data import SpectralModelParams, TimeHistoryDataset


@dataclass(frozen=True)
class FFTData:
    """Scaled one-sided FFT of a record: ``values[k]`` at ``omega[k]`` (rad/s)."""

    values: np.ndarray
    omega: np.ndarray
    dt: float
    n_samples: int

    @property
    def n_freq(self) -> int:
        return self.values.shape[0]

    def band_indices(self, f_lo: float, f_hi: float) -> np.ndarray:
        """FFT bins with ``f_lo <= f_k <= f_hi`` (Hz), excluding DC."""
        f = self.omega / (2 * np.pi)
        idx = np.flatnonzero((f >= f_lo) & (f <= f_hi))
        return idx[idx > 0]


def fft_of_response(data: TimeHistoryDataset, one_sided: bool = True) -> FFTData:
    """Scaled FFT of every channel.

    With ``one_sided=False`` all ``N`` bins are returned (used for the
    Parseval identity); otherwise bins ``k < int(N/2)``.
    """
    y = data.samples
    if not np.all(np.isfinite(y)):
        raise ValueError("samples must be finite")
    n = y.shape[0]
    f = np.fft.fft(y, axis=0) * np.sqrt(data.dt / n)
    nf = n if not one_sided else n // 2
    omega = 2 * np.pi * np.arange(nf) / (n * data.dt)
    return FFTData(values=f[:nf], omega=omega, dt=data.dt, n_samples=n)


def transfer(omega_k, omega_sq, zeta):
    """Acceleration transfer coefficients ``h`` (broadcast over inputs)."""
    r = np.sqrt(omega_sq) / np.asarray(omega_k, float)
    return 1.0 / (1.0 - r * r - 2j * zeta * r)


def _noise_level(params: SpectralModelParams) -> float:
    # one prediction-error level per band; several modes in a band share it
    return float(np.mean(params.s_err))


def theoretical_psd(params: SpectralModelParams, omega_k) -> np.ndarray:
    """``E_k = Phi H_k Phi^T + S_e I``, ``H_k = diag(h) S diag(conj h)``.

    ``omega_k`` may be a scalar (returns one matrix) or a vector (returns a
    stack of matrices).

    Raises
    ------
    InvalidSpectralModel
        If some ``E_k`` is not positive definite.
    """
    w = np.atleast_1d(np.asarray(omega_k, float))
    if np.any(w <= 0):
        raise ValueError("omega_k must be positive")
    h = transfer(w[:, None], params.omega_sq[None, :], params.zeta[None, :])  # (nk, nm)
    hk = h[:, :, None] * params.s_force[None, :, :] * np.conj(h)[:, None, :]
    e = np.einsum("im,kmn,jn->kij", params.phi, hk, params.phi)
    no = params.phi.shape[0]
    e = e + _noise_level(params) * np.eye(no)[None]
    e = 0.5 * (e + np.conj(np.transpose(e, (0, 2, 1))))
    lam = np.linalg.eigvalsh(e)
    if np.any(lam[:, 0] <= 1e-14 * np.abs(lam[:, -1])):
        raise InvalidSpectralModel("theoretical PSD not positive definite")
    return e[0] if np.ndim(omega_k) == 0 else e


def _band(fft: FFTData, band):
    if isinstance(band, slice):
        idx = np.arange(fft.n_freq)[band]
    elif isinstance(band, tuple) and len(band) == 2:
        idx = np.arange(int(band[0]), int(band[1]))
    else:
        idx = np.asarray(band, int)
    if idx.size == 0 or idx.min() <= 0 or idx.max() >= fft.n_freq:
        raise ValueError("band must lie strictly inside (0, N_f)")
    return idx


def neg_log_likelihood(params: SpectralModelParams, fft: FFTData, band) -> float:
    """Negative log-likelihood of the FFT data in ``band``.

    ``band`` is a ``slice``, an index array, or a ``(k_start, k_stop)``
    tuple.  Single-mode bands use the closed-form rank-one kernel; several
    modes use the general Hermitian evaluation.
    """
    idx = _band(fft, band)
    f = fft.values[idx]
    w = fft.omega[idx]
    if params.n_modes == 1:
        return _kernels.band_nll_single(
            np.ascontiguousarray(f.real), np.ascontiguousarray(f.imag), np.ascontiguousarray(w),
            float(params.omega_sq[0]), float(params.zeta[0]), float(params.s_force[0, 0]),
            float(params.s_err[0]), np.ascontiguousarray(params.phi[:, 0]))
    return nll_general(params, f, w)


def nll_general(params: SpectralModelParams, f: np.ndarray, w: np.ndarray) -> float:
    e = theoretical_psd(params, w)
    n = f.shape[1]
    sign, logdet = np.linalg.slogdet(e)
    sol = np.linalg.solve(e, f[:, :, None])[:, :, 0]
    quad = np.real(np.einsum("ki,ki->k", np.conj(f), sol))
    return float(np.sum(n * np.log(np.pi) + logdet.real + quad))
