"""Synthetic ambient-vibration records by modal superposition.

Modal forces are Gaussian white noise; each modal acceleration is
obtained by applying the acceleration transfer function on the FFT grid
and transforming back, which yields a stationary (circular) record whose
scaled FFT follows the spectral model exactly.
"""
from __future__ import annotations

import numpy as np

from ..fem import StructuralModelClass, assemble
from .data import TimeHistoryDataset
import scipy.linalg as sla


def _psd_sqrt(s):
    w, v = np.linalg.eigh(0.5 * (s + s.T))
    return v * np.sqrt(np.clip(w, 0, None))


def simulate_modal_record(omega_sq, zeta, shapes, s_force, s_err, n_samples, dt, seed,
                          observed_dofs=None, dataset_id="synthetic") -> TimeHistoryDataset:
    """Record of ``n_samples`` from given modal properties.

    Parameters
    ----------
    omega_sq, zeta : (n_modes,) array_like
    shapes : (n_channels, n_modes) array_like
        Mode shapes at the channels (any scaling; the modal-force PSD refers
        to this scaling).
    s_force : scalar, (n_modes,) or (n_modes, n_modes)
        Two-sided modal-force PSD.
    s_err : float
        Two-sided channel-noise PSD.
    seed : int
        Seed for :func:`numpy.random.default_rng`.
    """
    omega_sq = np.atleast_1d(np.asarray(omega_sq, float))
    zeta = np.atleast_1d(np.asarray(zeta, float))
    shapes = np.asarray(shapes, float).reshape(-1, omega_sq.size)
    nm = omega_sq.size
    s = np.asarray(s_force, float)
    s = s * np.eye(nm) if s.ndim == 0 else (np.diag(s) if s.ndim == 1 else s)
    rng = np.random.default_rng(seed)
    n = int(n_samples)
    # white modal forces with E|F_k|^2 = S under the sqrt(dt/N) FFT scaling
    p = rng.standard_normal((n, nm)) @ _psd_sqrt(s).T / np.sqrt(dt)
    pf = np.fft.rfft(p, axis=0)
    w = 2 * np.pi * np.fft.rfftfreq(n, dt)
    h = np.zeros((w.size, nm), dtype=complex)
    pos = w > 0
    r = np.sqrt(omega_sq)[None, :] / w[pos, None]
    h[pos] = 1.0 / (1.0 - r * r - 2j * zeta[None, :] * r)
    q = np.fft.irfft(pf * h, n=n, axis=0)
    y = q @ shapes.T
    if s_err > 0:
        y = y + rng.standard_normal(y.shape) * np.sqrt(s_err / dt)
    dofs = tuple(range(shapes.shape[0])) if observed_dofs is None else tuple(observed_dofs)
    return TimeHistoryDataset(samples=y, dt=dt, observed_dofs=dofs, dataset_id=dataset_id)


def simulate_time_history(model: StructuralModelClass, theta, zeta, force_psd, duration, dt, seed,
                          observed_dofs=None, noise_ratio=0.1, n_modes=None,
                          dataset_id="synthetic") -> TimeHistoryDataset:
    """Ambient response of a model class at ``theta``.

    The modal-force PSD refers to mass-normalized modes.  The channel-noise
    PSD is ``noise_ratio`` times the largest modal high-frequency response
    level ``S_i * |gamma psi_i|^2 / n_channels``.
    """
    k, m = assemble(model, theta)
    w, v = sla.eigh(k, m)
    nm = model.n_dof if n_modes is None else int(n_modes)
    w, v = w[:nm], v[:, :nm]  # eigh returns M-orthonormal vectors
    dofs = tuple(range(model.n_dof)) if observed_dofs is None else tuple(int(d) for d in observed_dofs)
    shapes = v[list(dofs), :]
    zeta = np.broadcast_to(np.asarray(zeta, float), (nm,))
    s = np.asarray(force_psd, float)
    s = s * np.eye(nm) if s.ndim == 0 else (np.diag(np.broadcast_to(s, (nm,))) if s.ndim == 1 else s)
    level = np.diag(s) * np.sum(shapes ** 2, axis=0) / len(dofs)
    s_err = float(noise_ratio * level.max()) if level.size else 0.0
    n = int(round(duration / dt))
    return simulate_modal_record(w, zeta, shapes, s, s_err, n, dt, seed, observed_dofs=dofs,
                                 dataset_id=dataset_id)
