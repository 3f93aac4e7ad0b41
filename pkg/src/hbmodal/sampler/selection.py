"""Model-class selection scores."""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp


def bic_score(log_like_at_mpv: float, n_params: int, n_modes: int, n_obs: int) -> float:
    """``ln P(D | MPV) - (n_params / 2) ln(n_modes (n_obs + 1))``."""
    return float(log_like_at_mpv - 0.5 * n_params * np.log(n_modes * (n_obs + 1)))


def posterior_model_probability(scores, priors=None) -> np.ndarray:
    """Probabilities proportional to ``prior * exp(score)``, normalized.

    Equal priors are used when ``priors`` is None.
    """
    s = np.asarray(scores, float)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    p = np.full(s.size, 1.0 / s.size) if priors is None else np.asarray(priors, float)
    if p.shape != s.shape or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
        raise ValueError("priors must be nonnegative and sum to 1")
    with np.errstate(divide="ignore"):
        z = s + np.log(p)
    return np.exp(z - logsumexp(z))


def count_parameters(n_datasets: int, n_modes: int, n_obs: int, n_theta: int) -> int:
    """Total count of per-dataset modal, structural and hyper parameters.

    Per dataset: frequencies and nuisance pairs (``2 n_modes``), mode shapes
    with their gauge (``2 n_modes n_obs``) and ``n_theta`` structural
    parameters.  Shared: one frequency discrepancy per mode, a full shape
    discrepancy covariance per mode, and the hyper mean and covariance.
    """
    nd, nm, no, nt = (int(v) for v in (n_datasets, n_modes, n_obs, n_theta))
    if nd < 0 or min(nm, no, nt) < 1:
        raise ValueError("counts must be positive")
    return nd * (2 * nm + 2 * nm * no + nt) + nm + nm * no * (no + 1) // 2 + nt + nt * (nt + 1) // 2
