"""Transitional MCMC with ESS-controlled tempering.

Stages raise the likelihood exponent ``beta`` from 0 to 1.  Each increment
is chosen by bisection so the effective sample size of the incremental
weights is half the population; particles are then resampled
(multinomial) and moved by one Metropolis step with a Gaussian proposal of
covariance ``0.2**2`` times the weighted sample covariance.  The log
evidence is the sum over stages of the log mean incremental weight.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ..errors import TemperingCollapse

log = logging.getLogger(__name__)


class BoxPrior:
    """Uniform prior on an axis-aligned box."""

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, float)
        self.upper = np.asarray(upper, float)
        if self.lower.shape != self.upper.shape or np.any(self.upper <= self.lower):
            raise ValueError("invalid prior box")
        if not np.all(np.isfinite(self.lower)) or not np.all(np.isfinite(self.upper)):
            raise ValueError("prior box must be finite")
        self._logvol = float(np.sum(np.log(self.upper - self.lower)))

    @property
    def dim(self) -> int:
        return self.lower.size

    def sample(self, rng, n):
        return self.lower + (self.upper - self.lower) * rng.random((n, self.dim))

    def logpdf(self, x):
        x = np.atleast_2d(x)
        inside = np.all((x >= self.lower) & (x <= self.upper), axis=1)
        return np.where(inside, -self._logvol, -np.inf)


def as_prior(prior_box):
    if hasattr(prior_box, "logpdf") and hasattr(prior_box, "sample"):
        return prior_box
    lo, hi = prior_box
    return BoxPrior(lo, hi)


@dataclass
class TmcmcConfig:
    ess_fraction: float = 0.5
    proposal_scale: float = 0.2
    n_mh_steps: int = 1
    max_stages: int = 500


@dataclass
class SampleSet:
    """Final TMCMC population (equally weighted draws)."""

    draws: np.ndarray
    log_likelihood: np.ndarray
    beta_schedule: np.ndarray
    evidence_log: float
    names: tuple = ()
    log_weights: list = field(default_factory=list)
    acceptance: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("draws", "log_likelihood", "beta_schedule"):
            a = np.asarray(getattr(self, name), float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n_samples(self) -> int:
        return self.draws.shape[0]

    @property
    def n_stages(self) -> int:
        return self.beta_schedule.size - 1

    def mean(self):
        return self.draws.mean(axis=0)

    def column(self, name):
        return self.draws[:, self.names.index(name)]


def _ess(logw):
    w = np.exp(logw - np.max(logw))
    return w.sum() ** 2 / np.sum(w * w)


def _next_increment(ll, beta, target):
    finite = np.isfinite(ll)
    if not np.any(finite):
        raise TemperingCollapse("all particles have zero likelihood", beta=beta)
    rem = 1.0 - beta
    ll = np.where(finite, ll, -np.inf)
    if _ess(rem * ll) >= target:
        return rem
    lo, hi = 0.0, rem
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _ess(mid * ll) >= target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-14 * max(beta, 1e-300):
            break
    return max(lo, 1e-300) if lo > 0 else hi


def _evaluate(fun, x, vectorized):
    if vectorized:
        out = np.asarray(fun(x), float)
    else:
        out = np.array([fun(row) for row in x], float)
    return np.where(np.isnan(out), -np.inf, out)


def tmcmc(log_target, prior_box, n_samples: int, seed: int, config: TmcmcConfig | None = None,
          vectorized: bool = True, names=()) -> SampleSet:
    """Sample ``prior * exp(log_target)``.

    Parameters
    ----------
    log_target : callable
        Log-likelihood; called on an ``(n, dim)`` array when ``vectorized``,
        otherwise row by row.
    prior_box : (lower, upper) or prior object
        Uniform box or any object with ``sample(rng, n)`` and ``logpdf(x)``.
    n_samples : int
        Population size (at least 100).
    seed : int
        Seed for :func:`numpy.random.default_rng`; results are bit-identical
        for equal seeds.

    Raises
    ------
    TemperingCollapse
        If the weights degenerate (ESS below 2).
    """
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    config = config or TmcmcConfig()
    prior = as_prior(prior_box)
    rng = np.random.default_rng(seed)
    n = int(n_samples)
    x = prior.sample(rng, n)
    lp = prior.logpdf(x)
    ll = _evaluate(log_target, x, vectorized)
    beta = 0.0
    betas = [0.0]
    logz = 0.0
    weights_hist, acc_hist = [], []
    target_ess = config.ess_fraction * n
    for stage in range(config.max_stages):
        if beta >= 1.0:
            break
        dbeta = _next_increment(ll, beta, target_ess)
        new_beta = 1.0 if beta + dbeta >= 1.0 - 1e-12 else beta + dbeta
        dbeta = new_beta - beta
        logw = np.where(np.isfinite(ll), dbeta * ll, -np.inf)
        lse = logsumexp(logw)
        logz += lse - np.log(n)
        p = np.exp(logw - lse)
        ess = 1.0 / np.sum(p * p)
        if not ess >= 2:
            raise TemperingCollapse("effective sample size below 2", stage=stage, ess=float(ess))
        weights_hist.append(logw)
        mean = p @ x
        d = x - mean
        cov = (d * p[:, None]).T @ d
        cov = 0.5 * (cov + cov.T)
        scale = np.maximum(np.abs(np.diag(cov)), 1e-300)
        cov = cov + 1e-12 * np.diag(scale)
        idx = rng.choice(n, size=n, p=p)
        x, ll, lp = x[idx], ll[idx], lp[idx]
        chol = np.linalg.cholesky(config.proposal_scale ** 2 * cov)
        acc = 0
        for _ in range(config.n_mh_steps):
            prop = x + rng.standard_normal(x.shape) @ chol.T
            lp_new = prior.logpdf(prop)
            ok = np.isfinite(lp_new)
            ll_new = np.full(n, -np.inf)
            if np.any(ok):
                ll_new[ok] = _evaluate(log_target, prop[ok], vectorized)
            with np.errstate(invalid="ignore"):
                log_alpha = new_beta * (ll_new - ll) + (lp_new - lp)
            log_alpha = np.where(ok & np.isfinite(ll_new), log_alpha, -np.inf)
            u = np.log(rng.random(n))
            take = u < log_alpha
            x[take], ll[take], lp[take] = prop[take], ll_new[take], lp_new[take]
            acc += int(take.sum())
        acc_hist.append(acc / (n * config.n_mh_steps))
        beta = new_beta
        betas.append(beta)
        log.debug("tmcmc stage %d beta=%.4g ess=%.0f acc=%.2f", stage, beta, ess, acc_hist[-1])
    if beta < 1.0:
        raise TemperingCollapse("maximum number of stages reached", beta=beta)
    return SampleSet(draws=x, log_likelihood=ll, beta_schedule=np.array(betas), evidence_log=float(logz),
                     names=tuple(names), log_weights=weights_hist, acceptance=acc_hist)
