"""Two-stage sampling of the hierarchical posterior and model comparison."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .selection import bic_score, posterior_model_probability
from .targets import STRUCTURES, NaturalTarget, Stage1Target, Stage2Prior, Stage2Target, stage2_columns
from .tmcmc import SampleSet, TmcmcConfig, tmcmc

log = logging.getLogger(__name__)


@dataclass
class StageOneResult:
    samples: SampleSet
    target: Stage1Target

    def theta_draws(self):
        """Per-dataset arrays of structural-parameter draws."""
        nt = self.target.nt
        return [self.samples.draws[:, s * nt:(s + 1) * nt] for s in range(self.target.nd)]

    def best(self):
        """Draw with the largest log-target (the prior is flat on the box)."""
        i = int(np.argmax(self.samples.log_likelihood))
        return self.samples.draws[i], float(self.samples.log_likelihood[i])


def sample_stage1(model, datasets, n_samples=10_000, seed=0, theta_box=(0.75, 1.25), var_box=(0.0, 0.01),
                  structure="full", hierarchical=False, include_identification=True, config=None,
                  n_analytical=None) -> StageOneResult:
    """TMCMC over the per-dataset parameters and discrepancy variances."""
    target = Stage1Target(model, datasets, theta_box=theta_box, var_box=var_box, structure=structure,
                          hierarchical=hierarchical, include_identification=include_identification,
                          n_analytical=n_analytical)
    prior = target.log_variance_prior()
    raw = tmcmc(NaturalTarget(target, prior), prior, n_samples, seed, config, vectorized=True)
    samples = SampleSet(draws=prior.to_natural(raw.draws), log_likelihood=raw.log_likelihood,
                        beta_schedule=raw.beta_schedule, evidence_log=raw.evidence_log, names=target.names,
                        log_weights=raw.log_weights, acceptance=raw.acceptance)
    log.info("stage 1 (%s%s): %d stages, log evidence %.4f", structure, ", hierarchical" if hierarchical else "",
             samples.n_stages, samples.evidence_log)
    return StageOneResult(samples, target)


def sample_hyper_stage2(theta_draws, prior_box, n_samples, seed, config: TmcmcConfig | None = None,
                        max_draws=1000) -> SampleSet:
    """TMCMC over the hyper mean and covariance given per-dataset draws.

    Parameters
    ----------
    theta_draws : sequence of arrays
        Draws of each ``theta_s`` (``(M_s, n_theta)`` or ``(M_s,)``).
    prior_box : ((mu_lower, mu_upper), (0, var_max))
        Uniform box of the hyper mean and of each hyper variance.

    Returns
    -------
    SampleSet
        Draws in columns ``mu*``, ``sigma_theta_sq*`` and ``rho*`` (pairwise
        correlations).  ``evidence_log`` is relative to the log-mean
        mixture likelihood.
    """
    draws = [np.asarray(d, float).reshape(len(d), -1) for d in theta_draws]
    if not draws or any(d.size == 0 for d in draws):
        raise ValueError("theta_draws must be nonempty")
    d = draws[0].shape[1]
    (mu_lo, mu_hi), (v_lo, v_hi) = prior_box
    if v_lo != 0:
        raise ValueError("the hyper-variance prior must start at zero")
    prior = Stage2Prior(d, (mu_lo, mu_hi), v_hi)
    target = Stage2Target(draws, max_draws=max_draws)
    raw = tmcmc(target, prior, n_samples, seed, config, vectorized=True)
    names = [f"mu{p + 1}" for p in range(d)] + [f"sigma_theta_sq{p + 1}" for p in range(d)]
    names += [f"rho{i + 1}_{j + 1}" for i in range(d) for j in range(i + 1, d)]
    return SampleSet(draws=stage2_columns(raw.draws, d), log_likelihood=raw.log_likelihood,
                     beta_schedule=raw.beta_schedule, evidence_log=raw.evidence_log, names=tuple(names),
                     log_weights=raw.log_weights, acceptance=raw.acceptance)


def free_parameter_count(target: Stage1Target) -> int:
    """Structural, discrepancy and hyper parameters of a hierarchical stage-1 target."""
    return target.dim


@dataclass
class ModelComparison:
    structures: tuple
    evidence_log: np.ndarray
    bic: np.ndarray
    log_like_at_mpv: np.ndarray
    n_params: np.ndarray
    probability: np.ndarray
    results: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {s: {"evidence_log": float(e), "bic": float(b), "log_like_at_mpv": float(ll), "n_params": int(n),
                    "probability": float(p)}
                for s, e, b, ll, n, p in zip(self.structures, self.evidence_log, self.bic, self.log_like_at_mpv,
                                             self.n_params, self.probability)}


def compare_models(model, datasets, structures=STRUCTURES, n_samples=10_000, seed=0, theta_box=(0.75, 1.25),
                   var_box=(0.0, 0.01), config=None, priors=None) -> ModelComparison:
    """Evidence, BIC and posterior probability of hierarchical discrepancy structures.

    Each structure is sampled with the hierarchical factor
    ``N(theta_s | mu, diag(var))`` in place of the uniform theta prior, so its
    evidence is the TMCMC estimate plus the log volume of the theta box.
    """
    ev, bics, lls, nps, res = [], [], [], [], []
    n_modes = datasets[0].n_modes
    n_obs = len(datasets[0].observed_dofs[0])
    for k, s in enumerate(structures):
        r = sample_stage1(model, datasets, n_samples=n_samples, seed=seed + k, theta_box=theta_box, var_box=var_box,
                          structure=s, hierarchical=True, config=config)
        _, ll = r.best()
        n_par = free_parameter_count(r.target)
        ev.append(r.samples.evidence_log + r.target.log_theta_volume())
        lls.append(ll)
        nps.append(n_par)
        bics.append(bic_score(ll, n_par, n_modes, n_obs))
        res.append(r)
    ev = np.array(ev)
    return ModelComparison(tuple(structures), ev, np.array(bics), np.array(lls), np.array(nps),
                           posterior_model_probability(ev, priors), res)
