"""Batch orchestration: identification, ECM, Laplace + EM and optional sampling."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import PipelineConfig
from .ecm import DiscrepancyModel, EcmConfig, EcmResult, run_ecm
from .errors import ConfigError
from .fem import AnalyticalModes, load_model
from .hyper import EmResult, StructuralHyper, laplace_theta, run_em
from .sensitivities import matched_modes, modal_first_derivatives
from .spectral import identify_modal_parameters, load_modal_dataset, load_time_history
from .synthetic import synthetic_case_5_1

log = logging.getLogger(__name__)


@dataclass
class SamplingSummary:
    stage1: object
    stage2: object
    comparison: object = None


@dataclass
class RunReport:
    """Everything a run produced; serialized by :func:`hbmodal.report.emit_report`."""

    config: PipelineConfig
    model: object
    datasets: list
    ecm: EcmResult | None = None
    posteriors: list = field(default_factory=list)
    em: EmResult | None = None
    sampling: SamplingSummary | None = None
    status: dict = field(default_factory=dict)

    @property
    def hyper(self) -> StructuralHyper | None:
        return None if self.em is None else self.em.hyper

    @property
    def discrepancy(self) -> DiscrepancyModel | None:
        return None if self.ecm is None else self.ecm.discrepancy


def pairwise_gaussian(hyper: StructuralHyper, i: int, j: int):
    """Two-parameter marginal of the hyper distribution.

    Returns ``(mean (2,), cov (2, 2), rho, flagged)``; ``rho`` is 0 and
    ``flagged`` True when either variance is zero.
    """
    n = hyper.mu0.size
    if i == j or not (0 <= i < n and 0 <= j < n):
        raise ValueError("need two distinct valid parameter indices")
    idx = [i, j]
    mean = hyper.mu0[idx]
    cov = hyper.sigma0[np.ix_(idx, idx)]
    den = cov[0, 0] * cov[1, 1]
    if not den > 0:
        return mean, cov, 0.0, True
    rho = float(np.clip(cov[0, 1] / np.sqrt(den), -1.0, 1.0))
    return mean, cov, rho, False


def load_datasets(config: PipelineConfig):
    """Model and modal datasets of ``config`` (identification included)."""
    if config.source == "synthetic":
        model, datasets = synthetic_case_5_1(config.synthetic)
        if config.model_path is not None:
            model = load_model(config.model_path)
        return model, datasets
    model = load_model(config.model_path)
    if config.source == "modal":
        datasets = [load_modal_dataset(p) for p in config.modal_files]
    else:
        datasets = []
        for p in config.time_history_files:
            th = load_time_history(p)
            log.info("identifying %s (%d bands)", th.dataset_id, len(config.bands))
            datasets.append(identify_modal_parameters(th, config.bands))
    if not datasets:
        raise ConfigError("empty dataset list")
    ids = [d.dataset_id for d in datasets]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"dataset ids must be unique, got {ids}")
    return model, datasets


def analytical_modal_stats(model, theta, cov_theta, dataset, n_analytical=None):
    """Matched analytical ``omega_sq`` at ``theta`` and their S.D. from ``cov_theta``."""
    modes, matching = matched_modes(model, theta, dataset.phi_hat, dataset.observed_dofs, n_analytical)
    sub = AnalyticalModes(omega_sq=modes.omega_sq[list(matching.order)], psi=modes.psi[:, list(matching.order)])
    grad = modal_first_derivatives(model, theta, sub).d_omega_sq
    var = np.einsum("ip,pq,iq->i", grad, cov_theta, grad)
    return sub.omega_sq.copy(), np.sqrt(np.maximum(var, 0.0))


def _sampler(config: PipelineConfig, model, datasets):
    from .sampler import TmcmcConfig, compare_models, sample_hyper_stage2, sample_stage1

    s = config.sampler
    tc = TmcmcConfig(n_mh_steps=s.mh_steps)
    st1 = sample_stage1(model, datasets, n_samples=s.n_samples, seed=s.seed, theta_box=s.theta_box,
                        var_box=s.var_box, include_identification=not config.ignore_identification, config=tc)
    st2 = sample_hyper_stage2(st1.theta_draws(), (s.theta_box, s.var_box), s.n_samples, s.seed + 1, tc)
    comp = None
    if s.compare_models:
        use = [d.without_identification_uncertainty() for d in datasets] if config.ignore_identification else datasets
        comp = compare_models(model, use, n_samples=s.n_samples, seed=s.seed + 2, theta_box=s.theta_box,
                              var_box=s.var_box, config=tc)
    return SamplingSummary(st1, st2, comp)


def run_pipeline(config: PipelineConfig, sample_only=False, emit=True) -> RunReport:
    """Run every configured phase and (with ``emit``) write the artifacts.

    ``sample_only`` skips ECM and EM and forces the sampler on.
    """
    model, datasets = load_datasets(config)
    report = RunReport(config=config, model=model, datasets=datasets)
    phase2 = [d.without_identification_uncertainty() for d in datasets] if config.ignore_identification else datasets
    if not sample_only:
        ecm = run_ecm(datasets, model, EcmConfig(tol=config.tol, max_iter=config.max_iter,
                                                  isotropic=config.isotropic,
                                                  ignore_identification=config.ignore_identification))
        report.ecm = ecm
        report.status["ecm"] = ecm.status
        report.posteriors = [laplace_theta(d, ecm.discrepancy, model, th) for d, th in zip(phase2, ecm.theta_hat)]
        if len(datasets) >= 2:
            em = run_em(report.posteriors, tol=config.tol, max_iter=config.max_iter)
            report.em = em
            report.posteriors = em.posteriors
            report.status["em"] = em.status
        else:
            report.status["em"] = "skipped"
    if sample_only or config.sampler.enabled:
        report.sampling = _sampler(config, model, datasets)
        report.status["sampler"] = "completed"
    if emit:
        from .report import emit_report

        emit_report(report, config.output_dir)
    return report


def identify_only(config: PipelineConfig):
    """Phase I only: identify (or load) the datasets and write them to the output directory."""
    from .report import write_datasets

    model, datasets = load_datasets(config)
    write_datasets(datasets, config.output_dir)
    return datasets
