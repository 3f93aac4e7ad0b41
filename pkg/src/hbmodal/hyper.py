"""Laplace approximation of per-dataset structural posteriors and EM for the hyper-parameters."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ecm import DiscrepancyModel, convergence_metric
from .errors import HBMError, InsufficientDatasets, NonIdentifiableTheta
from .fem import StructuralModelClass
from .gaussian import Gaussian, log_pdf, product_posterior, sym
from .sensitivities import evaluate_objective, j_targets
from .spectral.data import ModalDataset

log = logging.getLogger(__name__)

GRAD_TOL = 1e-5


@dataclass
class StructuralHyper:
    """Hyper mean and covariance of the per-dataset structural parameters."""

    mu0: np.ndarray
    sigma0: np.ndarray

    def __post_init__(self):
        self.mu0 = np.atleast_1d(np.asarray(self.mu0, float))
        self.sigma0 = sym(np.atleast_2d(np.asarray(self.sigma0, float)))
        if self.sigma0.shape != (self.mu0.size, self.mu0.size):
            raise ValueError("sigma0 must be n_theta x n_theta")

    def vector(self) -> np.ndarray:
        return np.concatenate([self.mu0, self.sigma0[np.triu_indices(self.mu0.size)]])

    def to_dict(self) -> dict:
        return {"mu0": self.mu0.tolist(), "sigma0": self.sigma0.tolist()}


@dataclass
class DatasetPosterior:
    """Laplace posterior of ``theta_s`` and its EM moments."""

    theta_hat: np.ndarray
    cov_theta: np.ndarray
    e_theta: np.ndarray | None = None
    e_theta_outer: np.ndarray | None = None
    dataset_id: str = "dataset"
    grad_norm: float = 0.0
    j_value: float = 0.0

    def __post_init__(self):
        self.theta_hat = np.atleast_1d(np.asarray(self.theta_hat, float))
        self.cov_theta = sym(np.atleast_2d(np.asarray(self.cov_theta, float)))
        if self.e_theta is None:
            self.e_theta = self.theta_hat.copy()
        if self.e_theta_outer is None:
            self.e_theta_outer = self.cov_theta + np.outer(self.theta_hat, self.theta_hat)


def loss_J(theta, dataset: ModalDataset, discrepancy: DiscrepancyModel, model: StructuralModelClass) -> float:
    """Weighted misfit of frequencies and normalized shapes at ``theta``.

    Weights are pseudo-inverses of identification plus prediction-error
    covariances; modes are re-matched at ``theta``.
    """
    return evaluate_objective(model, theta, j_targets(dataset, discrepancy), order=0).value


def laplace_theta(dataset, discrepancy, model, theta_start, max_iter=50) -> DatasetPosterior:
    """Gaussian approximation of ``exp(-J)`` around its minimum.

    ``theta_start`` (the ECM estimate) minimizes the M-step objective, which
    differs slightly from ``J``; a few Newton steps on ``J`` move it to the
    exact minimum before the Hessian is inverted.

    Raises
    ------
    NonIdentifiableTheta
        If the Hessian at the minimum is not positive definite or the
        gradient check fails.
    """
    targets = j_targets(dataset, discrepancy)
    theta = np.asarray(theta_start, float).copy()
    ev = evaluate_objective(model, theta, targets, order=2)
    for _ in range(max_iter):
        try:
            step = -np.linalg.solve(ev.hess, ev.grad)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        moved = False
        while t > 1e-8:
            cand = np.clip(theta + t * step, model.theta_lower, model.theta_upper)
            try:
                ec = evaluate_objective(model, cand, targets, order=2)
            except HBMError:
                t *= 0.5
                continue
            if ec.value <= ev.value:
                theta, ev, moved = cand, ec, True
                break
            t *= 0.5
        if not moved or np.max(np.abs(t * step)) <= 1e-14 * max(1.0, np.max(np.abs(theta))):
            break
    h = ev.hess
    try:
        chol = np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        raise NonIdentifiableTheta("Hessian of J not positive definite", dataset=dataset.dataset_id,
                                   min_eig=float(np.linalg.eigvalsh(h).min())) from None
    ci = np.linalg.inv(chol)
    cov = ci.T @ ci
    gnorm = float(np.linalg.norm(ev.grad))
    # gradient judged in the metric of the posterior covariance (scale free)
    newton = float(np.sqrt(max(ev.grad @ cov @ ev.grad, 0.0)))
    if not newton <= GRAD_TOL:
        raise NonIdentifiableTheta("J not at a stationary point", dataset=dataset.dataset_id, grad=gnorm,
                                   newton_decrement=newton)
    return DatasetPosterior(theta_hat=theta, cov_theta=cov, dataset_id=dataset.dataset_id, grad_norm=gnorm,
                            j_value=ev.value)


def em_init(posteriors) -> StructuralHyper:
    """Mean of MPVs; scatter about it plus the mean identification covariance.

    Raises
    ------
    InsufficientDatasets
        With fewer than two datasets.
    """
    if len(posteriors) < 2:
        raise InsufficientDatasets("hyper-parameters need at least two datasets", n=len(posteriors))
    th = np.array([p.theta_hat for p in posteriors])
    mu = th.mean(axis=0)
    r = th - mu
    sig = r.T @ r / len(posteriors) + np.mean([p.cov_theta for p in posteriors], axis=0)
    return StructuralHyper(mu, sig)


def em_estep(posterior: DatasetPosterior, hyper: StructuralHyper) -> DatasetPosterior:
    """Posterior moments of ``theta_s`` given the hyper-parameters."""
    g = product_posterior(posterior.theta_hat, posterior.cov_theta, Gaussian(hyper.mu0, hyper.sigma0))
    return DatasetPosterior(theta_hat=posterior.theta_hat, cov_theta=posterior.cov_theta, e_theta=g.mean,
                            e_theta_outer=g.cov + np.outer(g.mean, g.mean), dataset_id=posterior.dataset_id,
                            grad_norm=posterior.grad_norm, j_value=posterior.j_value)


def _floor(cov, rel=1e-12):
    w, v = np.linalg.eigh(sym(cov))
    fl = rel * max(np.trace(cov), 0.0)
    return sym((v * np.maximum(w, fl)) @ v.T)


def em_mstep(posteriors) -> StructuralHyper:
    """Mean of ``E[theta_s]`` and mean second moment about it (eigenvalues floored)."""
    mu = np.mean([p.e_theta for p in posteriors], axis=0)
    acc = np.zeros((mu.size, mu.size))
    for p in posteriors:
        acc += p.e_theta_outer + np.outer(mu, mu) - np.outer(mu, p.e_theta) - np.outer(p.e_theta, mu)
    return StructuralHyper(mu, _floor(acc / len(posteriors)))


def marginal_loglik(posteriors, hyper: StructuralHyper) -> float:
    """``sum_s log N(theta_hat_s | mu0, sigma0 + cov_theta_s)``."""
    return float(sum(log_pdf(Gaussian(hyper.mu0, hyper.sigma0 + p.cov_theta), p.theta_hat) for p in posteriors))


@dataclass
class EmResult:
    hyper: StructuralHyper
    posteriors: list
    trace: list
    status: str
    n_iter: int
    loglik: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def run_em(posteriors, tol=1e-6, max_iter=500) -> EmResult:
    """Iterate E- and M-steps from :func:`em_init` until the relative change is below ``tol``."""
    if not posteriors:
        raise ValueError("need at least one posterior")
    hyper = em_init(posteriors)
    ll = [marginal_loglik(posteriors, hyper)]
    trace = []
    status = "not-converged"
    cur = list(posteriors)
    it = 0
    for it in range(1, max_iter + 1):
        cur = [em_estep(p, hyper) for p in cur]
        new = em_mstep(cur)
        conv = convergence_metric(new.vector(), hyper.vector())
        hyper = new
        ll.append(marginal_loglik(posteriors, hyper))
        trace.append({"iteration": it, "conv": conv, "loglik": ll[-1], "mu0": hyper.mu0.tolist(),
                      "sigma0": hyper.sigma0.tolist()})
        if conv < tol:
            status = "converged"
            break
    cur = [em_estep(p, hyper) for p in cur]
    return EmResult(hyper=hyper, posteriors=cur, trace=trace, status=status, n_iter=it, loglik=ll)
