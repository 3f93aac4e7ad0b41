"""ECM estimation of per-dataset structural parameters and discrepancy covariances.

Each iteration runs an E-step (posterior moments of the experimental modal
parameters given the current analytical modes), a conditional maximization
over every ``theta_s`` and a closed-form update of the discrepancy
variances.  The frequency E-step is exact; the mode-shape E-step is a
Laplace approximation on the unit sphere, whose constrained optimum comes
from a ``2 n_o`` eigenproblem and is polished on the secular equation.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateFrequencyPosterior, HBMError, InadmissibleParameters, InsufficientDatasetsWarning,
                     Mstep1Failed, ModeshapeEstepFailed)
from .fem import StructuralModelClass, assemble, match_modes, solve_modes
from .gaussian import LOG2PI, Gaussian, log_pdf, pinv, sym
from .sensitivities import evaluate_objective, l_targets, matched_modes
from .spectral.data import ModalDataset

log = logging.getLogger(__name__)

KKT_RTOL = 1e-6
IMAG_RTOL = 1e-8


@dataclass
class DiscrepancyModel:
    """Prediction-error variances of the modal features.

    ``tau_sq[i]`` is the dimensionless frequency variance of mode ``i``
    (the variance of ``omega_sq`` is ``omega_sq_hat**2 * tau_sq``) and
    ``sigma_phi[i]`` the mode-shape covariance.
    """

    tau_sq: np.ndarray
    sigma_phi: list
    isotropic: bool = False

    def __post_init__(self):
        self.tau_sq = np.asarray(self.tau_sq, float).copy()
        self.sigma_phi = [sym(s) for s in self.sigma_phi]
        if np.any(self.tau_sq < 0):
            raise ValueError("tau_sq must be non-negative")

    @property
    def n_modes(self) -> int:
        return self.tau_sq.size

    @property
    def sigma_phi_scalar(self) -> np.ndarray:
        """Mean diagonal of each mode-shape covariance (the isotropic level)."""
        return np.array([np.trace(s) / s.shape[0] for s in self.sigma_phi])

    def vector(self) -> np.ndarray:
        parts = [self.tau_sq]
        for s in self.sigma_phi:
            if self.isotropic:
                parts.append([np.trace(s) / s.shape[0]])
            else:
                parts.append(s[np.triu_indices(s.shape[0])])
        return np.concatenate([np.ravel(p) for p in parts])

    def to_dict(self) -> dict:
        return {"tau_sq": self.tau_sq.tolist(), "sigma_phi": [s.tolist() for s in self.sigma_phi],
                "sigma_phi_scalar": self.sigma_phi_scalar.tolist(), "isotropic": self.isotropic}


@dataclass
class ModeShapeMoments:
    phi: np.ndarray
    delta: float
    e_outer: np.ndarray
    kkt_residual: float


@dataclass
class EStepMoments:
    """Posterior moments of one dataset's experimental modal parameters."""

    e_omega_sq: np.ndarray
    e_omega_4: np.ndarray
    phi_mode: list
    lagrange: np.ndarray
    e_phi_outer: list

    @property
    def e_phi(self) -> list:
        # expectation of the normalized shape taken at the Laplace mode
        return self.phi_mode

    @classmethod
    def from_mpv(cls, dataset: ModalDataset) -> "EStepMoments":
        """Moments collapsed onto the MPVs (identification uncertainty ignored)."""
        w = np.asarray(dataset.omega_sq_hat, float)
        return cls(e_omega_sq=w.copy(), e_omega_4=w ** 2, phi_mode=[p.copy() for p in dataset.phi_hat],
                   lagrange=np.full(w.size, np.nan), e_phi_outer=[np.outer(p, p) for p in dataset.phi_hat])


# ------------------------------------------------------------------ E-step

def estep_frequency(dataset: ModalDataset, i: int, discrepancy: DiscrepancyModel, omega_sq_analytical: float):
    """Return ``(E[w], E[w^2])`` for experimental ``w = omega_sq`` of mode ``i``.

    The posterior combines ``N(w_hat | w, s2)`` with ``N(w | w_an, t)`` where
    ``t = w_hat**2 * tau_sq``; written in variance form so that either
    variance may be zero.

    Raises
    ------
    DegenerateFrequencyPosterior
        If both variances are zero.
    """
    w_hat = float(dataset.omega_sq_hat[i])
    s2 = float(dataset.cov_omega_sq[i])
    t = w_hat ** 2 * float(discrepancy.tau_sq[i])
    if s2 <= 0 and t <= 0:
        raise DegenerateFrequencyPosterior("identification and prediction-error variances are both zero",
                                           dataset=dataset.dataset_id, mode=i)
    tot = s2 + t
    mean = (t * w_hat + s2 * omega_sq_analytical) / tot
    var = s2 * t / tot
    return mean, var + mean * mean


def _secular_polish(lam, beta, delta, n_iter=50):
    """Newton on ``1/|phi(delta)| - 1 = 0`` with ``phi = beta / (delta - lam)``.

    Valid left of the smallest eigenvalue, where the function is monotone.
    """
    lo_bound = lam[0]
    for _ in range(n_iter):
        d = lam - delta
        if np.any(d <= 0):
            break
        q = beta / d
        nrm = np.linalg.norm(q)
        if nrm == 0:
            break
        g = 1.0 / nrm - 1.0
        dn = np.sum(q * q / d) / nrm          # d|q|/d delta
        dg = -dn / nrm ** 2
        if dg == 0:
            break
        step = -g / dg
        new = delta + step
        if new >= lo_bound:
            new = 0.5 * (delta + lo_bound)
        if abs(new - delta) <= 1e-15 * max(1.0, abs(delta)):
            delta = new
            break
        delta = new
    return delta


def constrained_shape_optimum(a, b):
    """Minimize ``0.5 phi^T A phi + b^T phi`` on the unit sphere.

    Solves the ``2 n`` eigenproblem ``[[A, b b^T], [I, A]] [phi; z] = delta [phi; z]``,
    recovers ``phi = x / (b^T z)`` from each real eigenpair, keeps the one
    with the smallest objective and checks that it also has the smallest
    eigenvalue.  The winner is polished on the secular equation.

    Returns ``(phi, delta)``.
    """
    a = sym(a)
    b = np.asarray(b, float)
    n = b.size
    big = np.block([[a, np.outer(b, b)], [np.eye(n), a]])
    vals, vecs = np.linalg.eig(big)
    cands = []
    for k in range(2 * n):
        lam = vals[k]
        if abs(lam.imag) > IMAG_RTOL * max(abs(lam.real), 1.0):
            continue
        vec = vecs[:, k].real if np.abs(vecs[:, k].imag).max() <= 1e-8 * np.abs(vecs[:, k]).max() else None
        if vec is None:
            # complex phase on a real eigenvalue: rotate to the real axis
            v = vecs[:, k]
            j = np.argmax(np.abs(v))
            vec = (v * np.conj(v[j]) / abs(v[j])).real
        x, z = vec[:n], vec[n:]
        c = b @ z
        if abs(c) < 1e-300 or np.linalg.norm(x) == 0:
            continue
        phi = x / c
        nrm = np.linalg.norm(phi)
        if not np.isfinite(nrm) or nrm == 0:
            continue
        phi = phi / nrm
        cands.append((0.5 * phi @ a @ phi + b @ phi, lam.real, phi))
    if not cands:
        raise ModeshapeEstepFailed("no admissible real eigenpair")
    best = min(cands, key=lambda c: c[0])
    smallest = min(cands, key=lambda c: c[1])
    if best is not smallest and abs(best[0] - smallest[0]) > 1e-10 * max(1.0, abs(best[0])):
        raise ModeshapeEstepFailed("minimum-objective and smallest-eigenvalue pairs disagree",
                                   objective_delta=float(best[1]), smallest_delta=float(smallest[1]))
    # polish; the global optimum has delta below the smallest eigenvalue of A
    lam, q = np.linalg.eigh(a)
    beta = q.T @ b
    delta = float(best[1])
    if delta < lam[0]:
        delta = _secular_polish(lam, beta, delta)
        phi = -q @ (beta / (lam - delta))
        phi = phi / np.linalg.norm(phi)
    else:
        phi = best[2]
        delta = float(phi @ (a @ phi + b))
    if phi @ best[2] < 0:
        phi = -phi
    return phi, float(delta)


def _tangent_inverse(a, phi, delta):
    p = np.eye(phi.size) - np.outer(phi, phi)
    h = p @ (sym(a) - delta * np.eye(phi.size)) @ p
    return sym(p @ pinv(h) @ p)


def estep_modeshape(dataset: ModalDataset, i: int, discrepancy: DiscrepancyModel, chi_gamma_psi) -> ModeShapeMoments:
    """Laplace moments of the normalized experimental shape of mode ``i``.

    Raises
    ------
    ModeshapeEstepFailed
        When no admissible eigenpair exists or the stationarity residual
        exceeds ``1e-6 * max(1, |A| + |b|)``.
    """
    phi_hat = np.asarray(dataset.phi_hat[i], float)
    v = np.asarray(chi_gamma_psi, float)
    s_id = np.asarray(dataset.cov_phi[i], float)
    s_pe = discrepancy.sigma_phi[i]
    id_zero = not np.any(s_id)
    pe_zero = not np.any(s_pe)
    if id_zero and pe_zero:
        raise ModeshapeEstepFailed("both mode-shape covariances are zero", dataset=dataset.dataset_id, mode=i)
    w_id = np.zeros_like(s_id) if id_zero else pinv(s_id)
    w_pe = np.zeros_like(s_pe) if pe_zero else pinv(s_pe)
    a = w_id + w_pe
    b = -w_id @ phi_hat - w_pe @ v
    if id_zero or pe_zero:
        # one factor is a point mass: the posterior sits exactly on it
        phi = phi_hat.copy() if id_zero else v / np.linalg.norm(v)
        delta = float(phi @ (a @ phi + b))
        return ModeShapeMoments(phi=phi, delta=delta, e_outer=np.outer(phi, phi), kkt_residual=0.0)
    phi, delta = constrained_shape_optimum(a, b)
    if phi @ phi_hat < 0:
        phi = -phi
        phi, delta = phi, float(phi @ (a @ phi + b))
    res = float(np.linalg.norm(a @ phi + b - delta * phi))
    scale = max(1.0, np.linalg.norm(a, 2) + np.linalg.norm(b))
    if not res <= KKT_RTOL * scale or abs(np.linalg.norm(phi) - 1) > 1e-10:
        raise ModeshapeEstepFailed("stationarity residual too large", dataset=dataset.dataset_id, mode=i,
                                   residual=res)
    e_outer = _tangent_inverse(a, phi, delta) + np.outer(phi, phi)
    return ModeShapeMoments(phi=phi, delta=delta, e_outer=sym(e_outer), kkt_residual=res)


def estep(dataset: ModalDataset, discrepancy: DiscrepancyModel, omega_sq_an, shapes_an) -> EStepMoments:
    nm = dataset.n_modes
    e1 = np.zeros(nm)
    e2 = np.zeros(nm)
    phis, deltas, outers = [], np.zeros(nm), []
    for i in range(nm):
        e1[i], e2[i] = estep_frequency(dataset, i, discrepancy, float(omega_sq_an[i]))
        m = estep_modeshape(dataset, i, discrepancy, shapes_an[i])
        phis.append(m.phi)
        deltas[i] = m.delta
        outers.append(m.e_outer)
    return EStepMoments(e_omega_sq=e1, e_omega_4=e2, phi_mode=phis, lagrange=deltas, e_phi_outer=outers)


# ------------------------------------------------------------------ M-steps

@dataclass
class ThetaFit:
    theta: np.ndarray
    value: float
    omega_sq: np.ndarray
    shapes: list
    matching: object
    n_iter: int


def _project(model, theta):
    lo = model.theta_lower
    hi = model.theta_upper
    # stay a hair inside an open lower bound at zero so M(theta) remains admissible
    return np.clip(theta, lo, hi)


def minimize_feature_objective(model: StructuralModelClass, targets, theta_start, max_iter=100,
                               dataset_id=None) -> ThetaFit:
    """Box-projected damped Newton on a quadratic modal-feature objective."""
    theta = _project(model, np.asarray(theta_start, float))
    try:
        ev = evaluate_objective(model, theta, targets, order=2)
    except HBMError as exc:
        raise Mstep1Failed(f"objective not evaluable at start: {exc}", dataset=dataset_id) from None
    it = 0
    for it in range(1, max_iter + 1):
        g, h = ev.grad, ev.hess
        w, v = np.linalg.eigh(h)
        floor = 1e-12 * max(np.abs(w).max(), 1e-300)
        step = -v @ ((v.T @ g) / np.maximum(np.abs(w), floor))
        t = 1.0
        accepted = None
        while t > 1e-10:
            cand = _project(model, theta + t * step)
            try:
                ec = evaluate_objective(model, cand, targets, order=2)
            except (InadmissibleParameters, HBMError):
                t *= 0.5
                continue
            if ec.value <= ev.value + 1e-4 * t * (g @ (cand - theta)) or ec.value <= ev.value:
                accepted = (cand, ec)
                break
            t *= 0.5
        if accepted is None:
            break
        moved = np.max(np.abs(accepted[0] - theta))
        decrease = ev.value - accepted[1].value
        theta, ev = accepted
        if moved <= 1e-13 * max(1.0, np.max(np.abs(theta))) or decrease <= 1e-16 * max(1.0, abs(ev.value)):
            break
    if not np.isfinite(ev.value):
        raise Mstep1Failed("non-finite objective", dataset=dataset_id)
    return ThetaFit(theta=theta, value=ev.value, omega_sq=ev.omega_sq, shapes=ev.shapes,
                    matching=ev.matching, n_iter=it)


def mstep1_minimize_theta(dataset, moments, discrepancy, model, theta_start, max_iter=100) -> ThetaFit:
    """Minimize the negated M-step objective ``-L(theta)`` for one dataset.

    Modes are re-solved and re-matched at every iterate.

    Raises
    ------
    Mstep1Failed
        If the objective cannot be evaluated at the start point.
    """
    targets = l_targets(dataset, moments, discrepancy)
    return minimize_feature_objective(model, targets, theta_start, max_iter, dataset.dataset_id)


def mstep2_update(datasets, moments, analytical, isotropic=False) -> DiscrepancyModel:
    """Dataset averages of the residual second moments.

    ``analytical[s]`` is ``(omega_sq, shapes)`` of the matched analytical
    modes of dataset ``s``.
    """
    nd = len(datasets)
    nm = datasets[0].n_modes
    tau = np.zeros(nm)
    sig = [0.0] * nm
    for ds, mo, (w_an, v_an) in zip(datasets, moments, analytical):
        for i in range(nm):
            w_hat = ds.omega_sq_hat[i]
            tau[i] += (mo.e_omega_4[i] - 2 * w_an[i] * mo.e_omega_sq[i] + w_an[i] ** 2) / w_hat ** 2
            ep = mo.e_phi[i]
            v = v_an[i]
            sig[i] = sig[i] + mo.e_phi_outer[i] - np.outer(ep, v) - np.outer(v, ep) + np.outer(v, v)
    tau = np.clip(tau / nd, 0.0, None)
    sig = [sym(s / nd) for s in sig]
    if isotropic:
        sig = [max(np.trace(s), 0.0) / s.shape[0] * np.eye(s.shape[0]) for s in sig]
    return DiscrepancyModel(tau_sq=tau, sigma_phi=sig, isotropic=isotropic)


# ------------------------------------------------------------------ initialization

def least_squares_theta(model: StructuralModelClass, dataset: ModalDataset, theta_ref=None, n_analytical=None):
    """Linear least squares on the frequency equations with reference eigenvectors.

    Uses ``sum_p theta_p psi^T K_p psi - w_hat sum_q theta_q psi^T M_q psi
    = w_hat psi^T M0 psi - psi^T K0 psi`` for every matched mode, with
    ``psi`` taken from the model at ``theta_ref`` (nominal by default).
    """
    theta_ref = model.theta_nominal if theta_ref is None else np.asarray(theta_ref, float)
    modes, matching = matched_modes(model, theta_ref, dataset.phi_hat, dataset.observed_dofs, n_analytical)
    rows, rhs = [], []
    for i in range(dataset.n_modes):
        psi = modes.psi[:, matching.order[i]]
        w = dataset.omega_sq_hat[i]
        row = [psi @ k @ psi for k in model.k_sub] + [-w * (psi @ m @ psi) for m in model.m_sub]
        rows.append(row)
        rhs.append(w * (psi @ model.m0 @ psi) - psi @ model.k0 @ psi)
    sol = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]
    return np.clip(sol, model.theta_lower, model.theta_upper)


def matched_at(model, theta, dataset, n_analytical=None):
    modes, matching = matched_modes(model, theta, dataset.phi_hat, dataset.observed_dofs, n_analytical)
    w = modes.omega_sq[list(matching.order)]
    v = [matching.observed_shape(modes, i) for i in range(dataset.n_modes)]
    return w, v, matching


def init_discrepancy(datasets, theta_init, model, isotropic=False, n_analytical=None) -> DiscrepancyModel:
    """Initial discrepancy: ensemble mean-square mismatch plus mean identification variance.

    Warns with :class:`InsufficientDatasetsWarning` below two datasets.
    """
    if len(datasets) < 2:
        warnings.warn("fewer than two datasets: variance estimates are degenerate", InsufficientDatasetsWarning,
                      stacklevel=2)
    nd = len(datasets)
    nm = datasets[0].n_modes
    tau = np.zeros(nm)
    sig = [0.0] * nm
    for ds, th in zip(datasets, theta_init):
        w, v, _ = matched_at(model, th, ds, n_analytical)
        for i in range(nm):
            w_hat = ds.omega_sq_hat[i]
            tau[i] += ((w[i] - w_hat) ** 2 + ds.cov_omega_sq[i]) / w_hat ** 2
            r = v[i] - ds.phi_hat[i]
            sig[i] = sig[i] + np.outer(r, r) + ds.cov_phi[i]
    sig = [sym(s / nd) for s in sig]
    if isotropic:
        sig = [np.trace(s) / s.shape[0] * np.eye(s.shape[0]) for s in sig]
    return DiscrepancyModel(tau_sq=tau / nd, sigma_phi=sig, isotropic=isotropic)


# ------------------------------------------------------------------ driver

@dataclass
class EcmConfig:
    tol: float = 1e-6
    max_iter: int = 500
    isotropic: bool = False
    ignore_identification: bool = False
    theta_init: list | None = None
    mstep_max_iter: int = 100
    n_analytical: int | None = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class EcmResult:
    theta_hat: list
    omega_sq: list
    shapes: list
    matching: list
    discrepancy: DiscrepancyModel
    moments: list
    trace: list
    status: str
    n_iter: int
    objective: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def convergence_metric(new, old) -> float:
    """``|new - old|^2 / |old|^2``."""
    new = np.asarray(new, float)
    old = np.asarray(old, float)
    den = old @ old
    num = (new - old) @ (new - old)
    if den == 0:
        return 0.0 if num == 0 else np.inf
    return float(num / den)


def marginal_objective(datasets, analytical, discrepancy) -> float:
    """Negative log of the frequency/shape marginal at the analytical modes.

    ``-sum log N(w_hat | w_an, s2 + w_hat^2 tau) - sum log N(phi_hat | v, S_id + S_pe)``
    (prior factors on ``theta`` omitted).
    """
    total = 0.0
    for ds, (w_an, v_an) in zip(datasets, analytical):
        for i in range(ds.n_modes):
            var = ds.cov_omega_sq[i] + ds.omega_sq_hat[i] ** 2 * discrepancy.tau_sq[i]
            r = ds.omega_sq_hat[i] - w_an[i]
            total += 0.5 * (LOG2PI + np.log(var) + r * r / var)
            total -= log_pdf(Gaussian(v_an[i], ds.cov_phi[i] + discrepancy.sigma_phi[i]), ds.phi_hat[i])
    return float(total)


def _xi(thetas, disc):
    return np.concatenate([np.concatenate(thetas), disc.vector()])


def run_ecm(datasets, model: StructuralModelClass, config: EcmConfig | None = None) -> EcmResult:
    """Alternate E-step, per-dataset theta updates and discrepancy updates.

    Stops when ``|Xi_k - Xi_{k-1}|^2 / |Xi_{k-1}|^2 < tol`` where ``Xi``
    stacks every ``theta_s`` and the discrepancy parameters, or after
    ``max_iter`` iterations (status ``"not-converged"``).  With
    ``ignore_identification`` the identification covariances are zeroed
    and the E-step collapses onto the MPVs.
    """
    config = config or EcmConfig()
    if not datasets:
        raise ValueError("need at least one dataset")
    if config.ignore_identification:
        datasets = [d.without_identification_uncertainty() for d in datasets]
    na = config.n_analytical
    if config.theta_init is None:
        thetas = [least_squares_theta(model, d, n_analytical=na) for d in datasets]
    else:
        thetas = [np.asarray(t, float) for t in config.theta_init]
    disc = init_discrepancy(datasets, thetas, model, config.isotropic, na)
    analytical = []
    for d, th in zip(datasets, thetas):
        w, v, _ = matched_at(model, th, d, na)
        analytical.append((w, v))
    trace = []
    objective = [marginal_objective(datasets, analytical, disc)]
    xi_old = _xi(thetas, disc)
    status = "not-converged"
    conv = 1.0
    moments = []
    matchings = []
    it = 0
    for it in range(1, config.max_iter + 1):
        if config.ignore_identification:
            moments = [EStepMoments.from_mpv(d) for d in datasets]
        else:
            moments = [estep(d, disc, w, v) for d, (w, v) in zip(datasets, analytical)]
        fits = [mstep1_minimize_theta(d, m, disc, model, th, config.mstep_max_iter)
                for d, m, th in zip(datasets, moments, thetas)]
        thetas = [f.theta for f in fits]
        analytical = [(f.omega_sq, f.shapes) for f in fits]
        matchings = [f.matching for f in fits]
        disc = mstep2_update(datasets, moments, analytical, config.isotropic)
        xi = _xi(thetas, disc)
        conv = convergence_metric(xi, xi_old)
        xi_old = xi
        objective.append(marginal_objective(datasets, analytical, disc))
        trace.append({"iteration": it, "conv": conv, "objective": objective[-1],
                      "theta": [t.tolist() for t in thetas], "tau_sq": disc.tau_sq.tolist(),
                      "sigma_phi": disc.sigma_phi_scalar.tolist()})
        log.debug("ecm %d conv=%.3e obj=%.8g", it, conv, objective[-1])
        if conv < config.tol:
            status = "converged"
            break
    return EcmResult(theta_hat=thetas, omega_sq=[a[0] for a in analytical], shapes=[a[1] for a in analytical],
                     matching=matchings, discrepancy=disc, moments=moments, trace=trace, status=status,
                     n_iter=it, objective=objective)
