"""Analytical derivatives of modal properties and of the fitting objectives.

Eigenvalue derivatives use the Rayleigh-quotient form.  Eigenvector
derivatives solve ``(K - w M) dpsi = rhs`` with the pseudo-inverse of the
singular operator; the free component along ``psi`` is fixed by
differentiating ``psi^T psi = 1`` (so first derivatives are orthogonal to
``psi`` and second derivatives carry ``-dpsi_p . dpsi_q`` along it), which
is exactly the derivative of the unit-norm vectors returned by
:func:`hbmodal.fem.solve_modes`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import SensitivityDegenerate, UnobservableMode
from .fem import AnalyticalModes, ModeMatching, StructuralModelClass, assemble, match_modes, solve_modes
from .gaussian import pinv

PINV_RTOL = 1e-8
GAP_RTOL = 1e-8


@dataclass
class ModalSensitivities:
    """Per-mode derivatives with respect to ``theta``.

    ``d_omega_sq[i, p]``, ``d_psi[i][:, p]``, ``d2_omega_sq[i][p, q]`` and
    ``d2_psi[i][:, p, q]``.
    """

    d_omega_sq: np.ndarray
    d_psi: list
    d2_omega_sq: list | None = None
    d2_psi: list | None = None


def _sym_pinv(a, rtol=PINV_RTOL):
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    keep = np.abs(w) > rtol * np.abs(w).max()
    vk = v[:, keep]
    return (vk / w[keep]) @ vk.T


def _setup(model, theta, modes):
    k, m = assemble(model, theta)
    allw = sla.eigh(k, m, eigvals_only=True)
    ops = []
    for i, w in enumerate(modes.omega_sq):
        others = np.delete(allw, np.argmin(np.abs(allw - w)))
        if others.size:
            gap = np.min(np.abs(others - w)) / max(abs(w), np.finfo(float).tiny)
            if gap < GAP_RTOL:
                raise SensitivityDegenerate("eigenvalue too close to a neighbour", mode=i, gap=float(gap))
        ops.append(_sym_pinv(k - w * m))
    dmats = [model.derivative_matrices(p) for p in range(model.n_theta)]
    return k, m, ops, dmats


def modal_first_derivatives(model: StructuralModelClass, theta, modes: AnalyticalModes,
                            _setup_cache=None) -> ModalSensitivities:
    """First derivatives of every mode in ``modes``.

    Raises
    ------
    SensitivityDegenerate
        If an eigenvalue lies within a relative gap of 1e-8 of another.
    """
    k, m, ops, dmats = _setup_cache or _setup(model, theta, modes)
    nt = model.n_theta
    dw = np.zeros((modes.n_modes, nt))
    dpsi = []
    for i in range(modes.n_modes):
        psi = modes.psi[:, i]
        w = modes.omega_sq[i]
        mpsi = m @ psi
        mq = psi @ mpsi
        d = np.zeros((psi.size, nt))
        for p, (dk, dm) in enumerate(dmats):
            dw[i, p] = psi @ (dk @ psi - w * (dm @ psi)) / mq
            rhs = dw[i, p] * mpsi + w * (dm @ psi) - dk @ psi
            x = ops[i] @ rhs
            d[:, p] = x - psi * (psi @ x)
        dpsi.append(d)
    return ModalSensitivities(d_omega_sq=dw, d_psi=dpsi)


def modal_second_derivatives(model: StructuralModelClass, theta, modes: AnalyticalModes,
                             first: ModalSensitivities, _setup_cache=None) -> ModalSensitivities:
    """Complete ``first`` with second derivatives (linear parameterization)."""
    k, m, ops, dmats = _setup_cache or _setup(model, theta, modes)
    nt = model.n_theta
    d2w_all, d2psi_all = [], []
    for i in range(modes.n_modes):
        psi = modes.psi[:, i]
        w = modes.omega_sq[i]
        mpsi = m @ psi
        mq = psi @ mpsi
        dw = first.d_omega_sq[i]
        dp = first.d_psi[i]
        d2w = np.zeros((nt, nt))
        d2p = np.zeros((psi.size, nt, nt))
        for p in range(nt):
            dkp, dmp = dmats[p]
            for q in range(p, nt):
                dkq, dmq = dmats[q]
                val = (psi @ dkp @ dp[:, q] + psi @ dkq @ dp[:, p]
                       - dw[p] * (psi @ dmq @ psi + mpsi @ dp[:, q])
                       - dw[q] * (psi @ dmp @ psi + mpsi @ dp[:, p])
                       - w * (psi @ dmp @ dp[:, q] + psi @ dmq @ dp[:, p])) / mq
                rhs = (val * mpsi
                       + dw[p] * (dmq @ psi + m @ dp[:, q])
                       + dw[q] * (dmp @ psi + m @ dp[:, p])
                       + w * (dmp @ dp[:, q] + dmq @ dp[:, p])
                       - dkp @ dp[:, q] - dkq @ dp[:, p])
                x = ops[i] @ rhs
                x = x - psi * (psi @ x) - psi * (dp[:, p] @ dp[:, q])
                d2w[p, q] = d2w[q, p] = val
                d2p[:, p, q] = d2p[:, q, p] = x
        d2w_all.append(d2w)
        d2psi_all.append(d2p)
    return ModalSensitivities(d_omega_sq=first.d_omega_sq, d_psi=first.d_psi,
                              d2_omega_sq=d2w_all, d2_psi=d2psi_all)


def modal_sensitivities(model, theta, modes, second=True) -> ModalSensitivities:
    cache = _setup(model, theta, modes)
    first = modal_first_derivatives(model, theta, modes, _setup_cache=cache)
    if not second:
        return first
    return modal_second_derivatives(model, theta, modes, first, _setup_cache=cache)


def normalized_shape_derivatives(psi, dofs, sign, d_psi, d2_psi=None):
    """Derivatives of ``v = sign * gamma psi / |gamma psi|``.

    Parameters
    ----------
    psi : (n_dof,) array
    dofs : sequence of int
        Observed DOFs (the selection ``gamma``).
    sign : float
        Sign of ``chi``; held constant.
    d_psi : (n_dof, n_theta) array
    d2_psi : (n_dof, n_theta, n_theta) array, optional

    Returns
    -------
    dv : (n_obs, n_theta) array
    d2v : (n_obs, n_theta, n_theta) array or None

    Raises
    ------
    UnobservableMode
        If ``|gamma psi| < 1e-12``.
    """
    dofs = list(dofs)
    u = np.asarray(psi, float)[dofs]
    n = np.linalg.norm(u)
    if n < 1e-12:
        raise UnobservableMode("mode has no amplitude at the observed DOFs", norm=float(n))
    s = 1.0 if sign >= 0 else -1.0
    du = np.asarray(d_psi, float)[dofs]            # (no, nt)
    a = u @ du                                      # (nt,)
    dv = s * (du / n - np.outer(u, a) / n ** 3)
    if d2_psi is None:
        return dv, None
    d2u = np.asarray(d2_psi, float)[dofs]          # (no, nt, nt)
    b = np.einsum("i,ipq->pq", u, d2u)
    c = du.T @ du
    d2v = (d2u / n
           - (np.einsum("ip,q->ipq", du, a) + np.einsum("iq,p->ipq", du, a)) / n ** 3
           + 3 * np.einsum("i,p,q->ipq", u, a, a) / n ** 5
           - np.einsum("i,pq->ipq", u, b + c) / n ** 3)
    return dv, s * d2v


# ----------------------------------------------------------------- objectives

@dataclass
class FeatureTargets:
    """Targets and weights of a quadratic modal-feature objective.

    The objective is
    ``0.5 sum_i fw_i (w_i(th) - ft_i)^2 + 0.5 sum_i (v_i(th) - st_i)^T SW_i (v_i(th) - st_i)``
    plus ``const``.  ``match_shapes`` are the experimental shapes used for
    pairing and sign.
    """

    freq_target: np.ndarray
    freq_weight: np.ndarray
    shape_target: list
    shape_weight: list
    match_shapes: list
    observed_dofs: tuple
    const: float = 0.0


@dataclass
class ObjectiveEval:
    value: float
    grad: np.ndarray | None
    hess: np.ndarray | None
    modes: AnalyticalModes
    matching: ModeMatching
    omega_sq: np.ndarray          # matched analytical omega^2, per experimental mode
    shapes: list                  # matched chi*gamma*psi


def matched_modes(model, theta, match_shapes, observed_dofs, n_analytical=None, mac_floor=0.5):
    n_exp = len(match_shapes)
    n_an = min(model.n_dof, n_exp if n_analytical is None else max(n_analytical, n_exp))
    k, m = assemble(model, theta)
    modes = solve_modes(k, m, n_an)
    matching = match_modes(modes, match_shapes, observed_dofs, mac_floor=mac_floor)
    return modes, matching


def evaluate_objective(model, theta, targets: FeatureTargets, order: int = 0,
                       n_analytical=None) -> ObjectiveEval:
    """Value (and gradient for ``order>=1``, Hessian for ``order>=2``)."""
    theta = np.asarray(theta, float)
    modes, matching = matched_modes(model, theta, targets.match_shapes, targets.observed_dofs,
                                    n_analytical)
    n_exp = len(targets.match_shapes)
    sens = None
    if order >= 1:
        sub = AnalyticalModes(omega_sq=modes.omega_sq[list(matching.order)],
                              psi=modes.psi[:, list(matching.order)])
        sens = modal_sensitivities(model, theta, sub, second=order >= 2)
    nt = model.n_theta
    val = targets.const
    g = np.zeros(nt) if order >= 1 else None
    h = np.zeros((nt, nt)) if order >= 2 else None
    ws, vs = [], []
    for i in range(n_exp):
        j = matching.order[i]
        w = modes.omega_sq[j]
        v = matching.observed_shape(modes, i)
        ws.append(w)
        vs.append(v)
        r = w - targets.freq_target[i]
        fw = targets.freq_weight[i]
        e = v - targets.shape_target[i]
        sw = targets.shape_weight[i]
        val += 0.5 * fw * r * r + 0.5 * e @ sw @ e
        if order >= 1:
            dw = sens.d_omega_sq[i]
            dv, d2v = normalized_shape_derivatives(
                modes.psi[:, j], matching.observed_dofs[i], matching.chi[i], sens.d_psi[i],
                sens.d2_psi[i] if order >= 2 else None)
            swe = sw @ e
            g += fw * r * dw + dv.T @ swe
            if order >= 2:
                h += fw * (np.outer(dw, dw) + r * sens.d2_omega_sq[i])
                h += dv.T @ sw @ dv + np.einsum("i,ipq->pq", swe, d2v)
    if h is not None:
        h = 0.5 * (h + h.T)
    return ObjectiveEval(value=float(val), grad=g, hess=h, modes=modes, matching=matching,
                         omega_sq=np.array(ws), shapes=vs)


def _pinv_scalar(x):
    return 1.0 / x if x > 0 else 0.0


def j_targets(dataset, discrepancy) -> FeatureTargets:
    """Targets of the Laplace objective J: MPV data, inverse aggregate covariances."""
    w_hat = dataset.omega_sq_hat
    fw = np.array([_pinv_scalar(dataset.cov_omega_sq[i] + w_hat[i] ** 2 * discrepancy.tau_sq[i])
                   for i in range(dataset.n_modes)])
    sw = [pinv(dataset.cov_phi[i] + discrepancy.sigma_phi[i]) for i in range(dataset.n_modes)]
    return FeatureTargets(freq_target=w_hat.copy(), freq_weight=fw, shape_target=list(dataset.phi_hat),
                          shape_weight=sw, match_shapes=list(dataset.phi_hat),
                          observed_dofs=dataset.observed_dofs)


def l_targets(dataset, moments, discrepancy) -> FeatureTargets:
    """Targets of the M-step objective -L: E-step moments, inverse discrepancy covariances.

    ``const`` collects the moment terms that do not depend on ``theta`` so
    the value equals the full expected negative log-likelihood part.
    """
    w_hat = dataset.omega_sq_hat
    fw = np.array([_pinv_scalar(w_hat[i] ** 2 * discrepancy.tau_sq[i]) for i in range(dataset.n_modes)])
    sw = [pinv(discrepancy.sigma_phi[i]) for i in range(dataset.n_modes)]
    const = 0.0
    for i in range(dataset.n_modes):
        var = moments.e_omega_4[i] - moments.e_omega_sq[i] ** 2
        ep = moments.e_phi[i]
        const += 0.5 * fw[i] * var + 0.5 * (np.trace(sw[i] @ moments.e_phi_outer[i]) - ep @ sw[i] @ ep)
    return FeatureTargets(freq_target=np.asarray(moments.e_omega_sq, float).copy(), freq_weight=fw,
                          shape_target=[np.asarray(p) for p in moments.e_phi], shape_weight=sw,
                          match_shapes=list(dataset.phi_hat), observed_dofs=dataset.observed_dofs,
                          const=float(const))


def grad_L_theta(model, theta, dataset, moments, discrepancy):
    """Gradient of the (negated) M-step objective ``-L(theta)``."""
    return evaluate_objective(model, theta, l_targets(dataset, moments, discrepancy), order=1).grad


def hess_L_theta(model, theta, dataset, moments, discrepancy):
    return evaluate_objective(model, theta, l_targets(dataset, moments, discrepancy), order=2).hess


def grad_J_theta(model, theta, dataset, discrepancy):
    """Gradient of the Laplace objective ``J(theta)``."""
    return evaluate_objective(model, theta, j_targets(dataset, discrepancy), order=1).grad


def hess_J_theta(model, theta, dataset, discrepancy):
    """Hessian of ``J(theta)`` including second-order modal terms."""
    return evaluate_objective(model, theta, j_targets(dataset, discrepancy), order=2).hess
