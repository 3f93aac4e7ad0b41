"""Shared oracles for the test-suite."""
import numpy as np

from hbmodal.ecm import DiscrepancyModel, estep, matched_at
from hbmodal.fem import AnalyticalModes, modes_at
from hbmodal.sensitivities import evaluate_objective, j_targets, l_targets, modal_sensitivities, normalized_shape_derivatives
from hbmodal.spectral.data import ModalDataset
from hbmodal.synthetic import shape_covariance

FD_STEP = 1e-6


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def central(fun, theta, step=FD_STEP):
    """Central differences of an array-valued ``fun``; derivative index goes last."""
    theta = np.asarray(theta, float)
    cols = []
    for p in range(theta.size):
        h = step * max(1.0, abs(theta[p]))
        e = np.zeros_like(theta)
        e[p] = h
        cols.append((np.asarray(fun(theta + e)) - np.asarray(fun(theta - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def noisy_dataset(model, theta, rng, dofs, n_modes, cov=0.01, dataset_id="r"):
    """Modal dataset near the model at ``theta`` with random misfit."""
    modes = modes_at(model, theta, n_modes)
    w = modes.omega_sq * (1 + cov * rng.standard_normal(n_modes))
    phis = []
    for i in range(n_modes):
        v = modes.psi[list(dofs), i] + cov * rng.standard_normal(len(dofs))
        phis.append(v / np.linalg.norm(v))
    return ModalDataset(omega_sq_hat=w, phi_hat=phis, cov_omega_sq=(cov * w) ** 2,
                        cov_phi=[shape_covariance(p, cov) for p in phis], observed_dofs=tuple(dofs),
                        dataset_id=dataset_id)


def random_discrepancy(rng, n_modes, n_obs):
    sig = []
    for _ in range(n_modes):
        a = rng.standard_normal((n_obs, n_obs))
        sig.append(1e-4 * (a @ a.T + np.eye(n_obs)))
    return DiscrepancyModel(tau_sq=rng.uniform(1e-5, 1e-4, n_modes), sigma_phi=sig)


def derivative_errors(model, theta, dataset, discrepancy):
    """Relative errors of every analytical derivative against central differences.

    First-order quantities are checked against differences of values,
    second-order ones against differences of the analytical first
    derivatives.
    """
    theta = np.asarray(theta, float)
    nm = dataset.n_modes
    dofs = dataset.observed_dofs

    def matched(th):
        w, v, mm = matched_at(model, th, dataset)
        modes = modes_at(model, th, model.n_dof)
        sub = AnalyticalModes(modes.omega_sq[list(mm.order)], modes.psi[:, list(mm.order)])
        return sub, mm

    sub, mm = matched(theta)
    sens = modal_sensitivities(model, theta, sub)

    def w_of(th):
        return matched(th)[0].omega_sq

    def psi_of(th):
        s, _ = matched(th)
        # follow the sign of the reference eigenvectors
        p = s.psi
        return p * np.sign(np.sum(p * sub.psi, axis=0))

    def v_of(th):
        s, m = matched(th)
        return np.concatenate([m.observed_shape(s, i) for i in range(nm)])

    def dw_of(th):
        s, _ = matched(th)
        return modal_sensitivities(model, th, s, second=False).d_omega_sq

    def dpsi_of(th):
        s, _ = matched(th)
        p = s.psi
        sg = np.sign(np.sum(p * sub.psi, axis=0))
        d = modal_sensitivities(model, th, AnalyticalModes(s.omega_sq, p * sg), second=False)
        return np.stack(d.d_psi)

    def dv_parts(th, second):
        s, m = matched(th)
        ss = modal_sensitivities(model, th, s, second=second)
        out = [normalized_shape_derivatives(s.psi[:, i], dofs[i], np.sign(m.chi[i]), ss.d_psi[i],
                                            ss.d2_psi[i] if second else None) for i in range(nm)]
        return out

    errs = {}
    errs["d_omega_sq"] = rel_err(sens.d_omega_sq, central(w_of, theta))
    errs["d_psi"] = rel_err(np.stack(sens.d_psi), central(psi_of, theta).transpose(1, 0, 2))
    dv = dv_parts(theta, True)
    errs["d_shape"] = rel_err(np.concatenate([d[0] for d in dv]), central(v_of, theta))
    errs["d2_omega_sq"] = rel_err(np.stack(sens.d2_omega_sq), central(dw_of, theta))
    errs["d2_psi"] = rel_err(np.stack(sens.d2_psi), central(dpsi_of, theta))
    errs["d2_shape"] = rel_err(np.concatenate([d[1] for d in dv]),
                               central(lambda th: np.concatenate([d[0] for d in dv_parts(th, False)]), theta))

    jt = j_targets(dataset, discrepancy)
    w_an, v_an, _ = matched_at(model, theta, dataset)
    mom = estep(dataset, discrepancy, w_an, v_an)
    lt = l_targets(dataset, mom, discrepancy)
    for name, tg in (("J", jt), ("L", lt)):
        ev = evaluate_objective(model, theta, tg, order=2)
        errs[f"grad_{name}"] = rel_err(ev.grad, central(lambda th: evaluate_objective(model, th, tg).value, theta))
        errs[f"hess_{name}"] = rel_err(ev.hess, central(lambda th: evaluate_objective(model, th, tg, order=1).grad,
                                                        theta))
    return errs


FIRST_ORDER = ("d_omega_sq", "d_psi", "d_shape", "grad_J", "grad_L")
SECOND_ORDER = ("d2_omega_sq", "d2_psi", "d2_shape", "hess_J", "hess_L")


def sphere_minimizer(a, b, x0, tol=1e-14, max_iter=200000):
    """Projected-gradient minimizer of ``0.5 x^T A x + b^T x`` on the unit sphere.

    Riemannian gradient steps with Barzilai-Borwein lengths and
    renormalization onto the sphere.
    """
    x = np.asarray(x0, float) / np.linalg.norm(x0)
    scale = np.linalg.norm(a, 2) + np.linalg.norm(b)

    def rgrad(y):
        g = a @ y + b
        return g - (y @ g) * y

    g = rgrad(x)
    alpha = 1.0 / scale
    for _ in range(max_iter):
        if np.linalg.norm(g) <= tol * scale:
            break
        xn = x - alpha * g
        xn /= np.linalg.norm(xn)
        gn = rgrad(xn)
        s, y = xn - x, gn - g
        sy = s @ y
        alpha = (s @ s) / sy if sy > 0 else 1.0 / scale
        x, g = xn, gn
    return x


def random_shape_instance(rng, n_obs, level=1e-3):
    """Random E-step mode-shape instance: ``(dataset, discrepancy, chi_gamma_psi)``."""
    phi_hat = rng.standard_normal(n_obs)
    phi_hat /= np.linalg.norm(phi_hat)
    v = phi_hat + 0.2 * rng.standard_normal(n_obs)
    v /= np.linalg.norm(v)

    def spd():
        m = rng.standard_normal((n_obs, n_obs))
        return level * (m @ m.T / n_obs + 0.1 * np.eye(n_obs))

    ds = ModalDataset(omega_sq_hat=[100.0], phi_hat=[phi_hat], cov_omega_sq=[1.0], cov_phi=[spd()],
                      observed_dofs=tuple(range(n_obs)))
    disc = DiscrepancyModel(tau_sq=[1e-4], sigma_phi=[spd()])
    return ds, disc, v


def angle(u, v):
    """Angle between two vectors, accurate for tiny angles."""
    u = np.asarray(u, float) / np.linalg.norm(u)
    v = np.asarray(v, float) / np.linalg.norm(v)
    return float(np.arctan2(np.linalg.norm(u - (u @ v) * v), u @ v))
