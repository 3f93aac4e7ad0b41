"""Log-targets of the two sampling stages.

Stage 1 targets the product over datasets of
``N(w_hat | w(theta_s), s2 + w_hat^2 tau) N(phi_hat | v(theta_s), S_id + sigma_phi I)``
with isotropic mode-shape discrepancy.  The vectorized evaluation solves
all eigenproblems of a particle population in one batched call and pairs
modes by a batched greedy MAC; :func:`log_target_stage1` is the per-point
reference built on :mod:`hbmodal.gaussian`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _kernels
from ..errors import HBMError
from ..fem import MAC_FLOOR, StructuralModelClass, assemble, match_modes, solve_modes
from ..gaussian import LOG2PI, PINV_RTOL, RANGE_RTOL, Gaussian, log_pdf
from .tmcmc import BoxPrior

STRUCTURES = ("full", "shared", "single")


def log_target_stage1(theta_all, discrepancy, datasets, model: StructuralModelClass, n_analytical=None,
                      prior_box=None) -> float:
    """Reference stage-1 log-target at one point.

    ``theta_all`` is a list of per-dataset parameter vectors.  Returns
    ``-inf`` outside ``prior_box`` (a ``(lower, upper)`` pair for theta) or
    when modes cannot be solved or matched.
    """
    total = 0.0
    for th, ds in zip(theta_all, datasets):
        th = np.atleast_1d(np.asarray(th, float))
        if prior_box is not None and (np.any(th < prior_box[0]) or np.any(th > prior_box[1])):
            return -np.inf
        try:
            k, m = assemble(model, th)
            n_an = min(model.n_dof, n_analytical or ds.n_modes)
            modes = solve_modes(k, m, n_an)
            match = match_modes(modes, ds.phi_hat, ds.observed_dofs)
        except HBMError:
            return -np.inf
        for i in range(ds.n_modes):
            w_an = modes.omega_sq[match.order[i]]
            v = match.observed_shape(modes, i)
            var = ds.cov_omega_sq[i] + ds.omega_sq_hat[i] ** 2 * discrepancy.tau_sq[i]
            total += log_pdf(Gaussian([w_an], [[var]]), [ds.omega_sq_hat[i]])
            total += log_pdf(Gaussian(v, ds.cov_phi[i] + discrepancy.sigma_phi[i]), ds.phi_hat[i])
    return float(total)


class BatchModes:
    """Batched eigen-solution and greedy MAC pairing for one dataset layout."""

    def __init__(self, model: StructuralModelClass, n_analytical: int):
        self.model = model
        self.n_an = n_analytical
        self.k_stack = np.array((model.k0,) + model.k_sub)
        self.m_stack = np.array((model.m0,) + model.m_sub)

    def solve(self, theta):
        """Return ``(omega_sq (B, n_an), psi (B, n_dof, n_an), ok (B,))``."""
        theta = np.atleast_2d(theta)
        bsz = theta.shape[0]
        nk = self.model.n_k
        ck = np.concatenate([np.ones((bsz, 1)), theta[:, :nk]], axis=1)
        cm = np.concatenate([np.ones((bsz, 1)), theta[:, nk:]], axis=1)
        k = np.einsum("bp,pij->bij", ck, self.k_stack)
        m = np.einsum("bp,pij->bij", cm, self.m_stack)
        ok = np.ones(bsz, bool)
        try:
            chol = np.linalg.cholesky(m)
        except np.linalg.LinAlgError:
            ok = np.array([np.all(np.linalg.eigvalsh(mi) > 0) for mi in m])
            m = np.where(ok[:, None, None], m, np.eye(m.shape[1])[None])
            chol = np.linalg.cholesky(m)
        li = np.linalg.inv(chol)
        a = li @ k @ np.transpose(li, (0, 2, 1))
        a = 0.5 * (a + np.transpose(a, (0, 2, 1)))
        w, u = np.linalg.eigh(a)
        psi = np.transpose(li, (0, 2, 1)) @ u[:, :, : self.n_an]
        psi = psi / np.linalg.norm(psi, axis=1, keepdims=True)
        return w[:, : self.n_an], psi, ok

    @staticmethod
    def match(psi, phi_hat, dofs, mac_floor=MAC_FLOOR):
        """Greedy MAC pairing.  Returns ``(order (B, n_exp), v list of (B, n_o), ok (B,))``."""
        bsz = psi.shape[0]
        n_exp = len(phi_hat)
        n_an = psi.shape[2]
        obs = [psi[:, list(d), :] for d in dofs]                       # (B, n_o, n_an)
        dots = np.stack([np.einsum("i,bij->bj", p, o) for p, o in zip(phi_hat, obs)], axis=1)
        norms = np.stack([np.einsum("bij,bij->bj", o, o) for o in obs], axis=1)
        pp = np.array([p @ p for p in phi_hat])[None, :, None]
        with np.errstate(invalid="ignore", divide="ignore"):
            mac = np.where(norms > 0, dots ** 2 / (pp * norms), 0.0)
        work = mac.copy()
        order = np.full((bsz, n_exp), -1)
        ok = np.ones(bsz, bool)
        rows = np.arange(bsz)
        for _ in range(n_exp):
            flat = work.reshape(bsz, -1)
            best = np.argmax(flat, axis=1)
            val = flat[rows, best]
            ok &= val >= mac_floor
            i, j = np.divmod(best, n_an)
            order[rows, i] = j
            work[rows, i, :] = -1.0
            work[rows[:, None], :, j[:, None]] = -1.0
        vs = []
        for e in range(n_exp):
            j = np.maximum(order[:, e], 0)
            g = obs[e][rows, :, j]                                      # (B, n_o)
            s = np.sign(dots[rows, e, j])
            s = np.where(s == 0, 1.0, s)
            vs.append(g * (s / np.linalg.norm(g, axis=1))[:, None])
        return order, vs, ok


class _ShapeTerm:
    """Pre-diagonalized identification covariance of one experimental shape."""

    def __init__(self, phi_hat, cov):
        self.phi_hat = np.asarray(phi_hat, float)
        lam, u = np.linalg.eigh(0.5 * (cov + cov.T))
        self.lam = np.clip(lam, 0.0, None)
        self.u = u

    def loglik(self, v, sig):
        """``log N(phi_hat | v, S_id + sig I)`` for rows of ``v`` and per-row ``sig``."""
        r = self.phi_hat[None, :] - v
        z = r @ self.u
        ev = self.lam[None, :] + np.asarray(sig, float)[:, None]
        top = ev.max(axis=1, keepdims=True)
        keep = ev > PINV_RTOL * top
        safe = np.where(keep, ev, 1.0)
        quad = np.sum(np.where(keep, z * z / safe, 0.0), axis=1)
        logdet = np.sum(np.where(keep, np.log(safe), 0.0), axis=1)
        rank = keep.sum(axis=1)
        off = np.sqrt(np.sum(np.where(keep, 0.0, z * z), axis=1))
        rn = np.linalg.norm(r, axis=1)
        out = -0.5 * (rank * LOG2PI + logdet + quad)
        return np.where((rn > 0) & (off > RANGE_RTOL * rn), -np.inf, out)


@dataclass
class Stage1Layout:
    names: tuple
    lower: np.ndarray
    upper: np.ndarray


class Stage1Target:
    """Vectorized stage-1 log-target over a particle population.

    Parameter vector: every ``theta_s`` in dataset order, then the
    discrepancy variances.  ``structure`` selects how they are shared:

    * ``"full"``: one ``tau_sq`` and one ``sigma_phi`` per mode;
    * ``"shared"``: one ``tau_sq`` for all modes and one ``sigma_phi`` for all modes;
    * ``"single"``: one variance for every feature.

    With ``hierarchical`` the vector continues with the hyper mean and the
    per-parameter hyper variances, and the target gains
    ``sum_s log N(theta_s | mu, diag(var))``.
    """

    def __init__(self, model, datasets, theta_box=(0.75, 1.25), var_box=(0.0, 0.01), structure="full",
                 hierarchical=False, include_identification=True, n_analytical=None):
        if structure not in STRUCTURES:
            raise ValueError(f"structure must be one of {STRUCTURES}")
        if not include_identification:
            datasets = [d.without_identification_uncertainty() for d in datasets]
        self.model = model
        self.datasets = list(datasets)
        self.structure = structure
        self.hierarchical = hierarchical
        self.nt = model.n_theta
        self.nd = len(self.datasets)
        self.nm = self.datasets[0].n_modes
        self.batch = BatchModes(model, min(model.n_dof, n_analytical or self.nm))
        self.shape_terms = [[_ShapeTerm(d.phi_hat[i], d.cov_phi[i]) for i in range(self.nm)] for d in self.datasets]
        names = [f"theta{s + 1}" if self.nt == 1 else f"theta{s + 1}_{p + 1}"
                 for s in range(self.nd) for p in range(self.nt)]
        if structure == "full":
            vnames = [f"tau_sq{i + 1}" for i in range(self.nm)] + [f"sigma_phi_sq{i + 1}" for i in range(self.nm)]
        elif structure == "shared":
            vnames = ["tau_sq", "sigma_phi_sq"]
        else:
            vnames = ["variance"]
        self.n_var = len(vnames)
        names += vnames
        lo = [theta_box[0]] * (self.nd * self.nt) + [var_box[0]] * self.n_var
        hi = [theta_box[1]] * (self.nd * self.nt) + [var_box[1]] * self.n_var
        if hierarchical:
            names += [f"mu{p + 1}" for p in range(self.nt)] + [f"sigma_theta_sq{p + 1}" for p in range(self.nt)]
            lo += [theta_box[0]] * self.nt + [var_box[0]] * self.nt
            hi += [theta_box[1]] * self.nt + [var_box[1]] * self.nt
        self.layout = Stage1Layout(tuple(names), np.array(lo, float), np.array(hi, float))
        self.theta_box = theta_box

    @property
    def names(self):
        return self.layout.names

    @property
    def dim(self) -> int:
        return len(self.layout.names)

    def prior(self) -> BoxPrior:
        return BoxPrior(self.layout.lower, self.layout.upper)

    def variance_mask(self):
        """True at discrepancy and hyper-variance coordinates."""
        m = np.zeros(self.dim, bool)
        base = self.nd * self.nt
        m[base: base + self.n_var] = True
        if self.hierarchical:
            m[base + self.n_var + self.nt:] = True
        return m

    def log_variance_prior(self) -> "LogVariancePrior":
        return LogVariancePrior(self.layout.lower, self.layout.upper, self.variance_mask())

    def log_theta_volume(self) -> float:
        """Log volume of the theta box (reference measure of the hierarchical terms)."""
        return float(self.nd * self.nt * np.log(self.theta_box[1] - self.theta_box[0]))

    def variances(self, x):
        """Per-particle ``(tau (B, nm), sig (B, nm))``."""
        x = np.atleast_2d(x)
        v = x[:, self.nd * self.nt: self.nd * self.nt + self.n_var]
        if self.structure == "full":
            return v[:, : self.nm], v[:, self.nm:]
        if self.structure == "shared":
            return np.repeat(v[:, :1], self.nm, axis=1), np.repeat(v[:, 1:2], self.nm, axis=1)
        return np.repeat(v, self.nm, axis=1), np.repeat(v, self.nm, axis=1)

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, float))
        bsz = x.shape[0]
        tau, sig = self.variances(x)
        total = np.zeros(bsz)
        for s, ds in enumerate(self.datasets):
            th = x[:, s * self.nt:(s + 1) * self.nt]
            w, psi, ok = self.batch.solve(th)
            order, vs, ok_m = self.batch.match(psi, ds.phi_hat, ds.observed_dofs)
            ok &= ok_m
            rows = np.arange(bsz)
            for i in range(self.nm):
                w_an = w[rows, np.maximum(order[:, i], 0)]
                var = ds.cov_omega_sq[i] + ds.omega_sq_hat[i] ** 2 * tau[:, i]
                r = ds.omega_sq_hat[i] - w_an
                with np.errstate(divide="ignore", invalid="ignore"):
                    lf = np.where(var > 0, -0.5 * (LOG2PI + np.log(np.where(var > 0, var, 1.0)) + r * r / np.where(var > 0, var, 1.0)),
                                  np.where(r == 0, 0.0, -np.inf))
                total += lf + self.shape_terms[s][i].loglik(vs[i], sig[:, i])
            total = np.where(ok, total, -np.inf)
        if self.hierarchical:
            base = self.nd * self.nt + self.n_var
            mu = x[:, base: base + self.nt]
            hv = x[:, base + self.nt: base + 2 * self.nt]
            with np.errstate(divide="ignore", invalid="ignore"):
                for s in range(self.nd):
                    d = x[:, s * self.nt:(s + 1) * self.nt] - mu
                    total += np.sum(-0.5 * (LOG2PI + np.log(hv) + d * d / hv), axis=1)
            total = np.where(np.all(hv > 0, axis=1), total, -np.inf)
        return np.where(np.isnan(total), -np.inf, total)

    def unpack(self, x):
        """Split one parameter vector into ``(thetas, tau_sq, sigma_phi_sq)``."""
        x = np.asarray(x, float)
        thetas = [x[s * self.nt:(s + 1) * self.nt] for s in range(self.nd)]
        tau, sig = self.variances(x)
        return thetas, tau[0], sig[0]

    def discrepancy(self, x):
        """Isotropic :class:`~hbmodal.ecm.DiscrepancyModel` of one parameter vector."""
        from ..ecm import DiscrepancyModel

        _, tau, sig = self.unpack(x)
        n_o = [len(d) for d in self.datasets[0].observed_dofs]
        return DiscrepancyModel(tau, [s * np.eye(n) for s, n in zip(sig, n_o)], isotropic=True)


class LogVariancePrior:
    """Box prior with some coordinates sampled as log-variances.

    Coordinates flagged in ``log_mask`` carry ``u = log v`` with ``v``
    uniform on ``(0, upper)``, so their density is ``exp(u) / upper``; the
    others are uniform on ``(lower, upper)``.  The change of variables
    leaves the posterior of ``v`` and the evidence unchanged while straightening
    the funnel between small variances and the parameters they control.
    """

    def __init__(self, lower, upper, log_mask):
        self.lower = np.asarray(lower, float)
        self.upper = np.asarray(upper, float)
        self.mask = np.asarray(log_mask, bool)
        if np.any(self.lower[self.mask] != 0):
            raise ValueError("log-variance coordinates need a zero lower bound")
        self._log_hi = np.log(self.upper[self.mask])
        self._log_width = float(np.sum(np.log(self.upper - self.lower)[~self.mask]))

    @property
    def dim(self):
        return self.lower.size

    def sample(self, rng, n):
        x = self.lower + (self.upper - self.lower) * rng.random((n, self.dim))
        x[:, self.mask] = np.log(np.maximum(x[:, self.mask], 1e-300))
        return x

    def logpdf(self, x):
        x = np.atleast_2d(x)
        lin = x[:, ~self.mask]
        u = x[:, self.mask]
        ok = np.all((lin >= self.lower[~self.mask]) & (lin <= self.upper[~self.mask]), axis=1)
        ok &= np.all(u <= self._log_hi, axis=1)
        val = np.sum(u - self._log_hi, axis=1) - self._log_width
        return np.where(ok, val, -np.inf)

    def to_natural(self, x):
        x = np.array(x, float, copy=True, ndmin=2)
        x[:, self.mask] = np.exp(x[:, self.mask])
        return x


class NaturalTarget:
    """Evaluates a target written in natural coordinates at log-variance coordinates."""

    def __init__(self, target, prior: LogVariancePrior):
        self.target = target
        self.prior = prior

    def __call__(self, x):
        return self.target(self.prior.to_natural(x))


# ------------------------------------------------------------------ stage 2

def _corr_cholesky(angles, d):
    """Lower Cholesky factors of correlation matrices from hyperspherical angles (B, d(d-1)/2)."""
    bsz = angles.shape[0]
    ell = np.zeros((bsz, d, d))
    ell[:, 0, 0] = 1.0
    k = 0
    for i in range(1, d):
        prod = np.ones(bsz)
        for j in range(i):
            a = angles[:, k]
            k += 1
            ell[:, i, j] = np.cos(a) * prod
            prod = prod * np.sin(a)
        ell[:, i, i] = prod
    return ell


class Stage2Prior:
    """Prior of the stage-2 parameterization ``(mu, log var, angles)``.

    ``mu`` is uniform on its box, each hyper variance is uniform on
    ``(0, var_max)`` (so its logarithm has density ``exp(u) / var_max``)
    and the correlation angles are uniform on ``(0, pi)``.
    """

    def __init__(self, d, mu_box, var_max):
        self.d = d
        self.mu_lo = np.broadcast_to(np.asarray(mu_box[0], float), (d,)).copy()
        self.mu_hi = np.broadcast_to(np.asarray(mu_box[1], float), (d,)).copy()
        self.var_max = float(var_max)
        self.n_ang = d * (d - 1) // 2

    @property
    def dim(self):
        return 2 * self.d + self.n_ang

    def sample(self, rng, n):
        mu = self.mu_lo + (self.mu_hi - self.mu_lo) * rng.random((n, self.d))
        u = np.log(self.var_max * (1.0 - rng.random((n, self.d))))
        ang = np.pi * rng.random((n, self.n_ang))
        return np.concatenate([mu, u, ang], axis=1)

    def logpdf(self, x):
        x = np.atleast_2d(x)
        d = self.d
        mu, u, ang = x[:, :d], x[:, d:2 * d], x[:, 2 * d:]
        ok = np.all((mu >= self.mu_lo) & (mu <= self.mu_hi), axis=1)
        ok &= np.all(u < np.log(self.var_max), axis=1)
        ok &= np.all((ang > 0) & (ang < np.pi), axis=1)
        val = (-np.sum(np.log(self.mu_hi - self.mu_lo)) + np.sum(u - np.log(self.var_max), axis=1)
               - self.n_ang * np.log(np.pi))
        return np.where(ok, val, -np.inf)


class Stage2Target:
    """``sum_s log mean_m N(theta_s^(m) | mu0, Sigma0)`` over a population."""

    def __init__(self, theta_draws, max_draws=1000):
        self.draws = []
        for dr in theta_draws:
            dr = np.atleast_2d(np.asarray(dr, float))
            if dr.shape[0] > max_draws:
                idx = np.linspace(0, dr.shape[0] - 1, max_draws).round().astype(int)
                dr = dr[idx]
            self.draws.append(np.ascontiguousarray(dr))
        if not self.draws:
            raise ValueError("theta_draws must be nonempty")
        self.d = self.draws[0].shape[1]

    def covariances(self, x):
        x = np.atleast_2d(x)
        d = self.d
        sd = np.exp(0.5 * x[:, d:2 * d])
        ell = _corr_cholesky(x[:, 2 * d:], d)
        chol = sd[:, :, None] * ell
        return x[:, :d], chol

    def __call__(self, x):
        mu, chol = self.covariances(x)
        ci = np.ascontiguousarray(np.linalg.inv(chol))
        diag = np.abs(np.diagonal(chol, axis1=1, axis2=2))
        with np.errstate(divide="ignore"):
            logdet = 2 * np.sum(np.log(diag), axis=1)
        out = np.zeros(mu.shape[0])
        mu = np.ascontiguousarray(mu)
        for dr in self.draws:
            out += _kernels.mixture_loglik(dr, mu, ci, np.ascontiguousarray(logdet)) - np.log(dr.shape[0])
        return np.where(np.isfinite(logdet), out, -np.inf)


def stage2_columns(samples_u, d):
    """Convert ``(mu, log var, angles)`` draws into ``(mu, var, correlations)`` columns."""
    u = np.atleast_2d(samples_u)
    mu = u[:, :d]
    var = np.exp(u[:, d:2 * d])
    ell = _corr_cholesky(u[:, 2 * d:], d)
    corr = ell @ np.transpose(ell, (0, 2, 1))
    iu = np.triu_indices(d, 1)
    return np.concatenate([mu, var, corr[:, iu[0], iu[1]]], axis=1)
