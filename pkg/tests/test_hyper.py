import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_chain
from helpers import noisy_dataset, random_discrepancy
from hbmodal import hyper
from hbmodal.ecm import DiscrepancyModel, matched_at
from hbmodal.errors import InsufficientDatasets, NonIdentifiableTheta
from hbmodal.hyper import (DatasetPosterior, StructuralHyper, em_estep, em_init, em_mstep, laplace_theta, loss_J,
                           marginal_loglik, run_em)
from hbmodal.sensitivities import ObjectiveEval
from hbmodal.spectral.data import ModalDataset


def _one_mode(w_hat, s2, phi=(0.6, 0.8), cov_phi=None):
    return ModalDataset(omega_sq_hat=[w_hat], phi_hat=[np.asarray(phi)], cov_omega_sq=[s2],
                        cov_phi=[np.zeros((2, 2)) if cov_phi is None else cov_phi], observed_dofs=(0, 1))


def _random_spd(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T + 0.5 * np.eye(n))


class TestLossJ:
    def test_exact_fit(self, two_story, datasets51):
        disc = DiscrepancyModel([1e-6, 1e-6], [1e-6 * np.eye(2)] * 2)
        assert abs(loss_J([1.02], datasets51[2], disc, two_story)) <= 1e-12

    def test_scalar_example(self, two_story):
        # one frequency, aggregate variance 4, residual 2; shape matched exactly
        w, v, _ = matched_at(two_story, [1.0], _one_mode(381.966, 1.0, np.array([0.5257, 0.8507]) / np.hypot(0.5257, 0.8507)))
        ds = _one_mode(w[0] + 2.0, 1.0, v[0])
        disc = DiscrepancyModel([3.0 / ds.omega_sq_hat[0] ** 2], [1e-6 * np.eye(2)])
        np.testing.assert_allclose(loss_J([1.0], ds, disc, two_story), 0.5, rtol=1e-10)

    def test_decreases_with_aggregate_variance(self, chain5):
        rng = np.random.default_rng(42)
        th = np.array([1.0, 1.1, 0.9, 1.0])
        ds = noisy_dataset(chain5, th * 1.03, rng, (0, 2, 4), 3)
        disc = random_discrepancy(rng, 3, 3)
        big = DiscrepancyModel(disc.tau_sq * 2, [2 * s for s in disc.sigma_phi])
        assert loss_J(th, ds, big, chain5) < loss_J(th, ds, disc, chain5)

    def test_weighting_special_cases(self, chain5):
        rng = np.random.default_rng(42)
        th = np.array([0.9, 1.2, 1.0, 1.1])
        noisy = noisy_dataset(chain5, th * 1.02, rng, (0, 2, 4), 3)
        disc = random_discrepancy(rng, 3, 3)
        w, v, _ = matched_at(chain5, th, noisy)

        def quad(fw, sw, ds):
            out = 0.0
            for i in range(3):
                r = w[i] - ds.omega_sq_hat[i]
                e = v[i] - ds.phi_hat[i]
                out += 0.5 * fw[i] * r * r + 0.5 * e @ sw[i] @ e
            return out

        # identification ignored: inverse prediction-error weights
        ds0 = noisy.without_identification_uncertainty()
        fw = 1.0 / (ds0.omega_sq_hat ** 2 * disc.tau_sq)
        sw = [np.linalg.inv(s) for s in disc.sigma_phi]
        np.testing.assert_allclose(loss_J(th, ds0, disc, chain5), quad(fw, sw, ds0), rtol=1e-10)
        # discrepancy ignored: inverse identification weights (pseudo-inverse of the tangent covariance)
        zero = DiscrepancyModel(np.zeros(3), [np.zeros((3, 3))] * 3)
        fw = 1.0 / noisy.cov_omega_sq
        sw = []
        for p, c in zip(noisy.phi_hat, noisy.cov_phi):
            vals, vecs = np.linalg.eigh(c)
            keep = vals > 1e-10 * vals.max()
            sw.append((vecs[:, keep] / vals[keep]) @ vecs[:, keep].T)
        np.testing.assert_allclose(loss_J(th, noisy, zero, chain5), quad(fw, sw, noisy), rtol=1e-10)


class TestLaplace:
    def test_identification_sd_below_spread(self, two_story, datasets51, ecm51):
        for ds, th in zip(datasets51, ecm51.theta_hat):
            post = laplace_theta(ds, ecm51.discrepancy, two_story, th)
            assert np.sqrt(post.cov_theta[0, 0]) < 0.02 / 10
            assert post.grad_norm <= 1e-5 or np.sqrt(post.grad_norm ** 2 * post.cov_theta[0, 0]) <= 1e-5
            np.testing.assert_allclose(post.theta_hat, th, atol=1e-4)

    def test_quadratic_objective(self, two_story, monkeypatch):
        h = np.array([[4.0, 1.0], [1.0, 3.0]])
        c = np.array([1.1, 0.9])

        class Box:
            theta_lower = np.zeros(2)
            theta_upper = np.full(2, 5.0)

        def fake(model, theta, targets, order=0, n_analytical=None):
            d = np.asarray(theta) - c
            return ObjectiveEval(0.5 * d @ h @ d, h @ d, h, None, None, None, None)

        monkeypatch.setattr(hyper, "evaluate_objective", fake)
        ds = _one_mode(10.0, 1.0)
        post = laplace_theta(ds, DiscrepancyModel([1e-3], [np.eye(2)]), Box(), [1.0, 1.0])
        np.testing.assert_allclose(post.theta_hat, c, rtol=1e-12)
        np.testing.assert_allclose(post.cov_theta, np.linalg.inv(h), rtol=1e-12)

    def test_non_pd_hessian(self, monkeypatch):
        h = np.array([[1.0, 0.0], [0.0, -1.0]])

        class Box:
            theta_lower = np.zeros(2)
            theta_upper = np.full(2, 5.0)

        def fake(model, theta, targets, order=0, n_analytical=None):
            return ObjectiveEval(0.0, np.zeros(2), h, None, None, None, None)

        monkeypatch.setattr(hyper, "evaluate_objective", fake)
        with pytest.raises(NonIdentifiableTheta):
            laplace_theta(_one_mode(10.0, 1.0), DiscrepancyModel([1e-3], [np.eye(2)]), Box(), [1.0, 1.0])


class TestEm:
    def test_init_identical_zero_cov(self):
        post = [DatasetPosterior([1.0, 2.0], np.zeros((2, 2))) for _ in range(3)]
        h = em_init(post)
        np.testing.assert_allclose(h.mu0, [1.0, 2.0])
        np.testing.assert_allclose(h.sigma0, 0.0, atol=1e-30)

    def test_init_reference_value(self):
        post = [DatasetPosterior([t], [[0.0]]) for t in (0.98, 1.00, 1.02)]
        h = em_init(post)
        np.testing.assert_allclose(h.mu0, [1.0], rtol=1e-14)
        np.testing.assert_allclose(h.sigma0, [[0.0008 / 3]], rtol=1e-10)

    def test_init_adds_mean_identification_cov(self):
        post = [DatasetPosterior([t], [[v]]) for t, v in ((0.98, 1e-6), (1.00, 3e-6), (1.02, 2e-6))]
        np.testing.assert_allclose(em_init(post).sigma0, [[0.0008 / 3 + 2e-6]], rtol=1e-10)

    def test_init_single_dataset(self):
        with pytest.raises(InsufficientDatasets):
            em_init([DatasetPosterior([1.0], [[1e-4]])])

    def test_estep_scalar(self):
        p = em_estep(DatasetPosterior([2.0], [[1.0]]), StructuralHyper([0.0], [[3.0]]))
        np.testing.assert_allclose(p.e_theta, [1.5], rtol=1e-14)
        np.testing.assert_allclose(p.e_theta_outer, [[3.0]], rtol=1e-14)

    def test_estep_flat_prior_limit(self):
        p = em_estep(DatasetPosterior([2.0, -1.0], np.diag([1e-3, 2e-3])), StructuralHyper([0.0, 0.0], 1e12 * np.eye(2)))
        np.testing.assert_allclose(p.e_theta, [2.0, -1.0], rtol=1e-10)

    def test_estep_symmetric_midpoint(self):
        rng = np.random.default_rng(42)
        s = _random_spd(rng, 3)
        p = em_estep(DatasetPosterior([1.0, 2.0, 3.0], s), StructuralHyper([3.0, 2.0, 1.0], s))
        np.testing.assert_allclose(p.e_theta, [2.0, 2.0, 2.0], rtol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 4))
    def test_estep_covariance_ordering(self, seed, n):
        rng = np.random.default_rng(seed)
        s, s0 = _random_spd(rng, n), _random_spd(rng, n)
        p = em_estep(DatasetPosterior(rng.standard_normal(n), s), StructuralHyper(rng.standard_normal(n), s0))
        cov = p.e_theta_outer - np.outer(p.e_theta, p.e_theta)
        for ref in (s, s0):
            assert np.linalg.eigvalsh(ref - cov).min() >= -1e-10 * np.abs(ref).max()
        assert np.linalg.eigvalsh(cov).min() >= -1e-10 * np.abs(cov).max()

    def test_mstep_equal_means(self):
        v = np.array([1.0, 0.5])
        post = [DatasetPosterior(v, 1e-4 * np.eye(2)) for _ in range(3)]
        np.testing.assert_allclose(em_mstep(post).mu0, v, rtol=1e-14)

    def test_mstep_collapses_to_scatter(self):
        rng = np.random.default_rng(42)
        th = rng.standard_normal((5, 2))
        post = [DatasetPosterior(t, np.zeros((2, 2))) for t in th]
        h = em_mstep(post)
        d = th - th.mean(axis=0)
        np.testing.assert_allclose(h.sigma0, d.T @ d / 5, rtol=1e-12)

    def test_zero_identification_converges_in_one_iteration(self):
        post = [DatasetPosterior([t], [[0.0]]) for t in (0.98, 1.00, 1.02)]
        r = run_em(post)
        assert r.converged and r.n_iter == 1
        np.testing.assert_allclose(r.hyper.sigma0, em_init(post).sigma0, rtol=1e-12)

    def test_reference_hyper(self, em51):
        assert em51.converged
        np.testing.assert_allclose(em51.hyper.mu0, [1.000], atol=1e-3)
        np.testing.assert_allclose(em51.hyper.sigma0[0, 0], 2.7e-4, rtol=0.05)
        assert em51.trace[-1]["conv"] < 1e-6

    def test_monotone_marginal(self):
        rng = np.random.default_rng(42)
        for _ in range(10):
            n = rng.integers(1, 4)
            post = [DatasetPosterior(rng.standard_normal(n), _random_spd(rng, n, rng.uniform(0.05, 2.0)))
                    for _ in range(rng.integers(2, 7))]
            r = run_em(post, tol=1e-10)
            ll = np.asarray(r.loglik)
            assert np.all(np.diff(ll) >= -1e-8 * np.abs(ll[1:]))

    def test_marginal_loglik_scalar(self):
        post = [DatasetPosterior([1.0], [[1.0]])]
        val = marginal_loglik(post, StructuralHyper([0.0], [[1.0]]))
        np.testing.assert_allclose(val, -0.5 * np.log(2 * np.pi * 2.0) - 0.25, rtol=1e-14)
