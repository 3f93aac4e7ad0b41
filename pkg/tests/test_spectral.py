import numpy as np
import pytest

from hbmodal.errors import InvalidSpectralModel, ModalIdFailed
from hbmodal.fem import modes_at
from hbmodal.spectral import (FFTData, ModalDataset, SpectralModelParams, TimeHistoryDataset, fft_of_response,
                              fit_band, identify_modal_parameters, load_modal_dataset, load_time_history,
                              neg_log_likelihood, save_modal_dataset, save_time_history, simulate_modal_record,
                              simulate_time_history, theoretical_psd, transfer)

F0 = 4.0
W2 = (2 * np.pi * F0) ** 2
PHI = np.array([0.3, 0.6, 0.742]) / np.linalg.norm([0.3, 0.6, 0.742])


def _record(seed, n=24000, dt=0.005, s_err=0.1):
    return simulate_modal_record(W2, 0.01, PHI[:, None], 1.0, s_err, n, dt, seed)


def _params(w2=W2, zeta=0.01, s=1.0, se=0.1, phi=PHI):
    return SpectralModelParams(omega_sq=[w2], phi=np.asarray(phi)[:, None], zeta=[zeta], s_force=[[s]], s_err=[se])


class TestFFT:
    def test_constant_signal(self):
        fft = fft_of_response(TimeHistoryDataset(np.full((256, 1), 3.0), dt=0.01))
        assert np.abs(fft.values[1:]).max() < 1e-12
        assert abs(fft.values[0, 0]) > 1.0

    def test_sinusoid_single_bin(self):
        n, dt, k = 512, 0.01, 37
        t = np.arange(n) * dt
        y = np.sin(2 * np.pi * k / (n * dt) * t)
        fft = fft_of_response(TimeHistoryDataset(y, dt=dt))
        mag = np.abs(fft.values[:, 0])
        assert np.argmax(mag) == k
        assert np.sort(mag)[-2] < 1e-10 * mag[k]

    def test_parseval(self):
        rng = np.random.default_rng(42)
        y = rng.standard_normal((1000, 3))
        data = TimeHistoryDataset(y, dt=0.02)
        fft = fft_of_response(data, one_sided=False)
        np.testing.assert_allclose(np.sum(np.abs(fft.values) ** 2, axis=0), 0.02 * np.sum(y ** 2, axis=0), rtol=1e-8)

    def test_frequency_grid(self):
        fft = fft_of_response(TimeHistoryDataset(np.zeros((100, 1)), dt=0.1))
        assert fft.n_freq == 50
        assert fft.omega[1] == pytest.approx(2 * np.pi / 10.0)


class TestTheoreticalPSD:
    def test_noise_only(self):
        p = _params(s=0.0, se=0.3)
        e = theoretical_psd(p, 10.0)
        np.testing.assert_allclose(e, 0.3 * np.eye(3), atol=1e-15)

    def test_resonance_gain(self):
        zeta = 0.02
        h = transfer(np.sqrt(W2), W2, zeta)
        assert abs(h) ** 2 == pytest.approx(1 / (4 * zeta ** 2), rel=1e-12)

    def test_noise_shift_single_channel(self):
        a = SpectralModelParams([W2], [[1.0]], [0.01], [[2.0]], [0.1])
        b = SpectralModelParams([W2], [[1.0]], [0.01], [[2.0]], [0.2])
        w = np.linspace(20, 30, 7)
        np.testing.assert_allclose(theoretical_psd(b, w).real - theoretical_psd(a, w).real, 0.1, rtol=1e-12)

    def test_hermitian(self):
        e = theoretical_psd(_params(), np.linspace(10, 40, 9))
        np.testing.assert_allclose(e, np.conj(np.transpose(e, (0, 2, 1))))

    def test_rank_deficient_rejected(self):
        p = SpectralModelParams([W2], PHI[:, None], [0.01], [[1.0]], [1e-300])
        with pytest.raises(InvalidSpectralModel):
            theoretical_psd(p, np.sqrt(W2))


class TestLikelihood:
    def test_scalar_formula(self):
        # E = 1 at one bin: S=0, S_e=1; |F|^2 = 1
        fft = FFTData(values=np.array([[0.0], [1.0 + 0.0j], [0.0]]), omega=np.array([0.0, 1.0, 2.0]), dt=1.0,
                      n_samples=6)
        p = SpectralModelParams([4.0], [[1.0]], [0.1], [[0.0]], [1.0])
        assert neg_log_likelihood(p, fft, [1]) == pytest.approx(np.log(np.pi) + 1.0, rel=1e-14)

    def test_sign_flip_invariance(self):
        fft = fft_of_response(_record(0))
        band = fft.band_indices(3.5, 4.5)
        assert neg_log_likelihood(_params(phi=PHI), fft, band) == pytest.approx(
            neg_log_likelihood(_params(phi=-PHI), fft, band), rel=1e-14)

    def test_single_mode_kernel_matches_general(self):
        from hbmodal.spectral.psd import nll_general

        fft = fft_of_response(_record(1))
        band = fft.band_indices(3.5, 4.5)
        p = _params(w2=W2 * 1.01, zeta=0.015)
        assert neg_log_likelihood(p, fft, band) == pytest.approx(nll_general(p, fft.values[band], fft.omega[band]),
                                                                  rel=1e-10)

    def test_decreases_toward_truth(self):
        rng = np.random.default_rng(42)
        better = 0
        for seed in range(20):
            fft = fft_of_response(_record(seed, n=8000))
            band = fft.band_indices(3.2, 4.8)
            phi = PHI + 0.3 * rng.standard_normal(3)
            far = _params(w2=W2 * rng.uniform(0.97, 1.03), zeta=rng.uniform(0.005, 0.03), s=rng.uniform(0.3, 3),
                          se=rng.uniform(0.03, 0.3), phi=phi / np.linalg.norm(phi))
            better += neg_log_likelihood(_params(), fft, band) < neg_log_likelihood(far, fft, band)
        assert better == 20

    def test_directional_derivative_consistency(self):
        fft = fft_of_response(_record(2))
        band = fft.band_indices(3.2, 4.8)
        rng = np.random.default_rng(42)
        x0 = np.array([W2, 0.01, 1.0, 0.1])

        def f(x):
            return neg_log_likelihood(_params(*x), fft, band)

        for _ in range(10):
            x = x0 * rng.uniform(0.95, 1.05, 4)
            h = 1e-5 * x
            grad = np.array([(f(x + h[i] * e) - f(x - h[i] * e)) / (2 * h[i]) for i, e in enumerate(np.eye(4))])
            d = rng.standard_normal(4) * x
            t = 1e-6
            dd = (f(x + t * d) - f(x - t * d)) / (2 * t)
            assert grad @ d == pytest.approx(dd, rel=1e-5, abs=1e-6 * abs(f(x)) * 1e-3)


class TestIdentify:
    def test_recovers_frequency(self):
        ds = identify_modal_parameters(_record(0), [(3.2, 4.8)])
        f = np.sqrt(ds.omega_sq_hat[0]) / (2 * np.pi)
        assert abs(f / F0 - 1) < 0.005
        cov_f = np.sqrt(ds.cov_omega_sq[0]) / (2 * ds.omega_sq_hat[0])
        assert 1e-4 < cov_f < 1e-2
        assert abs(abs(ds.phi_hat[0] @ PHI) - 1) < 1e-3

    def test_shape_covariance_singular_along_shape(self):
        ds = identify_modal_parameters(_record(3), [(3.2, 4.8)])
        c, phi = ds.cov_phi[0], ds.phi_hat[0]
        assert phi @ c @ phi <= 1e-10 * np.trace(c)
        np.testing.assert_allclose(np.linalg.norm(phi), 1.0, rtol=1e-12)

    def test_frequency_shape_cross_correlation_small(self):
        _, fits = identify_modal_parameters(_record(4), [(3.2, 4.8)], return_fits=True)
        rho = fits[0].correlation()
        assert np.abs(rho[0, 4:]).max() < 0.05

    def test_stationary_at_optimum(self):
        rec = _record(5)
        fft = fft_of_response(rec)
        fit = fit_band(fft, fft.band_indices(3.2, 4.8))
        band = fft.band_indices(3.2, 4.8)
        x = np.array([fit.omega_sq, fit.zeta, fit.s_force, fit.s_err])

        def f(y):
            return neg_log_likelihood(_params(*y, phi=fit.phi), fft, band)

        h = 1e-6 * x
        g = np.array([(f(x + h[i] * e) - f(x - h[i] * e)) / (2 * h[i]) for i, e in enumerate(np.eye(4))])
        # gradient measured in the metric of the reported covariance
        cov = fit.cov[:4, :4]
        assert np.sqrt(g @ cov @ g) < 1e-2

    def test_too_few_bins(self):
        with pytest.raises(ModalIdFailed, match="band"):
            identify_modal_parameters(_record(0, n=2000), [(4.0, 4.01)])

    def test_band_count_mismatch(self):
        with pytest.raises(ValueError):
            identify_modal_parameters(_record(0), [(3, 5)], n_modes=2)

    @pytest.mark.slow
    def test_sd_shrinks_with_duration(self):
        ratios = []
        for seed in range(10):
            short = identify_modal_parameters(_record(seed, n=12000), [(3.2, 4.8)])
            long = identify_modal_parameters(_record(seed + 100, n=24000), [(3.2, 4.8)])
            ratios.append(np.sqrt(short.cov_omega_sq[0] / long.cov_omega_sq[0]))
        assert 1.2 <= np.mean(ratios) <= 1.7


class TestSimulate:
    def test_zero_inputs_zero_record(self, two_story):
        th = simulate_time_history(two_story, [1.0], 0.01, 0.0, 10.0, 0.01, seed=1, noise_ratio=0.0)
        assert np.all(th.samples == 0)

    def test_peaks_at_model_frequencies(self, two_story):
        # averaged periodogram; peak narrower than a bin so the nearest bins dominate
        power = 0.0
        for seed in range(10):
            th = simulate_time_history(two_story, [1.0], 0.002, 1.0, 50.0, 0.01, seed=seed, noise_ratio=0.01)
            fft = fft_of_response(th)
            power = power + np.sum(np.abs(fft.values) ** 2, axis=1)
        df = 1.0 / (th.n_samples * th.dt)
        f = fft.omega / (2 * np.pi)
        for w2 in modes_at(two_story, [1.0], 2).omega_sq:
            fn = np.sqrt(w2) / (2 * np.pi)
            sel = np.flatnonzero(np.abs(f - fn) < 0.3)
            peak = f[sel[np.argmax(power[sel])]]
            assert abs(peak - fn) <= df + 1e-12

    def test_seed_contract(self, two_story):
        a = simulate_time_history(two_story, [1.0], 0.01, 1.0, 100.0, 0.01, seed=1)
        b = simulate_time_history(two_story, [1.0], 0.01, 1.0, 100.0, 0.01, seed=2)
        c = simulate_time_history(two_story, [1.0], 0.01, 1.0, 100.0, 0.01, seed=1)
        np.testing.assert_array_equal(a.samples, c.samples)
        assert not np.array_equal(a.samples, b.samples)
        np.testing.assert_allclose(a.samples.std(axis=0), b.samples.std(axis=0), rtol=0.25)


class TestIO:
    def test_modal_dataset_round_trip(self, tmp_path, datasets51):
        p = tmp_path / "d.json"
        save_modal_dataset(datasets51[0], p)
        back = load_modal_dataset(p)
        np.testing.assert_array_equal(back.omega_sq_hat, datasets51[0].omega_sq_hat)
        np.testing.assert_array_equal(back.cov_phi[1], datasets51[0].cov_phi[1])

    @pytest.mark.parametrize("suffix", [".csv", ".npz"])
    def test_time_history_round_trip(self, tmp_path, suffix):
        rng = np.random.default_rng(42)
        th = TimeHistoryDataset(rng.standard_normal((50, 2)), dt=0.01, observed_dofs=(3, 1), dataset_id="r1")
        p = tmp_path / f"th{suffix}"
        save_time_history(th, p)
        back = load_time_history(p)
        np.testing.assert_array_equal(back.samples, th.samples)
        assert back.observed_dofs == (3, 1) and back.dt == 0.01 and back.dataset_id == "r1"

    def test_invalid_modal_dataset(self):
        with pytest.raises(ValueError, match="unit norm"):
            ModalDataset([1.0], [[1.0, 1.0]], [0.1], [np.eye(2)], (0, 1))
