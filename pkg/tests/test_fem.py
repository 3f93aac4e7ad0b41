import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hbmodal.errors import ConfigError, DegenerateSpectrum, InadmissibleParameters, ModeMatchingFailed
from hbmodal.fem import (AnalyticalModes, StructuralModelClass, assemble, load_model, mac_matrix, match_modes,
                         model_from_dict, model_to_dict, save_model, shear_frame, solve_modes)

CHAIN_K = 1000.0 * np.array([[2.0, -1.0], [-1.0, 1.0]])


def _random_model(rng, n=4, nk=2, nm=1):
    def spd(scale):
        a = rng.standard_normal((n, n))
        return scale * (a @ a.T + n * np.eye(n))

    def psd():
        a = rng.standard_normal((n, 2))
        return a @ a.T

    return StructuralModelClass(k0=spd(10.0), m0=spd(1.0), k_sub=tuple(psd() for _ in range(nk)),
                                m_sub=tuple(psd() for _ in range(nm)))


class TestAssemble:
    def test_zero_theta_gives_known_parts(self):
        model = _random_model(np.random.default_rng(42))
        k, m = assemble(model, np.zeros(model.n_theta))
        np.testing.assert_array_equal(k, model.k0)
        np.testing.assert_array_equal(m, model.m0)

    def test_unit_vector_adds_one_substructure(self):
        model = _random_model(np.random.default_rng(42))
        k, m = assemble(model, [0.0, 1.0, 0.0])
        np.testing.assert_allclose(k, model.k0 + model.k_sub[1], rtol=1e-14)
        np.testing.assert_array_equal(m, model.m0)

    def test_second_story_stiffness(self, two_story):
        k, _ = assemble(two_story, [1.0])
        # two columns of 0.5 kN/m scaled by theta = 1
        assert k[1, 1] == pytest.approx(1000.0)
        assert k[0, 1] == pytest.approx(-1000.0)
        assert k[0, 0] == pytest.approx(2000.0)

    @given(st.lists(st.floats(0.0, 5.0), min_size=3, max_size=3), st.lists(st.floats(0.0, 5.0), min_size=3, max_size=3))
    @settings(max_examples=30, deadline=None)
    def test_linear_in_theta(self, ta, tb):
        model = _random_model(np.random.default_rng(7))
        ka, ma = assemble(model, ta)
        kb, mb = assemble(model, tb)
        k0, m0 = assemble(model, np.zeros(3))
        kab, mab = assemble(model, np.add(ta, tb))
        np.testing.assert_allclose(ka + kb - k0, kab, rtol=1e-12, atol=1e-12 * np.abs(kab).max())
        np.testing.assert_allclose(ma + mb - m0, mab, rtol=1e-12, atol=1e-12 * np.abs(mab).max())

    def test_inadmissible_mass(self):
        model = StructuralModelClass(k0=np.eye(2), m0=np.zeros((2, 2)), m_sub=(np.eye(2),))
        with pytest.raises(InadmissibleParameters, match="theta"):
            assemble(model, [-1.0])

    def test_wrong_length(self, two_story):
        with pytest.raises(ValueError):
            assemble(two_story, [1.0, 2.0])

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            StructuralModelClass(k0=np.array([[1.0, 0.5], [0.0, 1.0]]), m0=np.eye(2))


class TestSolveModes:
    def test_two_dof_chain_closed_form(self):
        modes = solve_modes(CHAIN_K, np.eye(2), 2)
        expect = 1000.0 * np.array([(3 - np.sqrt(5)) / 2, (3 + np.sqrt(5)) / 2])
        np.testing.assert_allclose(modes.omega_sq, expect, rtol=1e-12)
        np.testing.assert_allclose(modes.omega_sq, [381.966011250105, 2618.033988749895], rtol=1e-12)

    def test_proportional_matrices_degenerate(self):
        m = np.diag([1.0, 2.0, 3.0])
        with pytest.raises(DegenerateSpectrum):
            solve_modes(4.0 * m, m, 2)

    def test_stiffness_scaling_homogeneity(self):
        rng = np.random.default_rng(42)
        model = _random_model(rng)
        k, m = assemble(model, [1.0, 1.0, 1.0])
        base = solve_modes(k, m, 4)
        eps = 0.037
        scaled = solve_modes((1 + eps) * k, m, 4)
        np.testing.assert_allclose(scaled.omega_sq, (1 + eps) * base.omega_sq, rtol=1e-12)
        np.testing.assert_allclose(scaled.psi, base.psi, atol=1e-10)

    def test_unit_norm_and_canonical_sign(self):
        model = _random_model(np.random.default_rng(3), n=6)
        modes = solve_modes(*assemble(model, [1.0, 2.0, 0.5]), 6)
        np.testing.assert_allclose(np.linalg.norm(modes.psi, axis=0), 1.0, rtol=1e-13)
        for j in range(6):
            col = modes.psi[:, j]
            first = col[np.flatnonzero(np.abs(col) > 1e-12)[0]]
            assert first > 0

    @pytest.mark.parametrize("seed", range(5))
    def test_residual_bound(self, seed):
        model = _random_model(np.random.default_rng(seed), n=7)
        k, m = assemble(model, [0.5, 1.5, 0.8])
        modes = solve_modes(k, m, 5)
        for i in range(5):
            psi = modes.psi[:, i]
            res = np.linalg.norm(k @ psi - modes.omega_sq[i] * m @ psi) / np.linalg.norm(k @ psi)
            assert res <= 1e-8
        assert np.all(np.diff(modes.omega_sq) > 0)

    def test_invariant_under_basis_rescaling(self):
        # congruence by a positive diagonal rescales eigenvectors but not frequencies
        rng = np.random.default_rng(42)
        model = _random_model(rng)
        k, m = assemble(model, [1.0, 1.0, 1.0])
        d = np.diag(rng.uniform(0.5, 2.0, 4))
        a = solve_modes(k, m, 4)
        b = solve_modes(d @ k @ d, d @ m @ d, 4)
        np.testing.assert_allclose(a.omega_sq, b.omega_sq, rtol=1e-10)
        back = d @ b.psi
        back = back / np.linalg.norm(back, axis=0) * np.sign(back[0])
        np.testing.assert_allclose(back, a.psi * np.sign(a.psi[0]), atol=1e-9)

    def test_too_many_modes(self):
        with pytest.raises(ValueError):
            solve_modes(CHAIN_K, np.eye(2), 3)


class TestMatchModes:
    def _chain_modes(self):
        return solve_modes(CHAIN_K, np.eye(2), 2)

    def test_exact_shapes_identity(self):
        modes = self._chain_modes()
        shapes = [modes.psi[:, 0], modes.psi[:, 1]]
        mm = match_modes(modes, shapes, (0, 1))
        assert mm.order == (0, 1)
        np.testing.assert_allclose(mm.mac, 1.0, rtol=1e-12)

    def test_sign_flip_flips_chi(self):
        modes = self._chain_modes()
        a = match_modes(modes, [modes.psi[:, 0], modes.psi[:, 1]], (0, 1))
        b = match_modes(modes, [-modes.psi[:, 0], modes.psi[:, 1]], (0, 1))
        assert a.order == b.order
        assert b.chi[0] == pytest.approx(-a.chi[0])
        assert b.observed_shape(modes, 0) @ (-modes.psi[:, 0]) == pytest.approx(1.0)

    def test_swapped_order_matches_exhaustive_oracle(self):
        modes = self._chain_modes()
        shapes = [modes.psi[:, 1], modes.psi[:, 0]]
        mm = match_modes(modes, shapes, (0, 1))
        mac, _ = mac_matrix(modes, shapes, (0, 1))
        best = max(itertools.permutations(range(2)), key=lambda p: sum(mac[i, p[i]] for i in range(2)))
        assert mm.order == best == (1, 0)

    def test_normalized_shape_unit_and_aligned(self):
        rng = np.random.default_rng(42)
        model = _random_model(rng, n=6)
        modes = solve_modes(*assemble(model, [1.0, 1.0, 1.0]), 6)
        dofs = (0, 2, 3, 5)
        shapes = []
        for j in (2, 0, 4):
            v = modes.psi[list(dofs), j] + 0.01 * rng.standard_normal(4)
            shapes.append(v / np.linalg.norm(v) * rng.choice([-1, 1]))
        mm = match_modes(modes, shapes, dofs)
        assert mm.order == (2, 0, 4)
        for i, phi in enumerate(shapes):
            v = mm.observed_shape(modes, i)
            assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)
            assert v @ phi >= 0

    def test_floor(self):
        modes = self._chain_modes()
        bad = np.array([1.0, 1.0]) / np.sqrt(2)
        with pytest.raises(ModeMatchingFailed, match="unmatched_mode"):
            match_modes(modes, [bad, bad], (0, 1), mac_floor=0.99)


class TestModelIO:
    def test_round_trip(self, tmp_path, chain5):
        p = tmp_path / "m.json"
        save_model(chain5, p)
        back = load_model(p)
        np.testing.assert_array_equal(back.k0, chain5.k0)
        np.testing.assert_array_equal(back.m_sub[0], chain5.m_sub[0])
        np.testing.assert_array_equal(back.theta_upper, chain5.theta_upper)

    def test_sparse_coordinates(self):
        d = model_to_dict(shear_frame([1.0, 1.0], [1000.0, 1000.0]))
        d["k_sub"] = [{"coo": {"row": [1], "col": [1], "val": [5.0]}}]
        d["m_sub"] = []
        d["theta_box"] = {"lower": [0.0], "upper": [2.0]}
        d["theta_nominal"] = [1.0]
        d["parameter_names"] = []
        model = model_from_dict(d)
        assert model.k_sub[0][1, 1] == 5.0

    def test_bad_json_reports_line(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text('{\n  "n_dof": 2,\n  oops\n}')
        with pytest.raises(ConfigError, match="line 3"):
            load_model(p)

    def test_missing_key(self):
        with pytest.raises(ConfigError, match="k0"):
            model_from_dict(json.loads('{"n_dof": 2}'))
