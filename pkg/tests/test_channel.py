import numpy as np
import pytest

from nfcet.channel import (
    C_LIGHT,
    FrameTruth,
    Scenario,
    bs_irs_channel,
    bu_atom,
    calibrate_snr,
    cascaded_irs_atom,
    cascaded_irs_atom_with_grads,
    cascaded_tensor,
    delay_arv,
    effective_to_physical,
    element_distances,
    evolve_frame,
    far_field_arv,
    fresnel_arv,
    irs_user_channel,
    near_field_arv,
    physical_to_effective,
    rayleigh_distance,
    received_pilot,
    synthesize_truth,
    zc_pilot,
)
from nfcet.tensor3 import khatri_rao, kron


def desk_scenario(**kw):
    return Scenario(**kw)


def random_beams(scen, rng):
    w = np.exp(2j * np.pi * rng.random((scen.n_b, scen.r_b))) / np.sqrt(scen.n_b)
    f = np.exp(2j * np.pi * rng.random(scen.n_u)) / np.sqrt(scen.n_u)
    v = np.exp(2j * np.pi * rng.random(scen.n_r))
    return w, f, v


class TestArrayResponses:
    def test_far_field_hand_values(self):
        lam = 0.01
        a = far_field_arv(0.0, 4, lam, lam / 2)
        np.testing.assert_allclose(a, np.ones(4))
        a = far_field_arv(1.0, 4, lam, lam / 2)
        np.testing.assert_allclose(a, [1, -1, 1, -1], atol=1e-12)

    def test_element_distances_match_2d_geometry(self):
        lam, d = 0.0107, 0.0107 / 2
        phi, r = 0.3, 0.8
        # source at broadside decomposition, elements along the array axis
        src = np.array([r * np.sqrt(1 - phi**2), r * phi])
        n = 16
        expect = [np.hypot(src[0], src[1] - i * d) for i in range(n)]
        np.testing.assert_allclose(element_distances(phi, r, n, d), expect, rtol=1e-12)

    def test_near_field_tends_to_far_field(self):
        lam, d, n = 0.0107, 0.0107 / 2, 16
        phi = 0.4
        # spherical phase -2pi/lam (r^(i)-r) tends to +2pi/lam i d phi,
        # i.e. the planar response evaluated at -phi
        near = near_field_arv(phi, 500.0, n, lam, d)
        far = far_field_arv(-phi, n, lam, d)
        assert np.max(np.abs(near - far)) < 1e-2

    def test_fresnel_between_exact_and_far(self):
        lam, d, n = 0.0107, 0.0107 / 2, 16
        phi, r = 0.25, 0.5
        exact = near_field_arv(phi, r, n, lam, d)
        fres = fresnel_arv(phi, r, n, lam, d)
        far = far_field_arv(phi, n, lam, d)
        assert np.max(np.abs(fres - exact)) < np.max(np.abs(far - exact))

    def test_fresnel_error_shrinks_with_distance(self):
        lam, d, n = 0.0107, 0.0107 / 2, 16
        errs = [
            np.max(np.abs(near_field_arv(0.3, r, n, lam, d) - fresnel_arv(0.3, r, n, lam, d)))
            for r in (0.3, 1.0, 3.0)
        ]
        assert errs[0] > errs[1] > errs[2]

    def test_invalid_distance_raises(self):
        with pytest.raises(ValueError):
            near_field_arv(0.1, -1.0, 8, 0.01, 0.005)


class TestRayleighDistance:
    def test_half_wave_formula(self):
        # 2 ((n-1) lam/2)^2 / lam = (n-1)^2 lam / 2
        lam = 0.02
        np.testing.assert_allclose(rayleigh_distance(9, lam, lam / 2), 64 * lam / 2)

    def test_xl_irs_at_28ghz(self):
        lam = C_LIGHT / 28e9
        assert abs(rayleigh_distance(128, lam, lam / 2) - 86.4) < 0.1


class TestEffectiveMap:
    def test_roundtrip(self):
        theta_u, r_u, phi_b = 0.35, 0.7, -0.2
        tb, rb = physical_to_effective(theta_u, r_u, phi_b)
        back = effective_to_physical(tb, rb, phi_b)
        np.testing.assert_allclose(back, (theta_u, r_u), rtol=1e-14)

    def test_atom_is_product_of_responses(self):
        lam, d, n = 0.0107, 0.0107 / 2, 16
        theta_u, r_u, phi_b = 0.3, 0.6, -0.15
        tb, rb = physical_to_effective(theta_u, r_u, phi_b)
        atom = cascaded_irs_atom(tb, rb, phi_b, n, lam, d)
        expect = near_field_arv(theta_u, r_u, n, lam, d) * np.conj(
            far_field_arv(phi_b, n, lam, d)
        )
        np.testing.assert_allclose(atom, expect, atol=1e-12)

    def test_atom_gradients_match_finite_differences(self):
        lam, d, n = 0.0107, 0.0107 / 2, 16
        tb, rb, phi_b = 0.22, 0.8, -0.1
        atom, dth, dr = cascaded_irs_atom_with_grads(tb, rb, phi_b, n, lam, d)
        np.testing.assert_allclose(atom, cascaded_irs_atom(tb, rb, phi_b, n, lam, d), atol=1e-12)
        h = 1e-7
        fd_th = (cascaded_irs_atom(tb + h, rb, phi_b, n, lam, d)
                 - cascaded_irs_atom(tb - h, rb, phi_b, n, lam, d)) / (2 * h)
        fd_r = (cascaded_irs_atom(tb, rb + h, phi_b, n, lam, d)
                - cascaded_irs_atom(tb, rb - h, phi_b, n, lam, d)) / (2 * h)
        np.testing.assert_allclose(dth, fd_th, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(dr, fd_r, rtol=1e-5, atol=1e-6)

    def test_out_of_range_raises(self):
        with pytest.raises(ValueError):
            effective_to_physical(0.9, 0.5, -0.2)


class TestPilots:
    def test_zc_length3_hand_values(self):
        x = zc_pilot(3)
        expect = np.exp(-1j * np.pi * np.array([0, 2, 6]) / 3)
        np.testing.assert_allclose(x, expect, atol=1e-12)

    def test_zc_unit_modulus_and_flat_spectrum(self):
        x = zc_pilot(7, root=3)
        np.testing.assert_allclose(np.abs(x), 1.0, atol=1e-12)
        np.testing.assert_allclose(np.abs(np.fft.fft(x)), np.sqrt(7), atol=1e-9)

    def test_zc_root_must_be_coprime(self):
        with pytest.raises(ValueError):
            zc_pilot(8, root=2)

    def test_subcarrier_grid(self):
        scen = desk_scenario()
        f = scen.subcarrier_freqs()
        assert len(f) == scen.k
        np.testing.assert_allclose(np.diff(f), scen.f_s / scen.k)
        np.testing.assert_allclose(f + f[::-1], 0.0, atol=1e-6)

    def test_comb_selection(self):
        scen = desk_scenario()
        np.testing.assert_array_equal(scen.pilot_subcarriers(),
                                      [2, 6, 10, 14, 18, 22, 26, 30])


class TestChannelAssembly:
    def make_truth(self, scen, seed=0):
        rng = np.random.default_rng(seed)
        return synthesize_truth(scen, rng, clusters=((2, None), (1, None)))

    def test_cascade_is_khatri_rao_of_links(self):
        scen = desk_scenario()
        truth = self.make_truth(scen)
        p = 3
        tens = cascaded_tensor(truth, p, scen)
        for k in (1, scen.k // 2, scen.k):
            h = irs_user_channel(truth, k, p, scen)
            g = bs_irs_channel(truth, k, scen)
            ref = khatri_rao(h.T, g)
            np.testing.assert_allclose(tens.data[:, :, k - 1], ref, atol=1e-10)

    def test_doppler_enters_through_pilot_index(self):
        scen = desk_scenario()
        truth = self.make_truth(scen)
        t1 = cascaded_tensor(truth, 1, scen)
        t2 = cascaded_tensor(truth, 2, scen)
        assert np.linalg.norm(t1.data - t2.data) > 1e-6
        frozen = FrameTruth(**{**truth.__dict__, "f_d": 0.0})
        np.testing.assert_allclose(
            cascaded_tensor(frozen, 1, scen).data,
            cascaded_tensor(frozen, 7, scen).data, atol=1e-12,
        )

    def test_received_pilot_matches_projected_tensor(self):
        scen = desk_scenario()
        truth = self.make_truth(scen)
        rng = np.random.default_rng(5)
        beams = random_beams(scen, rng)
        x_p = zc_pilot(scen.k_bar, root=3)
        sel = scen.pilot_subcarriers()
        y = received_pilot(truth, 2, beams, x_p, sel, scen, rng=None)
        assert y.dims == (scen.r_b, 1, scen.k_bar)
        w_p, f_p, v_p = beams
        full = cascaded_tensor(truth, 2, scen)
        for j, k_idx in enumerate(sel):
            r_k = full.data[:, :, k_idx]
            # mode-1 measurement is f_p^T kron W_p^H
            proj = kron(f_p, w_p.conj().T) @ (r_k @ v_p)
            expect = np.sqrt(scen.p_t) * x_p[j] * proj
            np.testing.assert_allclose(y.data[:, 0, j], expect, atol=1e-9)

    def test_noise_passes_through_combiner(self):
        scen = desk_scenario(sigma2=0.1)
        truth = self.make_truth(scen)
        rng = np.random.default_rng(6)
        beams = random_beams(scen, rng)
        x_p = zc_pilot(scen.k_bar, root=3)
        sel = scen.pilot_subcarriers()
        clean = received_pilot(truth, 1, beams, x_p, sel, scen, rng=None)
        trials = 400
        acc = 0.0
        for t in range(trials):
            noisy = received_pilot(truth, 1, beams, x_p, sel, scen,
                                   rng=np.random.default_rng(1000 + t))
            acc += np.mean(np.abs(noisy.data - clean.data) ** 2)
        # per combined entry the variance is sigma^2 * ||w_col||^2 = sigma^2
        assert abs(acc / trials - scen.sigma2) < 0.15 * scen.sigma2


class TestSceneLifecycle:
    def test_synthesize_is_reproducible_and_valid(self):
        scen = desk_scenario()
        t1 = synthesize_truth(scen, np.random.default_rng(42))
        t2 = synthesize_truth(scen, np.random.default_rng(42))
        np.testing.assert_allclose(t1.gamma, t2.gamma)
        assert t1.n_paths == 1 + 4 + 2 + 2
        t1.validate()

    def test_text_roundtrip(self):
        scen = desk_scenario()
        t = synthesize_truth(scen, np.random.default_rng(7))
        back = FrameTruth.from_text(t.to_text())
        np.testing.assert_allclose(back.gamma, t.gamma, rtol=1e-15)
        np.testing.assert_allclose(back.theta_u, t.theta_u, rtol=1e-15)
        np.testing.assert_allclose(back.user_pos, t.user_pos, rtol=1e-15)
        assert back.f_d == t.f_d

    def test_evolution_moves_only_the_user(self):
        scen = desk_scenario()
        t0 = synthesize_truth(scen, np.random.default_rng(9))
        dt = 0.01
        t1 = evolve_frame(t0, scen, dt)
        step = np.linalg.norm(t1.user_pos - t0.user_pos)
        np.testing.assert_allclose(step, scen.v * dt, rtol=1e-12)
        # scatterer-side geometry at the IRS is unchanged; user-side angles move
        np.testing.assert_allclose(t1.theta_u[1:], t0.theta_u[1:], atol=1e-14)
        np.testing.assert_allclose(t1.r_u[1:], t0.r_u[1:], atol=1e-14)
        assert np.any(np.abs(t1.phi_u - t0.phi_u) > 0)
        assert np.any(np.abs(t1.tau_u - t0.tau_u) > 0)

    def test_direct_path_tracks_geometry(self):
        scen = desk_scenario()
        t0 = synthesize_truth(scen, np.random.default_rng(11))
        t1 = evolve_frame(t0, scen, 0.02)
        expect_r = np.linalg.norm(t1.user_pos - np.asarray(scen.irs_pos))
        np.testing.assert_allclose(t1.r_u[0], expect_r, rtol=1e-12)
        np.testing.assert_allclose(t1.tau_u[0], expect_r / C_LIGHT, rtol=1e-12)

    def test_snr_calibration(self):
        scen = desk_scenario(sigma2=1e-4)
        truth = synthesize_truth(scen, np.random.default_rng(3))
        rng = np.random.default_rng(4)
        beams = [random_beams(scen, rng) for _ in range(4)]
        x_p = zc_pilot(scen.k_bar, root=3)
        sel = scen.pilot_subcarriers()
        calibrate_snr(truth, scen, beams, x_p, sel, snr_db=10.0)
        # re-measure: mean pre-combiner signal power / sigma^2 == 10 dB
        power, count = 0.0, 0
        for p, (w_p, f_p, v_p) in enumerate(beams, start=1):
            full = cascaded_tensor(truth, p, scen)
            for j, k_idx in enumerate(sel):
                mat = (full.data[:, :, k_idx] @ v_p).reshape(scen.n_u, scen.n_b).T
                sig = np.sqrt(scen.p_t) * x_p[j] * (mat @ f_p)
                power += np.sum(np.abs(sig) ** 2)
                count += sig.size
        snr = power / count / scen.sigma2
        np.testing.assert_allclose(10 * np.log10(snr), 10.0, atol=1e-8)


class TestBuAtom:
    def test_matches_kron_of_responses(self):
        lam, d = 0.0107, 0.0107 / 2
        phi, theta_b, psi = 0.3, -0.4, 1.1
        atom = bu_atom(phi, theta_b, psi, 4, 8, lam, d)
        expect = kron(far_field_arv(phi, 4, lam, d).conj(),
                      far_field_arv(theta_b, 8, lam, d)) * np.exp(1j * psi)
        np.testing.assert_allclose(atom, expect, atol=1e-12)

    def test_delay_response(self):
        freqs = np.array([-1e6, 0.0, 2e6])
        tau = 3e-7
        np.testing.assert_allclose(delay_arv(tau, freqs),
                                   np.exp(-2j * np.pi * freqs * tau), atol=1e-15)
