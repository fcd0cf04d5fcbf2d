import numpy as np
import pytest

from nfcet.channel import Scenario
from nfcet.grids import build_grids
from nfcet.priors import PriorParams, SupportChain
from nfcet.pipeline import (
    FrameEstimate,
    _site_messages,
    _tracking_box,
    complexity_report,
    frame_nmse,
    make_scene,
    propagated_priors,
    run_ce_frame,
    run_tracking,
    sweep_snr,
    tnmse,
)
from test_omp import make_on_grid_truth


def desk():
    scen = Scenario()
    return scen, build_grids(scen, z_delta=1.2)


def exact_estimate(truth, grids, triples, f_d=0.0):
    params = np.array([
        [truth.phi_u[l], truth.theta_u[l] + truth.phi_b,
         truth.r_u[l] * (1 - (truth.theta_u[l] + truth.phi_b) ** 2)
         / (1 - truth.theta_u[l] ** 2), truth.tau_bar[l]]
        for l in range(truth.n_paths)
    ])
    return FrameEstimate(triples=list(triples), params=params,
                         gains=truth.gamma.copy(), f_d=f_d,
                         support=np.ones(truth.n_paths))


class TestFrameNmse:
    def test_exact_parameters_give_zero_error(self):
        scen, grids = desk()
        triples = [(1, 22, 4), (2, 10, 5)]
        truth = make_on_grid_truth(scen, grids, triples, [1.0, 0.5j])
        est = exact_estimate(truth, grids, triples)
        assert frame_nmse(truth, est, scen, 4) < 1e-20

    def test_zero_estimate_gives_unit_error(self):
        scen, grids = desk()
        triples = [(1, 22, 4)]
        truth = make_on_grid_truth(scen, grids, triples, [1.0])
        est = exact_estimate(truth, grids, triples)
        est.gains = est.gains * 0.0
        np.testing.assert_allclose(frame_nmse(truth, est, scen, 4), 1.0,
                                   rtol=1e-12)

    def test_half_gain_gives_quarter_error(self):
        scen, grids = desk()
        triples = [(1, 22, 4)]
        truth = make_on_grid_truth(scen, grids, triples, [1.0])
        est = exact_estimate(truth, grids, triples)
        est.gains = est.gains * 0.5
        np.testing.assert_allclose(frame_nmse(truth, est, scen, 4), 0.25,
                                   rtol=1e-12)


class TestTnmse:
    def test_mean_excludes_first_frame(self):
        np.testing.assert_allclose(tnmse([0.5, 0.1, 0.3]), 0.2)

    def test_single_frame_rejected(self):
        with pytest.raises(ValueError):
            tnmse([0.5])


class TestPropagatedPriors:
    def test_mean_kept_variance_inflated(self):
        scen, grids = desk()
        pp = PriorParams()
        est = FrameEstimate(
            triples=[(0, 22, 4)], params=np.array([[0.3, 0.2, 0.8, 2e-8]]),
            gains=np.array([1.0 + 0j]), f_d=30.0, support=np.array([0.95]),
            moments={("phi", 0): (0.31, 1e-6), ("f_d", -1): (30.0, 0.5)})
        gauss, pi = propagated_priors(est, grids, pp)
        mean, var = gauss[("phi", 0)]
        assert mean == 0.31
        a = 1.0 - pp.chi_offgrid
        expect = a * a * 1e-6 + pp.chi_offgrid ** 2 \
            * (pp.sigma_phi * grids.d_phi) ** 2
        np.testing.assert_allclose(var, expect)

    def test_support_mixes_through_chain(self):
        scen, grids = desk()
        pp = PriorParams()
        est = FrameEstimate(
            triples=[(0, 22, 4)], params=np.array([[0.3, 0.2, 0.8, 2e-8]]),
            gains=np.array([1.0 + 0j]), f_d=0.0, support=np.array([0.95]),
            moments={})
        _, pi = propagated_priors(est, grids, pp)
        chain = SupportChain(pp.lam_on, pp.lam_off)
        np.testing.assert_allclose(pi, chain.propagate(np.array([0.95])))


class TestTrackingBox:
    def make_prev(self):
        return FrameEstimate(
            triples=[(0, 22, 4)], params=np.array([[0.3, 0.2, 0.8, 2e-8]]),
            gains=np.array([1.0 + 0j]), f_d=30.0, support=np.array([1.0]))

    def test_contains_previous_estimate(self):
        scen, grids = desk()
        prev = self.make_prev()
        lo, hi = _tracking_box(prev, {}, scen, grids)
        vec = np.append(prev.params.ravel(), prev.f_d)
        assert np.all(lo <= vec) and np.all(vec <= hi)

    def test_width_follows_motion_scale(self):
        scen, grids = desk()
        prev = self.make_prev()
        lo, hi = _tracking_box(prev, {}, scen, grids)
        # a frame moves the user by v * T; the box must not span a grid cell
        assert hi[0] - lo[0] < grids.d_phi / 2
        assert hi[2] - lo[2] < 2 * grids.r_half_gap(22)

    def test_doppler_clipped_to_mobility_bound(self):
        scen, grids = desk()
        prev = self.make_prev()
        prev.f_d = 1e4
        lo, hi = _tracking_box(prev, {}, scen, grids)
        assert hi[-1] <= scen.f_d_max() + 1e-9


class TestSiteMessages:
    def test_shared_site_combines_in_odds(self):
        scen, grids = desk()
        pp = PriorParams()
        from nfcet.omp import CoarseEstimate
        from nfcet.spvbi import gate_to_modes
        coarse = CoarseEstimate(
            triples=[(0, 10, 2), (0, 20, 3)],
            params=np.zeros((2, 4)), gains=np.zeros(2, dtype=complex),
            f_d=0.0)
        beliefs = {"u": np.full(scen.n_u, 0.4),
                   "r": np.full(grids.n_polar, 0.4),
                   "k": np.full(6, 0.4)}
        ext = np.array([0.8, 0.3])
        pi_in = _site_messages(coarse, ext, grids, 6, pp, beliefs)
        # site u=0 hosts both paths: odds multiply from the 0.5 base
        odds = 1.0
        for l in range(2):
            m_u, _, _ = gate_to_modes(ext[l], pp.p_s, pp.eps_off,
                                      0.4, 0.4, 0.4)
            odds *= m_u / (1 - m_u)
        np.testing.assert_allclose(pi_in["u"][0], odds / (1 + odds),
                                   rtol=1e-12)
        # unshared sites carry exactly one message
        m_u, m_r, m_k = gate_to_modes(ext[0], pp.p_s, pp.eps_off,
                                      0.4, 0.4, 0.4)
        np.testing.assert_allclose(pi_in["r"][10], m_r, rtol=1e-12)
        np.testing.assert_allclose(pi_in["k"][2], m_k, rtol=1e-12)
        assert np.all(pi_in["r"][[0, 5, 30]] == 0.5)


class TestComplexityReport:
    def test_formula_and_counts(self):
        rep = complexity_report(
            {"logjoint_evals": 600, "grad_evals": 600,
             "support_evals": 40, "iterations": 4},
            n_paths=2)
        assert "2*13*15*10" in rep
        assert "logjoint=600" in rep
        assert "per-iteration=300" in rep


class TestCeFrame:
    def test_noiseless_on_grid_recovery(self):
        scen = Scenario(sigma2=0.0)
        grids = build_grids(scen, z_delta=1.2)
        triples = [(1, 22, 4), (2, 10, 5)]
        truth = make_on_grid_truth(scen, grids, triples, [1.0, 0.5 - 0.2j])
        res = run_ce_frame(truth, scen, grids, seed=0, n_pilots=6,
                           max_paths=2)
        assert res.nmse < 1e-6
        assert res.estimate.n_paths == 2

    def test_refined_beats_on_grid_baseline(self):
        scen, grids = desk()
        truth = make_scene(scen, 3, snr_db=10.0)
        res = run_ce_frame(truth, scen, grids, seed=3)
        base = run_ce_frame(truth, scen, grids, seed=3, algo="omp")
        gap_db = 10 * np.log10(base.nmse / res.nmse)
        assert gap_db >= 3.0
        assert res.traces["turbo_rounds"] >= 1
        assert all(c["logjoint_evals"] == c["grad_evals"]
                   for c in res.traces["counters"])

    def test_unknown_algorithm_rejected(self):
        scen, grids = desk()
        truth = make_scene(scen, 3, snr_db=10.0)
        with pytest.raises(ValueError):
            run_ce_frame(truth, scen, grids, seed=3, algo="bogus")


class TestTracking:
    def test_refined_tracking_beats_frozen_estimate(self):
        scen, grids = desk()
        tracked = run_tracking(scen, grids, 5, t_frames=3)
        frozen = run_tracking(scen, grids, 5, t_frames=3, refine=False)
        nm_t = [r.nmse for r in tracked]
        nm_f = [r.nmse for r in frozen]
        # same first frame, then the frozen estimate decays monotonically
        np.testing.assert_allclose(nm_t[0], nm_f[0])
        assert nm_f[0] < nm_f[1] < nm_f[2]
        assert tnmse(nm_t) < tnmse(nm_f)
        assert all(r.n_pilots == scen.p2 for r in tracked[1:])
        assert tracked[0].n_pilots == scen.p1


class TestSweeps:
    def test_snr_sweep_rows(self):
        scen, grids = desk()
        rows = sweep_snr(scen, grids, [0.0, 20.0], trials=2,
                         algos=("omp",), seed=1)
        assert len(rows) == 2
        for row in rows:
            assert set(row) == {"snr_db", "algo", "nmse_db", "stderr_db",
                                "trials"}
            assert row["trials"] == 2
        # more SNR cannot hurt the on-grid baseline on paired scenes
        assert rows[1]["nmse_db"] <= rows[0]["nmse_db"] + 1.0
