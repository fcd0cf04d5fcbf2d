"""End-to-end acceptance checks.

Each test prints a single PASS/FAIL line on the live terminal (capsys
disabled) so a full run yields one line per criterion.  Numbered
criteria cover closed-form values, oracle comparisons, and the
statistical behavior of the estimation and tracking pipelines.  The
slow statistical criteria (12, 13) run tens of Monte-Carlo trials and
dominate the suite's runtime.
"""

import itertools
import time

import numpy as np
import pytest
from scipy.stats import kstest

from nfcet.beams import beam_gain, multibeam_design
from nfcet.channel import C_LIGHT, Scenario, rayleigh_distance, zc_pilot
from nfcet.grids import build_grids, polar_atom
from nfcet.message_passing import chain_sum_product, mrf_loopy_bp
from nfcet.model import make_contexts
from nfcet.omp import run_stage1
from nfcet.pipeline import (
    make_scene,
    run_ce_frame,
    run_tracking,
    sweep_pilots,
    sweep_snr,
    tnmse,
)
from nfcet.priors import (
    CdgAmplitude,
    GaussMarkov,
    IsingMrf,
    SupportChain,
    lattice_edges,
)
from nfcet.spvbi import (
    SscaSchedule,
    elbo_weight_grad,
    logjoint_grad,
    logjoint_value,
    run_module_a,
    simplex_project,
)
from nfcet.tensor3 import (
    ComplexTensor3,
    khatri_rao,
    kron,
    mode_product,
    mode_refold,
    mode_unfold,
    tucker_reconstruct,
    vectorize_tucker,
)
from test_message_passing import ising_brute_marginals
from test_omp import make_beams, make_on_grid_truth, observe
from test_spvbi import POS_NAMES, build_problem, perturbed_coarse, simplex_oracle


@pytest.fixture
def report(capsys):
    """One live PASS/FAIL line per criterion."""
    def _report(num, ok, detail):
        with capsys.disabled():
            print(f"{'PASS' if ok else 'FAIL'} criterion {num}: {detail}")
        assert ok, f"criterion {num}: {detail}"
    return _report


def desk(**kw):
    scen = Scenario(**kw)
    return scen, build_grids(scen, z_delta=1.2)


def test_criterion_01_near_field_boundary(report):
    lam = C_LIGHT / 28e9
    val = rayleigh_distance(128, lam, lam / 2.0)
    report(1, abs(val - 86.2) < 0.5,
           f"128-element boundary {val:.2f} m (want 86.2 +/- 0.5)")


def test_criterion_02_grid_counts(report):
    scen = Scenario(n_r=128, k=128, k_bar=32)
    grids = build_grids(scen, s=3)
    ok = grids.n_polar == 384 and len(grids.tau) == 24
    report(2, ok, f"polar atoms {grids.n_polar} (want 384), "
                  f"delay atoms {len(grids.tau)} (want 24)")


def test_criterion_03_on_grid_recovery(report):
    scen = Scenario(sigma2=0.0)
    grids = build_grids(scen, z_delta=1.2)
    rng = np.random.default_rng(1)
    beams = make_beams(scen, rng, 4)
    x_p = zc_pilot(scen.k_bar, root=3)
    sel = scen.pilot_subcarriers()
    triples = [(1, 3 * 5 + 1, 4), (3, 3 * 11 + 2, 5)]
    gains = [1.0 + 0.3j, -0.5 + 0.8j]
    truth = make_on_grid_truth(scen, grids, triples, gains)
    ctxs = make_contexts(beams, x_p, sel, scen, truth.theta_b, truth.phi_b)
    ys = observe(truth, scen, beams, x_p, sel)
    t0 = time.perf_counter()
    est = run_stage1(ys, ctxs, grids, scen, truth.theta_b, truth.phi_b,
                     max_paths=2, refine_iters=40)
    wall = time.perf_counter() - t0
    support_ok = sorted(est.triples) == sorted(triples)
    gain_err = np.inf
    if support_ok:
        order = [est.triples.index(t) for t in triples]
        gain_err = float(np.abs(est.gains[order] - np.array(gains)).max())
    ok = support_ok and gain_err < 1e-8 and wall < 10.0
    report(3, ok, f"4-pilot noiseless pursuit: support "
                  f"{'exact' if support_ok else 'wrong'}, gain error "
                  f"{gain_err:.2e} (< 1e-8), {wall:.1f} s (< 10)")


def test_criterion_04_noiseless_round_trip(report):
    scen = Scenario(sigma2=0.0)
    grids = build_grids(scen, z_delta=1.2)
    triples = [(1, 22, 4), (2, 10, 5)]
    truth = make_on_grid_truth(scen, grids, triples, [1.0, 0.5 - 0.2j])
    t0 = time.perf_counter()
    res = run_ce_frame(truth, scen, grids, seed=0, n_pilots=6, max_paths=2)
    wall = time.perf_counter() - t0
    ok = res.nmse < 1e-6 and wall < 60.0
    report(4, ok, f"noiseless on-grid pipeline NMSE {res.nmse:.2e} "
                  f"(< 1e-6), {wall:.1f} s (< 60)")


def test_criterion_05_tensor_identities(report):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10):
        dims = tuple(rng.integers(2, 6, size=3))
        core = ComplexTensor3(rng.standard_normal(dims)
                              + 1j * rng.standard_normal(dims))
        mats = [rng.standard_normal((d + 2, d))
                + 1j * rng.standard_normal((d + 2, d)) for d in dims]
        full = tucker_reconstruct(core, *mats)
        step = mode_product(mode_product(mode_product(core, mats[0], 1),
                                         mats[1], 2), mats[2], 3)
        worst = max(worst, float(np.abs(full.data - step.data).max()))
        vec = vectorize_tucker(core.vec(), *mats)
        worst = max(worst, float(np.abs(vec - full.vec()).max()))
        for n in (1, 2, 3):
            back = mode_refold(mode_unfold(full, n), n, full.dims)
            worst = max(worst, float(np.abs(back.data - full.data).max()))
        a = rng.standard_normal((4, 3)) + 1j * rng.standard_normal((4, 3))
        b = rng.standard_normal((3, 5)) + 1j * rng.standard_normal((3, 5))
        c = rng.standard_normal((2, 6)) + 1j * rng.standard_normal((2, 6))
        d = rng.standard_normal((6, 5)) + 1j * rng.standard_normal((6, 5))
        lhs = khatri_rao(a @ b, c @ d)
        rhs = kron(a, c) @ khatri_rao(b, d)
        worst = max(worst, float(np.abs(lhs - rhs).max()))
    report(5, worst < 1e-12,
           f"Tucker/unfolding/product identities, max error {worst:.2e} "
           f"(< 1e-12)")


def test_criterion_06_factor_graph_exactness(report):
    rng = np.random.default_rng(3)
    chain = SupportChain(0.2, 0.35)
    t = chain.transition_matrix()
    u = rng.random((10, 2)) + 0.1
    exact = chain_sum_product(u, t)
    # brute enumeration of the length-10 chain
    init = np.array([1.0 - chain.p_on, chain.p_on])
    brute = np.zeros((10, 2))
    for states in itertools.product((0, 1), repeat=10):
        w = init[states[0]] * np.prod([u[i, s] for i, s in enumerate(states)])
        w *= np.prod([t[a, b] for a, b in zip(states[:-1], states[1:])])
        for i, s in enumerate(states):
            brute[i, s] += w
    brute /= brute.sum(axis=1, keepdims=True)
    chain_err = float(np.abs(chain_sum_product(u, t, init=init)
                             - brute).max())

    edges = lattice_edges(2, 3)
    mrf = IsingMrf(0.3 * rng.standard_normal(6), edges,
                   0.25 * np.ones(len(edges)))
    u6 = rng.random((6, 2)) + 0.2
    marg, _ = mrf_loopy_bp(mrf, u6, damping=0.5)
    tv = 0.5 * float(np.max(np.sum(np.abs(
        marg - ising_brute_marginals(mrf, u6)), axis=1)))

    # a single-row lattice is a chain: fold the fields into the unaries
    n = 8
    h = 0.2 * rng.standard_normal(n)
    j = 0.3
    mrf1 = IsingMrf(h, lattice_edges(1, n), j * np.ones(n - 1))
    u1 = rng.random((n, 2)) + 0.2
    tree, _ = mrf_loopy_bp(mrf1, u1, damping=0.5)
    spins = np.array([-1.0, 1.0])
    u_eq = u1 * np.exp(h[:, None] * spins[None, :])
    t_eq = np.exp(j * np.outer(spins, spins))
    as_chain = chain_sum_product(u_eq, t_eq, init=np.ones(2))
    row_err = float(np.abs(tree - as_chain).max())

    ok = chain_err < 1e-12 and tv < 1e-2 and row_err < 1e-9
    report(6, ok, f"chain vs enumeration {chain_err:.1e} (< 1e-12), "
                  f"loopy 2x3 TV {tv:.1e} (< 1e-2), single-row vs chain "
                  f"{row_err:.1e}")


def test_criterion_07_simplex_projection(report):
    rng = np.random.default_rng(5)
    worst = 0.0
    idem = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        eps_w = float(rng.uniform(0.0, 0.5 / n))
        v = rng.normal(scale=3.0, size=n)
        got = simplex_project(v, eps_w)
        worst = max(worst, float(np.abs(got - simplex_oracle(v, eps_w)).max()))
        idem = max(idem, float(np.abs(simplex_project(got, eps_w)
                                      - got).max()))
    ok = worst < 1e-10 and idem < 1e-12
    report(7, ok, f"1000 projections vs KKT oracle, max error {worst:.2e} "
                  f"(< 1e-10); idempotence gap {idem:.1e}")


def test_criterion_08_prior_correctness(report):
    rng = np.random.default_rng(6)
    amp = CdgAmplitude(1.0, 0.8)
    stat = kstest(amp.rvs(rng, 100_000), amp.cdf).statistic

    gm = GaussMarkov(mu=1.0, chi=0.2, zeta=2.0)
    x = gm.mu
    xs = np.empty(100_000)
    for i in range(len(xs)):
        x = gm.step(x, rng)
        xs[i] = x
    var_err = abs(np.var(xs) - gm.stationary_var()) / gm.stationary_var()
    mean_err = abs(np.mean(xs) - gm.mu) / max(abs(gm.mu), 1.0)

    chain = SupportChain(0.05, 0.1)
    row_err = float(np.abs(chain.transition_matrix().sum(axis=1) - 1).max())
    edges = lattice_edges(2, 2)
    mrf = IsingMrf([0.2, -0.1, 0.3, 0.0], edges, 0.25 * np.ones(len(edges)))
    marg = ising_brute_marginals(mrf, np.ones((4, 2)))
    mrf_err = float(np.abs(marg.sum(axis=1) - 1.0).max())

    ok = (stat < 0.01 and var_err < 0.05 and mean_err < 0.05
          and row_err < 1e-12 and mrf_err < 1e-12)
    report(8, ok, f"product-amplitude K-S {stat:.4f} (< 0.01), "
                  f"Gauss-Markov moment errors {mean_err:.3f}/{var_err:.3f} "
                  f"(< 0.05), discrete normalization "
                  f"{max(row_err, mrf_err):.1e}")


def test_criterion_09_gradient_checks(report):
    scen, grids, ctxs, y, truth, triples, params = build_problem()
    priors = {}
    for l in range(2):
        priors[("phi", l)] = (params[l, 0], 0.01)
        priors[("theta_bar", l)] = (params[l, 1], 0.004)
        priors[("r_bar", l)] = (params[l, 2], 0.04)
        priors[("tau", l)] = (params[l, 3], 1e-18)
    from nfcet.spvbi import JointModel
    model = JointModel(y, ctxs, scen, scen.sigma2, params, [0.9, 0.9],
                       priors, amp_law=CdgAmplitude(1.0, 1.0))
    rng = np.random.default_rng(3)
    steps = dict(phi=1e-6, theta_bar=1e-6, r_bar=1e-6, tau=1e-15,
                 f_d=1e-4, amp=1e-6, phase=1e-6)
    worst = 0.0
    for trial in range(20):
        pos = params + rng.normal(scale=[0.01, 0.005, 0.02, 1e-10],
                                  size=(2, 4))
        amp = rng.uniform(0.5, 1.2, 2)
        phase = rng.uniform(-2, 2, 2)
        sup = np.array([1.0, 1.0])
        f_d = rng.uniform(-40, 40)
        name = ["phi", "theta_bar", "r_bar", "tau", "amp", "phase",
                "f_d"][trial % 7]
        path = trial % 2
        g = logjoint_grad(model, pos, amp, phase, sup, f_d, name, path)
        h = steps[name]

        def val(delta):
            p2, a2, ph2, fd2 = pos.copy(), amp.copy(), phase.copy(), f_d
            if name in POS_NAMES:
                p2[path, POS_NAMES.index(name)] += delta
            elif name == "amp":
                a2[path] += delta
            elif name == "phase":
                ph2[path] += delta
            else:
                fd2 += delta
            return logjoint_value(model, p2, a2, ph2, sup, fd2)

        fd_est = (val(h) - val(-h)) / (2 * h)
        worst = max(worst, abs(g - fd_est) / max(abs(fd_est), abs(g), 1e-6))
    for _ in range(20):
        n = 10
        w = simplex_project(rng.random(n), 1e-3)
        m = rng.normal(scale=5, size=n)
        g = elbo_weight_grad(w, m)
        for k in range(0, n, 3):
            h = 1e-7
            wp, wm = w.copy(), w.copy()
            wp[k] += h
            wm[k] -= h
            fval = lambda ww: float(ww @ m - ww @ np.log(ww))
            fd_est = (fval(wp) - fval(wm)) / (2 * h)
            worst = max(worst, abs(g[k] - fd_est) / max(abs(fd_est), 1.0))
    report(9, worst < 1e-5, f"log-joint and weight gradients vs central "
                            f"differences, worst relative error {worst:.2e} "
                            f"(< 1e-5)")


def test_criterion_10_pursuit_monotonicity(report):
    scen, grids = desk()
    x_p = zc_pilot(scen.k_bar, root=3)
    sel = scen.pilot_subcarriers()
    bad = 0
    for seed in range(100):
        truth = make_scene(scen, seed, snr_db=10.0)
        rng = np.random.default_rng(50_000 + seed)
        beams = make_beams(scen, rng, 6)
        ctxs = make_contexts(beams, x_p, sel, scen, truth.theta_b,
                             truth.phi_b)
        rngs = [np.random.default_rng((seed, p)) for p in range(6)]
        ys = observe(truth, scen, beams, x_p, sel, rngs=rngs)
        est = run_stage1(ys, ctxs, grids, scen, truth.theta_b, truth.phi_b,
                         max_paths=3, refine_iters=10, n_init=8)
        if not np.all(np.diff(est.residual_norms) <= 1e-10):
            bad += 1
    report(10, bad == 0, f"residual non-increasing in {100 - bad}/100 "
                         f"pursuit runs at SNR 10 dB")


def test_criterion_11_refinement_convergence(report):
    scen, grids, ctxs, y, truth, triples, params = build_problem()
    coarse = perturbed_coarse(truth, params, triples)
    state = run_module_a(y, ctxs, scen, grids, coarse, pi_on=[0.9, 0.9],
                         rng=np.random.default_rng(9))
    kl = np.array(state.kl_history)
    scale = max(float(np.mean(kl[:5])), 1e-12)
    settled = None
    for t in range(5, len(kl)):
        if np.all(np.abs(np.diff(kl[t - 5:t + 1])) < 0.01 * scale):
            settled = t
            break
    ok = settled is not None and settled <= 40 and len(kl) <= 40
    report(11, ok, f"sampled-KL settled (step < 1% of early movement over "
                   f"5 iterations) at iteration {settled} (< 40), "
                   f"{len(kl)} total")


def test_criterion_12_estimation_gain(report):
    scen, grids = desk()
    t0 = time.perf_counter()
    rows = sweep_snr(scen, grids, [10.0], trials=50, algos=("tscet", "omp"),
                     seed=0)
    wall = time.perf_counter() - t0
    by_algo = {r["algo"]: r["nmse_db"] for r in rows}
    gap = by_algo["omp"] - by_algo["tscet"]
    ok = gap >= 3.0 and wall < 1800.0
    report(12, ok, f"50-trial SNR-10 sweep: refined {by_algo['tscet']:.1f} dB "
                   f"vs on-grid baseline {by_algo['omp']:.1f} dB, gap "
                   f"{gap:.1f} dB (>= 3), {wall / 60:.1f} min (< 30)")


def test_criterion_13_tracking_efficiency(report):
    scen, grids = desk()
    ce_db, tr_db = [], []
    frozen = np.zeros(10)
    trials = 20
    for t in range(trials):
        seed = 500 + 1000 * t
        res = run_tracking(scen, grids, seed, t_frames=10, snr_db=10.0)
        nm = [r.nmse for r in res]
        ce_db.append(10 * np.log10(nm[0]))
        tr_db.append(10 * np.log10(tnmse(nm)))
        res_f = run_tracking(scen, grids, seed, t_frames=10, snr_db=10.0,
                             refine=False)
        frozen += np.array([r.nmse for r in res_f]) / trials
    diff = float(np.mean(tr_db) - np.mean(ce_db))
    rising = bool(np.all(np.diff(frozen) > 0))
    ok = diff <= 3.0 and rising
    report(13, ok, f"20-trial tracking at 6 vs 20 pilots: mean tracking "
                   f"NMSE {np.mean(tr_db):.1f} dB vs estimation "
                   f"{np.mean(ce_db):.1f} dB (within 3 dB: {diff:.2f}); "
                   f"frozen-parameter error trend "
                   f"{'strictly rising' if rising else 'not rising'}")


def test_criterion_14_pilot_sensitivity(report):
    scen, grids = desk()
    rows = sweep_pilots(scen, grids, [4, 6, 8], trials=8, t_frames=6,
                        seed=0, snr_db=10.0)
    db = {r["p2"]: r["tnmse_db"] for r in rows}
    ok = (db[4] > db[6] + 1.0) and abs(db[6] - db[8]) <= 1.0
    report(14, ok, f"tracking NMSE per pilot count: 4 -> {db[4]:.1f} dB, "
                   f"6 -> {db[6]:.1f} dB, 8 -> {db[8]:.1f} dB "
                   f"(4 worse than 6 by > 1 dB, 6 within 1 dB of 8)")


def test_criterion_15_multibeam_design(report):
    scen = Scenario(n_r=64)
    grids = build_grids(scen, s=3)
    phi_b = -0.16
    idx = [10 * 3 + 1, 32 * 3, 53 * 3 + 2]

    def atom(m):
        return polar_atom(grids.theta_bar[m], grids.r_bar[m], phi_b,
                          scen.n_r, scen.lam, scen.d)

    atoms = np.column_stack([atom(m) for m in idx])
    v, info = multibeam_design(atoms, eps_v=0.5,
                               rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    others = rng.choice([m for m in range(grids.n_polar) if m not in idx],
                        20, replace=False)
    off = beam_gain(v, np.column_stack([atom(m) for m in others]))
    margin = 10 * np.log10(info["gains"].min() / np.mean(off))
    ok = info["spread_ok"] and margin >= 10.0
    report(15, ok, f"3-target profile: gain spread within eps_v=0.5 "
                   f"({info['spread_ok']}), weakest target "
                   f"{margin:.1f} dB above mean off-target gain (>= 10)")


def test_criterion_16_complexity_accounting(report):
    scen, grids, ctxs, y, truth, triples, params = build_problem()
    coarse = perturbed_coarse(truth, params, triples)
    sched = SscaSchedule(max_iters=4, conv_window=50)
    state = run_module_a(y, ctxs, scen, grids, coarse, pi_on=[0.9, 0.9],
                         sched=sched, rng=np.random.default_rng(7))
    iters = len(state.elbo_history)
    j_cont = 2 * 6 + 1
    expect = iters * 2 * j_cont * sched.minibatch * sched.n_particles
    total = state.model.n_evals + state.model.n_grad_evals
    report(16, total == expect,
           f"log-joint evaluations {total} == iterations * 2*J*B*N_p = "
           f"{iters}*2*{j_cont}*{sched.minibatch}*{sched.n_particles} "
           f"= {expect}")
