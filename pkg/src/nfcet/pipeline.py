"""End-to-end estimation and tracking across frames.

The first frame runs the full two-stage estimator with the turbo loop
(coarse pursuit, particle refinement, structured support updates); later
frames reuse the previous posterior as a prior, steer beams at the known
support, spend fewer pilots and skip the support graph.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .beams import make_beam_plan
from .channel import (
    calibrate_snr,
    cascaded_tensor,
    evolve_frame,
    received_pilot,
    synthesize_truth,
    zc_pilot,
)
from .grids import build_grids
from .message_passing import support_prior_update
from .model import make_contexts, reconstruct_cascade, stack_observations
from .omp import (
    CoarseEstimate,
    polish_estimate,
    reanchor,
    run_plain_omp,
    run_stage1,
    run_tompss,
)
from .priors import PriorParams, SupportChain, polar_ising
from .spvbi import SscaSchedule, gate_to_modes, modes_to_gate, run_module_a

STAGE1_CLEAN_TOL = 1e-8   # relative residual below which refinement is moot


@dataclass
class FrameEstimate:
    """Final per-frame path estimate plus posterior summaries."""

    triples: list
    params: np.ndarray          # (L, 4)
    gains: np.ndarray
    f_d: float
    support: np.ndarray         # per-path activity probability
    moments: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return len(self.triples)

    def param_rows(self):
        return [tuple(p) + (self.f_d,) for p in self.params]


@dataclass
class FrameResult:
    estimate: FrameEstimate
    nmse: float
    n_pilots: int
    traces: dict = field(default_factory=dict)


def frame_nmse(truth, est, scen, n_pilots):
    """(1/P) sum_p ||R_hat_p - R_p||_F^2 / ||R_p||_F^2."""
    acc = 0.0
    gains = est.gains
    for p in range(1, n_pilots + 1):
        r_true = cascaded_tensor(truth, p, scen)
        denom = r_true.norm() ** 2
        if denom == 0:
            raise ValueError("zero-norm truth tensor")
        r_hat = reconstruct_cascade(gains, est.param_rows(), p, scen,
                                    truth.theta_b, truth.phi_b)
        acc += (r_hat - r_true).norm() ** 2 / denom
    return acc / n_pilots


def tnmse(frame_nmses):
    """Mean NMSE over tracking frames t = 2..T."""
    if len(frame_nmses) < 2:
        raise ValueError("tracking metric needs at least two frames")
    return float(np.mean(frame_nmses[1:]))


def _observe(truth, scen, plan, x_p, sel, rng):
    return [
        received_pilot(truth, p, plan.pilot(p), x_p, sel, scen, rng=rng)
        for p in range(1, plan.n_pilots + 1)
    ]


def _effective_noise_var(scen, plan):
    """Per-entry noise variance after the combiner."""
    norms = [np.mean(np.sum(np.abs(w) ** 2, axis=0)) for w in plan.w_list]
    return max(scen.sigma2 * float(np.mean(norms)), 1e-300)


def _coarse_from_estimate(est):
    return CoarseEstimate(
        triples=list(est.triples), params=np.asarray(est.params, dtype=float),
        gains=np.asarray(est.gains, dtype=complex), f_d=float(est.f_d),
        residual_norms=[], n_score_iters=0,
    )


def _site_messages(coarse, ext, grids, n_f, prior_params, site_beliefs):
    """Per-mode incoming activity messages implied by the path beliefs.

    Paths send gate messages to their own (u, m, k) sites; everything
    else stays uninformative. Multiple paths on one site combine in the
    odds domain.
    """
    n_u = len(site_beliefs["u"])
    pi_in = {
        "u": np.full(n_u, 0.5),
        "r": np.full(grids.n_polar, 0.5),
        "k": np.full(n_f, 0.5),
    }
    for l, (u, m, k) in enumerate(coarse.triples):
        m_u, m_r, m_k = gate_to_modes(
            ext[l], prior_params.p_s, prior_params.eps_off,
            site_beliefs["u"][u], site_beliefs["r"][m], site_beliefs["k"][k])
        for mode, site, msg in (("u", u, m_u), ("r", m, m_r), ("k", k, m_k)):
            prev = pi_in[mode][site]
            odds = (prev / (1 - prev)) * (msg / max(1 - msg, 1e-12))
            pi_in[mode][site] = odds / (1.0 + odds)
    return pi_in


def run_ce_frame(truth, scen, grids, seed, prior_params=None, sched=None,
                 max_paths=3, n_pilots=None, n_turbo=3, turbo_tol=0.01,
                 algo="tscet", refine_iters=30, n_init=16):
    """One channel-estimation frame; returns a FrameResult."""
    prior_params = prior_params or PriorParams()
    n_pilots = n_pilots or scen.p1
    rng = np.random.default_rng(seed)
    plan = make_beam_plan(scen, grids, truth.theta_b, truth.phi_b,
                          n_pilots, rng)
    x_p = zc_pilot(scen.k_bar, root=3)
    sel = scen.pilot_subcarriers()
    ys = _observe(truth, scen, plan, x_p, sel, rng)
    ctxs = make_contexts(plan.triples(), x_p, sel, scen,
                         truth.theta_b, truth.phi_b)
    y = stack_observations(ys)
    t0 = time.perf_counter()
    traces = {}
    if algo == "omp":
        coarse = run_plain_omp(ys, ctxs, grids, scen, truth.theta_b,
                               truth.phi_b, max_paths=max_paths)
        est = FrameEstimate(coarse.triples, np.asarray(coarse.params),
                            coarse.gains, coarse.f_d,
                            np.ones(len(coarse.triples)))
    elif algo == "tompss":
        coarse = run_tompss(ys, ctxs, grids, scen, truth.theta_b,
                            truth.phi_b, max_paths=max_paths)
        est = FrameEstimate(coarse.triples, np.asarray(coarse.params),
                            coarse.gains, coarse.f_d,
                            np.ones(len(coarse.triples)))
    elif algo == "tscet":
        est, traces = _run_tscet_ce(y, ys, ctxs, grids, scen, truth, plan,
                                    prior_params, sched, max_paths, n_turbo,
                                    turbo_tol, refine_iters, seed, n_init)
    else:
        raise ValueError(f"unknown algorithm {algo!r}")
    traces["wall_time"] = time.perf_counter() - t0
    val = frame_nmse(truth, est, scen, n_pilots)
    return FrameResult(estimate=est, nmse=val, n_pilots=n_pilots,
                       traces=traces)


def _run_tscet_ce(y, ys, ctxs, grids, scen, truth, plan, prior_params,
                  sched, max_paths, n_turbo, turbo_tol, refine_iters, seed,
                  n_init):
    coarse = run_stage1(ys, ctxs, grids, scen, truth.theta_b, truth.phi_b,
                        max_paths=max_paths, refine_iters=refine_iters,
                        n_init=n_init)
    traces = {"stage1_residuals": coarse.residual_norms}
    rel_res = coarse.residual_norms[-1] / max(coarse.residual_norms[0], 1e-300)
    n_f = len(grids.tau)
    support = np.ones(len(coarse.triples))
    moments = {}
    if rel_res > STAGE1_CLEAN_TOL and len(coarse.triples) > 0:
        # floor at a fraction of the residual power so near-noiseless
        # data keeps the log-joint finite
        sigma_eff2 = max(_effective_noise_var(scen, plan),
                         1e-6 * coarse.residual_norms[-1] ** 2 / len(y))
        chain = SupportChain(prior_params.lam_on, prior_params.lam_off)
        mrf = polar_ising(grids, prior_params)
        site_beliefs = {
            "u": np.full(scen.n_u, chain.p_on),
            "r": np.full(grids.n_polar, chain.p_on),
            "k": np.full(n_f, chain.p_on),
        }
        pi_path = np.full(len(coarse.triples), prior_params.p_s)
        kl_traces, counters = [], []
        state = None
        support_init = None
        for rnd in range(max(n_turbo, 1)):
            state = run_module_a(
                y, ctxs, scen, grids, coarse, pi_on=pi_path, sched=sched,
                prior_params=prior_params, sigma_eff2=sigma_eff2,
                rng=np.random.default_rng((seed, 17, rnd)),
                support_init=support_init)
            kl_traces.append(state.kl_history)
            counters.append({
                "logjoint_evals": state.model.n_evals,
                "grad_evals": state.model.n_grad_evals,
                "support_evals": state.model.n_support_evals,
                "iterations": len(state.kl_history),
            })
            params, gains, f_d, support = state.estimate()
            support_init = support
            coarse = replace(coarse, params=np.asarray(params),
                             gains=gains, f_d=float(f_d))
            coarse = replace(coarse, triples=reanchor(grids, coarse.params))
            ext = state.extrinsic_support()
            pi_in = _site_messages(coarse, ext, grids, n_f, prior_params,
                                   site_beliefs)
            out = support_prior_update(pi_in, chain, chain, mrf)
            for mode in ("u", "r", "k"):
                odds = (pi_in[mode] / (1 - pi_in[mode])) \
                    * (out[mode] / np.maximum(1 - out[mode], 1e-12))
                site_beliefs[mode] = odds / (1.0 + odds)
            pi_new = np.array([
                modes_to_gate(out["u"][u], out["r"][m], out["k"][k],
                              prior_params.p_s, prior_params.eps_off)
                for (u, m, k) in coarse.triples
            ])
            delta = float(np.max(np.abs(pi_new - pi_path)))
            pi_path = pi_new
            if delta < turbo_tol:
                break
        traces["turbo_rounds"] = rnd + 1
        traces["kl"] = kl_traces
        traces["counters"] = counters
        moments = state.posterior_moments()
    # keep confidently active paths (never drop everything)
    active = support > 0.5
    if not np.any(active):
        active[int(np.argmax(support))] = True
    triples = [t for t, a in zip(coarse.triples, active) if a]
    params = coarse.params[active]
    gains = coarse.gains[active]
    params, f_d, gains, _ = polish_estimate(
        y, ctxs, grids, scen, triples, params, coarse.f_d, gains)
    est = FrameEstimate(triples=triples, params=params, gains=gains,
                        f_d=float(f_d), support=support[active],
                        moments=moments)
    return est, traces


def propagated_priors(prev, grids, prior_params):
    """Gaussian priors and activity beliefs pushed one frame ahead.

    Each continuous variable keeps its posterior mean and inflates its
    variance by the innovation of its Gauss-Markov drift; the activity
    probability mixes through the support chain transitions.
    """
    chain = SupportChain(prior_params.lam_on, prior_params.lam_off)
    base_var = {
        "phi": (prior_params.sigma_phi * grids.d_phi) ** 2,
        "theta_bar": prior_params.sigma_theta ** 2,
        "r_bar": prior_params.sigma_r ** 2,
        "tau": prior_params.sigma_tau ** 2,
    }
    gauss = {}
    for (name, path), (mean, var) in prev.moments.items():
        if name in base_var:
            chi = prior_params.chi_offgrid
            zeta = base_var[name]
        elif name in ("amp", "phase"):
            chi = prior_params.chi_gain
            zeta = max(var, 1e-4) if name == "amp" else 0.25
        else:  # f_d
            chi = prior_params.chi_doppler
            zeta = max(var, 1.0)
        a = 1.0 - chi
        gauss[(name, path)] = (mean, a * a * var + chi * chi * zeta)
    pi = np.asarray(prev.support, dtype=float)
    pi_next = chain.propagate(pi)
    return gauss, pi_next


def _tracking_box(prev, gauss, scen, grids, motion_margin=2.0):
    """Trust region for the tracking refit around the previous estimate.

    The box widths follow the per-frame motion scale, not the posterior
    spread: with few pilots and steered beams the weakly identified
    directions (phi with a small user array, the f_d * phi product)
    would otherwise overfit noise and walk away from the truth. Motion
    moves the user v * T_frame per frame; a margin on top of that keeps
    real drift trackable while bounding the damage noise can do.
    """
    step = scen.v * scen.frame_duration          # per-frame displacement
    r_ref = max(float(np.min(prev.params[:, 2])), 0.1)
    ang = motion_margin * max(step / r_ref, 2e-3)
    widths = {
        "phi": ang, "theta_bar": ang,
        "r_bar": motion_margin * max(step, 5e-3),
        "tau": motion_margin * max(2.0 * step / 3e8, 3e-10),
    }
    limits = {
        "phi": (-1.0, 1.0), "theta_bar": (-0.999, 0.999),
        "r_bar": (1e-3 * grids.z_delta, np.inf), "tau": (0.0, np.inf),
    }
    lo, hi = [], []
    for l in range(prev.n_paths):
        for j, name in enumerate(("phi", "theta_bar", "r_bar", "tau")):
            mean = prev.params[l, j]
            a, b = limits[name]
            lo.append(max(mean - widths[name], a))
            hi.append(min(mean + widths[name], b))
    fdm = max(scen.f_d_max(), 1.0)
    fd0 = float(np.clip(prev.f_d, -fdm, fdm))
    lo.append(max(fd0 - 2.0, -fdm))
    hi.append(min(fd0 + 2.0, fdm))
    return np.asarray(lo), np.asarray(hi)


def run_ct_frame(truth, scen, grids, prev, seed, prior_params=None,
                 sched=None, n_pilots=None, refine=True, refine_iters=30):
    """One tracking frame seeded by the previous frame's estimate."""
    prior_params = prior_params or PriorParams()
    n_pilots = n_pilots or scen.p2
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    if not refine:
        # hold the previous estimate: no new pilots are processed
        est = replace(prev)
        val = frame_nmse(truth, est, scen, n_pilots)
        return FrameResult(estimate=est, nmse=val, n_pilots=n_pilots,
                           traces={"refined": False,
                                   "wall_time": time.perf_counter() - t0})
    support_polar = sorted({m for (_, m, _) in prev.triples})
    angles = list(prev.params[:, 0])
    plan = make_beam_plan(scen, grids, truth.theta_b, truth.phi_b, n_pilots,
                          rng, support=support_polar, angles=angles)
    x_p = zc_pilot(scen.k_bar, root=3)
    sel = scen.pilot_subcarriers()
    ys = _observe(truth, scen, plan, x_p, sel, rng)
    ctxs = make_contexts(plan.triples(), x_p, sel, scen,
                         truth.theta_b, truth.phi_b)
    y = stack_observations(ys)
    gauss, pi_next = propagated_priors(prev, grids, prior_params)
    box = _tracking_box(prev, gauss, scen, grids)
    # coarse re-centering from the previous state (seeded stage I)
    params, f_d, gains, res = polish_estimate(
        y, ctxs, grids, scen, prev.triples, prev.params, prev.f_d,
        prev.gains, max_nfev=refine_iters, param_box=box)
    coarse = CoarseEstimate(
        triples=reanchor(grids, params), params=params, gains=gains,
        f_d=float(f_d), residual_norms=[float(np.linalg.norm(res))],
        n_score_iters=0)
    rel_res = float(np.linalg.norm(res)) / max(float(np.linalg.norm(y)), 1e-300)
    support = pi_next.copy()
    moments = dict(prev.moments)
    traces = {"refined": True}
    if rel_res > STAGE1_CLEAN_TOL:
        sigma_eff2 = max(_effective_noise_var(scen, plan),
                         1e-6 * float(np.linalg.norm(res)) ** 2 / len(y))
        sched_ct = sched or SscaSchedule(min_iters=10, box_c=0.02,
                                         box_floor=0.01)
        state = run_module_a(
            y, ctxs, scen, grids, coarse, pi_on=pi_next, sched=sched_ct,
            prior_params=prior_params, sigma_eff2=sigma_eff2,
            rng=np.random.default_rng(seed + 1), gauss_priors=gauss)
        params, gains, f_d, support = state.estimate()
        coarse = replace(coarse, params=np.asarray(params), gains=gains,
                         f_d=float(f_d))
        moments = state.posterior_moments()
        traces["kl"] = state.kl_history
        traces["counters"] = {
            "logjoint_evals": state.model.n_evals,
            "grad_evals": state.model.n_grad_evals,
            "support_evals": state.model.n_support_evals,
            "iterations": len(state.kl_history),
        }
    active = support > 0.5
    if not np.any(active):
        active[int(np.argmax(support))] = True
    triples = [t for t, a in zip(coarse.triples, active) if a]
    idx = [4 * l + j for l, a in enumerate(active) if a for j in range(4)]
    sub_box = (np.append(box[0][idx], box[0][-1]),
               np.append(box[1][idx], box[1][-1]))
    params, f_d, gains, _ = polish_estimate(
        y, ctxs, grids, scen, triples, coarse.params[active], coarse.f_d,
        coarse.gains[active], param_box=sub_box)
    est = FrameEstimate(triples=triples, params=params, gains=gains,
                        f_d=float(f_d), support=support[active],
                        moments=moments)
    traces["wall_time"] = time.perf_counter() - t0
    val = frame_nmse(truth, est, scen, n_pilots)
    return FrameResult(estimate=est, nmse=val, n_pilots=n_pilots,
                       traces=traces)


def make_scene(scen, seed, snr_db=None, clusters=((2, None),), f_d=None):
    """Random scene with gains optionally calibrated to a target SNR.

    Calibration uses a reference random-phase beam plan drawn from the
    same seed stream.
    """
    rng = np.random.default_rng(seed)
    truth = synthesize_truth(scen, rng, clusters=clusters, f_d=f_d)
    if snr_db is not None:
        plan = make_beam_plan(scen, build_grids(scen), truth.theta_b,
                              truth.phi_b, 4, rng)
        truth = calibrate_snr(truth, scen, plan.triples(),
                              zc_pilot(scen.k_bar, root=3),
                              scen.pilot_subcarriers(), snr_db)
    return truth


def run_tracking(scen, grids, seed, t_frames, prior_params=None, sched=None,
                 snr_db=10.0, p1=None, p2=None, max_paths=3, n_turbo=3,
                 refine=True, clusters=((2, None),), f_d=None,
                 gain_jitter=0.0):
    """CE frame followed by t_frames - 1 tracking frames.

    Returns the list of per-frame FrameResults on an evolving scene.
    """
    prior_params = prior_params or PriorParams()
    truth = make_scene(scen, seed, snr_db=snr_db, clusters=clusters, f_d=f_d)
    results = [run_ce_frame(truth, scen, grids, seed, prior_params, sched,
                            max_paths=max_paths, n_pilots=p1,
                            n_turbo=n_turbo)]
    rng = np.random.default_rng(seed + 10_000)
    for t in range(1, t_frames):
        truth = evolve_frame(truth, scen, scen.frame_duration,
                             gain_jitter=gain_jitter, rng=rng)
        results.append(run_ct_frame(truth, scen, grids,
                                    results[-1].estimate, seed + t,
                                    prior_params, sched, n_pilots=p2,
                                    refine=refine))
    return results


def sweep_snr(scen, grids, snr_list, trials, algos=("tscet", "omp"),
              seed=0, max_paths=3, n_turbo=3, clusters=((2, None),)):
    """Mean NMSE per (SNR, algorithm); paired scenes across algorithms."""
    rows = []
    for snr_db in snr_list:
        per_algo = {a: [] for a in algos}
        for t in range(trials):
            s = seed + 1000 * t
            truth = make_scene(scen, s, snr_db=snr_db, clusters=clusters)
            for a in algos:
                res = run_ce_frame(truth, scen, grids, s, algo=a,
                                   max_paths=max_paths, n_turbo=n_turbo)
                per_algo[a].append(res.nmse)
        for a in algos:
            vals_db = 10.0 * np.log10(np.maximum(per_algo[a], 1e-300))
            rows.append({
                "snr_db": float(snr_db), "algo": a,
                "nmse_db": float(np.mean(vals_db)),
                "stderr_db": float(np.std(vals_db) / np.sqrt(max(trials, 1))),
                "trials": trials,
            })
    return rows


def sweep_pilots(scen, grids, p2_list, trials, t_frames=5, seed=0,
                 snr_db=10.0, max_paths=3, clusters=((2, None),)):
    """Mean tracking NMSE per CT pilot count."""
    rows = []
    for p2 in p2_list:
        vals = []
        for t in range(trials):
            res = run_tracking(scen, grids, seed + 1000 * t, t_frames,
                               snr_db=snr_db, p2=p2, max_paths=max_paths,
                               clusters=clusters)
            vals.append(tnmse([r.nmse for r in res]))
        vals_db = 10.0 * np.log10(np.maximum(vals, 1e-300))
        rows.append({
            "p2": int(p2), "algo": "tscet",
            "tnmse_db": float(np.mean(vals_db)),
            "stderr_db": float(np.std(vals_db) / np.sqrt(max(trials, 1))),
            "trials": trials,
        })
    return rows


def complexity_report(counters, n_paths, sched=None):
    """Operation counts next to the symbolic per-iteration cost."""
    sched = sched or SscaSchedule()
    j_cont = 6 * n_paths + 1
    lines = ["complexity report"]
    formula = (f"per-iteration log-joint cost 2*J*B*N_p = "
               f"2*{j_cont}*{sched.minibatch}*{sched.n_particles} = "
               f"{2 * j_cont * sched.minibatch * sched.n_particles}")
    lines.append(formula)
    if isinstance(counters, dict):
        counters = [counters]
    for i, c in enumerate(counters):
        iters = max(c.get("iterations", 1), 1)
        total = c.get("logjoint_evals", 0) + c.get("grad_evals", 0)
        lines.append(
            f"round {i}: iterations={iters} "
            f"logjoint={c.get('logjoint_evals', 0)} "
            f"grad={c.get('grad_evals', 0)} "
            f"support={c.get('support_evals', 0)} "
            f"per-iteration={total // iters}")
    return "\n".join(lines)
