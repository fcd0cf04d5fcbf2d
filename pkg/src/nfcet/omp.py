"""Coarse cascaded-channel estimation by joint-mode greedy pursuit.

Each iteration scores all (angle, polar, delay) dictionary triples
jointly across pilots with a norm-corrected matched filter, admits the
best one, refines every continuous parameter (including the shared
Doppler frequency) by projected gradient descent on the concentrated
least-squares objective, and re-fits all gains jointly so the residual
norm is non-increasing. Two simpler baselines share the dictionaries.
"""

from dataclasses import dataclass, field

import numpy as np

from .grids import build_dictionaries, doppler_column_phases, index_to_triple, triple_to_index
from .model import design_matrix, stacked_column

ARMIJO_C = 1e-4
ARMIJO_BACKTRACK = 0.5
ARMIJO_MAX_LINE = 25


@dataclass
class CoarseEstimate:
    """Output of the coarse stage (and input to refinement)."""

    triples: list                 # [(u, m, k)] 0-based anchors
    params: np.ndarray            # (L, 4): phi, theta_bar, r_bar, tau
    gains: np.ndarray             # (L,) complex
    f_d: float
    residual_norms: list = field(default_factory=list)
    n_score_iters: int = 0

    def param_rows(self):
        """(L, 5) rows (phi, theta_bar, r_bar, tau, f_d) for the model API."""
        return [tuple(p) + (self.f_d,) for p in self.params]


def _pilot_matrices(ys, scen):
    """Residual/observation tensors as per-pilot (R_B, K_bar) matrices."""
    return [y.data[:, 0, :] for y in ys]


def _projected_factors(ctxs, grids, scen, a_bu, a_r, a_f_sel, f_d):
    """U1_p = X_p A_BU,p (R_B, N_U); u2_p = v_p^T A_R; U3 = sqrt(pt) diag(x) A_f."""
    u1s, u2s = [], []
    for ctx in ctxs:
        phases = np.exp(2j * np.pi * f_d * ctx.t_off * grids.phi)
        u1 = np.empty((len(ctx.wb), scen.n_u), dtype=complex)
        for n in range(scen.n_u):
            # column n is kron(a_U*(phi_n), a_B); applying f^T kron W^H
            # factorizes as (f^T a_U*) (W^H a_B)
            mat = a_bu[:, n].reshape(scen.n_u, scen.n_b)
            u1[:, n] = (ctx.w.conj().T @ (mat.T @ ctx.f)) * phases[n]
        u1s.append(u1)
        u2s.append(ctx.v @ a_r)
    u3 = np.sqrt(scen.p_t) * ctxs[0].x[:, None] * a_f_sel
    return u1s, u2s, u3


def joint_scores(res_mats, u1s, u2s, u3):
    """Norm-corrected joint matched-filter score for every triple.

    Returns an (N_U, n_polar, N_f) array of
    sum_p |<residual_p, atom_p>|^2 / sum_p ||atom_p||^2.
    """
    n_u = u1s[0].shape[1]
    n_f = u3.shape[1]
    num_uk = np.zeros((len(res_mats), n_u, n_f))
    c_u = np.zeros((len(res_mats), n_u))
    w2 = np.zeros((len(res_mats), u2s[0].shape[0]))
    for p, (r, u1, u2) in enumerate(zip(res_mats, u1s, u2s)):
        a = u1.conj().T @ r @ u3.conj()          # (N_U, N_f)
        num_uk[p] = np.abs(a) ** 2
        c_u[p] = np.sum(np.abs(u1) ** 2, axis=0)
        w2[p] = np.abs(u2) ** 2
    d_k = np.sum(np.abs(u3) ** 2, axis=0)
    num = np.einsum("pm,puk->umk", w2, num_uk)
    den = np.einsum("pm,pu,k->umk", w2, c_u, d_k)
    return num / np.maximum(den, 1e-300)


def _param_scales(grids, triples, scen, n_pilots):
    """Natural step scales: one grid spacing per parameter."""
    scales = []
    for (u, m, k) in triples:
        scales.extend([
            grids.d_phi, grids.d_theta,
            max(grids.r_half_gap(m), 1e-3 * grids.z_delta), grids.d_tau,
        ])
    fd_scale = 1.0 / (2 * np.pi * max(n_pilots - 1, 1) * scen.t_s)
    scales.append(fd_scale)
    return np.asarray(scales)


def _param_bounds(grids, triples, scen, fd_max, width=2.0):
    """Per-parameter boxes of `width` half-spacings around each anchor."""
    lo, hi = [], []
    for (u, m, k) in triples:
        half_r = width * grids.r_half_gap(m)
        lo.extend([
            max(grids.phi[u] - width * grids.d_phi / 2, -1.0),
            max(grids.theta_bar[m] - width * grids.d_theta / 2, -0.999),
            max(grids.r_bar[m] - half_r, 1e-3 * grids.z_delta),
            max(grids.tau[k] - width * grids.d_tau / 2, 0.0),
        ])
        hi.extend([
            min(grids.phi[u] + width * grids.d_phi / 2, 1.0),
            min(grids.theta_bar[m] + width * grids.d_theta / 2, 0.999),
            grids.r_bar[m] + half_r,
            grids.tau[k] + width * grids.d_tau / 2,
        ])
    lo.append(-fd_max)
    hi.append(fd_max)
    return np.asarray(lo), np.asarray(hi)


def reanchor(grids, params):
    """Nearest grid triple for each refined parameter row."""
    from .grids import polar_distance

    triples = []
    for phi, tb, rb, tau in np.atleast_2d(params):
        u = int(np.argmin(np.abs(grids.phi - phi)))
        k = int(np.argmin(np.abs(grids.tau - tau)))
        dist = polar_distance(grids.theta_bar, grids.r_bar,
                              np.full(grids.n_polar, tb),
                              np.full(grids.n_polar, rb))
        m = int(np.argmin(dist))
        triples.append((u, m, k))
    return triples


def _concentrated_objective(y, ctxs, vec, n_paths, with_grad=False):
    """||P_A^perp y||^2 at params `vec` (4 per path + shared f_d)."""
    f_d = vec[-1]
    rows = [tuple(vec[4 * l:4 * l + 4]) + (f_d,) for l in range(n_paths)]
    if not with_grad:
        a = design_matrix(ctxs, rows)
        g, *_ = np.linalg.lstsq(a, y, rcond=None)
        r = y - a @ g
        return float(np.real(r.conj() @ r))
    cols, grads = [], []
    for row in rows:
        col, gr = stacked_column(ctxs, *row[:4], row[4], with_grads=True)
        cols.append(col)
        grads.append(gr)
    a = np.column_stack(cols)
    g, *_ = np.linalg.lstsq(a, y, rcond=None)
    r = y - a @ g
    obj = float(np.real(r.conj() @ r))
    grad = np.zeros(len(vec))
    for l, gr in enumerate(grads):
        for j, name in enumerate(("phi", "theta_bar", "r_bar", "tau")):
            grad[4 * l + j] = -2.0 * np.real(np.conj(g[l]) * (gr[name].conj() @ r))
        grad[-1] += -2.0 * np.real(np.conj(g[l]) * (gr["f_d"].conj() @ r))
    return obj, grad, g, r


def ml_refine(y, ctxs, grids, scen, triples, params, f_d, max_iter=30,
              fd_max=None):
    """Projected gradient descent with Armijo backtracking.

    Parameters are normalized by one grid spacing each so the initial
    step is one cell; offsets stay clamped to their half-spacing boxes.
    """
    n_paths = len(triples)
    vec = np.concatenate([np.asarray(params, dtype=float).ravel(), [f_d]])
    scales = _param_scales(grids, triples, scen, len(ctxs))
    if fd_max is None:
        fd_max = max(scen.f_d_max(), abs(f_d), 1.0)
    lo, hi = _param_bounds(grids, triples, scen, fd_max)
    vec = np.clip(vec, lo, hi)
    obj, grad, gains, res = _concentrated_objective(y, ctxs, vec, n_paths,
                                                   with_grad=True)
    step = 1.0
    for _ in range(max_iter):
        g_n = grad * scales  # gradient in normalized coordinates
        if np.max(np.abs(g_n)) < 1e-16 * max(obj, 1.0):
            break
        direction = -g_n / max(np.linalg.norm(g_n), 1e-300)
        accepted = False
        for _ in range(ARMIJO_MAX_LINE):
            cand = np.clip(vec + step * direction * scales, lo, hi)
            new_obj = _concentrated_objective(y, ctxs, cand, n_paths)
            slope = float(g_n @ direction)
            if new_obj <= obj + ARMIJO_C * step * slope:
                accepted = True
                break
            step *= ARMIJO_BACKTRACK
        if not accepted:
            break
        vec = cand
        obj, grad, gains, res = _concentrated_objective(y, ctxs, vec, n_paths,
                                                        with_grad=True)
        step = min(step / ARMIJO_BACKTRACK, 1.0)  # allow recovery
    new_params = vec[:-1].reshape(n_paths, 4)
    return new_params, float(vec[-1]), gains, res, obj


def polish_estimate(y, ctxs, grids, scen, triples, params, f_d, gains,
                    max_nfev=60, fd_bound=None, param_box=None):
    """Joint Gauss-Newton polish of all parameters and gains.

    Solves the full nonlinear least-squares problem with an analytic
    Jacobian; used as a final step once gradient refinement has found the
    right basin.
    """
    from scipy.optimize import least_squares

    n_paths = len(triples)
    # the mobility bound is known a priori; letting f_d roam further lets
    # the poorly identified f_d * phi product drag phi off its true value
    fd_max = fd_bound if fd_bound is not None \
        else max(scen.f_d_max(), abs(f_d), 1.0)
    if param_box is not None:
        # caller-supplied trust region (e.g. a propagated tracking prior)
        lo, hi = (np.asarray(b, dtype=float) for b in param_box)
    else:
        lo, hi = _param_bounds(grids, triples, scen, fd_max, width=2.0)
    scales = _param_scales(grids, triples, scen, len(ctxs))

    def unpack(x):
        vec = x[:4 * n_paths + 1] * scales
        g = x[4 * n_paths + 1:4 * n_paths + 1 + n_paths] \
            + 1j * x[4 * n_paths + 1 + n_paths:]
        return vec, g

    def model(x):
        vec, g = unpack(x)
        f_d_ = vec[-1]
        cols, grad_list = [], []
        for l in range(n_paths):
            col, gr = stacked_column(ctxs, *vec[4 * l:4 * l + 4], f_d_,
                                     with_grads=True)
            cols.append(col)
            grad_list.append(gr)
        a = np.column_stack(cols)
        r = y - a @ g
        return r, a, grad_list, g

    def fun(x):
        r = model(x)[0]
        return np.concatenate([r.real, r.imag])

    def jac(x):
        _, a, grad_list, g = model(x)
        n_par = 4 * n_paths + 1
        cols = []
        for l, gr in enumerate(grad_list):
            for j, name in enumerate(("phi", "theta_bar", "r_bar", "tau")):
                cols.append((l, 4 * l + j, gr[name]))
        jmat = np.zeros((2 * a.shape[0], n_par + 2 * n_paths))
        for l, jidx, dcol in cols:
            d = -g[l] * dcol * scales[jidx]
            jmat[:, jidx] = np.concatenate([d.real, d.imag])
        dfd = np.zeros(a.shape[0], dtype=complex)
        for l, gr in enumerate(grad_list):
            dfd += -g[l] * gr["f_d"]
        dfd *= scales[-1]
        jmat[:, n_par - 1] = np.concatenate([dfd.real, dfd.imag])
        for l in range(n_paths):
            d = -a[:, l]
            jmat[:, n_par + l] = np.concatenate([d.real, d.imag])
            d = -1j * a[:, l]
            jmat[:, n_par + n_paths + l] = np.concatenate([d.real, d.imag])
        return jmat

    vec0 = np.concatenate([np.asarray(params, dtype=float).ravel(), [f_d]])
    vec0 = np.clip(vec0, lo, hi)
    x0 = np.concatenate([vec0 / scales, gains.real, gains.imag])
    lo_x = np.concatenate([lo / scales, np.full(2 * n_paths, -np.inf)])
    hi_x = np.concatenate([hi / scales, np.full(2 * n_paths, np.inf)])
    out = least_squares(fun, x0, jac=jac, bounds=(lo_x, hi_x),
                        max_nfev=max_nfev, xtol=1e-15, ftol=1e-15, gtol=1e-15)
    vec, g = unpack(out.x)
    new_params = vec[:-1].reshape(n_paths, 4)
    res = model(out.x)[0]
    return new_params, float(vec[-1]), g, res


def run_stage1(ys, ctxs, grids, scen, theta_b, phi_b, max_paths=3,
               rel_tol=1e-3, refine_iters=30, refine=True, n_init=None,
               polish=True):
    """Greedy joint-mode pursuit over the three dictionaries.

    Off-grid truths leak energy across cells, so the top `n_init` score
    cells are each given a short refinement burst and the best basin is
    kept, then polished with anchors re-snapped to the nearest cells.
    """
    sel = scen.pilot_subcarriers()
    freqs_sel = scen.subcarrier_freqs()[sel]
    a_bu, a_r, a_f_sel = build_dictionaries(grids, scen, theta_b, phi_b,
                                            freqs=freqs_sel)
    y = np.concatenate([yy.vec() for yy in ys])
    m_len = ctxs[0].m_len
    triples, params = [], []
    gains = np.zeros(0, dtype=complex)
    f_d = 0.0
    res = y.copy()
    norms = [float(np.linalg.norm(res))]
    for _ in range(max_paths):
        res_mats = [res[i * m_len:(i + 1) * m_len].reshape(
            len(ctxs[i].wb), len(ctxs[i].x), order="F") for i in range(len(ctxs))]
        u1s, u2s, u3 = _projected_factors(ctxs, grids, scen, a_bu, a_r,
                                          a_f_sel, f_d)
        score = joint_scores(res_mats, u1s, u2s, u3)
        if refine:
            def burst(cand, nfev):
                t_try = triples + [cand]
                p_try = params + [[grids.phi[cand[0]], grids.theta_bar[cand[1]],
                                   grids.r_bar[cand[1]], grids.tau[cand[2]]]]
                rows = [tuple(p) + (f_d,) for p in p_try]
                a = design_matrix(ctxs, rows)
                g0, *_ = np.linalg.lstsq(a, y, rcond=None)
                p_arr, fd_t, g_t, r_t = polish_estimate(
                    y, ctxs, grids, scen, t_try, p_try, f_d, g0, max_nfev=nfev)
                return float(np.real(r_t.conj() @ r_t)), cand, p_arr, fd_t, g_t, r_t

            # the matched filter cannot rank the coarse angle cell reliably
            # through scalar per-pilot projections, so burst-refine every
            # (angle, polar-row) pair from its best-scoring (ring, delay)
            # cell, then expand the leading rows across all rings
            nfev1 = max(refine_iters // 5, 8)
            lvl1 = []
            for u in range(scen.n_u):
                for row in range(grids.n_r):
                    sl = score[u, row * grids.s:(row + 1) * grids.s, :]
                    ring, k = np.unravel_index(int(np.argmax(sl)), sl.shape)
                    cand = (u, row * grids.s + int(ring), int(k))
                    if cand not in triples:
                        lvl1.append((float(sl.max()), cand))
            lvl1.sort(key=lambda c: -c[0])
            if n_init is not None:
                lvl1 = lvl1[:max(n_init, 1)]
            results = [burst(cand, nfev1) for _, cand in lvl1]
            results.sort(key=lambda r: r[0])
            seen = {r[1] for r in results}
            for _, (u, m, k), *_rest in results[:4]:
                row = grids.angle_row_of(m)
                for ring in range(grids.s):
                    sl = score[u, row * grids.s + ring, :]
                    cand = (u, row * grids.s + ring, int(np.argmax(sl)))
                    if cand not in seen and cand not in triples:
                        seen.add(cand)
                        results.append(burst(cand, nfev1))
            sq, cand, p_arr, fd_c, g_c, r_c = min(results, key=lambda r: r[0])
            if np.sqrt(sq) > norms[-1]:
                # a new path must not make the fit worse; keep the
                # incumbent solution and stop adding paths
                break
            triples = triples + [cand]
            params = p_arr.tolist()
            f_d, gains, res = fd_c, g_c, r_c
            # polish with anchors snapped to the refined positions
            snapped = reanchor(grids, params)
            p_arr, fd_p, g_p, r_p = polish_estimate(
                y, ctxs, grids, scen, snapped, params, f_d, gains,
                max_nfev=refine_iters)
            if np.linalg.norm(r_p) <= np.linalg.norm(res):
                triples = snapped
                params = p_arr.tolist()
                f_d, gains, res = fd_p, g_p, r_p
        else:
            cands = []
            for idx in np.argsort(score, axis=None)[::-1]:
                cands.append(tuple(int(i) for i in np.unravel_index(idx, score.shape)))
                if cands[-1] not in triples:
                    break
            u, m, k = cands[-1]
            triples.append((u, m, k))
            params.append([grids.phi[u], grids.theta_bar[m], grids.r_bar[m],
                           grids.tau[k]])
            rows = [tuple(p) + (f_d,) for p in params]
            a = design_matrix(ctxs, rows)
            gains, *_ = np.linalg.lstsq(a, y, rcond=None)
            res = y - a @ gains
        norms.append(float(np.linalg.norm(res)))
        if norms[-1] > (1.0 - rel_tol) * norms[-2]:
            break
    if refine and polish and triples:
        params_arr, fd_p, g_p, r_p = polish_estimate(
            y, ctxs, grids, scen, triples, params, f_d, gains)
        if np.linalg.norm(r_p) <= np.linalg.norm(res):
            params = params_arr.tolist()
            f_d, gains, res = fd_p, g_p, r_p
            triples = reanchor(grids, params)
        norms.append(float(np.linalg.norm(res)))
        # neighboring rings are nearly coherent through the scalar pilot
        # projections, so a path can converge in the wrong ring and the
        # bounded polish cannot cross over; retry each path's row rings
        if norms[-1] > 1e-8 * norms[0]:
            best = (norms[-1], triples, params, f_d, gains, res)
            for l in range(len(triples)):
                u, m, k = best[1][l]
                row = grids.angle_row_of(m)
                for ring in range(grids.s):
                    m2 = row * grids.s + ring
                    if m2 == m:
                        continue
                    t2 = list(best[1])
                    t2[l] = (u, m2, k)
                    p2 = [list(p) for p in best[2]]
                    p2[l][1] = grids.theta_bar[m2]
                    p2[l][2] = grids.r_bar[m2]
                    pa, fd2, g2, r2 = polish_estimate(
                        y, ctxs, grids, scen, t2, p2, best[3], best[4])
                    n2 = float(np.linalg.norm(r2))
                    if n2 < best[0]:
                        best = (n2, t2, pa.tolist(), fd2, g2, r2)
            _, triples, params, f_d, gains, res = best
            triples = reanchor(grids, params)
            norms.append(float(np.linalg.norm(res)))
    return CoarseEstimate(
        triples=triples, params=np.asarray(params), gains=gains, f_d=f_d,
        residual_norms=norms,
    )


def run_plain_omp(ys, ctxs, grids, scen, theta_b, phi_b, max_paths=3):
    """Vectorized on-grid pursuit on the stacked measurement matrix.

    No Doppler model, no off-grid refinement: the classical baseline.
    """
    sel = scen.pilot_subcarriers()
    freqs_sel = scen.subcarrier_freqs()[sel]
    a_bu, a_r, a_f_sel = build_dictionaries(grids, scen, theta_b, phi_b,
                                            freqs=freqs_sel)
    y = np.concatenate([yy.vec() for yy in ys])
    m_len = ctxs[0].m_len
    u1s, u2s, u3 = _projected_factors(ctxs, grids, scen, a_bu, a_r, a_f_sel,
                                      f_d=0.0)
    n_u, n_polar, n_f = scen.n_u, grids.n_polar, u3.shape[1]

    def column(u, m, k):
        return np.concatenate([
            u2s[p][m] * np.kron(u3[:, k], u1s[p][:, u])
            for p in range(len(ctxs))
        ])

    triples = []
    res = y.copy()
    gains = np.zeros(0, dtype=complex)
    for _ in range(max_paths):
        res_mats = [res[i * m_len:(i + 1) * m_len].reshape(
            len(ctxs[i].wb), len(ctxs[i].x), order="F") for i in range(len(ctxs))]
        score = joint_scores(res_mats, u1s, u2s, u3)
        for idx in np.argsort(score, axis=None)[::-1]:
            cand = np.unravel_index(idx, score.shape)
            if cand not in triples:
                triples.append(cand)
                break
        a = np.column_stack([column(*t) for t in triples])
        gains, *_ = np.linalg.lstsq(a, y, rcond=None)
        res = y - a @ gains
    params = np.asarray([
        [grids.phi[u], grids.theta_bar[m], grids.r_bar[m], grids.tau[k]]
        for (u, m, k) in triples
    ])
    return CoarseEstimate(triples=triples, params=params, gains=gains,
                          f_d=0.0, residual_norms=[float(np.linalg.norm(res))])


def run_tompss(ys, ctxs, grids, scen, theta_b, phi_b, max_paths=3):
    """Sequential per-mode selection baseline.

    Picks the angle index from the mode-marginalized score, then the
    polar index given the angle, then the delay bin, then LS re-fits.
    """
    sel = scen.pilot_subcarriers()
    freqs_sel = scen.subcarrier_freqs()[sel]
    a_bu, a_r, a_f_sel = build_dictionaries(grids, scen, theta_b, phi_b,
                                            freqs=freqs_sel)
    y = np.concatenate([yy.vec() for yy in ys])
    m_len = ctxs[0].m_len
    u1s, u2s, u3 = _projected_factors(ctxs, grids, scen, a_bu, a_r, a_f_sel,
                                      f_d=0.0)

    def column(u, m, k):
        return np.concatenate([
            u2s[p][m] * np.kron(u3[:, k], u1s[p][:, u])
            for p in range(len(ctxs))
        ])

    triples = []
    res = y.copy()
    gains = np.zeros(0, dtype=complex)
    for _ in range(max_paths):
        res_mats = [res[i * m_len:(i + 1) * m_len].reshape(
            len(ctxs[i].wb), len(ctxs[i].x), order="F") for i in range(len(ctxs))]
        score = joint_scores(res_mats, u1s, u2s, u3)
        u = int(np.argmax(score.sum(axis=(1, 2))))
        m = int(np.argmax(score[u].sum(axis=1)))
        k = int(np.argmax(score[u, m]))
        if (u, m, k) in triples:
            # fall back to the best unused triple in this slice
            for idx in np.argsort(score, axis=None)[::-1]:
                cand = np.unravel_index(idx, score.shape)
                if cand not in triples:
                    u, m, k = cand
                    break
        triples.append((u, m, k))
        a = np.column_stack([column(*t) for t in triples])
        gains, *_ = np.linalg.lstsq(a, y, rcond=None)
        res = y - a @ gains
    params = np.asarray([
        [grids.phi[u], grids.theta_bar[m], grids.r_bar[m], grids.tau[k]]
        for (u, m, k) in triples
    ])
    return CoarseEstimate(triples=triples, params=params, gains=gains,
                          f_d=0.0, residual_norms=[float(np.linalg.norm(res))])
