"""Per-pilot observation model shared by the coarse and refinement stages.

A path is described by the continuous parameters (phi, theta_bar, r_bar,
tau) plus the shared Doppler frequency f_d; this module maps those to
received-pilot response columns, with analytic derivatives, and rebuilds
the full cascaded channel from a path list.
"""

from dataclasses import dataclass

import numpy as np

from .channel import bu_atom, delay_arv, far_field_arv
from .grids import polar_atom, polar_atom_with_grads
from .tensor3 import ComplexTensor3

PARAM_NAMES = ("phi", "theta_bar", "r_bar", "tau", "f_d")


@dataclass
class PilotContext:
    """Everything needed to evaluate one pilot's response to a path."""

    p: int                 # 1-based pilot index
    w: np.ndarray          # combiner (N_B, R_B)
    f: np.ndarray          # user precoder (N_U,)
    v: np.ndarray          # IRS phase profile (N_R,)
    x: np.ndarray          # pilot symbols (K_bar,)
    freqs: np.ndarray      # pilot subcarrier frequencies (K_bar,)
    wb: np.ndarray         # W^H a_B(theta_b), cached (R_B,)
    t_off: float           # (p-1) T_s
    sqrt_pt: float
    lam: float
    d: float
    n_u: int
    n_r: int
    phi_b: float

    @property
    def m_len(self):
        return len(self.wb) * len(self.x)


def make_contexts(beams_list, x_p, sel, scen, theta_b, phi_b):
    freqs = scen.subcarrier_freqs()[sel]
    a_b = far_field_arv(theta_b, scen.n_b, scen.lam, scen.d)
    ctxs = []
    for p, (w, f, v) in enumerate(beams_list, start=1):
        ctxs.append(PilotContext(
            p=p, w=np.asarray(w), f=np.asarray(f), v=np.asarray(v),
            x=np.asarray(x_p), freqs=freqs, wb=np.asarray(w).conj().T @ a_b,
            t_off=(p - 1) * scen.t_s, sqrt_pt=np.sqrt(scen.p_t),
            lam=scen.lam, d=scen.d, n_u=scen.n_u, n_r=scen.n_r, phi_b=phi_b,
        ))
    return ctxs


def path_column(ctx, phi, theta_bar, r_bar, tau, f_d, with_grads=False):
    """Unit-gain response of one path at one pilot, optionally with grads.

    The column is vec(u1 o [u2] o u3) = u2 * kron(u3, u1), length R_B*K_bar.
    """
    i_u = np.arange(ctx.n_u)
    a_u = np.exp(-2j * np.pi / ctx.lam * i_u * ctx.d * phi)
    s_u = ctx.f @ a_u.conj()
    psi = 2.0 * np.pi * f_d * ctx.t_off * phi
    u1 = ctx.wb * (s_u * np.exp(1j * psi))
    atom2 = polar_atom(theta_bar, r_bar, ctx.phi_b, ctx.n_r, ctx.lam, ctx.d)
    u2 = ctx.v @ atom2
    u3 = ctx.sqrt_pt * ctx.x * np.exp(-2j * np.pi * ctx.freqs * tau)
    col = u2 * np.kron(u3, u1)
    if not with_grads:
        return col
    # d a_U*(phi) / d phi has per-element factor +2j pi/lam i d
    ds_u = ctx.f @ (a_u.conj() * (2j * np.pi / ctx.lam * i_u * ctx.d))
    dpsi_dphi = 2.0 * np.pi * f_d * ctx.t_off
    du1_dphi = ctx.wb * np.exp(1j * psi) * (ds_u + s_u * 1j * dpsi_dphi)
    _, datom_dth, datom_dr = polar_atom_with_grads(
        theta_bar, r_bar, ctx.phi_b, ctx.n_r, ctx.lam, ctx.d)
    du2_dth = ctx.v @ datom_dth
    du2_dr = ctx.v @ datom_dr
    du3_dtau = u3 * (-2j * np.pi * ctx.freqs)
    du1_dfd = u1 * (1j * 2.0 * np.pi * ctx.t_off * phi)
    grads = {
        "phi": u2 * np.kron(u3, du1_dphi),
        "theta_bar": du2_dth * np.kron(u3, u1),
        "r_bar": du2_dr * np.kron(u3, u1),
        "tau": u2 * np.kron(du3_dtau, u1),
        "f_d": u2 * np.kron(u3, du1_dfd),
    }
    return col, grads


def stacked_column(ctxs, phi, theta_bar, r_bar, tau, f_d, with_grads=False):
    """Path response stacked over all pilots (and grads likewise)."""
    if not with_grads:
        return np.concatenate([
            path_column(c, phi, theta_bar, r_bar, tau, f_d) for c in ctxs
        ])
    cols, grad_list = [], []
    for c in ctxs:
        col, g = path_column(c, phi, theta_bar, r_bar, tau, f_d, with_grads=True)
        cols.append(col)
        grad_list.append(g)
    grads = {k: np.concatenate([g[k] for g in grad_list]) for k in PARAM_NAMES}
    return np.concatenate(cols), grads


def _batch_polar(theta_bar, r_bar, phi_b, n_r, lam, d, grad=None):
    """Vectorized IRS-side atoms (rows x N_R), optionally a derivative.

    Rows whose inverse map leaves the visible region fall back to the
    quadratic-phase form (handled per-row; rare in practice).
    """
    theta_bar = np.asarray(theta_bar, dtype=float)
    r_bar = np.asarray(r_bar, dtype=float)
    theta_u = theta_bar - phi_b
    ok = (np.abs(theta_u) < 1.0) & (np.abs(theta_bar) < 1.0) & (r_bar > 0)
    out = np.empty((len(theta_bar), n_r), dtype=complex)
    i = np.arange(n_r)
    if np.any(ok):
        tb, rb, tu = theta_bar[ok], r_bar[ok], theta_u[ok]
        denom = 1.0 - tb**2
        ru = rb * (1.0 - tu**2) / denom
        rn = np.sqrt(ru[:, None] ** 2 - 2.0 * ru[:, None] * i * d * tu[:, None]
                     + (i * d) ** 2)
        atom = np.exp(-2j * np.pi / lam * ((rn - ru[:, None])
                                           - i * d * phi_b))
        if grad is None:
            out[ok] = atom
        else:
            drn_dru = (ru[:, None] - i * d * tu[:, None]) / rn
            drn_dtu = -ru[:, None] * i * d / rn
            dru_dth = rb * (-2.0 * tu * denom + (1.0 - tu**2) * 2.0 * tb) / denom**2
            dru_dr = (1.0 - tu**2) / denom
            if grad == "theta_bar":
                darg = drn_dtu + (drn_dru - 1.0) * dru_dth[:, None]
            else:
                darg = (drn_dru - 1.0) * dru_dr[:, None]
            out[ok] = atom * (-2j * np.pi / lam) * darg
    if np.any(~ok):
        from .grids import polar_atom, polar_atom_with_grads

        for idx in np.nonzero(~ok)[0]:
            if grad is None:
                out[idx] = polar_atom(theta_bar[idx], r_bar[idx], phi_b,
                                      n_r, lam, d)
            else:
                _, dth, dr = polar_atom_with_grads(theta_bar[idx], r_bar[idx],
                                                   phi_b, n_r, lam, d)
                out[idx] = dth if grad == "theta_bar" else dr
    return out


def batch_columns(ctxs, rows, wrt=None):
    """Path responses for many parameter rows at once: (n_rows, P*M).

    `rows` is (n_rows, 5) with columns (phi, theta_bar, r_bar, tau, f_d);
    `wrt` selects a derivative column instead of the response itself.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    phi, tb, rb, tau, f_d = rows.T
    c0 = ctxs[0]
    n_u, n_r, lam, d = c0.n_u, c0.n_r, c0.lam, c0.d
    i_u = np.arange(n_u)
    a_u_conj = np.exp(2j * np.pi / lam * np.outer(phi, i_u * d))  # conj(a_U)
    if wrt in ("theta_bar", "r_bar"):
        atom2 = _batch_polar(tb, rb, c0.phi_b, n_r, lam, d, grad=wrt)
    else:
        atom2 = _batch_polar(tb, rb, c0.phi_b, n_r, lam, d)
    blocks = []
    for ctx in ctxs:
        s_u = a_u_conj @ ctx.f
        psi = 2.0 * np.pi * f_d * ctx.t_off * phi
        amp1 = s_u * np.exp(1j * psi)
        if wrt == "phi":
            ds_u = (a_u_conj * (2j * np.pi / lam * i_u * d)) @ ctx.f
            amp1 = np.exp(1j * psi) * (ds_u + s_u * 2j * np.pi * f_d * ctx.t_off)
        elif wrt == "f_d":
            amp1 = amp1 * (2j * np.pi * ctx.t_off * phi)
        u1 = amp1[:, None] * ctx.wb[None, :]
        u2 = atom2 @ ctx.v
        u3 = ctx.sqrt_pt * ctx.x[None, :] * np.exp(
            -2j * np.pi * np.outer(tau, ctx.freqs))
        if wrt == "tau":
            u3 = u3 * (-2j * np.pi * ctx.freqs[None, :])
        blk = np.einsum("rk,rb->rkb", u3, u1).reshape(len(rows), -1)
        blocks.append(u2[:, None] * blk)
    return np.concatenate(blocks, axis=1)


def design_matrix(ctxs, params):
    """Columns for a list of paths, stacked over pilots: (P*M, L)."""
    return np.column_stack([
        stacked_column(ctxs, *pr[:4], pr[4]) for pr in params
    ])


def stack_observations(ys):
    """Concatenate received-pilot tensors into one vector."""
    return np.concatenate([y.vec() for y in ys])


def reconstruct_cascade(gains, params, p, scen, theta_b, phi_b):
    """Cascaded channel tensor (N_B N_U, N_R, K) implied by path estimates.

    `params` rows are (phi, theta_bar, r_bar, tau, f_d).
    """
    freqs = scen.subcarrier_freqs()
    out = np.zeros((scen.n_b * scen.n_u, scen.n_r, scen.k), dtype=complex)
    for g, (phi, tb, rb, tau, f_d) in zip(gains, params):
        psi = 2.0 * np.pi * f_d * (p - 1) * scen.t_s * phi
        a1 = bu_atom(phi, theta_b, psi, scen.n_u, scen.n_b, scen.lam, scen.d)
        a2 = polar_atom(tb, rb, phi_b, scen.n_r, scen.lam, scen.d)
        a3 = delay_arv(tau, freqs)
        out += g * np.einsum("i,j,k->ijk", a1, a2, a3)
    return ComplexTensor3(out)


def nmse(truth, gains, params, scen, n_pilots):
    """Mean over pilots of ||R_hat - R||_F^2 / ||R||_F^2."""
    from .channel import cascaded_tensor

    acc = 0.0
    for p in range(1, n_pilots + 1):
        r_true = cascaded_tensor(truth, p, scen)
        r_hat = reconstruct_cascade(gains, params, p, scen,
                                    truth.theta_b, truth.phi_b)
        acc += (r_hat - r_true).norm() ** 2 / r_true.norm() ** 2
    return acc / n_pilots
