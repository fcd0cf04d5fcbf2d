"""Angular / polar / delay grids, dictionaries and index bookkeeping.

The three estimation modes are the joint user-BS spatial mode (gridded in
the user-side angle), the IRS polar mode (angle x distance-ring grid) and
the delay mode. Dictionary atoms are parameterized so that on-grid truths
reproduce them exactly.
"""

from dataclasses import dataclass

import numpy as np

from .channel import (
    cascaded_irs_atom,
    cascaded_irs_atom_with_grads,
    delay_arv,
    far_field_arv,
    fresnel_arv,
    rayleigh_distance,
)
from .tensor3 import kron

FAR_RING_FACTOR = 64.0  # distance multiplier marking the far-field ring


def polar_distance(theta1, r1, theta2, r2):
    """Euclidean distance between two polar points given spatial angles.

    Spatial angles are direction cosines; the law of cosines uses the
    difference of the physical angles.
    """
    a1 = np.arccos(np.clip(theta1, -1.0, 1.0))
    a2 = np.arccos(np.clip(theta2, -1.0, 1.0))
    return np.sqrt(np.maximum(
        r1 * r1 + r2 * r2 - 2.0 * r1 * r2 * np.cos(a2 - a1), 0.0))


@dataclass
class GridSet:
    """All sampling grids plus their native spacings."""

    phi: np.ndarray          # user-side angle grid (N_U,)
    tau: np.ndarray          # delay grid (N_f,)
    theta_bar: np.ndarray    # effective IRS angle per polar atom (N_R*S,)
    r_bar: np.ndarray        # effective IRS distance per polar atom (N_R*S,)
    s: int                   # rings per angle (far ring included)
    n_r: int
    z_delta: float           # polar control distance
    d_phi: float             # angle-grid spacing
    d_tau: float             # delay-grid spacing
    d_theta: float           # IRS angle spacing

    @property
    def n_polar(self):
        return len(self.theta_bar)

    def ring_of(self, m):
        """0-based ring index of polar atom m (0-based); ring 0 is far field."""
        return m % self.s

    def angle_row_of(self, m):
        return m // self.s

    def r_half_gap(self, m):
        """Half the distance-gap of the ring containing polar atom m."""
        ring = self.ring_of(m)
        th = self.theta_bar[m]
        if ring == 0:
            # far ring: bounded below by the ring-1 midpoint, open above
            inner = self.z_delta * (1.0 - th * th)
            return 0.5 * (FAR_RING_FACTOR * self.z_delta - inner)
        r_here = self.r_bar[m]
        r_next = self.z_delta * (1.0 - th * th) / (ring + 1)
        return 0.5 * (r_here - r_next)


def build_grids(scen, s=3, n_f=None, z_delta=None):
    """Construct the three grids for a scenario.

    `z_delta` defaults to the IRS Rayleigh distance; `n_f` defaults to
    three quarters of a quarter-length cyclic prefix.
    """
    if n_f is None:
        n_f = (3 * (scen.k // 4)) // 4
    if z_delta is None:
        z_delta = rayleigh_distance(scen.n_r, scen.lam, scen.d)
    u = np.arange(1, scen.n_u + 1)
    phi = (2.0 / scen.n_u) * (u - (scen.n_u + 1) / 2.0)
    k = np.arange(1, n_f + 1)
    tau = (k - 0.5) / scen.f_s
    rows = np.arange(scen.n_r)
    theta_rows = (2.0 / scen.n_r) * (rows - (scen.n_r - 1) / 2.0)
    theta_bar = np.repeat(theta_rows, s)
    rings = np.tile(np.arange(s), scen.n_r)
    r_bar = np.where(
        rings == 0,
        FAR_RING_FACTOR * z_delta,
        z_delta * (1.0 - theta_bar**2) / np.maximum(rings, 1),
    )
    return GridSet(
        phi=phi, tau=tau, theta_bar=theta_bar, r_bar=r_bar,
        s=s, n_r=scen.n_r, z_delta=z_delta,
        d_phi=2.0 / scen.n_u, d_tau=1.0 / scen.f_s, d_theta=2.0 / scen.n_r,
    )


def triple_to_index(u, m, k, n_u, n_polar):
    """(u, m, k) 0-based -> linear index with u fastest, then m, then k."""
    return u + m * n_u + k * n_u * n_polar


def index_to_triple(n, n_u, n_polar):
    u = n % n_u
    m = (n // n_u) % n_polar
    k = n // (n_u * n_polar)
    return u, m, k


def polar_atom(theta_bar, r_bar, phi_b, n_r, lam, d):
    """IRS-side dictionary column for effective polar coordinates.

    Uses the exact cascade product when the inverse map to physical
    coordinates is valid; columns whose implied physical angle leaves the
    visible region (possible for extreme grid rows) fall back to the
    quadratic-phase form evaluated directly in effective coordinates.
    """
    try:
        return cascaded_irs_atom(theta_bar, r_bar, phi_b, n_r, lam, d)
    except ValueError:
        return fresnel_arv(theta_bar, r_bar, n_r, lam, d)


def polar_atom_with_grads(theta_bar, r_bar, phi_b, n_r, lam, d):
    theta_u = theta_bar - phi_b
    if abs(theta_u) < 1.0 and abs(theta_bar) < 1.0:
        return cascaded_irs_atom_with_grads(theta_bar, r_bar, phi_b, n_r, lam, d)
    atom = fresnel_arv(theta_bar, r_bar, n_r, lam, d)
    i = np.arange(n_r)
    # phase = -2pi/lam (-d i theta + d^2 i^2 (1-theta^2)/(2 r))
    darg_dth = -d * i - (d * i) ** 2 * theta_bar / r_bar
    darg_dr = -((d * i) ** 2) * (1.0 - theta_bar**2) / (2.0 * r_bar**2)
    scale = -2j * np.pi / lam
    return atom, atom * scale * darg_dth, atom * scale * darg_dr


def build_dictionaries(grids, scen, theta_b, phi_b, freqs=None):
    """Dictionary factor matrices (A_BU, A_R, A_f).

    A_BU is (N_B N_U, N_U): joint user/BS mode-1 atoms at zero Doppler.
    A_R is (N_R, n_polar). A_f is evaluated on `freqs` (defaults to the
    full subcarrier grid).
    """
    a_b = far_field_arv(theta_b, scen.n_b, scen.lam, scen.d)
    a_bu = np.column_stack([
        kron(far_field_arv(phi, scen.n_u, scen.lam, scen.d).conj(), a_b)
        for phi in grids.phi
    ])
    a_r = np.column_stack([
        polar_atom(grids.theta_bar[m], grids.r_bar[m], phi_b,
                   scen.n_r, scen.lam, scen.d)
        for m in range(grids.n_polar)
    ])
    if freqs is None:
        freqs = scen.subcarrier_freqs()
    a_f = np.column_stack([delay_arv(t, freqs) for t in grids.tau])
    return a_bu, a_r, a_f


def doppler_column_phases(grids, scen, f_d, p):
    """Per-column Doppler phase factors of the mode-1 dictionary at pilot p."""
    return np.exp(2j * np.pi * f_d * (p - 1) * scen.t_s * grids.phi)


def assign_to_grid(truth, grids):
    """Snap each true path to nearest grid triples with clamped offsets.

    Returns (triples, offsets) where triples[l] = (u, m, k) 0-based and
    offsets[l] = (d_phi, d_theta, d_r, d_tau). Offsets are clamped to half
    the local grid spacing (half the ring gap for distance).
    """
    triples = []
    offsets = []
    for l in range(truth.n_paths):
        u = int(np.argmin(np.abs(grids.phi - truth.phi_u[l])))
        k = int(np.argmin(np.abs(grids.tau - truth.tau_bar[l])))
        tb, rb = truth.theta_bar[l], truth.r_bar[l]
        dist = polar_distance(grids.theta_bar, grids.r_bar,
                              np.full(grids.n_polar, tb), np.full(grids.n_polar, rb))
        m = int(np.argmin(dist))
        d_phi = np.clip(truth.phi_u[l] - grids.phi[u],
                        -grids.d_phi / 2, grids.d_phi / 2)
        d_tau = np.clip(truth.tau_bar[l] - grids.tau[k],
                        -grids.d_tau / 2, grids.d_tau / 2)
        d_theta = np.clip(tb - grids.theta_bar[m],
                          -grids.d_theta / 2, grids.d_theta / 2)
        half = grids.r_half_gap(m)
        d_r = np.clip(rb - grids.r_bar[m], -half, half)
        triples.append((u, m, k))
        offsets.append((float(d_phi), float(d_theta), float(d_r), float(d_tau)))
    return triples, offsets
