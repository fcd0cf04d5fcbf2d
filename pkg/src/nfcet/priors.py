"""Probabilistic priors for gains, supports, off-grid offsets and dynamics.

Gains follow a double-Gaussian product law (amplitude is the product of
two Rayleigh variables, phase uniform). Supports use Markov chains along
the angle/delay modes and a polar-adaptive Ising field on the IRS lattice.
Temporal evolution is first-order Gauss-Markov.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import k0, k1


@dataclass
class PriorParams:
    """Default hyperparameters of the structured prior."""

    p_s: float = 0.9          # gain-activity gate given all three supports on
    eps_off: float = 1e-6     # gate when any support is off
    eta_bar: float = 0.4      # Ising field strength
    eta_check: float = 0.3    # Ising coupling strength
    lam_on: float = 0.05      # chain transition -1 -> +1
    lam_off: float = 0.1      # chain transition +1 -> -1
    chi_gain: float = 0.1     # temporal innovation rates
    chi_offgrid: float = 0.1
    chi_doppler: float = 0.05
    sigma_phi: float = 0.25   # off-grid offset scales (i.i.d. Gaussian)
    sigma_theta: float = 0.06
    sigma_r: float = 0.2
    sigma_tau: float = 2.5e-9


class CdgAmplitude:
    """Amplitude of the product of two independent complex Gaussians.

    pdf  f(x) = 4x/(sh^2 sg^2) K0(2x/(sh sg))
    cdf  F(x) = 1 - t K1(t), t = 2x/(sh sg)
    """

    def __init__(self, sigma_h=1.0, sigma_g=1.0):
        if sigma_h <= 0 or sigma_g <= 0:
            raise ValueError("scales must be positive")
        self.sigma_h = sigma_h
        self.sigma_g = sigma_g

    @property
    def _scale(self):
        return self.sigma_h * self.sigma_g

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        pos = x > 0
        out[pos] = 4.0 * x[pos] / self._scale**2 * k0(2.0 * x[pos] / self._scale)
        return out

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        t = 2.0 * np.maximum(x, 0.0) / self._scale
        out = np.where(t > 0, 1.0 - t * k1(np.maximum(t, 1e-300)), 0.0)
        return np.clip(out, 0.0, 1.0)

    def mean(self):
        # E|h| E|g| with |h| Rayleigh(sh/sqrt(2)): each sqrt(pi)/2 * scale
        return np.pi * self._scale / 4.0

    def rvs(self, rng, size=None):
        h = self.sigma_h / np.sqrt(2) * np.abs(
            rng.standard_normal(size) + 1j * rng.standard_normal(size))
        g = self.sigma_g / np.sqrt(2) * np.abs(
            rng.standard_normal(size) + 1j * rng.standard_normal(size))
        return h * g

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        t = 2.0 * x / self._scale
        # log K0 via the scaled Bessel function for numerical range
        from scipy.special import k0e
        return np.where(
            x > 0,
            np.log(4.0 * np.maximum(x, 1e-300) / self._scale**2)
            + np.log(np.maximum(k0e(np.maximum(t, 1e-300)), 1e-300)) - t,
            -np.inf,
        )


def sample_complex_gain(rng, sigma_h=1.0, sigma_g=1.0, size=None):
    """Product-law amplitude with uniform phase."""
    amp = CdgAmplitude(sigma_h, sigma_g).rvs(rng, size)
    return amp * np.exp(2j * np.pi * rng.random(size))


class SupportChain:
    """Stationary two-state (+1/-1) Markov chain along one grid axis."""

    def __init__(self, lam_on, lam_off):
        if not (0 < lam_on < 1 and 0 < lam_off < 1):
            raise ValueError("transition rates must be in (0, 1)")
        self.lam_on = lam_on
        self.lam_off = lam_off

    @property
    def p_on(self):
        return self.lam_on / (self.lam_on + self.lam_off)

    def transition_matrix(self):
        """Rows indexed by current state (-1, +1), columns by next."""
        return np.array([
            [1.0 - self.lam_on, self.lam_on],
            [self.lam_off, 1.0 - self.lam_off],
        ])

    def log_prob(self, s):
        s = np.asarray(s)
        t = self.transition_matrix()
        idx = ((s + 1) // 2).astype(int)
        lp = np.log(self.p_on if idx[0] else 1.0 - self.p_on)
        for a, b in zip(idx[:-1], idx[1:]):
            lp += np.log(t[a, b])
        return lp

    def sample(self, n, rng):
        s = np.empty(n, dtype=int)
        s[0] = 1 if rng.random() < self.p_on else -1
        for i in range(1, n):
            if s[i - 1] == 1:
                s[i] = -1 if rng.random() < self.lam_off else 1
            else:
                s[i] = 1 if rng.random() < self.lam_on else -1
        return s

    def propagate(self, p_on_now):
        """One-step-ahead activity probability given current p(s=+1)."""
        return p_on_now * (1.0 - self.lam_off) + self.lam_on * (1.0 - p_on_now)


class IsingMrf:
    """Pairwise +1/-1 field: log p(s) = sum b_m s_m + sum J_e s_m s_m' - log Z."""

    def __init__(self, fields, edges, couplings):
        self.fields = np.asarray(fields, dtype=float)
        self.edges = list(edges)
        self.couplings = np.asarray(couplings, dtype=float)
        if len(self.edges) != len(self.couplings):
            raise ValueError("one coupling per edge required")

    @property
    def n(self):
        return len(self.fields)

    def energy(self, s):
        s = np.asarray(s, dtype=float)
        e = float(self.fields @ s)
        for (a, b), j in zip(self.edges, self.couplings):
            e += j * s[a] * s[b]
        return e

    def log_partition(self):
        """Exact by enumeration; only for small fields."""
        if self.n > 20:
            raise ValueError("exact partition limited to 20 sites")
        vals = [self.energy(s) for s in itertools.product((-1, 1), repeat=self.n)]
        m = max(vals)
        return m + np.log(np.sum(np.exp(np.asarray(vals) - m)))

    def log_prob(self, s):
        return self.energy(s) - self.log_partition()

    def exact_marginals(self):
        """p(s_m = +1) by enumeration; only for small fields."""
        if self.n > 20:
            raise ValueError("exact marginals limited to 20 sites")
        probs = np.zeros(self.n)
        z = 0.0
        for s in itertools.product((-1, 1), repeat=self.n):
            w = np.exp(self.energy(s))
            z += w
            probs += w * (np.asarray(s) > 0)
        return probs / z

    def gibbs_sample(self, rng, sweeps=50, init=None):
        s = np.where(rng.random(self.n) < 0.5, -1, 1) if init is None else np.asarray(init).copy()
        nbrs = [[] for _ in range(self.n)]
        for (a, b), j in zip(self.edges, self.couplings):
            nbrs[a].append((b, j))
            nbrs[b].append((a, j))
        for _ in range(sweeps):
            for m in range(self.n):
                loc = self.fields[m] + sum(j * s[b] for b, j in nbrs[m])
                p_plus = 1.0 / (1.0 + np.exp(-2.0 * loc))
                s[m] = 1 if rng.random() < p_plus else -1
        return s


def lattice_edges(n_rows, n_cols):
    """4-connected edges of an (n_rows x n_cols) lattice, row-major sites."""
    edges = []
    for r in range(n_rows):
        for c in range(n_cols):
            m = r * n_cols + c
            if c + 1 < n_cols:
                edges.append((m, m + 1))
            if r + 1 < n_rows:
                edges.append((m, m + n_cols))
    return edges


def polar_ising(grids, params=None):
    """Polar-adaptive Ising field on the (angle x ring) IRS support lattice.

    Site m sits at angle row angle_row_of(m) and ring q_m = ring + 1; the
    field weakens toward the near rings and the couplings grow with the
    angular magnitude, matching the polar grid's uneven resolution.
    """
    params = params or PriorParams()
    n = grids.n_polar
    q = np.array([grids.ring_of(m) + 1 for m in range(n)], dtype=float)
    th2 = grids.theta_bar**2
    fields = params.eta_bar * (1.0 - th2) / q
    edges = lattice_edges(grids.n_r, grids.s)
    couplings = np.array([
        params.eta_check * (th2[a] * q[a] + th2[b] * q[b]) / 2.0
        for a, b in edges
    ])
    return IsingMrf(fields, edges, couplings)


def gate_probability(s_u, s_r, s_k, params=None):
    """p(path active | per-mode supports); all three on is required."""
    params = params or PriorParams()
    on = (s_u > 0) & (s_r > 0) & (s_k > 0)
    return np.where(on, params.p_s, params.eps_off)


class GaussMarkov:
    """x_t = (1-chi)(x_{t-1} - mu) + chi eps_t + mu, eps ~ N(0, zeta)."""

    def __init__(self, mu, chi, zeta):
        if not 0 < chi <= 1:
            raise ValueError("chi must be in (0, 1]")
        if zeta <= 0:
            raise ValueError("zeta must be positive")
        self.mu = mu
        self.chi = chi
        self.zeta = zeta

    def step(self, x, rng):
        eps = rng.normal(0.0, np.sqrt(self.zeta), size=np.shape(x))
        return (1.0 - self.chi) * (np.asarray(x) - self.mu) + self.chi * eps + self.mu

    def conditional(self, x_prev):
        """(mean, variance) of x_t given x_{t-1}."""
        return (1.0 - self.chi) * x_prev + self.chi * self.mu, self.chi**2 * self.zeta

    def stationary_var(self):
        a = 1.0 - self.chi
        return self.chi**2 * self.zeta / (1.0 - a * a)

    def propagate_moments(self, mean, var):
        """Push a Gaussian belief one step ahead."""
        a = 1.0 - self.chi
        return a * mean + self.chi * self.mu, a * a * var + self.chi**2 * self.zeta


def offgrid_log_prior(offsets, sigmas):
    """i.i.d. zero-mean Gaussian log-density for off-grid offsets."""
    offsets = np.asarray(offsets, dtype=float)
    sigmas = np.asarray(sigmas, dtype=float)
    return float(np.sum(
        -0.5 * (offsets / sigmas) ** 2 - 0.5 * np.log(2 * np.pi * sigmas**2)
    ))
