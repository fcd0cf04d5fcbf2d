"""Ground-truth channel synthesis for the XL-IRS uplink.

Generates array responses, the IRS-user and BS-IRS links, the cascaded
channel tensor, received pilot observations and frame-to-frame evolution
of the scene geometry.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor3 import ComplexTensor3, kron

C_LIGHT = 3e8


@dataclass
class Scenario:
    """Static system parameters shared by every module."""

    n_b: int = 8            # BS antennas
    n_u: int = 4            # user antennas
    n_r: int = 16           # IRS elements
    r_b: int = 4            # BS RF chains
    k: int = 32             # OFDM subcarriers
    k_bar: int = 8          # pilot subcarriers
    f_s: float = 200e6      # bandwidth (Hz)
    f_c: float = 28e9       # carrier (Hz)
    t_s: float = 5e-4       # pilot interval (s)
    p1: int = 20            # CE-phase pilots
    p2: int = 6             # CT-phase pilots
    t_bar: int = 20         # OFDM symbols per frame
    frame_duration: float = 1e-2  # seconds per frame (symbol length is not pinned)
    v: float = 0.5          # user speed (m/s)
    sigma2: float = 1e-3    # noise power (W)
    p_t: float = 1.0        # transmit power (W)
    comb_stride: int = 4    # frequency-domain comb stride
    comb_offset: int = 2    # 0-based index of the first pilot subcarrier
    bs_pos: tuple = (5.0, -3.0)
    irs_pos: tuple = (6.0, 3.0)
    user_pos: tuple = (6.45, 2.35)
    motion_axis: tuple = (0.0, 1.0)
    bs_axis: tuple = (1.0, 0.0)
    irs_axis: tuple = (1.0, 0.0)
    user_axis: tuple = (1.0, 0.0)
    path_loss_exp: float = 2.2

    def __post_init__(self):
        if self.r_b > self.n_b:
            raise ValueError("r_b must not exceed n_b")
        if self.k_bar > self.k:
            raise ValueError("k_bar must not exceed k")
        if self.p2 >= self.p1:
            raise ValueError("p2 must be smaller than p1")
        for name in ("n_b", "n_u", "n_r", "r_b", "k", "k_bar", "p1", "p2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def lam(self):
        return C_LIGHT / self.f_c

    @property
    def d(self):
        return self.lam / 2.0

    def subcarrier_freqs(self):
        """f_k = (f_s/K)(k - 1 - (K-1)/2) for k = 1..K."""
        k = np.arange(1, self.k + 1)
        return (self.f_s / self.k) * (k - 1 - (self.k - 1) / 2)

    def pilot_subcarriers(self):
        """0-based indices of the comb-selected pilot subcarriers."""
        idx = self.comb_offset + self.comb_stride * np.arange(self.k_bar)
        if idx[-1] >= self.k:
            raise ValueError("comb pattern exceeds the subcarrier grid")
        return idx

    def f_d_max(self, v_max=None):
        v = self.v if v_max is None else v_max
        return v / self.lam


def far_field_arv(theta, n, lam, d):
    """Planar-wave ULA response; element i has phase -2*pi/lam * i*d*theta."""
    i = np.arange(n)
    return np.exp(-2j * np.pi / lam * i * d * theta)


def element_distances(phi, r, n, d):
    """Exact distances from each ULA element to a point at (phi, r)."""
    if r <= 0:
        raise ValueError("distance must be positive")
    i = np.arange(n)
    return np.sqrt(r * r - 2.0 * r * i * d * phi + (i * d) ** 2)


def near_field_arv(phi, r, n, lam, d):
    """Spherical-wave ULA response with exact per-element distances."""
    rn = element_distances(phi, r, n, d)
    return np.exp(-2j * np.pi / lam * (rn - r))


def fresnel_arv(phi, r, n, lam, d):
    """Spherical-wave response under the quadratic Fresnel phase expansion."""
    if r <= 0:
        raise ValueError("distance must be positive")
    i = np.arange(n)
    phase = -d * i * phi + (d * i) ** 2 * (1.0 - phi * phi) / (2.0 * r)
    return np.exp(-2j * np.pi / lam * phase)


def rayleigh_distance(n, lam, d):
    """2 D^2 / lam with aperture D = (n-1) d."""
    if n < 2:
        raise ValueError("need at least 2 elements for an aperture")
    aperture = (n - 1) * d
    return 2.0 * aperture * aperture / lam


def effective_to_physical(theta_bar, r_bar, phi_b):
    """Invert the effective polar parameters back to IRS-side (angle, range)."""
    theta_u = theta_bar - phi_b
    if abs(theta_u) >= 1.0 or abs(theta_bar) >= 1.0:
        raise ValueError("effective angle leaves the visible region")
    r_u = r_bar * (1.0 - theta_u**2) / (1.0 - theta_bar**2)
    return theta_u, r_u


def physical_to_effective(theta_u, r_u, phi_b):
    theta_bar = theta_u + phi_b
    r_bar = r_u * (1.0 - theta_bar**2) / (1.0 - theta_u**2)
    return theta_bar, r_bar


def cascaded_irs_atom(theta_bar, r_bar, phi_b, n, lam, d):
    """IRS-side factor a_R(theta_u, r_u) * conj(a_far(phi_b)) of the cascade.

    Parameterized by the effective polar coordinates so it can serve both
    truth synthesis and the polar-grid dictionary; uses exact element
    distances so on-grid truths reproduce dictionary atoms to machine
    precision.
    """
    theta_u, r_u = effective_to_physical(theta_bar, r_bar, phi_b)
    return near_field_arv(theta_u, r_u, n, lam, d) * np.conj(
        far_field_arv(phi_b, n, lam, d)
    )


def cascaded_irs_atom_with_grads(theta_bar, r_bar, phi_b, n, lam, d):
    """Atom plus its derivatives w.r.t. the effective angle and distance."""
    theta_u = theta_bar - phi_b
    denom = 1.0 - theta_bar**2
    r_u = r_bar * (1.0 - theta_u**2) / denom
    # dr_u w.r.t. theta_bar at fixed r_bar (theta_u moves with theta_bar)
    dru_dth = r_bar * (-2.0 * theta_u * denom + (1.0 - theta_u**2) * 2.0 * theta_bar) / denom**2
    dru_dr = (1.0 - theta_u**2) / denom
    i = np.arange(n)
    rn = np.sqrt(r_u * r_u - 2.0 * r_u * i * d * theta_u + (i * d) ** 2)
    drn_dru = (r_u - i * d * theta_u) / rn
    drn_dthu = -r_u * i * d / rn
    atom = np.exp(-2j * np.pi / lam * ((rn - r_u) - i * d * phi_b))
    # phase argument is -(2 pi / lam) * ((rn - r_u) - i d phi_b)
    darg_dth = (drn_dthu + (drn_dru - 1.0) * dru_dth)
    darg_dr = (drn_dru - 1.0) * dru_dr
    datom_dth = atom * (-2j * np.pi / lam) * darg_dth
    datom_dr = atom * (-2j * np.pi / lam) * darg_dr
    return atom, datom_dth, datom_dr


def delay_arv(tau, freqs):
    """Frequency response a_f(tau) over the given subcarrier frequencies."""
    return np.exp(-2j * np.pi * np.asarray(freqs) * tau)


def zc_pilot(k_bar, root=1):
    """Zadoff-Chu sequence of length k_bar with the given root."""
    if k_bar < 1:
        raise ValueError("k_bar must be positive")
    if math.gcd(root, k_bar) != 1:
        raise ValueError("root must be coprime with the sequence length")
    m = np.arange(k_bar)
    if k_bar % 2:
        return np.exp(-1j * np.pi * root * m * (m + 1) / k_bar)
    return np.exp(-1j * np.pi * root * m * m / k_bar)


@dataclass
class FrameTruth:
    """Per-frame ground truth of the cascaded channel."""

    gamma: np.ndarray          # cascaded gains, complex (L,)
    phi_u: np.ndarray          # user-side spatial angles (L,)
    theta_u: np.ndarray        # IRS-side spatial angles (L,)
    r_u: np.ndarray            # IRS-side distances (L,)
    tau_u: np.ndarray          # IRS-user delays (L,)
    f_d: float                 # maximum Doppler frequency offset (Hz)
    beta: complex              # BS-IRS gain
    theta_b: float             # BS-side spatial angle
    phi_b: float               # IRS-side angle toward the BS
    tau_b: float               # BS-IRS delay
    user_pos: np.ndarray = None
    scat_pos: np.ndarray = None  # (L-1, 2); path 0 is the direct user path

    @property
    def n_paths(self):
        return len(self.gamma)

    @property
    def alpha(self):
        return self.gamma / self.beta

    @property
    def tau_bar(self):
        return self.tau_u + self.tau_b

    @property
    def theta_bar(self):
        return self.theta_u + self.phi_b

    @property
    def r_bar(self):
        tb = self.theta_bar
        return self.r_u * (1.0 - tb**2) / (1.0 - self.theta_u**2)

    def validate(self):
        if np.any(self.tau_u <= 0) or self.tau_b <= 0:
            raise ValueError("delays must be positive")
        for arr in (self.phi_u, self.theta_u, self.theta_bar):
            if np.any(np.abs(arr) >= 1.0):
                raise ValueError("spatial angles must lie in (-1, 1)")
        if np.any(self.r_u <= 0):
            raise ValueError("distances must be positive")

    def to_text(self):
        lines = [
            f"f_d {float(self.f_d)!r}",
            f"beta {float(self.beta.real)!r} {float(self.beta.imag)!r}",
            f"theta_b {float(self.theta_b)!r}",
            f"phi_b {float(self.phi_b)!r}",
            f"tau_b {float(self.tau_b)!r}",
        ]
        if self.user_pos is not None:
            lines.append("user_pos " + " ".join(repr(float(x)) for x in self.user_pos))
        for l in range(self.n_paths):
            lines.append(
                "path "
                + " ".join(
                    repr(float(x))
                    for x in (
                        self.gamma[l].real, self.gamma[l].imag,
                        self.phi_u[l], self.theta_u[l],
                        self.r_u[l], self.tau_u[l],
                    )
                )
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        head = {}
        paths = []
        for line in text.strip().splitlines():
            key, *vals = line.split()
            if key == "path":
                paths.append([float(v) for v in vals])
            else:
                head[key] = [float(v) for v in vals]
        paths = np.asarray(paths) if paths else np.zeros((0, 6))
        return cls(
            gamma=paths[:, 0] + 1j * paths[:, 1],
            phi_u=paths[:, 2],
            theta_u=paths[:, 3],
            r_u=paths[:, 4],
            tau_u=paths[:, 5],
            f_d=head["f_d"][0],
            beta=head["beta"][0] + 1j * head["beta"][1],
            theta_b=head["theta_b"][0],
            phi_b=head["phi_b"][0],
            tau_b=head["tau_b"][0],
            user_pos=np.asarray(head["user_pos"]) if "user_pos" in head else None,
        )


def doppler_phase(truth, p, scen):
    """psi_{p,l} = 2 pi f_d (p-1) T_s phi_{U,l} (p is 1-based)."""
    return 2.0 * np.pi * truth.f_d * (p - 1) * scen.t_s * truth.phi_u


def irs_user_channel(truth, k, p, scen):
    """Eq.-(5)-style IRS-user channel on subcarrier k (1-based) and pilot p."""
    f_k = scen.subcarrier_freqs()[k - 1]
    h = np.zeros((scen.n_r, scen.n_u), dtype=complex)
    psi = doppler_phase(truth, p, scen)
    for l in range(truth.n_paths):
        a_r = near_field_arv(truth.theta_u[l], truth.r_u[l], scen.n_r, scen.lam, scen.d)
        a_u = far_field_arv(truth.phi_u[l], scen.n_u, scen.lam, scen.d)
        h += (
            truth.alpha[l]
            * np.exp(-2j * np.pi * f_k * truth.tau_u[l])
            * np.exp(1j * psi[l])
            * np.outer(a_r, a_u.conj())
        )
    return h


def bs_irs_channel(truth, k, scen):
    """Far-field LoS BS-IRS channel on subcarrier k (1-based)."""
    f_k = scen.subcarrier_freqs()[k - 1]
    a_b = far_field_arv(truth.theta_b, scen.n_b, scen.lam, scen.d)
    a_r = far_field_arv(truth.phi_b, scen.n_r, scen.lam, scen.d)
    return truth.beta * np.exp(-2j * np.pi * f_k * truth.tau_b) * np.outer(a_b, a_r.conj())


def bu_atom(phi, theta_b, psi, n_u, n_b, lam, d):
    """Joint user/BS mode-1 atom: (a_U^*(phi) kron a_B(theta_b)) e^{j psi}."""
    a_u = far_field_arv(phi, n_u, lam, d)
    a_b = far_field_arv(theta_b, n_b, lam, d)
    return kron(a_u.conj(), a_b) * np.exp(1j * psi)


def cascaded_tensor(truth, p, scen):
    """Cascaded channel as a (N_B N_U, N_R, K) tensor for pilot p."""
    freqs = scen.subcarrier_freqs()
    psi = doppler_phase(truth, p, scen)
    out = np.zeros((scen.n_b * scen.n_u, scen.n_r, scen.k), dtype=complex)
    a_rb_conj = np.conj(far_field_arv(truth.phi_b, scen.n_r, scen.lam, scen.d))
    for l in range(truth.n_paths):
        a1 = bu_atom(truth.phi_u[l], truth.theta_b, psi[l], scen.n_u, scen.n_b, scen.lam, scen.d)
        a2 = near_field_arv(truth.theta_u[l], truth.r_u[l], scen.n_r, scen.lam, scen.d) * a_rb_conj
        a3 = delay_arv(truth.tau_bar[l], freqs)
        out += truth.gamma[l] * np.einsum("i,j,k->ijk", a1, a2, a3)
    return ComplexTensor3(out)


def received_pilot(truth, p, beams, x_p, sel, scen, rng=None):
    """Noisy received pilot tensor (R_B, 1, K_bar) for pilot p (1-based).

    `beams` provides W (N_B x R_B), f (N_U,) and v (N_R,) for this pilot;
    noise is drawn pre-combiner and passed through W^H.
    """
    w_p, f_p, v_p = beams
    freqs = scen.subcarrier_freqs()
    psi = doppler_phase(truth, p, scen)
    a_rb_conj = np.conj(far_field_arv(truth.phi_b, scen.n_r, scen.lam, scen.d))
    out = np.zeros((scen.r_b, 1, scen.k_bar), dtype=complex)
    for l in range(truth.n_paths):
        # X_p a1 = (f_p^T kron W_p^H) (a_U^* kron a_B) e^{j psi}
        a_u = far_field_arv(truth.phi_u[l], scen.n_u, scen.lam, scen.d)
        a_b = far_field_arv(truth.theta_b, scen.n_b, scen.lam, scen.d)
        u1 = (f_p @ a_u.conj()) * (w_p.conj().T @ a_b) * np.exp(1j * psi[l])
        a2 = near_field_arv(truth.theta_u[l], truth.r_u[l], scen.n_r, scen.lam, scen.d) * a_rb_conj
        u2 = v_p @ a2
        a3 = delay_arv(truth.tau_bar[l], freqs[sel])
        u3 = np.sqrt(scen.p_t) * x_p * a3
        out += truth.gamma[l] * np.einsum("i,j,k->ijk", u1, np.array([u2]), u3)
    if rng is not None and scen.sigma2 > 0:
        std = np.sqrt(scen.sigma2 / 2.0)
        noise = std * (
            rng.standard_normal((scen.n_b, scen.k_bar))
            + 1j * rng.standard_normal((scen.n_b, scen.k_bar))
        )
        out[:, 0, :] += w_p.conj().T @ noise
    return ComplexTensor3(out)


def _spatial_angle(array_pos, array_axis, target_pos):
    vec = np.asarray(target_pos, dtype=float) - np.asarray(array_pos, dtype=float)
    dist = np.linalg.norm(vec)
    axis = np.asarray(array_axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return float(vec @ axis / dist), float(dist)


def _rebuild_paths(truth, scen):
    """Recompute geometry-derived path parameters from positions."""
    irs = np.asarray(scen.irs_pos, dtype=float)
    user = np.asarray(truth.user_pos, dtype=float)
    L = truth.n_paths
    phi_u = np.empty(L)
    theta_u = np.empty(L)
    r_u = np.empty(L)
    tau_u = np.empty(L)
    # direct user-IRS path
    theta_u[0], r_u[0] = _spatial_angle(irs, scen.irs_axis, user)
    phi_u[0], _ = _spatial_angle(user, scen.user_axis, irs)
    tau_u[0] = r_u[0] / C_LIGHT
    for l in range(1, L):
        scat = truth.scat_pos[l - 1]
        theta_u[l], r_u[l] = _spatial_angle(irs, scen.irs_axis, scat)
        phi_u[l], d_us = _spatial_angle(user, scen.user_axis, scat)
        tau_u[l] = (d_us + r_u[l]) / C_LIGHT
    return phi_u, theta_u, r_u, tau_u


def synthesize_truth(scen, rng, clusters=((4, None), (2, None), (2, None)),
                     r_range=(0.35, 1.1), f_d=None):
    """Draw a random scene of clustered scatterers around the XL-IRS.

    Each cluster is a block target contributing several closely spaced
    paths; path 0 is the direct user-IRS path. Gains follow a log-distance
    power law with exponent `scen.path_loss_exp` (absolute level is fixed
    later by SNR calibration).
    """
    irs = np.asarray(scen.irs_pos, dtype=float)
    scats = []
    for n_paths, center in clusters:
        if center is None:
            ang = rng.uniform(0.25 * np.pi, 0.75 * np.pi)
            rad = rng.uniform(*r_range)
            center = irs + rad * np.array([np.cos(ang), np.sin(ang)])
        for _ in range(n_paths):
            scats.append(center + 0.02 * rng.standard_normal(2))
    scat_pos = np.asarray(scats)
    L = len(scats) + 1
    theta_b, d_bi = _spatial_angle(scen.bs_pos, scen.bs_axis, irs)
    phi_b, _ = _spatial_angle(irs, scen.irs_axis, scen.bs_pos)
    truth = FrameTruth(
        gamma=np.zeros(L, dtype=complex),
        phi_u=np.zeros(L), theta_u=np.zeros(L), r_u=np.ones(L), tau_u=np.ones(L),
        f_d=scen.f_d_max() if f_d is None else f_d,
        beta=1.0 + 0.0j,
        theta_b=theta_b, phi_b=phi_b, tau_b=d_bi / C_LIGHT,
        user_pos=np.asarray(scen.user_pos, dtype=float),
        scat_pos=scat_pos,
    )
    phi_u, theta_u, r_u, tau_u = _rebuild_paths(truth, scen)
    truth.phi_u, truth.theta_u, truth.r_u, truth.tau_u = phi_u, theta_u, r_u, tau_u
    sigma_h = r_u ** (-scen.path_loss_exp / 2.0)
    sigma_h[1:] *= 0.5  # scattered paths weaker than the direct one
    alpha = sigma_h / np.sqrt(2.0) * (rng.standard_normal(L) + 1j * rng.standard_normal(L))
    truth.gamma = alpha * truth.beta
    truth.validate()
    return truth


def calibrate_snr(truth, scen, beams_list, x_p, sel, snr_db):
    """Scale the path gains so the pre-combiner SNR matches `snr_db`.

    SNR is defined at the combiner input: mean received signal power per BS
    antenna and pilot subcarrier divided by sigma^2.
    """
    freqs = scen.subcarrier_freqs()
    power = 0.0
    count = 0
    for p, (w_p, f_p, v_p) in enumerate(beams_list, start=1):
        r_full = cascaded_tensor(truth, p, scen)
        for j, k_idx in enumerate(sel):
            r_k = r_full.data[:, :, k_idx]  # (N_BU, N_R)
            # pre-combiner signal: sqrt(p_T) x (f^T kron I_NB) R_k v
            mat = (r_k @ v_p).reshape(scen.n_u, scen.n_b).T  # unstack kron(a_U*, a_B)
            sig = np.sqrt(scen.p_t) * x_p[j] * (mat @ f_p)
            power += np.sum(np.abs(sig) ** 2)
            count += sig.size
    mean_power = power / count
    target = scen.sigma2 * 10.0 ** (snr_db / 10.0)
    scale = np.sqrt(target / mean_power)
    truth.gamma = truth.gamma * scale
    truth.beta = truth.beta * scale
    return truth


def evolve_frame(prev, scen, dt, gain_jitter=0.0, rng=None):
    """Advance the scene by `dt` seconds of user motion.

    Scatterers stay put; the user translates along the motion axis and all
    geometry-derived parameters are recomputed. Gains optionally pick up a
    small multiplicative Gauss-Markov perturbation.
    """
    if prev.user_pos is None:
        raise ValueError("truth carries no geometry; cannot evolve")
    axis = np.asarray(scen.motion_axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    new = replace(prev,
                  gamma=prev.gamma.copy(),
                  user_pos=prev.user_pos + scen.v * dt * axis)
    phi_u, theta_u, r_u, tau_u = _rebuild_paths(new, scen)
    if np.any(r_u <= 0):
        raise ValueError("user left the valid region")
    new.phi_u, new.theta_u, new.r_u, new.tau_u = phi_u, theta_u, r_u, tau_u
    if gain_jitter > 0 and rng is not None:
        eps = gain_jitter * (rng.standard_normal(prev.n_paths)
                             + 1j * rng.standard_normal(prev.n_paths)) / np.sqrt(2)
        new.gamma = prev.gamma * (1.0 + eps)
    new.validate()
    return new
