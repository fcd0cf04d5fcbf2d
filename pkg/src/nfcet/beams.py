"""Active and passive beam designs for both sounding phases.

The BS combiner always aligns with the known BS-side angle; the user
precoder and IRS profile are random unit-modulus in the initial phase
and, once a support estimate exists, steer multiple beams at the
estimated (and neighboring) atoms via projected gradient ascent on the
unit-modulus manifold with a quadratic penalty on gain spread.
"""

from dataclasses import dataclass

import numpy as np

from .channel import far_field_arv
from .grids import polar_atom

MULTIBEAM_RESTARTS = 20
MULTIBEAM_ITERS = 200
BACKTRACK = 0.5
MAX_LINE = 30


@dataclass
class BeamPlan:
    """Per-pilot combiners, precoders and IRS profiles."""

    w_list: list      # (N_B, R_B) per pilot
    f_list: list      # (N_U,) per pilot
    v_list: list      # (N_R,) per pilot

    @property
    def n_pilots(self):
        return len(self.v_list)

    def pilot(self, p):
        """1-based pilot triple (W, f, v)."""
        return self.w_list[p - 1], self.f_list[p - 1], self.v_list[p - 1]

    def triples(self):
        return list(zip(self.w_list, self.f_list, self.v_list))

    def to_text(self):
        lines = ["beamplan v1", f"pilots {self.n_pilots}"]
        for p in range(self.n_pilots):
            for tag, arr in (("W", self.w_list[p].ravel(order="F")),
                             ("f", self.f_list[p]), ("v", self.v_list[p])):
                shape = "x".join(str(s) for s in np.shape(self.w_list[p])) \
                    if tag == "W" else str(len(arr))
                phases = " ".join(f"{x:.12g}" for x in np.angle(arr))
                mags = " ".join(f"{x:.12g}" for x in np.abs(arr))
                lines.append(f"{tag} {p + 1} {shape} {phases} | {mags}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        if lines[0] != "beamplan v1":
            raise ValueError("unrecognized beam plan header")
        n = int(lines[1].split()[1])
        w_list = [None] * n
        f_list = [None] * n
        v_list = [None] * n
        for ln in lines[2:]:
            tag, p, shape, rest = ln.split(maxsplit=3)
            p = int(p) - 1
            ph_s, mg_s = rest.split("|")
            ph = np.array([float(x) for x in ph_s.split()])
            mg = np.array([float(x) for x in mg_s.split()])
            arr = mg * np.exp(1j * ph)
            if tag == "W":
                nb, rb = (int(s) for s in shape.split("x"))
                w_list[p] = arr.reshape((nb, rb), order="F")
            elif tag == "f":
                f_list[p] = arr
            else:
                v_list[p] = arr
        return cls(w_list=w_list, f_list=f_list, v_list=v_list)


def bs_combiner(theta_b, n_b, r_b, n_pilots, lam, d, rng):
    """Combiners aligned with the BS-side angle, random column phases."""
    a_b = far_field_arv(theta_b, n_b, lam, d)
    out = []
    for _ in range(n_pilots):
        phases = np.exp(2j * np.pi * rng.random(r_b))
        out.append(np.outer(a_b, phases))
    return out


def random_phase_irs(n_r, n_pilots, rng):
    return [np.exp(2j * np.pi * rng.random(n_r)) for _ in range(n_pilots)]


def random_precoder(n_u, n_pilots, rng):
    return [np.exp(2j * np.pi * rng.random(n_u)) / np.sqrt(n_u)
            for _ in range(n_pilots)]


def expand_candidates(active, grids, delta_n=1):
    """Active polar indices plus lattice neighbors within delta_n steps.

    The neighborhood extends delta_n steps along the angle-row and ring
    directions (Manhattan ball, so delta_n=1 adds the 4 axis neighbors)
    and is clipped at the lattice boundary. Empty input yields an empty
    set.
    """
    out = set()
    for m in active:
        row, ring = grids.angle_row_of(m), grids.ring_of(m)
        for dr in range(-delta_n, delta_n + 1):
            for ds in range(-delta_n + abs(dr), delta_n - abs(dr) + 1):
                r2, s2 = row + dr, ring + ds
                if 0 <= r2 < grids.n_r and 0 <= s2 < grids.s:
                    out.add(r2 * grids.s + s2)
    return sorted(out)


def exploration_partition(remaining, n_pilots):
    """Split leftover indices into contiguous per-pilot blocks.

    Blocks have size floor(len/P); the last block absorbs the remainder.
    """
    remaining = list(remaining)
    q = len(remaining) // n_pilots
    blocks = []
    for p in range(n_pilots):
        lo = p * q
        hi = (p + 1) * q if p < n_pilots - 1 else len(remaining)
        blocks.append(remaining[lo:hi])
    return blocks


def beam_gain(v, atom):
    """Beam gain |v^T a|^2 / N so a matched beam scores N."""
    return np.abs(np.asarray(atom).T @ v) ** 2 / len(v)


def _penalized_objective(phases, atoms, eps_v, mu):
    """Sum of target gains minus quadratic penalty on spread violations.

    atoms is (N, Q). A beam q violates the spread constraint when its
    gain falls below (1 - eps_v) of the strongest beam.
    """
    v = np.exp(1j * phases)
    g = atoms.T @ v                      # (Q,)
    gains = np.abs(g) ** 2 / len(v)
    # penalize slightly inside the feasible region so the optimizer's
    # boundary solutions satisfy the spread constraint strictly
    floor = (1.0 - 0.95 * eps_v) * np.max(gains)
    viol = np.maximum(floor - gains, 0.0)
    # small variance term breaks ties between equal-sum splits in favor
    # of balanced beams
    nu = 0.05 * mu / max(len(gains), 1)
    gbar = np.mean(gains)
    obj = float(np.sum(gains) - mu * np.sum(viol**2)
                - nu * np.sum((gains - gbar) ** 2))
    # d gains_q / d phi_n = 2 Re[conj(g_q) j e^{j phi} a_nq] / N
    dg = 2.0 * np.real(np.einsum("q,n,nq->nq", g.conj(), 1j * v, atoms)) / len(v)
    # treat the argmax gain as locally fixed (subgradient of the hinge)
    w = np.ones(len(gains)) + 2.0 * mu * viol - 2.0 * nu * (gains - gbar)
    qmax = int(np.argmax(gains))
    w[qmax] += -2.0 * mu * (1.0 - 0.95 * eps_v) * np.sum(viol)
    grad = dg @ w
    return obj, grad


def multibeam_design(atoms, eps_v=0.5, mu=None, n_restarts=MULTIBEAM_RESTARTS,
                     n_iters=MULTIBEAM_ITERS, rng=None):
    """Unit-modulus profile steering one beam per target atom.

    `atoms` is (N, Q) with unit-modulus target columns; returns
    (v, info) where info reports per-target gains and whether the
    eps_v gain-spread constraint holds at the solution.
    """
    atoms = np.atleast_2d(np.asarray(atoms, dtype=complex))
    if atoms.ndim == 1:
        atoms = atoms[:, None]
    n, q = atoms.shape
    if q > n:
        raise ValueError("more target beams than array elements")
    rng = rng or np.random.default_rng(0)
    if mu is None:
        mu = max(n / q, 1.0)   # penalty weight on the per-beam gain scale
    best = None
    traces = []
    for r in range(n_restarts):
        trace = []
        if r == 0:
            # phase-matched sum of targets is a strong initializer
            phases = np.angle(np.sum(atoms.conj(), axis=1))
        else:
            phases = 2.0 * np.pi * rng.random(n)
        obj, grad = _penalized_objective(phases, atoms, eps_v, mu)
        trace.append(obj)
        step = 1.0 / max(np.max(np.abs(grad)), 1e-9)
        for _ in range(n_iters):
            for _ in range(MAX_LINE):
                cand = phases + step * grad
                obj2, grad2 = _penalized_objective(cand, atoms, eps_v, mu)
                if obj2 >= obj:
                    break
                step *= BACKTRACK
            if obj2 < obj:
                break
            phases, obj, grad = cand, obj2, grad2
            trace.append(obj)
            if trace[-1] - trace[-2] < 1e-10 * max(abs(obj), 1.0):
                break
            step /= BACKTRACK
        traces.append(trace)
        if best is None or obj > best[0]:
            best = (obj, phases.copy())
    v = np.exp(1j * best[1])
    gains = beam_gain(v, atoms)
    spread_ok = bool(np.max(gains) - np.min(gains) <= eps_v * np.max(gains)
                     + 1e-12)
    return v, {"gains": gains, "objective": best[0],
               "spread_ok": spread_ok, "traces": traces}


def irs_profiles(grids, scen, phi_b, n_pilots, rng, support=None,
                 delta_n=1, eps_v=0.5):
    """Per-pilot IRS profiles: random phase without a support estimate,
    otherwise multibeam over the expanded candidate set plus a per-pilot
    exploration block of the remaining atoms."""
    if not support:
        return random_phase_irs(scen.n_r, n_pilots, rng)
    exploit = expand_candidates(support, grids, delta_n=delta_n)
    remaining = [m for m in range(grids.n_polar) if m not in set(exploit)]
    blocks = exploration_partition(remaining, n_pilots)
    out = []
    for p in range(n_pilots):
        targets = exploit + blocks[p]
        if len(targets) > scen.n_r:
            targets = targets[:scen.n_r]
        atoms = np.column_stack([
            polar_atom(grids.theta_bar[m], grids.r_bar[m], phi_b,
                       scen.n_r, scen.lam, scen.d)
            for m in targets
        ])
        v, _ = multibeam_design(atoms, eps_v=eps_v, rng=rng)
        out.append(v)
    return out


def user_precoder(n_u, n_pilots, lam, d, rng, angles=None, eps_v=0.5):
    """Random unit-modulus precoders, or multibeam over angle candidates.

    The estimation-phase precoder observes the user-side angle through
    the conjugated response, hence the conjugate targets.
    """
    if angles is None or len(angles) == 0:
        return random_precoder(n_u, n_pilots, rng)
    # cycle matched beams across pilots: every tracked direction gets a
    # share of the frame's observations proportional to the pilot budget
    beams = [far_field_arv(phi, n_u, lam, d) / np.sqrt(n_u)
             for phi in angles]
    return [beams[p % len(beams)] for p in range(n_pilots)]


def make_beam_plan(scen, grids, theta_b, phi_b, n_pilots, rng,
                   support=None, angles=None, delta_n=1, eps_v=0.5):
    """Full per-pilot plan for one frame.

    Without `support`/`angles` (initial estimation) everything except the
    BS combiner is random; with them (tracking) the IRS and user sides
    steer beams at the previous estimate.
    """
    return BeamPlan(
        w_list=bs_combiner(theta_b, scen.n_b, scen.r_b, n_pilots,
                           scen.lam, scen.d, rng),
        f_list=user_precoder(scen.n_u, n_pilots, scen.lam, scen.d, rng,
                             angles=angles, eps_v=eps_v),
        v_list=irs_profiles(grids, scen, phi_b, n_pilots, rng,
                            support=support, delta_n=delta_n, eps_v=eps_v),
    )
