"""Fast built-in oracle battery for the `nfcet selftest` command.

Each check compares a library routine against an independent oracle
(closed form, brute force, or finite differences) and reports PASS or
FAIL.  The battery completes in a few seconds so it can gate longer
runs on fresh installs.
"""

import numpy as np

from .channel import C_LIGHT, Scenario, rayleigh_distance
from .grids import build_grids, polar_atom, polar_atom_with_grads
from .pipeline import frame_nmse, make_scene
from .priors import CdgAmplitude, SupportChain, gate_probability
from .spvbi import simplex_project
from .tensor3 import ComplexTensor3, mode_product, mode_unfold


def _check_rayleigh():
    lam = C_LIGHT / 28e9
    val = rayleigh_distance(128, lam, lam / 2.0)
    return abs(val - 86.2) < 0.5, f"2D^2/lam at 128 elements = {val:.2f} m"


def _check_grid_counts():
    scen = Scenario(n_r=128, k=128, k_bar=32)
    grids = build_grids(scen, s=3)
    ok = grids.n_polar == 384 and len(grids.tau) == 24
    return ok, f"polar atoms {grids.n_polar}, delay atoms {len(grids.tau)}"


def _check_tensor_identity():
    rng = np.random.default_rng(0)
    dims = (3, 4, 5)
    t = ComplexTensor3(rng.standard_normal(dims)
                       + 1j * rng.standard_normal(dims))
    d = rng.standard_normal((6, 4)) + 1j * rng.standard_normal((6, 4))
    lhs = mode_unfold(mode_product(t, d, 2), 2)
    rhs = d @ mode_unfold(t, 2)
    err = np.abs(lhs - rhs).max()
    return err < 1e-12, f"mode-2 product unfolding error {err:.2e}"


def _brute_simplex(v, eps_w):
    # enumerate active sets of the floor constraints (small n only)
    n = len(v)
    best, best_val = None, np.inf
    for mask in range(1 << n):
        free = [i for i in range(n) if not (mask >> i) & 1]
        if not free:
            continue
        budget = 1.0 - eps_w * (n - len(free))
        lam = (sum(v[i] for i in free) - budget) / len(free)
        x = np.full(n, eps_w)
        x[free] = [v[i] - lam for i in free]
        if np.all(x >= eps_w - 1e-12):
            val = np.sum((x - v) ** 2)
            if val < best_val:
                best, best_val = x, val
    return best


def _check_simplex():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        v = rng.standard_normal(4)
        got = simplex_project(v, 0.05)
        ref = _brute_simplex(v, 0.05)
        worst = max(worst, np.abs(got - ref).max())
    return worst < 1e-10, f"worst projection error {worst:.2e}"


def _check_atom_gradients():
    scen = Scenario()
    grids = build_grids(scen, z_delta=1.2)
    tb, rb = 0.21, 0.9
    _, g_t, g_r = polar_atom_with_grads(tb, rb, 0.1, scen.n_r, scen.lam,
                                        scen.d)
    h = 1e-7
    fd_t = (polar_atom(tb + h, rb, 0.1, scen.n_r, scen.lam, scen.d)
            - polar_atom(tb - h, rb, 0.1, scen.n_r, scen.lam, scen.d)) / (2 * h)
    fd_r = (polar_atom(tb, rb + h, 0.1, scen.n_r, scen.lam, scen.d)
            - polar_atom(tb, rb - h, 0.1, scen.n_r, scen.lam, scen.d)) / (2 * h)
    err = max(np.abs(g_t - fd_t).max() / np.abs(fd_t).max(),
              np.abs(g_r - fd_r).max() / np.abs(fd_r).max())
    return err < 1e-5, f"finite-difference gradient error {err:.2e}"


def _check_priors():
    chain = SupportChain(0.05, 0.1)
    row_err = np.abs(chain.transition_matrix().sum(axis=1) - 1.0).max()
    p_stat = 0.05 / 0.15  # lam_on / (lam_on + lam_off)
    fix_err = abs(chain.propagate(np.array([p_stat]))[0] - p_stat)
    rng = np.random.default_rng(2)
    amp = CdgAmplitude()
    x = amp.rvs(rng, 50_000)
    mean_err = abs(np.mean(x) - amp.mean()) / amp.mean()
    ok = (row_err < 1e-12 and fix_err < 1e-12 and mean_err < 0.05
          and gate_probability(1, 1, 1) > gate_probability(1, 0, 1))
    return ok, (f"chain row error {row_err:.1e}, fixed-point error "
                f"{fix_err:.1e}, amplitude mean error {mean_err:.3f}")


def _check_zero_estimator():
    scen = Scenario()
    truth = make_scene(scen, 0, snr_db=10.0)
    from .pipeline import FrameEstimate
    est = FrameEstimate(triples=[(0, 0, 0)],
                        params=np.array([[0.1, 0.2, 1.0, 1e-8]]),
                        gains=np.zeros(1, dtype=complex), f_d=0.0,
                        support=np.ones(1))
    val = frame_nmse(truth, est, scen, 4)
    return val == 1.0, f"all-zero estimate error {val}"


def _check_determinism():
    scen = Scenario()
    a = make_scene(scen, 7, snr_db=10.0)
    b = make_scene(scen, 7, snr_db=10.0)
    ok = np.array_equal(a.gamma, b.gamma) and np.array_equal(a.phi_u, b.phi_u)
    return ok, "identical seeds give identical scenes"


CHECKS = [
    ("near-field-boundary", _check_rayleigh),
    ("grid-counts", _check_grid_counts),
    ("tensor-identity", _check_tensor_identity),
    ("simplex-projection", _check_simplex),
    ("atom-gradients", _check_atom_gradients),
    ("prior-normalization", _check_priors),
    ("zero-estimator", _check_zero_estimator),
    ("seed-determinism", _check_determinism),
]


def run_selftest(quiet=False):
    """Run every check; return the number of failures."""
    failures = 0
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {exc!r}"
        if not ok:
            failures += 1
        if not quiet or not ok:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return failures
