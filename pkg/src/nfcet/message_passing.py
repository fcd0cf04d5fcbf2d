"""Sum-product inference on the structured support prior.

The angle and delay supports live on first-order chains (exact
forward-backward); the IRS polar support lives on a 4-connected lattice
(damped flooding loopy belief propagation). The refinement stage
exchanges extrinsic activity probabilities with these routines.
"""

import numpy as np

_FLOOR = 1e-12


def _normalize(v):
    s = np.sum(v)
    if s <= 0:
        return np.full_like(v, 1.0 / len(v))
    return v / s


def chain_sum_product(unaries, transition, init=None):
    """Exact marginals of a two-state chain with per-site likelihoods.

    `unaries` is (n, 2) with columns ordered (s=-1, s=+1); `transition`
    rows are the current state in the same order. `init` defaults to the
    stationary distribution of the transition matrix.
    """
    u = np.asarray(unaries, dtype=float)
    t = np.asarray(transition, dtype=float)
    n = len(u)
    if init is None:
        w, v = np.linalg.eig(t.T)
        init = np.real(v[:, np.argmax(np.real(w))])
        init = init / init.sum()
    fwd = np.empty((n, 2))
    fwd[0] = _normalize(init * u[0])
    for i in range(1, n):
        fwd[i] = _normalize((t.T @ fwd[i - 1]) * u[i])
    bwd = np.empty((n, 2))
    bwd[-1] = 1.0
    for i in range(n - 2, -1, -1):
        bwd[i] = _normalize(t @ (u[i + 1] * bwd[i + 1]))
    marg = np.array([_normalize(f * b) for f, b in zip(fwd, bwd)])
    return marg


def chain_brute_marginals(unaries, transition, init=None):
    """Enumeration oracle for small chains."""
    import itertools

    u = np.asarray(unaries, dtype=float)
    t = np.asarray(transition, dtype=float)
    n = len(u)
    if init is None:
        w, v = np.linalg.eig(t.T)
        init = np.real(v[:, np.argmax(np.real(w))])
        init = init / init.sum()
    marg = np.zeros((n, 2))
    for states in itertools.product((0, 1), repeat=n):
        w_ = init[states[0]] * u[0, states[0]]
        for a, b in zip(states[:-1], states[1:]):
            w_ *= t[a, b]
        for i in range(1, n):
            w_ *= u[i, states[i]]
        for i, s in enumerate(states):
            marg[i, s] += w_
    return marg / marg.sum(axis=1, keepdims=True)


def mrf_loopy_bp(mrf, unaries, damping=0.5, max_iter=200, tol=1e-10):
    """Damped flooding sum-product on a pairwise +1/-1 field.

    Returns (marginals (n, 2), n_iters). Messages are normalized and
    linearly damped; on tree-structured fields the fixed point is exact.
    """
    u = np.asarray(unaries, dtype=float)
    n = mrf.n
    # local exp(field * s) folded into the unaries
    local = u * np.exp(np.outer(mrf.fields, [-1.0, 1.0]))
    # directed messages indexed by (src, dst)
    msgs = {}
    pair = {}
    nbrs = [[] for _ in range(n)]
    for (a, b), j in zip(mrf.edges, mrf.couplings):
        # psi[s_src, s_dst] for s in (-1, +1)
        psi = np.exp(j * np.outer([-1.0, 1.0], [-1.0, 1.0]))
        pair[(a, b)] = psi
        pair[(b, a)] = psi.T
        msgs[(a, b)] = np.full(2, 0.5)
        msgs[(b, a)] = np.full(2, 0.5)
        nbrs[a].append(b)
        nbrs[b].append(a)
    it = 0
    for it in range(1, max_iter + 1):
        new = {}
        for (src, dst), old in msgs.items():
            prod = local[src].copy()
            for c in nbrs[src]:
                if c != dst:
                    prod = prod * msgs[(c, src)]
            m = _normalize(pair[(src, dst)].T @ prod)
            new[(src, dst)] = _normalize((1.0 - damping) * old + damping * m)
        delta = max(
            (np.max(np.abs(new[k] - msgs[k])) for k in msgs), default=0.0)
        msgs = new
        if delta < tol:
            break
    marg = np.empty((n, 2))
    for m in range(n):
        prod = local[m].copy()
        for c in nbrs[m]:
            prod = prod * msgs[(c, m)]
        marg[m] = _normalize(prod)
    return marg, it


def extrinsic(posterior_on, incoming_on):
    """Remove an incoming activity message from a posterior, in odds form."""
    post = np.clip(np.asarray(posterior_on, dtype=float), _FLOOR, 1 - _FLOOR)
    inc = np.clip(np.asarray(incoming_on, dtype=float), _FLOOR, 1 - _FLOOR)
    odds = (post / (1 - post)) / (inc / (1 - inc))
    return odds / (1.0 + odds)


def support_prior_update(pi_in, chain_u, chain_k, mrf, damping=0.5):
    """One support-prior half-iteration of the turbo loop.

    `pi_in` maps mode name ('u', 'r', 'k') to incoming activity
    probabilities p(s=+1) from the estimation stage. Runs exact chain
    inference on the angle/delay modes and damped loopy BP on the polar
    lattice, and returns the extrinsic activity probabilities.
    """
    out = {}
    for name, chain in (("u", chain_u), ("k", chain_k)):
        pin = np.asarray(pi_in[name], dtype=float)
        unaries = np.column_stack([1.0 - pin, pin])
        marg = chain_sum_product(unaries, chain.transition_matrix())
        out[name] = extrinsic(marg[:, 1], pin)
    pin = np.asarray(pi_in["r"], dtype=float)
    unaries = np.column_stack([1.0 - pin, pin])
    marg, _ = mrf_loopy_bp(mrf, unaries, damping=damping)
    out["r"] = extrinsic(marg[:, 1], pin)
    return out
