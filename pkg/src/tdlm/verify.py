"""Independent brute-force verifiers for every closed form in the package.

Each verifier re-derives its expected answer through a different route
(ODE integration, Monte-Carlo simulation, exhaustive enumeration, literal
Bayes quotients, plain arithmetic) and reports measured deviation against a
hard-coded threshold.  64-bit arithmetic throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels, loss
from .schedule import NoiseSchedule
from .tree import TokenTree, ancestor


@dataclass
class Check:
    name: str
    measured: float
    threshold: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"CHECK {self.name} {self.measured:.6e} {self.threshold:.6e} {status}"


@dataclass
class Report:
    checks: list = field(default_factory=list)

    def add(self, name, measured, threshold, larger_is_fail=True):
        ok = measured <= threshold if larger_is_fail else measured >= threshold
        self.checks.append(Check(name, float(measured), float(threshold), bool(ok)))

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def lines(self):
        return [c.line() for c in self.checks]

    def extend(self, other: "Report"):
        self.checks.extend(other.checks)
        return self


# ---------------------------------------------------------------------------
# 1. Kolmogorov forward equation vs the closed-form cumulative matrix
# ---------------------------------------------------------------------------


def _rk4_transition(tree, sched, s, t, step):
    """Integrate dP/dtau = Q^T P from s to t with classical RK4.

    The sparsity pattern comes from one generator evaluation; the shared
    time-dependent coefficient alpha'/alpha is rescaled per stage, which is
    exact for any single-level segment since every nonzero entry of Q carries
    the same factor.
    """
    h, a0, da0 = sched.alpha(0.5 * (s + t))
    base = kernels.generator(tree, sched, 0.5 * (s + t)).toarray().T
    base /= da0 / a0

    def rhs(tau, P):
        _, a, da = sched.alpha(tau)
        return (da / a) * (base @ P)

    n = max(1, int(math.ceil((t - s) / step)))
    dt = (t - s) / n
    P = np.eye(tree.node_count)
    tau = s
    for _ in range(n):
        k1 = rhs(tau, P)
        k2 = rhs(tau + dt / 2, P + dt / 2 * k1)
        k3 = rhs(tau + dt / 2, P + dt / 2 * k2)
        k4 = rhs(tau + dt, P + dt * k3)
        P = P + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        tau += dt
    return P


def verify_cumulative_vs_ode(tree: TokenTree, sched: NoiseSchedule, trials: int = 50,
                             seed: int = 0, step: float = 1e-4,
                             threshold: float = 1e-6) -> Report:
    """Closed-form P_{t|s} against RK4 integration of the forward equation."""
    if tree.node_count > 40:
        raise ValueError("ODE verifier is restricted to trees with <= 40 nodes")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        h = int(rng.integers(sched.H))
        lo, hi = float(sched.t[h]), float(sched.t[h + 1])
        # keep away from the absorbing endpoint where the rates blow up
        s, t = np.sort(rng.uniform(lo, lo + 0.95 * (hi - lo), size=2))
        P_ode = _rk4_transition(tree, sched, float(s), float(t), step)
        P_closed = kernels.cumulative(tree, sched, float(s), float(t)).toarray()
        worst = max(worst, float(np.abs(P_ode - P_closed).max()))
    rep = Report()
    rep.add("kolmogorov_rk4_max_err", worst, threshold)
    return rep


# ---------------------------------------------------------------------------
# 2. Monte-Carlo forward simulation vs analytic marginals
# ---------------------------------------------------------------------------


def verify_marginals_mc(tree: TokenTree, sched: NoiseSchedule,
                        trajectories: int = 100_000, seed: int = 0,
                        probes=None, token: int = 0) -> Report:
    """Exponential-clock simulation of the forward CTMC vs forward_marginal.

    Within level h the integrated hazard is -log(alpha), so the jump time is
    alpha^{-1}(exp(-E)) with E ~ Exp(1); each level gets a fresh clock.
    """
    rng = np.random.default_rng(seed)
    H = sched.H
    if probes is None:
        probes = np.linspace(0.08, 0.97, 5)
    # jump time inside each level for every trajectory
    jump = np.empty((trajectories, H))
    for h in range(H):
        lo, hi = float(sched.t[h]), float(sched.t[h + 1])
        survival = np.exp(-rng.exponential(1.0, size=trajectories))
        jump[:, h] = hi - (hi - lo) * survival  # alpha^{-1} for the linear family
    leaf = int(tree.leaf_of_token[token])
    rep = Report()
    for tau in probes:
        h = sched.level_of(tau)
        frac_low = float((jump[:, h] > tau).mean())
        marg = kernels.forward_marginal(tree, sched, token, float(tau))
        p_low = marg.get(ancestor(tree, leaf, h), 0.0)
        sigma = math.sqrt(max(p_low * (1 - p_low), 1e-300) / trajectories)
        dev = abs(frac_low - p_low)
        rep.add(f"mc_marginal_t={tau:.3f}", dev, max(4 * sigma, 1e-12))
    return rep


# ---------------------------------------------------------------------------
# 3. reverse posterior vs the literal Bayes quotient
# ---------------------------------------------------------------------------


def verify_reverse_bayes(tree: TokenTree, sched: NoiseSchedule, cases: int = 100,
                         seed: int = 0, threshold: float = 1e-12) -> Report:
    """Recompute q_{t|s}(z_t|z_s) q_s(z_s|theta) / q_t(z_t|theta) from
    cumulative matrices by enumeration and compare with reverse_posterior."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    candidates = [
        n for n in range(tree.node_count)
        if 1 <= tree.height[n] <= sched.H and tree.children[n]
    ]
    for _ in range(cases):
        z = int(candidates[rng.integers(len(candidates))])
        h = int(tree.height[z]) - 1
        lo, hi = float(sched.t[h]), float(sched.t[h + 1])
        # floor must stay inactive: keep 1 - alpha_t well above denom_floor
        s, t = np.sort(rng.uniform(lo + 0.05 * (hi - lo), hi, size=2))
        while t - s < 1e-6:
            s, t = np.sort(rng.uniform(lo + 0.05 * (hi - lo), hi, size=2))
        kids = tree.children[z]
        theta = np.zeros(tree.branching)
        theta[: len(kids)] = rng.dirichlet(np.ones(len(kids)))

        got = kernels.reverse_posterior(tree, sched, z, float(s), float(t), theta)

        P_ts = kernels.cumulative(tree, sched, float(s), float(t)).toarray()
        P_s0 = kernels.cumulative(tree, sched, lo, float(s)).toarray()
        P_t0 = kernels.cumulative(tree, sched, lo, float(t)).toarray()
        q_t_theta = sum(theta[j] * P_t0[z, c] for j, c in enumerate(kids))
        for j, zs in enumerate([z] + list(kids)):
            q_s_theta = sum(theta[jj] * P_s0[zs, c] for jj, c in enumerate(kids))
            expect = P_ts[z, zs] * q_s_theta / q_t_theta
            worst = max(worst, abs(got.get(zs, 0.0) - expect))
    rep = Report()
    rep.add("reverse_bayes_max_err", worst, threshold)
    return rep


# ---------------------------------------------------------------------------
# 4. closed-form ELBO vs the generic CTMC bound
# ---------------------------------------------------------------------------


def verify_elbo_closed_form(tree: TokenTree, sched: NoiseSchedule,
                            predictors: int = 20, seed: int = 0,
                            quadrature_steps: int = 2000,
                            threshold: float = 1e-6,
                            remainder_threshold: float = 1e-8) -> Report:
    """Theorem closed form vs enumerated + quadrature generic bound, over all
    tokens, all levels, and a panel of random constant predictors."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_rem = 0.0
    for _ in range(predictors):
        table = {}
        for n in range(tree.node_count):
            kids = tree.children[n]
            if kids:
                p = np.zeros(tree.branching)
                p[: len(kids)] = rng.dirichlet(np.ones(len(kids)))
                table[n] = p
        pred = lambda z, t: table[z]
        for x in range(tree.vocab_size):
            for h in range(sched.H):
                a = loss.lemma2_oracle_elbo(pred, tree, sched, x, h, quadrature_steps)
                b = loss.theorem_level_elbo(pred, tree, sched, x, h, quadrature_steps)
                worst = max(worst, abs(a - b))
    for x in range(tree.vocab_size):
        for h in range(sched.H):
            worst_rem = max(
                worst_rem,
                abs(loss.lemma2_constant_remainder(tree, sched, x, h, quadrature_steps)),
            )
    rep = Report()
    rep.add("elbo_theorem_vs_generic_max_err", worst, threshold)
    rep.add("elbo_constant_remainder", worst_rem, remainder_threshold)
    return rep


# ---------------------------------------------------------------------------
# 5. backward-rate simulation vs the posterior kernel
# ---------------------------------------------------------------------------


def verify_backward_rate(tree: TokenTree, sched: NoiseSchedule, seed: int = 0,
                         trajectories: int = 100_000, dt: float = 1e-3) -> Report:
    """Euler simulation of the backward rate matrix within one level against
    exact enumeration through the reverse posterior kernel."""
    rng = np.random.default_rng(seed)
    z = next(
        n for n in range(tree.node_count)
        if tree.height[n] >= 1 and len(tree.children[n]) >= 2
    )
    h = int(tree.height[z]) - 1
    lo, hi = float(sched.t[h]), float(sched.t[h + 1])
    width = hi - lo
    s = lo + 0.20 * width
    t = lo + 0.90 * width
    kids = list(tree.children[z])
    theta = np.zeros(tree.branching)
    theta[: len(kids)] = rng.dirichlet(np.ones(len(kids)))

    exact = kernels.reverse_posterior(tree, sched, z, s, t, theta)

    # backward rates out of the absorbed state: child j at rate
    # Q(c_j, z) * q(c_j|theta)/q(z|theta) = (-alpha') theta_j / (1 - alpha)
    state = np.full(trajectories, -1, dtype=np.int64)  # -1 means still absorbed
    tau = t
    theta_kids = theta[: len(kids)]
    theta_sum = theta_kids.sum()
    max_rate = 0.0
    while tau > s + 1e-12:
        step = min(dt, tau - s)
        a = (hi - tau) / width
        rates = (1.0 / width) * theta_kids / ((1.0 - a) * theta_sum)
        max_rate = max(max_rate, float(rates.sum()))
        probs = rates * step
        active = state < 0
        u = rng.random(trajectories)
        edges = np.cumsum(probs)
        slot = np.searchsorted(edges, u)
        jumped = active & (u < edges[-1])
        state[jumped] = slot[jumped]
        tau -= step
    freqs = {z: float((state < 0).mean())}
    for j, c in enumerate(kids):
        freqs[c] = float((state == j).mean())

    rep = Report()
    bias = 2.0 * max_rate * dt
    for node, p in exact.items():
        sigma = math.sqrt(max(p * (1 - p), 1e-300) / trajectories)
        rep.add(
            f"backward_rate_state_{node}",
            abs(freqs.get(node, 0.0) - p),
            4 * sigma + bias,
        )
    return rep


# ---------------------------------------------------------------------------
# 6. parameter / memory accounting
# ---------------------------------------------------------------------------


def head_parameters(d: int, V: int, K: int):
    return d * V, d * K


def logits_memory_gib(B: int, S: int, width: int, bytes_per_el: int = 2) -> float:
    return B * S * width * bytes_per_el / 2 ** 30


def verify_param_accounting(d: int = 768, V: int = 50_000, K: int = 512,
                            B: int = 512, S: int = 512) -> Report:
    """Head sizes d*V vs d*K and the 2-byte logit footprints, exact arithmetic."""
    full, tree_head = head_parameters(d, V, K)
    gib_full = logits_memory_gib(B, S, V)
    gib_tree = logits_memory_gib(B, S, K)
    rep = Report()
    rep.add("head_params_full_err", abs(full - 38_400_000), 0.5)
    rep.add("head_params_tree_err", abs(tree_head - 393_216), 50_000)
    rep.add("logits_full_gib_err", abs(gib_full - 24.4), 0.05)
    rep.add("logits_tree_gib_err", abs(gib_tree - 0.25), 0.005)
    return rep
