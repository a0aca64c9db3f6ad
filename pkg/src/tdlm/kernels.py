"""Closed-form CTMC machinery on the token tree.

Forward corruption moves a state up one level at a time: within level h the
state survives at height h with probability alpha and is otherwise absorbed
into its parent at height h+1.  All matrices use the column convention: the
z_s-th column of a cumulative matrix holds the transition probabilities out
of state z_s, and rate matrices are indexed (from, to).
"""

from __future__ import annotations

import numpy as np
from scipy import sparse

from .schedule import NoiseSchedule
from .tree import TokenTree, ancestor


class KernelDomainError(ValueError):
    pass


class SingularRateError(RuntimeError):
    pass


class ContractViolation(ValueError):
    pass


def _level_alpha(sched: NoiseSchedule, h: int, t: float) -> float:
    """alpha of level h evaluated at t, valid on the closed interval."""
    lo, hi = sched.t[h], sched.t[h + 1]
    if not (lo - 1e-12 <= t <= hi + 1e-12):
        raise KernelDomainError(f"time {t} outside level {h} span [{lo}, {hi}]")
    return float((hi - t) / (hi - lo))


def forward_marginal(tree: TokenTree, sched: NoiseSchedule, x: int, t: float) -> dict:
    """Distribution of the corrupted state of token x at time t.

    Mass alpha on ancestor(x, h) and 1 - alpha on ancestor(x, h+1), where h is
    the level containing t; zero-mass entries are dropped.
    """
    h = sched.level_of(t)
    _, a, _ = sched.alpha(t)
    leaf = int(tree.leaf_of_token[x])
    lo = ancestor(tree, leaf, h)
    hi = ancestor(tree, leaf, h + 1)
    out = {}
    if a > 0:
        out[lo] = a
    if a < 1:
        out[hi] = out.get(hi, 0.0) + (1.0 - a)
    return out


def forward_sample(tree, sched, tokens, t: float, rng) -> np.ndarray:
    """Sample corrupted node states for a token sequence at a shared time t."""
    tokens = np.asarray(tokens, dtype=np.int64)
    h = sched.level_of(t)
    _, a, _ = sched.alpha(t)
    anc = tree.ancestor_table
    lo = anc[tokens, h]
    hi = anc[tokens, h + 1]
    jump = rng.random(tokens.shape) >= a
    return np.where(jump, hi, lo)


def generator(tree: TokenTree, sched: NoiseSchedule, t: float) -> sparse.csr_matrix:
    """Forward rate matrix Q_t, indexed (from, to); rows sum to zero.

    Only height-h nodes are active: diagonal alpha'/alpha and rate
    -alpha'/alpha toward the parent.  Raises near the absorbing end of the
    level where the rates blow up; use the cumulative form there.
    """
    h, a, da = sched.alpha(t)
    if a <= sched.denom_floor:
        raise SingularRateError(
            f"rates singular at t={t} (alpha={a:.2e}); use cumulative(s, t) instead"
        )
    nodes = tree.level_index[h]
    diag = da / a
    N = tree.node_count
    rows = np.concatenate([nodes, nodes])
    cols = np.concatenate([nodes, tree.parent[nodes]])
    vals = np.concatenate([np.full(len(nodes), diag), np.full(len(nodes), -diag)])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(N, N))


def _in_level_cumulative(tree, h: int, ratio: float) -> sparse.csc_matrix:
    """Column-stochastic P for one level segment with stay probability ratio."""
    N = tree.node_count
    nodes = tree.level_index[h]
    diag = np.ones(N)
    diag[nodes] = ratio
    rows = [np.arange(N)]
    cols = [np.arange(N)]
    vals = [diag]
    if ratio < 1.0:
        rows.append(tree.parent[nodes])
        cols.append(nodes)
        vals.append(np.full(len(nodes), 1.0 - ratio))
    return sparse.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(N, N),
    )


def cumulative(tree: TokenTree, sched: NoiseSchedule, s: float, t: float) -> sparse.csc_matrix:
    """Cumulative transition matrix P_{t|s} (column-stochastic).

    Within a level the active block is alpha_t/alpha_s on the diagonal with
    the complement on the parent row; across thresholds the per-level factors
    compose by the Markov property.
    """
    if s > t:
        raise KernelDomainError(f"need s <= t, got s={s} > t={t}")
    if not (0.0 <= s and t <= 1.0):
        raise KernelDomainError(f"times must lie in [0, 1], got ({s}, {t})")
    P = sparse.identity(tree.node_count, format="csc")
    cur = s
    while cur < t:
        h = sched.level_of(cur)
        seg_end = min(t, float(sched.t[h + 1]))
        a_s = _level_alpha(sched, h, cur)
        a_t = _level_alpha(sched, h, seg_end)
        P = _in_level_cumulative(tree, h, a_t / a_s) @ P
        cur = seg_end
    return P


def reverse_jump_probs(alpha_s: float, alpha_t: float, child_probs: np.ndarray,
                       denom_floor: float):
    """Shared closed form of the single-position reverse kernel.

    Returns (stay, move) where move[..., k] is the probability of resolving to
    child slot k; the pair is renormalized after denominator flooring.
    child_probs may carry leading batch dimensions.
    """
    child_probs = np.asarray(child_probs, dtype=np.float64)
    denom = max(1.0 - alpha_t, denom_floor)
    stay = (1.0 - alpha_s) / denom
    move = child_probs * ((alpha_s - alpha_t) / denom)
    total = stay + move.sum(axis=-1)
    return stay / total, move / np.expand_dims(total, axis=-1)


def reverse_posterior(tree: TokenTree, sched: NoiseSchedule, z: int, s: float,
                      t: float, child_probs: np.ndarray) -> dict:
    """Reverse kernel p(z_s | z_t) for one in-level (s, t) pair.

    A state still at the lower height stays put with probability one.  An
    absorbed state either stays or resolves to child c with probability
    proportional to child_probs[c] * (alpha_s - alpha_t).
    """
    h = sched.level_of(s)
    if not (s < t <= float(sched.t[h + 1]) + 1e-12):
        raise KernelDomainError(f"(s={s}, t={t}) is not an in-level pair of level {h}")
    hz = int(tree.height[z])
    if hz == h:
        return {z: 1.0}
    if hz != h + 1:
        raise ContractViolation(f"state {z} at height {hz} invalid for level {h}")
    kids = tree.children[z]
    child_probs = np.asarray(child_probs, dtype=np.float64)
    if len(child_probs) != tree.branching:
        raise ContractViolation(
            f"child_probs length {len(child_probs)} != branching {tree.branching}"
        )
    if np.abs(child_probs[len(kids):]).max(initial=0.0) > 1e-12:
        raise ContractViolation("child_probs places mass on nonexistent child slots")
    a_s = _level_alpha(sched, h, s)
    a_t = _level_alpha(sched, h, t)
    stay, move = reverse_jump_probs(a_s, a_t, child_probs[: len(kids)], sched.denom_floor)
    out = {z: float(stay)}
    for c, p in zip(kids, np.atleast_1d(move)):
        out[c] = out.get(c, 0.0) + float(p)
    return out


def _ground_truth_reverse(tree, sched, x: int, z: int, s: float, t: float) -> dict:
    """p(z_s | z_t = z) with one-hot predictions along token x's ancestor path,
    composed across any thresholds between s and t."""
    leaf = int(tree.leaf_of_token[x])
    dist = {z: 1.0}
    cur = t
    while cur > s:
        k = sched.level_of(cur)
        if abs(cur - sched.t[k]) < 1e-12:
            k -= 1
        seg_start = max(s, float(sched.t[k]))
        nxt = {}
        for state, p in dist.items():
            if p == 0.0:
                continue
            if tree.height[state] == k:
                nxt[state] = nxt.get(state, 0.0) + p
                continue
            onehot = np.zeros(tree.branching)
            target_child = ancestor(tree, leaf, k)
            if ancestor(tree, leaf, k + 1) != state:
                raise ContractViolation(
                    f"state {state} left token {x}'s ancestor path"
                )
            onehot[tree.child_label[target_child]] = 1.0
            for zs, q in reverse_posterior(tree, sched, state, seg_start, cur, onehot).items():
                nxt[zs] = nxt.get(zs, 0.0) + p * q
        dist = nxt
        cur = seg_start
    return dist


def reverse_consistency_check(tree: TokenTree, sched: NoiseSchedule, x: int,
                              s: float, t: float) -> float:
    """Max deviation of sum_zt q_t(zt|x) p(zs|zt) from q_s(zs|x).

    With ground-truth one-hot predictions the composed reverse kernel must
    reproduce the forward marginal exactly, in-level and across thresholds.
    """
    if s > t:
        raise KernelDomainError(f"need s <= t, got {s} > {t}")
    marg_t = forward_marginal(tree, sched, x, t)
    marg_s = forward_marginal(tree, sched, x, s)
    mixed = {}
    for z, p in marg_t.items():
        if s == t:
            mixed[z] = mixed.get(z, 0.0) + p
            continue
        for zs, q in _ground_truth_reverse(tree, sched, x, z, s, t).items():
            mixed[zs] = mixed.get(zs, 0.0) + p * q
    dev = 0.0
    for z in set(mixed) | set(marg_s):
        dev = max(dev, abs(mixed.get(z, 0.0) - marg_s.get(z, 0.0)))
    return dev
