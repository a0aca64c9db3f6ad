"""Training loss and ELBO evaluation.

Positions are corrupted independently given a per-sequence time t.  A
position contributes loss only while its state sits at the absorbing height
h+1 of the current level: the model then classifies which child slot the
true token descends through.  Invalid child slots are masked to -inf before
the softmax, so single-child padding nodes contribute exactly zero.

The per-position map E carries raw (unclipped, level-unweighted) ELBO
contributions; J carries the clipped, level-weighted training loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy.integrate import simpson

from .schedule import LevelWeightConfig, NoiseSchedule, height_weights
from .tree import TokenTree, ancestor


class LossContractError(ValueError):
    pass


class JointConfigError(ValueError):
    pass


@dataclass
class CorruptedBatch:
    tokens: np.ndarray  # (B, S) vocabulary ids
    z: np.ndarray       # (B, S) node states
    t: np.ndarray       # (B,) times in [0, 1]
    h: np.ndarray       # (B,) level indices


@dataclass
class LossMaps:
    J: torch.Tensor      # weighted training loss, nats
    E: torch.Tensor      # unclipped ELBO contributions, nats
    valid: torch.Tensor  # activity mask


@dataclass(frozen=True)
class NeighborhoodConfig:
    """Equal-length partition of the sequence into jointly modeled windows."""

    L: int

    def boundaries(self, S: int) -> np.ndarray:
        if S % self.L:
            raise JointConfigError(f"neighborhood length {self.L} must divide S={S}")
        return np.arange(0, S + 1, self.L)


def corrupt(tree: TokenTree, sched: NoiseSchedule, tokens: np.ndarray,
            rng: np.random.Generator, t=None, antithetic: bool = False) -> CorruptedBatch:
    """Sample per-row times and per-position corrupted states."""
    tokens = np.asarray(tokens, dtype=np.int64)
    B = tokens.shape[0]
    if t is None:
        u = rng.random(B)
        t = (np.arange(B) + u) / B if antithetic else u
    else:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,)).copy()
    h, a, _ = sched.alpha(t)
    anc = tree.ancestor_table
    cols = h[:, None]
    lo = anc[tokens, cols]
    hi = anc[tokens, cols + 1]
    jump = rng.random(tokens.shape) >= a[:, None]
    z = np.where(jump, hi, lo)
    return CorruptedBatch(tokens=tokens, z=z, t=t, h=np.asarray(h, dtype=np.int64))


def tdlm_loss(logits: torch.Tensor, batch: CorruptedBatch, tree: TokenTree,
              sched: NoiseSchedule, lvl_w: LevelWeightConfig = LevelWeightConfig()) -> LossMaps:
    """Per-position weighted loss J and raw ELBO map E.

    For a row at level h each position classifies, among the child slots of
    u = ancestor(token, h+1), the slot leading to ancestor(token, h); the
    position is active only if its state equals u.
    """
    B, S, K = logits.shape
    if K != tree.branching:
        raise LossContractError(f"logit width {K} != branching {tree.branching}")
    if batch.tokens.shape != (B, S):
        raise LossContractError("logits and batch shapes disagree")
    if np.any(np.asarray(sched.level_of(batch.t)) != batch.h):
        raise LossContractError("batch level indices inconsistent with times")

    cols = batch.h[:, None] + 1
    u = tree.ancestor_table[batch.tokens, cols]
    y = tree.label_table[batch.tokens, cols]
    omega = tree.child_mask_table[u]
    valid = (batch.z == u) & (tree.height[batch.z] != 0)

    dev, dt = logits.device, logits.dtype
    omega_t = torch.from_numpy(omega).to(dev)
    y_t = torch.from_numpy(y).to(dev)
    valid_t = torch.from_numpy(valid).to(dev)

    masked = logits.masked_fill(~omega_t, float("-inf"))
    ce = -masked.log_softmax(dim=-1).gather(-1, y_t.unsqueeze(-1)).squeeze(-1)
    ce = torch.where(valid_t, ce, torch.zeros((), device=dev, dtype=dt))

    w_raw, w_clip = sched.time_weight(batch.t)
    w_h = height_weights(sched.H, lvl_w)[batch.h]
    J = ce * torch.from_numpy(w_clip * w_h).to(dev, dt).unsqueeze(1)
    E = ce * torch.from_numpy(w_raw).to(dev, dt).unsqueeze(1)
    return LossMaps(J=J, E=E, valid=valid_t)


def _model_logits(model, z: np.ndarray, t: np.ndarray) -> torch.Tensor:
    zt = torch.from_numpy(np.ascontiguousarray(z))
    tt = torch.from_numpy(np.ascontiguousarray(t))
    out = model(zt, tt)
    return out[0] if isinstance(out, tuple) else out


@dataclass
class ElboReport:
    total_nats: float
    ppl: float
    per_level: np.ndarray
    se_total: float
    token_count: int
    train_weighted: float  # clipped, level-weighted objective on the same draws

    def lines(self):
        out = [f"level {h} elbo_nats {v:.6f}" for h, v in enumerate(self.per_level)]
        out.append(f"total_nats {self.total_nats:.6f}")
        out.append(f"ppl {self.ppl:.6f}")
        return out


def elbo_estimate(model, tree: TokenTree, sched: NoiseSchedule, tokens: np.ndarray,
                  samples_per_seq: int = 1, rng=None, pad_token=None,
                  max_batch: int = 64,
                  lvl_w: LevelWeightConfig = LevelWeightConfig()) -> ElboReport:
    """Monte-Carlo negative-ELBO estimate in nats per token.

    Times are sampled per level (one uniform draw inside each level per
    sequence and sample), so the per-level means sum to the full bound.  Pad
    positions are excluded from both the sum and the token count.  The
    clipped, level-weighted training objective over the same draws is
    reported alongside; the ELBO itself is never level-weighted.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.size == 0:
        raise LossContractError("evaluation set must be a nonempty (n, S) array")
    if rng is None:
        rng = np.random.default_rng(0)
    H = sched.H
    nonpad = np.ones_like(tokens, dtype=bool) if pad_token is None else tokens != pad_token
    total_tokens = int(nonpad.sum())
    if total_tokens == 0:
        raise LossContractError("evaluation set contains only padding")

    sums = np.zeros(H)
    sq = np.zeros(H)
    j_sum = 0.0
    n_draws = 0
    with torch.no_grad():
        for lo in range(0, len(tokens), max_batch):
            chunk = tokens[lo:lo + max_batch]
            keep = nonpad[lo:lo + max_batch]
            for _ in range(samples_per_seq):
                for h in range(H):
                    t = rng.uniform(sched.t[h], sched.t[h + 1], size=len(chunk))
                    batch = corrupt(tree, sched, chunk, rng, t=t)
                    logits = _model_logits(model, batch.z, batch.t)
                    maps = tdlm_loss(logits, batch, tree, sched, lvl_w)
                    e = maps.E.double().cpu().numpy()
                    j = maps.J.double().cpu().numpy()
                    e[~keep] = 0.0
                    j[~keep] = 0.0
                    per_seq = e.sum(axis=1)
                    sums[h] += per_seq.sum()
                    sq[h] += (per_seq ** 2).sum()
                    j_sum += j.sum()
            n_draws += len(chunk) * samples_per_seq

    per_level = sums / (samples_per_seq * total_tokens)
    total = float(per_level.sum())
    # draw-level variance of the per-token estimate, delta-method on the sum
    mean_seq = sums / n_draws
    var_seq = np.maximum(sq / n_draws - mean_seq ** 2, 0.0)
    se_levels = np.sqrt(var_seq / n_draws) * (n_draws / (samples_per_seq * total_tokens))
    se_total = float(np.sqrt((se_levels ** 2).sum()))
    return ElboReport(
        total_nats=total,
        ppl=float(np.exp(total)),
        per_level=per_level,
        se_total=se_total,
        token_count=total_tokens,
        train_weighted=float(j_sum / (samples_per_seq * total_tokens)),
    )


# ---------------------------------------------------------------------------
# generic-CTMC ELBO (independent evaluation route for the closed form)
# ---------------------------------------------------------------------------


def _level_grid(sched: NoiseSchedule, h: int, quadrature_steps: int):
    if quadrature_steps < 10:
        raise LossContractError("quadrature_steps must be >= 10")
    n = quadrature_steps + (quadrature_steps % 2)
    lo, hi = float(sched.t[h]), float(sched.t[h + 1])
    grid = np.linspace(lo, hi, n + 1)
    # interior limits at the thresholds: the integrand is continuous on the
    # open interval but indeterminate (0 * inf) at the exact endpoints
    nudge = 1e-9 * (hi - lo)
    grid[0] += nudge
    grid[-1] -= nudge
    return grid, np.linspace(lo, hi, n + 1)


def _alpha_on(sched, h, tt):
    lo, hi = float(sched.t[h]), float(sched.t[h + 1])
    return (hi - tt) / (hi - lo), -1.0 / (hi - lo)


def lemma2_oracle_elbo(plugin_predictor, tree: TokenTree, sched: NoiseSchedule,
                       x: int, h: int, quadrature_steps: int = 2000) -> float:
    """Negative in-level ELBO evaluated from the generic CTMC bound.

    Enumerates every state and every nonzero rate literally (skipping terms
    whose forward probability is exactly zero) and integrates over the level
    by composite Simpson quadrature.  Independent of the closed form.
    """
    leaf = int(tree.leaf_of_token[x])
    xh = ancestor(tree, leaf, h)
    xh1 = ancestor(tree, leaf, h + 1)
    kids = tree.children[xh1]
    slot_of = {c: j for j, c in enumerate(kids)}
    grid, base = _level_grid(sched, h, quadrature_steps)

    vals = np.empty(len(grid))
    for i, tt in enumerate(grid):
        a, da = _alpha_on(sched, h, tt)
        total = 0.0
        for zt, q_zt in ((xh, a), (xh1, 1.0 - a)):
            if q_zt == 0.0:
                continue
            bracket = 0.0
            if zt == xh1:
                p = np.asarray(plugin_predictor(zt, tt), dtype=np.float64)
                p_sum = p[: len(kids)].sum()
                q_zt_theta = (1.0 - a) * p_sum
                rate = -da / a
                for c in kids:
                    q_zs_x = a if c == xh else 0.0
                    if q_zs_x == 0.0:
                        continue
                    q_zs_theta = p[slot_of[c]] * a
                    bracket += rate * (q_zs_x / q_zt) * math.log(
                        q_zs_theta * q_zt / (q_zt_theta * q_zs_x)
                    )
                for c in kids:
                    q_zp_theta = p[slot_of[c]] * a
                    bracket -= rate * q_zp_theta / q_zt_theta
            else:
                # only the diagonal rate survives for a not-yet-absorbed state
                bracket -= da / a
            total += q_zt * bracket
        vals[i] = total
    return -float(simpson(vals, x=base))


def theorem_level_elbo(plugin_predictor, tree: TokenTree, sched: NoiseSchedule,
                       x: int, h: int, quadrature_steps: int = 2000) -> float:
    """Negative in-level ELBO from the closed form (unfloored weights)."""
    leaf = int(tree.leaf_of_token[x])
    xh = ancestor(tree, leaf, h)
    xh1 = ancestor(tree, leaf, h + 1)
    slot = int(tree.child_label[xh])
    grid, base = _level_grid(sched, h, quadrature_steps)
    vals = np.empty(len(grid))
    for i, tt in enumerate(grid):
        a, da = _alpha_on(sched, h, tt)
        p = np.asarray(plugin_predictor(xh1, tt), dtype=np.float64)
        ce = -math.log(p[slot])
        vals[i] = (1.0 - a) * (-da / (1.0 - a)) * ce
    return float(simpson(vals, x=base))


def lemma2_constant_remainder(tree: TokenTree, sched: NoiseSchedule, x: int,
                              h: int, quadrature_steps: int = 2000) -> float:
    """The predictor-independent leftover of the generic bound; analytically
    zero, returned as evaluated by quadrature."""
    grid, base = _level_grid(sched, h, quadrature_steps)
    vals = np.empty(len(grid))
    for i, tt in enumerate(grid):
        a, da = _alpha_on(sched, h, tt)
        vals[i] = (1.0 - a) * (da / (1.0 - a)) + a * (-da / a)
    return float(simpson(vals, x=base))


# ---------------------------------------------------------------------------
# joint neighborhood modeling
# ---------------------------------------------------------------------------


def _slot_allow(tree: TokenTree, z: np.ndarray, h: int) -> np.ndarray:
    """(n, K) boolean feasible-slot matrix for states at heights h or h+1."""
    z = np.asarray(z, dtype=np.int64)
    hz = tree.height[z]
    if not np.all((hz == h) | (hz == h + 1)):
        raise LossContractError("neighborhood states must sit at heights h or h+1")
    allow = np.zeros((len(z), tree.branching), dtype=bool)
    resolved = hz == h
    allow[resolved, tree.child_label[z[resolved]]] = True
    allow[~resolved] = tree.child_mask_table[z[~resolved]]
    return allow


def joint_target_mask(tree: TokenTree, z_neighborhood, h: int) -> np.ndarray:
    """Validity mask over the K**L Cartesian child-slot product.

    Coordinate l must land in the feasible set of position l: the single
    already-resolved slot if the state sits at height h, or any existing
    child slot if it is absorbed at height h+1.  Position 0 is the most
    significant digit of the composite index.
    """
    z = np.asarray(z_neighborhood, dtype=np.int64)
    L, K = len(z), tree.branching
    if L * math.log2(K) > 20:
        raise JointConfigError(f"K**L = {K}**{L} exceeds the 2**20 guard")
    allow = _slot_allow(tree, z, h)
    mask = allow[0]
    for l in range(1, L):
        mask = (mask[:, None] & allow[l][None, :]).reshape(-1)
    return mask


def composite_index(labels: np.ndarray, K: int) -> np.ndarray:
    """Row-major composite index of per-position slot labels (last axis)."""
    labels = np.asarray(labels, dtype=np.int64)
    L = labels.shape[-1]
    weights = K ** np.arange(L - 1, -1, -1, dtype=np.int64)
    return (labels * weights).sum(axis=-1)


def joint_loss(joint_logits: torch.Tensor, batch: CorruptedBatch, tree: TokenTree,
               sched: NoiseSchedule, cfg: NeighborhoodConfig,
               lvl_w: LevelWeightConfig = LevelWeightConfig()) -> LossMaps:
    """Per-neighborhood loss over the masked Cartesian product of child slots.

    The composite cross-entropy is divided by the neighborhood length so maps
    stay in per-token nats; with factorized logits it reproduces the sum of
    the per-position losses exactly.
    """
    B, S = batch.tokens.shape
    L, K = cfg.L, tree.branching
    cfg.boundaries(S)
    N = S // L
    if joint_logits.shape != (B, N, K ** L):
        raise LossContractError(
            f"joint logits shape {tuple(joint_logits.shape)} != {(B, N, K ** L)}"
        )
    cols = batch.h[:, None] + 1
    u = tree.ancestor_table[batch.tokens, cols]
    y = tree.label_table[batch.tokens, cols]
    target = composite_index(y.reshape(B, N, L), K)

    masks = np.empty((B, N, K ** L), dtype=bool)
    for b in range(B):
        hb = int(batch.h[b])
        for i in range(N):
            masks[b, i] = joint_target_mask(tree, batch.z[b, i * L:(i + 1) * L], hb)

    absorbed = (batch.z == u).reshape(B, N, L).any(axis=2)

    dev, dt = joint_logits.device, joint_logits.dtype
    masked = joint_logits.masked_fill(~torch.from_numpy(masks).to(dev), float("-inf"))
    ce = -masked.log_softmax(dim=-1).gather(
        -1, torch.from_numpy(target).to(dev).unsqueeze(-1)
    ).squeeze(-1) / L

    w_raw, w_clip = sched.time_weight(batch.t)
    w_h = height_weights(sched.H, lvl_w)[batch.h]
    J = ce * torch.from_numpy(w_clip * w_h).to(dev, dt).unsqueeze(1)
    E = ce * torch.from_numpy(w_raw).to(dev, dt).unsqueeze(1)
    return LossMaps(J=J, E=E, valid=torch.from_numpy(absorbed).to(dev))
