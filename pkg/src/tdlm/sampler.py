"""Coarse-to-fine generation.

All positions start at the root; levels are traversed top-down, each with its
own share of the reverse-step budget.  Within a level every still-absorbed
position draws from the closed-form reverse kernel using the model's masked
child probabilities, and whatever survives to the level boundary is forced to
its argmax child (the boundary stay-mass is analytically zero; forcing guards
the floored arithmetic).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .kernels import reverse_jump_probs
from .schedule import NoiseSchedule
from .tree import TokenTree


class GenerationError(RuntimeError):
    pass


def allocate_steps(total: int, H: int, policy="balanced") -> np.ndarray:
    """Per-level reverse-step counts, ordered top level first (n_{H-1}..n_0).

    'balanced' floor-divides the budget and hands the remainder to the lowest
    levels; a custom list is validated against the budget instead.
    """
    if total < H:
        raise GenerationError(f"total steps {total} < number of levels {H}")
    if isinstance(policy, str):
        if policy != "balanced":
            raise GenerationError(f"unknown allocation policy {policy!r}")
        base, rem = divmod(total, H)
        counts = np.full(H, base, dtype=np.int64)
        counts[H - rem:] += 1  # remainder to the lowest levels (end of list)
        return counts
    counts = np.asarray(list(policy), dtype=np.int64)
    if len(counts) != H or counts.min() < 1 or counts.sum() != total:
        raise GenerationError(
            f"custom allocation {counts.tolist()} invalid for total={total}, H={H}"
        )
    return counts


@dataclass
class GenerationConfig:
    total_steps: int
    S: int
    allocation: np.ndarray | list | str = "balanced"
    temperature: float = 1.0
    seed: int = 0

    def steps_per_level(self, H: int) -> np.ndarray:
        return allocate_steps(self.total_steps, H, self.allocation)


@dataclass
class TraceStep:
    step: int
    t: float
    height_histogram: np.ndarray
    resolutions: list = field(default_factory=list)  # (row, position, node)


def _children_table(tree: TokenTree) -> np.ndarray:
    tab = tree._cache.get("children_table")
    if tab is None:
        tab = np.full((tree.node_count, tree.branching), -1, dtype=np.int64)
        for n, kids in enumerate(tree.children):
            if kids:
                tab[n, : len(kids)] = kids
        tree._cache["children_table"] = tab
    return tab


def _masked_probs(logits: np.ndarray, exists: np.ndarray, temperature: float) -> np.ndarray:
    if not np.isfinite(logits).all():
        raise GenerationError("model produced non-finite logits")
    scaled = logits / max(temperature, 1e-8)
    scaled = np.where(exists, scaled, -np.inf)
    scaled -= scaled.max(axis=-1, keepdims=True)
    p = np.exp(scaled)
    return p / p.sum(axis=-1, keepdims=True)


def _run(model, tree: TokenTree, sched: NoiseSchedule, cfg: GenerationConfig,
         rows: int, want_trace: bool):
    H = sched.H
    counts = cfg.steps_per_level(H)
    rng = np.random.default_rng(cfg.seed)
    kids_tab = _children_table(tree)
    exists_tab = tree.child_mask_table

    root = int(np.flatnonzero(tree.parent < 0)[0])
    z = np.full((rows, cfg.S), root, dtype=np.int64)
    records = []
    step_no = 0
    for h in range(H - 1, -1, -1):
        n_h = int(counts[H - 1 - h])
        grid = np.linspace(float(sched.t[h + 1]), float(sched.t[h]), n_h + 1)
        for i in range(n_h):
            t_hi, t_lo = float(grid[i]), float(grid[i + 1])
            absorbed = tree.height[z] == h + 1
            resolutions = []
            if absorbed.any():
                t_batch = torch.full((rows,), t_hi, dtype=torch.float64)
                with torch.no_grad():
                    out = model(torch.from_numpy(z), t_batch)
                logits = (out[0] if isinstance(out, tuple) else out).double().numpy()
                # resolved positions have no child slots; give them a dummy
                # all-true mask so the softmax stays finite (they never move)
                exists = np.where(absorbed[..., None], exists_tab[z], True)
                probs = _masked_probs(logits, exists, cfg.temperature)
                width = float(sched.t[h + 1] - sched.t[h])
                a_s = (float(sched.t[h + 1]) - t_lo) / width
                a_t = (float(sched.t[h + 1]) - t_hi) / width
                stay, move = reverse_jump_probs(a_s, a_t, probs, sched.denom_floor)
                thresh = stay[..., None] + np.cumsum(move, axis=-1)
                u = rng.random((rows, cfg.S))
                slot = (u[..., None] < thresh).argmax(axis=-1)
                moved = absorbed & (u >= stay)
                if i == n_h - 1:
                    # level boundary: force any floored leftover to its argmax
                    forced = absorbed & ~moved
                    if forced.any():
                        slot = np.where(forced, probs.argmax(axis=-1), slot)
                        moved = absorbed
                new_z = np.where(moved, kids_tab[z, np.minimum(slot, tree.branching - 1)], z)
                if want_trace:
                    for r, s in zip(*np.nonzero(moved)):
                        resolutions.append((int(r), int(s), int(new_z[r, s])))
                z = new_z
            if want_trace:
                hist = np.bincount(tree.height[z].reshape(-1), minlength=H + 1)
                records.append(TraceStep(step_no, t_lo, hist, resolutions))
            step_no += 1
    tokens = tree.token_of_node[z]
    if (tokens < 0).any():
        raise GenerationError("generation finished with unresolved internal states")
    return tokens, records


def generate(model, tree: TokenTree, sched: NoiseSchedule, cfg: GenerationConfig,
             rows: int = 1) -> np.ndarray:
    """Generate rows x S token ids by ancestral sampling down the tree."""
    tokens, _ = _run(model, tree, sched, cfg, rows, want_trace=False)
    return tokens


def trace(model, tree: TokenTree, sched: NoiseSchedule, cfg: GenerationConfig,
          rows: int = 1) -> list:
    """Per-step resolution records (height histogram plus state changes)."""
    _, records = _run(model, tree, sched, cfg, rows, want_trace=True)
    return records


def write_trace(records, path) -> None:
    with open(path, "w") as f:
        for rec in records:
            hist = ",".join(str(int(c)) for c in rec.height_histogram)
            f.write(f"step {rec.step} t {rec.t:.6f} height_histogram {hist}\n")
