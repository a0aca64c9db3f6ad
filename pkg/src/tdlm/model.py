"""Child-prediction denoiser: a small bidirectional transformer over node
states with additive time conditioning and a K-way classification head.

The head is a bias-free d x K projection, so its size depends on the
branching factor rather than the vocabulary.  An optional joint head maps the
concatenated features of each L-position neighborhood to K**L logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .loss import NeighborhoodConfig


class CheckpointFormatError(ValueError):
    pass


@dataclass
class DenoiserConfig:
    node_vocab: int
    K: int
    d: int = 128
    layers: int = 4
    heads: int = 4
    S: int = 256
    joint: NeighborhoodConfig | None = None

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"width {self.d} not divisible by {self.heads} heads")


def _sinusoidal_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    ang = t[:, None] * freqs[None, :] * 1000.0
    feats = torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)
    if dim % 2:
        feats = F.pad(feats, (0, 1))
    return feats


class Block(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, 4 * d)
        self.fc2 = nn.Linear(4 * d, d)

    def forward(self, x, t_emb):
        B, S, d = x.shape
        hd = d // self.heads
        q, k, v = self.qkv(self.ln1(x + t_emb)).chunk(3, dim=-1)
        q = q.view(B, S, self.heads, hd).transpose(1, 2)
        k = k.view(B, S, self.heads, hd).transpose(1, 2)
        v = v.view(B, S, self.heads, hd).transpose(1, 2)
        att = F.scaled_dot_product_attention(q, k, v)  # bidirectional
        att = att.transpose(1, 2).reshape(B, S, d)
        x = x + self.proj(att)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x + t_emb))))
        return x


class Denoiser(nn.Module):
    """x_theta: (node-state sequence, time) -> K child logits per position."""

    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.node_emb = nn.Embedding(cfg.node_vocab, d)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.S, d))
        self.time_fc1 = nn.Linear(d, d)
        self.time_fc2 = nn.Linear(d, d)
        self.blocks = nn.ModuleList(Block(d, cfg.heads) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.K, bias=False)
        if cfg.joint is not None:
            self.joint_head = nn.Linear(cfg.joint.L * d, cfg.K ** cfg.joint.L, bias=False)
        else:
            self.joint_head = None
        self._init_weights(seed)

    def _init_weights(self, seed: int):
        g = torch.Generator().manual_seed(seed)
        scale = 0.02
        resid_scale = scale / math.sqrt(2 * max(1, self.cfg.layers))
        for name, p in sorted(self.named_parameters()):
            if p.dim() >= 2:
                if name.endswith(("proj.weight", "fc2.weight")):
                    p.data.normal_(0.0, resid_scale, generator=g)
                else:
                    p.data.normal_(0.0, scale, generator=g)
            elif "weight" in name and "ln" in name:
                p.data.fill_(1.0)
            else:
                p.data.zero_()

    def features(self, node_ids: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if int(node_ids.max()) >= self.cfg.node_vocab:
            raise IndexError(
                f"node id {int(node_ids.max())} out of range {self.cfg.node_vocab}"
            )
        B, S = node_ids.shape
        dtype = self.node_emb.weight.dtype
        t = t.to(dtype)
        x = self.node_emb(node_ids) + self.pos_emb[None, :S, :]
        t_emb = self.time_fc2(F.silu(self.time_fc1(_sinusoidal_features(t, self.cfg.d))))
        t_emb = t_emb[:, None, :]
        for blk in self.blocks:
            x = blk(x, t_emb)
        return self.ln_f(x)

    def forward(self, node_ids: torch.Tensor, t: torch.Tensor):
        feats = self.features(node_ids, t)
        logits = self.head(feats)
        if self.joint_head is None:
            return logits
        B, S, d = feats.shape
        L = self.cfg.joint.L
        joint = self.joint_head(feats.reshape(B, S // L, L * d))
        return logits, joint


def parameter_count(cfg: DenoiserConfig) -> dict:
    """Closed-form parameter inventory; matches the instantiated module."""
    d, K = cfg.d, cfg.K
    per_block = (
        2 * d            # ln1
        + d * 3 * d + 3 * d  # qkv
        + d * d + d      # proj
        + 2 * d          # ln2
        + d * 4 * d + 4 * d  # fc1
        + 4 * d * d + d  # fc2
    )
    counts = {
        "node_emb": cfg.node_vocab * d,
        "pos_emb": cfg.S * d,
        "time_mlp": 2 * (d * d + d),
        "blocks": cfg.layers * per_block,
        "final_ln": 2 * d,
        "head": d * K,
    }
    if cfg.joint is not None:
        counts["joint_head"] = cfg.joint.L * d * K ** cfg.joint.L
    counts["total"] = sum(counts.values())
    return counts


class OracleDenoiser:
    """Test double that always points at a fixed target text.

    For an absorbed state on the target's ancestor path it assigns a large
    logit to the slot leading toward the target token; generation then
    reproduces the target exactly under any step allocation.
    """

    BIG = 100.0

    def __init__(self, tree, target_tokens: np.ndarray):
        self.tree = tree
        self.targets = np.asarray(target_tokens, dtype=np.int64)

    def __call__(self, node_ids: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        z = node_ids.numpy()
        tree = self.tree
        hz = tree.height[z]
        targets = np.broadcast_to(self.targets, z.shape)
        slots = np.where(hz > 0, tree.label_table[targets, hz], 0)
        logits = np.zeros(z.shape + (tree.branching,), dtype=np.float64)
        np.put_along_axis(logits, slots[..., None], self.BIG, axis=-1)
        return torch.from_numpy(logits)


class UniformDenoiser:
    """Test double emitting all-zero logits (uniform over valid slots)."""

    def __init__(self, K: int):
        self.K = K

    def __call__(self, node_ids: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return torch.zeros(*node_ids.shape, self.K, dtype=torch.float64)


def gradients(model: nn.Module, loss: torch.Tensor) -> dict:
    """Exact reverse-mode gradients of a scalar loss, keyed by parameter name.

    Parameters untouched by the loss get zero tensors.
    """
    model.zero_grad(set_to_none=True)
    loss.backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None
               else torch.zeros_like(p))
        for name, p in model.named_parameters()
    }


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def make_optimizer(model: nn.Module, lr: float = 3e-4,
                   weight_decay: float = 0.02) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=lr, betas=(0.9, 0.99), eps=1e-9,
        weight_decay=weight_decay,
    )


def lr_at(step: int, base: float, warmup: int, total: int,
          final_frac: float = 0.1) -> float:
    """Linear warmup from zero, then cosine decay to final_frac * base."""
    if warmup > 0 and step < warmup:
        return base * step / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return base * (final_frac + (1 - final_frac) * 0.5 * (1 + math.cos(math.pi * progress)))


def apply_gradients(model: nn.Module, optimizer: torch.optim.Optimizer,
                    lr: float, max_grad_norm: float = 1.0) -> float:
    """Clip the global gradient norm, set the learning rate, and step."""
    gnorm = torch.nn.utils.clip_grad_norm_(model.parameters(), max_grad_norm)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return float(gnorm)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _write_tensors(f, header: str, tensors: dict):
    f.write((header + "\n").encode())
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        dims = " ".join(str(d) for d in arr.shape) if arr.ndim else ""
        line = f"{name} {arr.ndim}" + (f" {dims}" if dims else "") + "\n"
        f.write(line.encode())
        f.write(arr.tobytes())


def _read_line(buf: bytes, pos: int):
    end = buf.index(b"\n", pos)
    return buf[pos:end].decode(), end + 1


def _read_tensors(path):
    with open(path, "rb") as f:
        buf = f.read()
    header, pos = _read_line(buf, 0)
    parts = header.split()
    if len(parts) != 3 or parts[0] != "TDLM-CKPT" or parts[1] != "v1" \
            or not parts[2].startswith("step="):
        raise CheckpointFormatError(f"{path}: malformed header {header!r}")
    step = int(parts[2][5:])
    tensors = {}
    while pos < len(buf):
        line, pos = _read_line(buf, pos)
        fields = line.split()
        name, rank = fields[0], int(fields[1])
        if len(fields) != 2 + rank:
            raise CheckpointFormatError(f"{path}: bad tensor line {line!r}")
        shape = tuple(int(x) for x in fields[2:])
        count = int(np.prod(shape)) if rank else 1
        raw = buf[pos:pos + 4 * count]
        if len(raw) != 4 * count:
            raise CheckpointFormatError(f"{path}: truncated payload for {name}")
        pos += 4 * count
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return step, tensors


def save_checkpoint(path, model: nn.Module, step: int) -> None:
    with open(path, "wb") as f:
        _write_tensors(f, f"TDLM-CKPT v1 step={step}", dict(model.state_dict()))


def load_checkpoint(path, model: nn.Module) -> int:
    step, tensors = _read_tensors(path)
    state = model.state_dict()
    if set(tensors) != set(state):
        missing = set(state) ^ set(tensors)
        raise CheckpointFormatError(f"{path}: tensor names mismatch: {sorted(missing)[:4]}")
    dtype = next(model.parameters()).dtype
    model.load_state_dict({k: torch.from_numpy(v).to(dtype) for k, v in tensors.items()})
    return step


def save_optimizer_state(path, model: nn.Module, optimizer, step: int) -> None:
    tensors = {}
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if not state:
            continue
        tensors[name + ".exp_avg"] = state["exp_avg"]
        tensors[name + ".exp_avg_sq"] = state["exp_avg_sq"]
        tensors[name + ".step"] = state["step"].reshape(())
    with open(path, "wb") as f:
        _write_tensors(f, f"TDLM-CKPT v1 step={step}", tensors)


def load_optimizer_state(path, model: nn.Module, optimizer) -> int:
    step, tensors = _read_tensors(path)
    dtype = next(model.parameters()).dtype
    for name, p in model.named_parameters():
        key = name + ".exp_avg"
        if key not in tensors:
            continue
        optimizer.state[p] = {
            "step": torch.from_numpy(tensors[name + ".step"]).to(torch.float32).reshape(()),
            "exp_avg": torch.from_numpy(tensors[key]).to(dtype),
            "exp_avg_sq": torch.from_numpy(tensors[name + ".exp_avg_sq"]).to(dtype),
        }
    return step
