"""End-to-end commands: build-tree, train, eval, sample, verify, ablate.

Configuration comes from `key=value` lines (dots map to underscores, e.g.
schedule.clip=10.0) with --set overrides on top.  Every command is
reproducible given the same flags and seed.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass, fields, replace

import numpy as np
import torch

from . import sampler, verify
from .data import ByteTokenizer, WordTokenizer, ingest, synthetic_text
from .embeddings import load_embeddings, ppmi_embeddings, save_embeddings
from .loss import (LossContractError, NeighborhoodConfig, corrupt, elbo_estimate,
                   joint_loss, tdlm_loss)
from .model import (Denoiser, DenoiserConfig, apply_gradients, load_checkpoint,
                    load_optimizer_state, lr_at, make_optimizer, save_checkpoint,
                    save_optimizer_state)
from .schedule import LevelWeightConfig, NoiseSchedule, parse_level_weight
from .tree import build_tree, load_tree, save_tree, validate


@dataclass
class RunConfig:
    corpus: str = ""
    out_dir: str = "run"
    tree_file: str = ""
    split: float = 0.05
    S: int = 256
    B: int = 32
    steps: int = 5000
    lr: float = 3e-4
    warmup: int = 250
    weight_decay: float = 0.02
    grad_clip: float = 1.0
    k: int = 16
    ratio_min: float = 0.8
    ratio_max: float = 1.2
    emb_dim: int = 16
    emb_window: int = 2
    d: int = 128
    layers: int = 4
    heads: int = 4
    joint_l: int = 0
    schedule_family: str = "linear"
    schedule_clip: float = 10.0
    schedule_denom_floor: float = 1e-4
    levelweight_kind: str = "none"
    levelweight_gamma: float = 0.0
    eval_interval: int = 250
    eval_seqs: int = 64
    eval_samples: int = 2
    seed: int = 0
    precision: int = 32
    overfit: bool = False
    resume: bool = False
    tokenizer: str = "bytes"
    vocab: int = 4096  # word-level vocabulary limit (tokenizer=words)

    def validate_fields(self):
        for name in ("S", "B", "steps", "d", "layers", "heads", "k"):
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name} must be positive")
        if not 0 < self.split < 1:
            raise ValueError("split must be in (0, 1)")

    def level_weight(self) -> LevelWeightConfig:
        return LevelWeightConfig(self.levelweight_kind, self.levelweight_gamma)


def _coerce(value: str, target_type):
    if target_type is bool:
        return value.lower() in ("1", "true", "yes", "on")
    return target_type(value)


def parse_run_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    pairs = []
    if path:
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line and not line.startswith("#"):
                    pairs.append(line)
    pairs.extend(overrides or ())
    types = {f.name: f.type for f in fields(RunConfig)}
    concrete = {f.name: type(getattr(cfg, f.name)) for f in fields(RunConfig)}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"bad config entry {pair!r}; want key=value")
        key, value = pair.split("=", 1)
        name = key.strip().replace(".", "_").replace("-", "_")
        if name not in types:
            raise ValueError(f"unknown config key {key!r}")
        setattr(cfg, name, _coerce(value.strip(), concrete[name]))
    cfg.validate_fields()
    return cfg


def write_run_config(cfg: RunConfig, path) -> None:
    with open(path, "w") as f:
        for fld in fields(RunConfig):
            f.write(f"{fld.name}={getattr(cfg, fld.name)}\n")


def _set_threads():
    threads = os.environ.get("TDLM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))


# ---------------------------------------------------------------------------
# build-tree
# ---------------------------------------------------------------------------


def make_tokenizer(cfg: RunConfig, vocab_path=None):
    """Byte tokenizer, or a word tokenizer restored from / built for cfg."""
    if cfg.tokenizer == "bytes":
        return ByteTokenizer()
    if cfg.tokenizer == "words":
        if vocab_path and os.path.exists(vocab_path):
            return WordTokenizer.load(vocab_path)
        with open(cfg.corpus, "rb") as f:
            return WordTokenizer.build(f.read(), cfg.vocab)
    raise ValueError(f"unknown tokenizer {cfg.tokenizer!r}")


def corpus_embeddings(cfg: RunConfig, emb_file=None, tokenizer=None) -> np.ndarray:
    if emb_file:
        return load_embeddings(emb_file)
    tokenizer = tokenizer or make_tokenizer(cfg)
    with open(cfg.corpus, "rb") as f:
        ids = tokenizer.encode(f.read())
    return ppmi_embeddings(ids, tokenizer.vocab_size, cfg.emb_dim,
                           cfg.emb_window, cfg.seed)


def cmd_build_tree(args) -> int:
    cfg = parse_run_config(args.config, args.set)
    if args.corpus:
        cfg.corpus = args.corpus
    if args.k:
        cfg.k = args.k
    if args.tokenizer:
        cfg.tokenizer = args.tokenizer
    if args.vocab:
        cfg.vocab = args.vocab
    tokenizer = make_tokenizer(cfg)
    if cfg.tokenizer == "words":
        tokenizer.save(args.out + ".vocab")
    emb = corpus_embeddings(cfg, args.emb_file, tokenizer)
    tree = build_tree(emb, cfg.k, cfg.ratio_min, cfg.ratio_max, cfg.seed)
    problems = validate(tree, cfg.ratio_min, cfg.ratio_max)
    if problems:
        print(f"tree construction produced an invalid tree: {problems[0]}", file=sys.stderr)
        return 1
    save_tree(tree, args.out)
    if args.emb_out:
        save_embeddings(emb, args.emb_out)
    hist = np.bincount(
        [len(tree.children[n]) for n in range(tree.node_count) if tree.height[n] > 0],
        minlength=tree.branching + 1,
    )
    print(f"height {tree.tree_height} nodes {tree.node_count} vocab {tree.vocab_size}")
    print("branching histogram " + ",".join(str(int(c)) for c in hist))
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_or_build_tree(cfg: RunConfig, tokenizer=None):
    path = cfg.tree_file or os.path.join(cfg.out_dir, "tree.txt")
    if os.path.exists(path):
        return load_tree(path), path
    emb = corpus_embeddings(cfg, tokenizer=tokenizer)
    tree = build_tree(emb, cfg.k, cfg.ratio_min, cfg.ratio_max, cfg.seed)
    problems = validate(tree, cfg.ratio_min, cfg.ratio_max)
    if problems:
        raise RuntimeError(f"invalid tree: {problems[0]}")
    save_tree(tree, path)
    return tree, path


def _build_model(cfg: RunConfig, tree) -> Denoiser:
    joint = NeighborhoodConfig(cfg.joint_l) if cfg.joint_l > 0 else None
    mcfg = DenoiserConfig(
        node_vocab=tree.node_count, K=tree.branching, d=cfg.d,
        layers=cfg.layers, heads=cfg.heads, S=cfg.S, joint=joint,
    )
    model = Denoiser(mcfg, seed=cfg.seed)
    if cfg.precision == 64:
        model.double()
    return model


def train_run(cfg: RunConfig, log=print):
    """Full training loop; returns (model, metrics) where metrics is the list
    of logged evaluation dicts."""
    _set_threads()
    os.makedirs(cfg.out_dir, exist_ok=True)
    cfg.validate_fields()
    tokenizer = make_tokenizer(cfg, os.path.join(cfg.out_dir, "vocab.txt"))
    if cfg.tokenizer == "words":
        tokenizer.save(os.path.join(cfg.out_dir, "vocab.txt"))
    train_chunks, val_chunks = ingest(cfg.corpus, cfg.S, cfg.split, cfg.seed,
                                      tokenizer)
    tree, tree_path = _load_or_build_tree(cfg, tokenizer)
    sched = NoiseSchedule(H=tree.tree_height, family=cfg.schedule_family,
                          clip_cap=cfg.schedule_clip,
                          denom_floor=cfg.schedule_denom_floor)
    lvl_w = cfg.level_weight()
    model = _build_model(cfg, tree)
    opt = make_optimizer(model, cfg.lr, cfg.weight_decay)
    write_run_config(cfg, os.path.join(cfg.out_dir, "config.txt"))

    ckpt = os.path.join(cfg.out_dir, "model.ckpt")
    start = 0
    if cfg.resume and os.path.exists(ckpt):
        start = load_checkpoint(ckpt, model)
        load_optimizer_state(ckpt + ".opt", model, opt)
        log(f"resumed from {ckpt} at step {start}")

    from .schedule import height_weights
    log(f"tree {tree_path} H={tree.tree_height} K={tree.branching} "
        f"nodes={tree.node_count}")
    log("level_weights " + ",".join(
        f"{w:.6f}" for w in height_weights(sched.H, lvl_w)))

    metrics_path = os.path.join(cfg.out_dir, "metrics.txt")
    metrics = []
    t0 = time.time()
    with open(metrics_path, "a") as mf:
        for step in range(start, cfg.steps):
            rng = np.random.default_rng([cfg.seed, step])
            if cfg.overfit:
                idx = np.arange(min(cfg.B, len(train_chunks)))
            else:
                idx = rng.integers(len(train_chunks), size=cfg.B)
            batch = corrupt(tree, sched, train_chunks[idx], rng)
            out = model(torch.from_numpy(batch.z), torch.from_numpy(batch.t))
            if isinstance(out, tuple):
                logits, joint_logits = out
                maps = tdlm_loss(logits, batch, tree, sched, lvl_w)
                jmaps = joint_loss(joint_logits, batch, tree, sched,
                                   NeighborhoodConfig(cfg.joint_l), lvl_w)
                J = maps.J.mean() + jmaps.J.mean()
            else:
                maps = tdlm_loss(out, batch, tree, sched, lvl_w)
                J = maps.J.mean()
            if not torch.isfinite(J):
                log(f"abort: non-finite loss at step {step}; last good checkpoint kept")
                return model, metrics
            J_val = float(J.detach())
            opt.zero_grad(set_to_none=True)
            J.backward()
            apply_gradients(model, opt, lr_at(step, cfg.lr, cfg.warmup, cfg.steps),
                            cfg.grad_clip)

            done = step + 1
            if done % cfg.eval_interval == 0 or done == cfg.steps:
                rep = elbo_estimate(
                    model, tree, sched, val_chunks[: cfg.eval_seqs],
                    samples_per_seq=cfg.eval_samples,
                    rng=np.random.default_rng([cfg.seed, 0x5EED]),
                    pad_token=tokenizer.pad_id, lvl_w=lvl_w,
                )
                lvl = " ".join(
                    f"lvl:{h}={v:.6f}" for h, v in enumerate(rep.per_level))
                line = (f"step {done} train_J {J_val:.6f} "
                        f"val_nats {rep.total_nats:.6f} val_ppl {rep.ppl:.6f} "
                        f"val_J {rep.train_weighted:.6f} {lvl}")
                mf.write(line + "\n")
                mf.flush()
                log(line)
                metrics.append({
                    "step": done, "train_J": J_val,
                    "val_nats": rep.total_nats, "val_ppl": rep.ppl,
                    "val_J": rep.train_weighted,
                    "per_level": rep.per_level.copy(),
                })
                save_checkpoint(ckpt, model, done)
                save_optimizer_state(ckpt + ".opt", model, opt, done)
    log(f"trained {cfg.steps - start} steps in {time.time() - t0:.1f}s")
    return model, metrics


def cmd_train(args) -> int:
    cfg = parse_run_config(args.config, args.set)
    if args.corpus:
        cfg.corpus = args.corpus
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if args.resume:
        cfg.resume = True
    train_run(cfg)
    return 0


# ---------------------------------------------------------------------------
# eval / sample
# ---------------------------------------------------------------------------


def _restore(args):
    cfg = parse_run_config(args.config, args.set)
    tree = load_tree(args.tree)
    model = _build_model(cfg, tree)
    if model.head.weight.shape[0] != tree.branching:
        raise LossContractError(
            f"checkpoint head width {model.head.weight.shape[0]} != tree K {tree.branching}")
    load_checkpoint(args.ckpt, model)
    sched = NoiseSchedule(H=tree.tree_height, family=cfg.schedule_family,
                          clip_cap=cfg.schedule_clip,
                          denom_floor=cfg.schedule_denom_floor)
    vocab_file = os.path.join(os.path.dirname(args.config or ""), "vocab.txt")
    tokenizer = make_tokenizer(cfg, vocab_file)
    return cfg, tree, sched, model, tokenizer


def cmd_eval(args) -> int:
    _set_threads()
    cfg, tree, sched, model, tokenizer = _restore(args)
    if args.corpus:
        cfg.corpus = args.corpus
    _, val_chunks = ingest(cfg.corpus, cfg.S, cfg.split, cfg.seed, tokenizer)
    lvl_w = parse_level_weight(args.weights) if args.weights else cfg.level_weight()
    rep = elbo_estimate(
        model, tree, sched, val_chunks[: args.eval_seqs],
        samples_per_seq=args.samples,
        rng=np.random.default_rng([cfg.seed, 0x5EED]),
        pad_token=tokenizer.pad_id, lvl_w=lvl_w,
    )
    for line in rep.lines():
        print(line)
    print(f"train_weighted_J {rep.train_weighted:.6f}")
    return 0


def cmd_sample(args) -> int:
    _set_threads()
    cfg, tree, sched, model, tokenizer = _restore(args)
    if args.alloc == "balanced":
        allocation = "balanced"
    else:
        allocation = [int(x) for x in args.alloc.split(",")]
    gcfg = sampler.GenerationConfig(
        total_steps=args.steps, S=args.len, allocation=allocation,
        temperature=args.temp, seed=args.seed,
    )
    if args.trace_out:
        records = sampler.trace(model, tree, sched, gcfg, rows=args.rows)
        sampler.write_trace(records, args.trace_out)
    tokens = sampler.generate(model, tree, sched, gcfg, rows=args.rows)
    for row in tokens:
        sys.stdout.write(tokenizer.decode(row).decode("utf-8", errors="replace"))
        sys.stdout.write("\n")
    return 0


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def _fixture_trees():
    line = np.array([[0.0], [1.0], [2.0], [10.0], [11.0], [12.0]])
    small = build_tree(line, K=2, ratio_min=0.8, ratio_max=1.2, seed=0)
    from .tree import complete_tree
    return small, complete_tree(2, 4)


def run_verify_suite(suite: str = "all") -> verify.Report:
    small, complete = _fixture_trees()
    sched_small = NoiseSchedule(H=small.tree_height)
    sched_complete = NoiseSchedule(H=complete.tree_height)
    report = verify.Report()
    if suite in ("kolmogorov", "all"):
        report.extend(verify.verify_cumulative_vs_ode(small, sched_small, trials=50))
    if suite in ("mc", "all"):
        report.extend(verify.verify_marginals_mc(small, sched_small, trajectories=100_000))
    if suite in ("reverse", "all"):
        report.extend(verify.verify_reverse_bayes(small, sched_small, cases=100))
    if suite in ("elbo", "all"):
        report.extend(verify.verify_elbo_closed_form(complete, sched_complete,
                                                     predictors=20))
    if suite in ("backward", "all"):
        report.extend(verify.verify_backward_rate(small, sched_small))
    if suite in ("params", "all"):
        report.extend(verify.verify_param_accounting())
    return report


def cmd_verify(args) -> int:
    report = run_verify_suite(args.suite)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def cmd_ablate(args) -> int:
    base = parse_run_config(args.config, args.set)
    if args.corpus:
        base.corpus = args.corpus
    if args.out_dir:
        base.out_dir = args.out_dir
    os.makedirs(base.out_dir, exist_ok=True)
    rows = []
    k_grid = [int(x) for x in args.k_grid.split(",")] if args.k_grid else []
    lw_grid = args.levelweight_grid.split(",") if args.levelweight_grid else []
    alloc_grid = args.alloc_grid.split(";") if args.alloc_grid else []
    if not (k_grid or lw_grid or alloc_grid):
        print("ablate: empty grid, nothing to do")
        return 0
    for k in k_grid:
        cfg = replace(base, k=k, out_dir=os.path.join(base.out_dir, f"k{k}"),
                      tree_file="")
        _, metrics = train_run(cfg)
        final = metrics[-1] if metrics else {"val_nats": float("nan")}
        tree = load_tree(os.path.join(cfg.out_dir, "tree.txt"))
        rows.append(("k", str(k), f"H={tree.tree_height}",
                     f"{final['val_nats']:.6f}"))
    for spec in lw_grid:
        lw = parse_level_weight(spec)
        cfg = replace(base, levelweight_kind=lw.kind, levelweight_gamma=lw.gamma,
                      out_dir=os.path.join(base.out_dir, f"lw_{spec.replace(':', '_')}"))
        _, metrics = train_run(cfg)
        final = metrics[-1] if metrics else {"val_nats": float("nan")}
        rows.append(("levelweight", spec, "", f"{final['val_nats']:.6f}"))
    if alloc_grid:
        cfg = replace(base)
        tree, _ = _load_or_build_tree(cfg)
        sched = NoiseSchedule(H=tree.tree_height)
        model = _build_model(cfg, tree)
        if args.ckpt:
            load_checkpoint(args.ckpt, model)
        for spec in alloc_grid:
            allocation = [int(x) for x in spec.split(",")]
            gcfg = sampler.GenerationConfig(
                total_steps=int(sum(allocation)), S=cfg.S,
                allocation=allocation, seed=cfg.seed)
            records = sampler.trace(model, tree, sched, gcfg, rows=1)
            out = os.path.join(base.out_dir, f"trace_{spec.replace(',', '_')}.txt")
            sampler.write_trace(records, out)
            rows.append(("alloc", spec, out, ""))
    table = os.path.join(base.out_dir, "ablation.tsv")
    with open(table, "w") as f:
        f.write("kind\tsetting\tinfo\tval_nats\n")
        for r in rows:
            f.write("\t".join(r) + "\n")
    print(f"wrote {table} ({len(rows)} rows)")
    return 0


# ---------------------------------------------------------------------------
# corpus helper
# ---------------------------------------------------------------------------


def cmd_make_corpus(args) -> int:
    text = synthetic_text(args.bytes, args.seed)
    with open(args.out, "wb") as f:
        f.write(text)
    print(f"wrote {len(text)} bytes to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdlm",
                                description="tree-structured diffusion language model")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="key=value config file")
        sp.add_argument("--set", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key")

    sp = sub.add_parser("build-tree", help="construct and save the token tree")
    common(sp)
    sp.add_argument("--corpus", default=None)
    sp.add_argument("--k", type=int, default=None)
    sp.add_argument("--tokenizer", default=None, choices=["bytes", "words"])
    sp.add_argument("--vocab", type=int, default=None,
                    help="word vocabulary limit for --tokenizer words")
    sp.add_argument("--emb-file", default=None, help="import embeddings instead of PPMI")
    sp.add_argument("--emb-out", default=None, help="also save the embeddings")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_build_tree)

    sp = sub.add_parser("train", help="train the denoiser")
    common(sp)
    sp.add_argument("--corpus", default=None)
    sp.add_argument("--out-dir", default=None)
    sp.add_argument("--resume", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="negative-ELBO evaluation of a checkpoint")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--tree", required=True)
    sp.add_argument("--corpus", default=None)
    sp.add_argument("--weights", default=None, help="linear:G or exp:G reweighting of J")
    sp.add_argument("--eval-seqs", type=int, default=64)
    sp.add_argument("--samples", type=int, default=4)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sample", help="generate text")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--tree", required=True)
    sp.add_argument("--len", type=int, default=256)
    sp.add_argument("--steps", type=int, default=64)
    sp.add_argument("--alloc", default="balanced")
    sp.add_argument("--temp", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--rows", type=int, default=1)
    sp.add_argument("--trace-out", default=None)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("verify", help="run the brute-force verification suites")
    sp.add_argument("--suite", default="all",
                    choices=["kolmogorov", "mc", "reverse", "elbo", "backward",
                             "params", "all"])
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("ablate", help="grid runs over K, level weights, allocations")
    common(sp)
    sp.add_argument("--corpus", default=None)
    sp.add_argument("--out-dir", default=None)
    sp.add_argument("--k-grid", default=None)
    sp.add_argument("--levelweight-grid", default=None)
    sp.add_argument("--alloc-grid", default=None,
                    help="semicolon-separated comma lists, e.g. 256,256;448,64")
    sp.add_argument("--ckpt", default=None)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("make-corpus", help="write a deterministic synthetic corpus")
    sp.add_argument("--bytes", type=int, default=2_000_000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_make_corpus)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
