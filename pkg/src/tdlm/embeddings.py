"""Corpus-derived token embeddings for tree construction.

Embeddings come from a positive pointwise-mutual-information co-occurrence
matrix factorized to rank d_e by seeded subspace (power) iteration.  Tokens
that never occur in the corpus receive an all-zero row.
"""

from __future__ import annotations

import numpy as np


class EmbeddingFormatError(ValueError):
    pass


def cooccurrence_counts(corpus: np.ndarray, vocab_size: int, window: int) -> np.ndarray:
    """Symmetric within-window co-occurrence counts (V x V)."""
    corpus = np.asarray(corpus, dtype=np.int64)
    C = np.zeros((vocab_size, vocab_size), dtype=np.float64)
    for off in range(1, window + 1):
        left = corpus[:-off]
        right = corpus[off:]
        np.add.at(C, (left, right), 1.0)
        np.add.at(C, (right, left), 1.0)
    return C


def ppmi_matrix(counts: np.ndarray) -> np.ndarray:
    """max(0, log(p_ij / (p_i p_j))) with zero-count cells mapped to 0."""
    total = counts.sum()
    if total <= 0:
        return np.zeros_like(counts)
    row = counts.sum(axis=1, keepdims=True)
    col = counts.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log(counts * total / (row * col))
    pmi[~np.isfinite(pmi)] = 0.0
    np.maximum(pmi, 0.0, out=pmi)
    return pmi


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    idx = np.abs(vectors).argmax(axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def factorize_symmetric(A: np.ndarray, rank: int, seed: int,
                        iters: int = 2000, tol: float = 1e-14) -> np.ndarray:
    """Rank-r factor of a symmetric matrix via subspace (power) iteration.

    The iteration runs on an oversampled block so convergence is governed by
    the gap past the oversampled rank rather than at rank itself; a
    Rayleigh-Ritz step then extracts eigenpairs ordered by |lambda|
    descending.  Deterministic start and per-column sign convention.
    Returns V_r * sqrt(|lambda_r|).
    """
    n = A.shape[0]
    rank = min(rank, n)
    block = min(n, rank + max(8, rank))
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, block)))
    prev = None
    for _ in range(iters):
        # iterate with A @ A so convergence is governed by |lambda|
        Q, _ = np.linalg.qr(A @ (A @ Q))
        B = Q.T @ A @ Q
        ritz = np.sort(np.abs(np.linalg.eigvalsh(0.5 * (B + B.T))))[::-1][:rank]
        if prev is not None and np.abs(ritz - prev).max() <= tol * max(1.0, ritz[0]):
            break
        prev = ritz
    B = Q.T @ A @ Q
    B = 0.5 * (B + B.T)
    vals, vecs = np.linalg.eigh(B)
    order = np.argsort(-np.abs(vals), kind="stable")[:rank]
    vals, vecs = vals[order], vecs[:, order]
    basis = _fix_signs(Q @ vecs)
    return basis * np.sqrt(np.abs(vals))[None, :]


def ppmi_embeddings(corpus, vocab_size: int, d_e: int, window: int = 2,
                    seed: int = 0) -> np.ndarray:
    """Token embedding matrix (V x d_e) from the PPMI statistics of a corpus."""
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size == 0:
        raise ValueError("corpus is empty")
    if d_e > vocab_size:
        raise ValueError(f"d_e={d_e} exceeds vocabulary size {vocab_size}")
    pmi = ppmi_matrix(cooccurrence_counts(corpus, vocab_size, window))
    return factorize_symmetric(pmi, d_e, seed)


def save_embeddings(emb: np.ndarray, path) -> None:
    V, D = emb.shape
    with open(path, "w") as f:
        f.write(f"TDLM-EMB v1 V={V} D={D}\n")
        for row in emb:
            f.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_embeddings(path) -> np.ndarray:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise EmbeddingFormatError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 4 or head[0] != "TDLM-EMB" or head[1] != "v1":
        raise EmbeddingFormatError(f"{path}:1: malformed header {lines[0]!r}")
    try:
        fields = dict(kv.split("=") for kv in head[2:])
        V, D = int(fields["V"]), int(fields["D"])
    except (ValueError, KeyError):
        raise EmbeddingFormatError(f"{path}:1: malformed header {lines[0]!r}")
    if len(lines) - 1 != V:
        raise EmbeddingFormatError(f"{path}: header says V={V}, found {len(lines) - 1} rows")
    emb = np.empty((V, D), dtype=np.float64)
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != D:
            raise EmbeddingFormatError(f"{path}:{i}: expected {D} values, got {len(parts)}")
        emb[i - 2] = [float(x) for x in parts]
    if not np.isfinite(emb).all():
        raise EmbeddingFormatError(f"{path}: non-finite embedding values")
    return emb
