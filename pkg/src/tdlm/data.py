"""Tokenizers and corpus chunking.

The default vocabulary is byte-level: the 256 byte values plus one pad id
appended at 256.  A word-level tokenizer is available for larger-vocabulary
experiments.  A corpus file is cut into fixed-length chunks; the tail chunk
is padded.  Pad positions stay in the training loss (their single-slot
targets contribute zero) but are excluded from ELBO evaluation.
"""

from __future__ import annotations

import re
from collections import Counter

import numpy as np

PAD_ID = 256
VOCAB_SIZE = 257


class ByteTokenizer:
    """Bijection between byte strings and ids 0..255, with pad id 256."""

    pad_id = PAD_ID
    vocab_size = VOCAB_SIZE

    def encode(self, data) -> np.ndarray:
        if isinstance(data, str):
            data = data.encode("utf-8")
        return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)

    def decode(self, ids) -> bytes:
        ids = np.asarray(ids, dtype=np.int64)
        return bytes(ids[ids != PAD_ID].astype(np.uint8))


_WORD_RE = re.compile(rb"[A-Za-z0-9']+|[^A-Za-z0-9'\s]")


class WordTokenizer:
    """Whitespace/punctuation word vocabulary with unk and pad ids.

    Ids 0..n-1 are the n most frequent corpus words (ties by first
    occurrence), id n is unk, id n+1 is pad.  decode joins tokens with
    single spaces, so it is readable rather than byte-exact.
    """

    def __init__(self, words):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        self.unk_id = len(self.words)
        self.pad_id = len(self.words) + 1
        self.vocab_size = len(self.words) + 2

    @classmethod
    def build(cls, corpus: bytes, vocab_limit: int) -> "WordTokenizer":
        if vocab_limit < 1:
            raise ValueError("word vocabulary limit must be positive")
        tokens = _WORD_RE.findall(corpus)
        counts = Counter(tokens)
        first_seen = {}
        for i, tok in enumerate(tokens):
            first_seen.setdefault(tok, i)
        ranked = sorted(counts, key=lambda w: (-counts[w], first_seen[w]))
        return cls(w.decode("latin-1") for w in ranked[:vocab_limit])

    def encode(self, data) -> np.ndarray:
        if isinstance(data, str):
            data = data.encode("utf-8")
        toks = _WORD_RE.findall(bytes(data))
        return np.array(
            [self.index.get(t.decode("latin-1"), self.unk_id) for t in toks],
            dtype=np.int64,
        )

    def decode(self, ids) -> bytes:
        out = []
        for i in np.asarray(ids, dtype=np.int64):
            if i == self.pad_id:
                continue
            out.append("<unk>" if i == self.unk_id else self.words[int(i)])
        return " ".join(out).encode("latin-1")

    def save(self, path) -> None:
        with open(path, "w", encoding="latin-1") as f:
            for w in self.words:
                f.write(w + "\n")

    @classmethod
    def load(cls, path) -> "WordTokenizer":
        with open(path, encoding="latin-1") as f:
            return cls(line.rstrip("\n") for line in f)


def chunk_corpus(ids: np.ndarray, S: int, pad_id: int = PAD_ID) -> np.ndarray:
    """Cut a token stream into (n, S) chunks, padding the tail."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("corpus is empty")
    n = -(-len(ids) // S)
    out = np.full(n * S, pad_id, dtype=np.int64)
    out[: len(ids)] = ids
    return out.reshape(n, S)


def ingest(corpus_path, S: int, split: float = 0.05, seed: int = 0,
           tokenizer=None):
    """Read a corpus file and return (train_chunks, val_chunks).

    Chunks are shuffled deterministically by seed; the trailing `split`
    fraction becomes the validation set (at least one chunk each side when
    possible).
    """
    if not 0 < split < 1:
        raise ValueError(f"split must be in (0, 1), got {split}")
    tokenizer = tokenizer or ByteTokenizer()
    with open(corpus_path, "rb") as f:
        raw = f.read()
    chunks = chunk_corpus(tokenizer.encode(raw), S, tokenizer.pad_id)
    order = np.random.default_rng(seed).permutation(len(chunks))
    chunks = chunks[order]
    n_val = max(1, int(round(split * len(chunks)))) if len(chunks) > 1 else 0
    if n_val == 0:
        return chunks, chunks.copy()
    return chunks[:-n_val], chunks[-n_val:]


_WORDS = (
    "the of and to in is was for on that with as his they at be this from have "
    "or by one had not but what all were when we there can an your which their "
    "said if do will each about how up out them then she many some so these "
    "would other into has more her two like him see time could no make than "
    "first been its who now people my made over did down only way find use may "
    "water long little very after words called just where most know get through "
    "back much before go good new write our used me man too any day same right "
    "look think also around another came come work three word must because does "
    "part even place well such here take why things help put years different "
    "away again off went old number great tell men say small every found still "
    "between name should home big give air line set own under read last never "
    "us left end along while might next sound below saw something thought both "
    "few those always show large often together asked house world going want "
    "school important until form food keep children feet land side without boy "
    "once animal life enough took four head above kind began almost live page "
    "got earth need far hand high year mother light country father let night "
    "picture being study second soon story since white ever paper hard near "
    "sentence better best across during today however sure knew tree"
).split()


def synthetic_text(n_bytes: int, seed: int = 0) -> bytes:
    """Deterministic English-like filler text with Zipfian word frequencies.

    Gives the byte-level model localized structure (words, spaces, sentence
    case, punctuation) so training on it is meaningful without shipping a
    real corpus.
    """
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, len(_WORDS) + 1, dtype=np.float64)
    probs = (1.0 / ranks) / (1.0 / ranks).sum()
    parts = []
    size = 0
    while size < n_bytes:
        length = int(rng.integers(5, 13))
        words = [_WORDS[i] for i in rng.choice(len(_WORDS), size=length, p=probs)]
        words[0] = words[0].capitalize()
        if length > 8 and rng.random() < 0.5:
            comma_at = int(rng.integers(2, length - 2))
            words[comma_at] = words[comma_at] + ","
        sentence = " ".join(words) + (".\n" if rng.random() < 0.2 else ". ")
        parts.append(sentence)
        size += len(sentence)
    return "".join(parts).encode("ascii")[:n_bytes]
