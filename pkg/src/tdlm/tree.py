"""Uniform-depth K-ary token tree: construction, queries, serialization.

Every vocabulary token owns one height-0 leaf; internal nodes are clusters.
All leaves sit at the same depth, so a single height H describes the whole
hierarchy and each level h holds a well-defined node set.  Trees are built by
recursive capacity-constrained k-means over token embeddings, then equalized
in depth with chains of single-child padding nodes above the shallow leaves.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field

import numpy as np


class TreeConfigError(ValueError):
    pass


class TreeDomainError(ValueError):
    pass


class TreeFormatError(ValueError):
    pass


@dataclass
class TokenTree:
    """Immutable uniform-depth hierarchy over a vocabulary.

    parent[n] is -1 for the root; child_label[n] is the slot of n inside its
    parent (also -1 for the root); token_of_node[n] is the vocabulary id for
    leaves and -1 for internal nodes.
    """

    parent: np.ndarray
    child_label: np.ndarray
    height: np.ndarray
    token_of_node: np.ndarray
    branching: int

    children: list = field(init=False, repr=False)
    leaf_of_token: np.ndarray = field(init=False, repr=False)
    level_index: list = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.parent)
        self.children = [[] for _ in range(n)]
        order = np.argsort(self.child_label, kind="stable")
        for node in order:
            p = self.parent[node]
            if p >= 0:
                self.children[p].append(int(node))
        self.tree_height = int(self.height.max())
        vocab = int((self.token_of_node >= 0).sum())
        self.leaf_of_token = np.full(vocab, -1, dtype=np.int64)
        for node, tok in enumerate(self.token_of_node):
            if tok >= 0:
                self.leaf_of_token[tok] = node
        self.level_index = [
            np.flatnonzero(self.height == h) for h in range(self.tree_height + 1)
        ]
        self._cache = {}

    @property
    def node_count(self) -> int:
        return len(self.parent)

    @property
    def vocab_size(self) -> int:
        return len(self.leaf_of_token)

    def n_children(self, node: int) -> int:
        return len(self.children[node])

    # -- cached dense lookup tables (used by the vectorized loss path) --

    @property
    def ancestor_table(self) -> np.ndarray:
        """(V, H+1) array: ancestor_table[x, h] = ancestor of token x at height h."""
        tab = self._cache.get("anc")
        if tab is None:
            V, H = self.vocab_size, self.tree_height
            tab = np.empty((V, H + 1), dtype=np.int64)
            tab[:, 0] = self.leaf_of_token
            for h in range(1, H + 1):
                tab[:, h] = self.parent[tab[:, h - 1]]
            self._cache["anc"] = tab
        return tab

    @property
    def label_table(self) -> np.ndarray:
        """(V, H+1) array: label_table[x, h] = child slot of ancestor(x, h-1)
        inside ancestor(x, h).  Column 0 is -1 (leaves carry no label below)."""
        tab = self._cache.get("lab")
        if tab is None:
            anc = self.ancestor_table
            tab = np.full_like(anc, -1)
            if self.tree_height >= 1:
                tab[:, 1:] = self.child_label[anc[:, :-1]]
            self._cache["lab"] = tab
        return tab

    @property
    def child_mask_table(self) -> np.ndarray:
        """(N, K) boolean array of existing child slots; all-False for leaves."""
        tab = self._cache.get("mask")
        if tab is None:
            tab = np.zeros((self.node_count, self.branching), dtype=bool)
            for node, kids in enumerate(self.children):
                tab[node, : len(kids)] = True
            self._cache["mask"] = tab
        return tab


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------


def ancestor(tree: TokenTree, node: int, h: int) -> int:
    """The unique ancestor of node at height h (identity if already there)."""
    h0 = int(tree.height[node])
    if h < h0 or h > tree.tree_height:
        raise TreeDomainError(
            f"ancestor height {h} outside [{h0}, {tree.tree_height}] for node {node}"
        )
    for _ in range(h - h0):
        node = int(tree.parent[node])
    return node


def offspring(tree: TokenTree, node: int, h: int) -> list:
    """Descendants of node at height h.

    For h equal to the node's own height the result is the node's sibling set
    including itself (the root, having no siblings, maps to itself).
    """
    h0 = int(tree.height[node])
    if h > h0 or h < 0:
        raise TreeDomainError(f"offspring height {h} above node height {h0}")
    if h == h0:
        if h0 == tree.tree_height:
            return [node]
        return list(tree.children[int(tree.parent[node])])
    frontier = [node]
    for cur_h in range(h0, h, -1):
        frontier = [c for n in frontier for c in tree.children[n]]
    return frontier


def child_index(tree: TokenTree, token: int, h: int) -> int:
    """Slot j with children(ancestor(token, h))[j] = ancestor(token, h - 1)."""
    if h < 1 or h > tree.tree_height:
        raise TreeDomainError(f"child_index height {h} outside [1, {tree.tree_height}]")
    below = ancestor(tree, int(tree.leaf_of_token[token]), h - 1)
    return int(tree.child_label[below])


def child_mask(tree: TokenTree, node: int) -> np.ndarray:
    """Boolean K-vector of existing child slots of an internal node."""
    if tree.height[node] < 1:
        raise TreeDomainError(f"node {node} is a leaf and has no child slots")
    return tree.child_mask_table[node].copy()


def level_map(tree: TokenTree, h: int) -> np.ndarray:
    """(|I_{h+1}|, |I_h|) 0/1 matrix pushing height-h mass to height h+1."""
    if h < 0 or h >= tree.tree_height:
        raise TreeDomainError(f"level_map height {h} outside [0, {tree.tree_height - 1}]")
    lo = tree.level_index[h]
    hi = tree.level_index[h + 1]
    hi_pos = {int(n): i for i, n in enumerate(hi)}
    m = np.zeros((len(hi), len(lo)), dtype=np.float64)
    for j, n in enumerate(lo):
        m[hi_pos[int(tree.parent[n])], j] = 1.0
    return m


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _kmeanspp_init(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(K - 1):
        total = d2.sum()
        if total <= 0:
            # duplicate points: fall back to the smallest unchosen index
            mask = np.ones(n, dtype=bool)
            mask[chosen] = False
            nxt = int(np.flatnonzero(mask)[0]) if mask.any() else chosen[0]
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _greedy_assign(d2: np.ndarray, cap_max: int) -> np.ndarray:
    """Assign each point to a cluster, nearest-margin first, capacity capped."""
    n, K = d2.shape
    margin = d2 - d2.min(axis=1, keepdims=True)
    rows, cols = np.unravel_index(
        np.lexsort((np.arange(n * K), d2.ravel(), margin.ravel())), d2.shape
    )
    assign = np.full(n, -1, dtype=np.int64)
    load = np.zeros(K, dtype=np.int64)
    placed = 0
    for i, c in zip(rows, cols):
        if assign[i] < 0 and load[c] < cap_max:
            assign[i] = c
            load[c] += 1
            placed += 1
            if placed == n:
                break
    return assign


def _rebalance(d2: np.ndarray, assign: np.ndarray, cap_min: int) -> None:
    """Steal nearest points from surplus clusters until all reach cap_min."""
    if cap_min <= 0:
        return
    K = d2.shape[1]
    load = np.bincount(assign, minlength=K)
    while True:
        needy = np.flatnonzero(load < cap_min)
        if len(needy) == 0:
            return
        c = int(needy[0])
        donors = np.flatnonzero(load > cap_min)
        movable = np.isin(assign, donors)
        cand = np.flatnonzero(movable)
        best = cand[np.lexsort((cand, d2[cand, c]))[0]]
        load[assign[best]] -= 1
        assign[best] = c
        load[c] += 1


def _constrained_kmeans(X, K, ratio_min, ratio_max, rng, rounds=25):
    """Lloyd iterations under per-cluster size caps derived from the ratios.

    The max capacity is additionally capped at n - 1 so every split makes
    progress even for duplicate embeddings or n == K.
    """
    n = len(X)
    cap_max = min(math.ceil(ratio_max * n / K), n - 1)
    cap_max = max(cap_max, math.ceil(n / K))
    cap_min = math.floor(ratio_min * n / K)
    centroids = _kmeanspp_init(X, K, rng)
    assign = None
    for _ in range(rounds):
        d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = _greedy_assign(d2, cap_max)
        _rebalance(d2, new_assign, cap_min)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(K):
            members = np.flatnonzero(assign == c)
            if len(members):
                centroids[c] = X[members].mean(axis=0)
    return assign, centroids


class _Build:
    __slots__ = ("tokens", "children", "centroid")

    def __init__(self, tokens, centroid):
        self.tokens = tokens
        self.children = []
        self.centroid = centroid


def build_tree(
    emb: np.ndarray,
    K: int,
    ratio_min: float = 0.8,
    ratio_max: float = 1.2,
    seed: int = 0,
) -> TokenTree:
    """Build the uniform-depth token tree from per-token embeddings.

    Nodes with fewer than K tokens split into singletons; larger nodes split
    by capacity-constrained k-means with cluster sizes held within
    [ratio_min * n / K, ratio_max * n / K] up to rounding.  Shallow leaves are
    then extended to the maximum depth with single-child padding chains kept
    above the leaf, so tokens always live at height 0.
    """
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 1:
        raise TreeConfigError("embeddings must be a nonempty V x d matrix")
    if K < 2:
        raise TreeConfigError(f"branching factor must be >= 2, got {K}")
    if not (0 < ratio_min <= 1 <= ratio_max):
        raise TreeConfigError(
            f"need 0 < ratio_min <= 1 <= ratio_max, got {ratio_min}/{ratio_max}"
        )
    rng = np.random.default_rng(seed)
    V = emb.shape[0]

    root = _Build(np.arange(V, dtype=np.int64), emb.mean(axis=0))
    queue = [root]
    while queue:
        node = queue.pop(0)
        toks = node.tokens
        if len(toks) == 1:
            continue
        if len(toks) < K:
            groups = [np.array([t]) for t in toks]
            cents = [emb[t] for t in toks]
        else:
            assign, centroids = _constrained_kmeans(
                emb[toks], K, ratio_min, ratio_max, rng
            )
            groups, cents = [], []
            for c in range(K):
                members = toks[assign == c]
                if len(members):
                    groups.append(members)
                    cents.append(centroids[c])
        # child slots ordered by centroid norm, ties by smallest member id
        order = sorted(
            range(len(groups)),
            key=lambda g: (float(np.linalg.norm(cents[g])), int(groups[g].min())),
        )
        for g in order:
            child = _Build(groups[g], cents[g])
            node.children.append(child)
            queue.append(child)

    # equalize leaf depth with single-child chains above each shallow leaf
    def max_depth(n, d=0):
        if not n.children:
            return d
        return max(max_depth(c, d + 1) for c in n.children)

    D = max_depth(root)

    def pad(n, d):
        if not n.children:
            for _ in range(D - d):
                link = _Build(n.tokens, n.centroid)
                link.children = n.children
                n.children = [link]
            return
        for c in n.children:
            pad(c, d + 1)

    pad(root, 0)

    # linearize in preorder
    parent, label, height, token = [], [], [], []

    def emit(n, par, lab, d):
        idx = len(parent)
        parent.append(par)
        label.append(lab)
        height.append(D - d)
        token.append(int(n.tokens[0]) if not n.children else -1)
        for j, c in enumerate(n.children):
            emit(c, idx, j, d + 1)

    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, 64 * (D + 8)))
    try:
        emit(root, -1, -1, 0)
    finally:
        sys.setrecursionlimit(old_limit)

    return TokenTree(
        parent=np.array(parent, dtype=np.int64),
        child_label=np.array(label, dtype=np.int64),
        height=np.array(height, dtype=np.int64),
        token_of_node=np.array(token, dtype=np.int64),
        branching=K,
    )


def complete_tree(K: int, H: int) -> TokenTree:
    """A complete K-ary tree of height H over V = K**H tokens (token order =
    left-to-right leaf order)."""
    if K < 2 and H > 0:
        raise TreeConfigError("branching factor must be >= 2")
    if H < 0:
        raise TreeConfigError("height must be >= 0")
    parent, label, height, token = [], [], [], []
    counter = [0]

    def emit(par, lab, h):
        idx = len(parent)
        parent.append(par)
        label.append(lab)
        height.append(h)
        if h == 0:
            token.append(counter[0])
            counter[0] += 1
        else:
            token.append(-1)
            for j in range(K):
                emit(idx, j, h - 1)

    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, 64 * (H + 8)))
    try:
        emit(-1, -1, H)
    finally:
        sys.setrecursionlimit(old_limit)
    return TokenTree(
        parent=np.array(parent, dtype=np.int64),
        child_label=np.array(label, dtype=np.int64),
        height=np.array(height, dtype=np.int64),
        token_of_node=np.array(token, dtype=np.int64),
        branching=K,
    )


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def validate(tree: TokenTree, ratio_min=None, ratio_max=None) -> list:
    """Return a list of invariant violations (empty for a valid tree).

    When the construction ratios are supplied, cluster sizes of every split
    with at least K tokens are also checked against the capacity bounds.
    """
    out = []
    N, H, K = tree.node_count, tree.tree_height, tree.branching
    roots = np.flatnonzero(tree.parent < 0)
    if len(roots) != 1:
        out.append(f"expected exactly one root, found {len(roots)}")
        return out
    root = int(roots[0])
    if tree.height[root] != H:
        out.append(f"root height {tree.height[root]} != tree height {H}")

    for n in range(N):
        p = int(tree.parent[n])
        if p >= 0 and tree.height[p] != tree.height[n] + 1:
            out.append(f"node {n}: parent height {tree.height[p]} != height+1")
        kids = tree.children[n]
        if tree.height[n] == 0:
            if kids:
                out.append(f"leaf {n} has children")
            if tree.token_of_node[n] < 0:
                out.append(f"height-0 node {n} carries no token")
        else:
            if not 1 <= len(kids) <= K:
                out.append(f"node {n} has {len(kids)} children (want 1..{K})")
            if tree.token_of_node[n] >= 0:
                out.append(f"internal node {n} carries token {tree.token_of_node[n]}")
            labels = sorted(int(tree.child_label[c]) for c in kids)
            if labels != list(range(len(kids))):
                out.append(f"node {n} child labels {labels} not dense from 0")

    toks = tree.token_of_node[tree.token_of_node >= 0]
    if len(np.unique(toks)) != len(toks):
        out.append("two leaves map to the same token")
    V = len(toks)
    if sorted(toks.tolist()) != list(range(V)):
        out.append("leaf tokens are not exactly 0..V-1")

    # reachability => uniform depth given the height checks above
    seen = np.zeros(N, dtype=bool)
    stack = [root]
    while stack:
        n = stack.pop()
        seen[n] = True
        stack.extend(tree.children[n])
    if not seen.all():
        out.append(f"{int((~seen).sum())} nodes unreachable from root")

    if ratio_min is not None and ratio_max is not None and not out:
        counts = np.zeros(N, dtype=np.int64)
        for h in range(H + 1):
            for n in tree.level_index[h]:
                n = int(n)
                counts[n] = 1 if h == 0 else sum(counts[c] for c in tree.children[n])
        for n in range(N):
            cnt = counts[n]
            if tree.height[n] == 0 or cnt < K:
                continue
            lo = math.floor(ratio_min * cnt / K)
            hi = math.ceil(ratio_max * cnt / K)
            for c in tree.children[n]:
                if not lo <= counts[c] <= hi:
                    out.append(
                        f"split at node {n} (size {cnt}): child {c} size "
                        f"{counts[c]} outside [{lo}, {hi}]"
                    )
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_tree(tree: TokenTree, path) -> None:
    """Write the bit-exact text format; one line per node, ids dense."""
    with open(path, "w") as f:
        f.write(
            f"TDLM-TREE v1 K={tree.branching} H={tree.tree_height} "
            f"N={tree.node_count} V={tree.vocab_size}\n"
        )
        for n in range(tree.node_count):
            f.write(
                f"{n} {tree.parent[n]} {tree.child_label[n]} "
                f"{tree.height[n]} {tree.token_of_node[n]}\n"
            )


def load_tree(path) -> TokenTree:
    """Parse and fully validate a tree file, naming the offending line."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise TreeFormatError(f"{path}: empty file")
    head = lines[0].split()
    if len(head) != 6 or head[0] != "TDLM-TREE" or head[1] != "v1":
        raise TreeFormatError(f"{path}:1: malformed header {lines[0]!r}")
    try:
        fields = dict(kv.split("=") for kv in head[2:])
        K, H, N, V = (int(fields[k]) for k in ("K", "H", "N", "V"))
    except (ValueError, KeyError):
        raise TreeFormatError(f"{path}:1: malformed header {lines[0]!r}")
    if len(lines) - 1 != N:
        raise TreeFormatError(
            f"{path}:1: header says N={N} but file has {len(lines) - 1} node lines"
        )
    parent = np.empty(N, dtype=np.int64)
    label = np.empty(N, dtype=np.int64)
    height = np.empty(N, dtype=np.int64)
    token = np.empty(N, dtype=np.int64)
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != 5:
            raise TreeFormatError(f"{path}:{i}: expected 5 fields, got {len(parts)}")
        try:
            nid, p, lab, h, tok = (int(x) for x in parts)
        except ValueError:
            raise TreeFormatError(f"{path}:{i}: non-integer field in {line!r}")
        if nid != i - 2:
            raise TreeFormatError(f"{path}:{i}: node id {nid} out of order")
        if p >= N or p < -1:
            raise TreeFormatError(f"{path}:{i}: dangling parent reference {p}")
        parent[nid], label[nid], height[nid], token[nid] = p, lab, h, tok
    tree = TokenTree(
        parent=parent,
        child_label=label,
        height=height,
        token_of_node=token,
        branching=K,
    )
    if tree.tree_height != H:
        raise TreeFormatError(f"{path}:1: header H={H} but max height is {tree.tree_height}")
    if tree.vocab_size != V:
        raise TreeFormatError(f"{path}:1: header V={V} but found {tree.vocab_size} tokens")
    problems = validate(tree)
    if problems:
        raise TreeFormatError(f"{path}: invalid tree: {problems[0]}")
    return tree
