"""Circuit builders: HMMs over sequences, hidden Chow-Liu trees over patches,
and posterior-mass pruning of hidden states.

Both builders emit canonical block skeletons with stable labels, so circuits
built from the same spec (at any hidden size) align block-for-block and can
be multiplied.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import monarch
from .circuit import (HADAMARD, CircuitGraph, LeafBlock, ProductBlock,
                      SumBlock, flows)
from .errors import ConfigError, ContractError, DataError
from .monarch import DenseParam, MonarchParam
from .schedule import plan_schedule


@dataclass(frozen=True)
class HmmSpec:
    """Homogeneous (optionally untied) hidden Markov model over a token chunk.

    The circuit is compiled suffix-first: position p carries a leaf block, a
    Hadamard product joining it with the tail message, and a transition sum
    block of size hidden x hidden; a 1 x hidden prior sum block closes the
    root.  `sum_kind` selects dense or Monarch transitions.
    """

    length: int
    hidden: int
    vocab: int
    sum_kind: str = "dense"  # dense | monarch
    depth: int | None = None
    base: int | None = None
    homogeneous: bool = True

    def __post_init__(self):
        if self.length < 1 or self.hidden < 1 or self.vocab < 2:
            raise ConfigError("need length >= 1, hidden >= 1, vocab >= 2")
        if self.sum_kind not in ("dense", "monarch"):
            raise ConfigError(f"unknown sum kind {self.sum_kind!r}")

    def with_hidden(self, hidden: int, sum_kind: str | None = None) -> "HmmSpec":
        return replace(self, hidden=hidden,
                       sum_kind=sum_kind if sum_kind else self.sum_kind)


def _transition_param(rng, spec_kind, hidden, depth, base):
    if spec_kind == "dense" or hidden < 4:
        return monarch.random_dense(rng, hidden, hidden)
    sched = plan_schedule(hidden, depth=depth, base=base)
    return monarch.random_monarch(rng, sched.dims, sched.dims)


def build_hmm(spec: HmmSpec, seed=0) -> CircuitGraph:
    """Random normalized HMM circuit for the spec; validates clean."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n, h, V = spec.length, spec.hidden, spec.vocab

    def emission():
        t = rng.random((h, V)) + 0.1
        t /= t.sum(axis=1, keepdims=True)
        return t

    tables: dict[int, np.ndarray] = {}
    params: dict[int, monarch.SumParam] = {}
    blocks: list = []
    labels: list[str] = []

    if spec.homogeneous:
        tables[0] = emission()
        if n > 1:
            params[0] = _transition_param(rng, spec.sum_kind, h, spec.depth, spec.base)

    def table_for(pos: int) -> int:
        if spec.homogeneous:
            return 0
        tables[pos] = emission()
        return pos

    def trans_for(pos: int) -> int:
        if spec.homogeneous:
            return 0
        params[pos] = _transition_param(rng, spec.sum_kind, h, spec.depth, spec.base)
        return pos

    tail = None  # block index of the current suffix message
    for pos in range(n - 1, -1, -1):
        blocks.append(LeafBlock(var=pos, size=h, table_id=table_for(pos)))
        labels.append(f"leaf:{pos}")
        leaf_idx = len(blocks) - 1
        if tail is None:
            msg = leaf_idx
        else:
            blocks.append(SumBlock(children=(tail,), param_id=trans_for(pos + 1),
                                   size=h))
            labels.append(f"trans:{pos + 1}")
            blocks.append(ProductBlock(kind=HADAMARD,
                                       children=(leaf_idx, len(blocks) - 1),
                                       size=h))
            labels.append(f"mix:{pos}")
            msg = len(blocks) - 1
        tail = msg

    prior_id = max(params, default=-1) + 1
    params[prior_id] = monarch.random_dense(rng, 1, h)
    blocks.append(SumBlock(children=(tail,), param_id=prior_id, size=1))
    labels.append("prior")
    return CircuitGraph(blocks=blocks, root=len(blocks) - 1, params=params,
                        leaf_tables=tables, vocab=V, normalized=True,
                        labels=labels,
                        meta={"arch": "hmm", "length": n, "hidden": h,
                              "sum_kind": spec.sum_kind,
                              "homogeneous": spec.homogeneous})


def hmm_matrices(graph: CircuitGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(prior (h,), transition (h, h), emission (h, V)) of a homogeneous dense
    HMM circuit; convenience for oracle comparisons."""
    if graph.meta.get("arch") != "hmm" or not graph.meta.get("homogeneous"):
        raise ContractError("not a homogeneous HMM circuit")
    pi = monarch.materialize(graph.params[max(graph.params)])[0]
    h = graph.meta["hidden"]
    if graph.meta["length"] > 1:
        T = monarch.materialize(graph.params[0])
    else:
        T = np.eye(h)
    return pi, T, graph.leaf_tables[0].copy()


# ---------------------------------------------------------------------------
# Chow-Liu trees


@dataclass(frozen=True)
class ChowLiuTree:
    """Spanning tree over variables, rooted at 0, from pairwise MI."""

    num_vars: int
    parent: tuple[int, ...]  # -1 at the root
    root: int
    mi_weights: tuple[float, ...]  # weight of the edge to parent; 0 at root

    def __post_init__(self):
        if len(self.parent) != self.num_vars:
            raise ConfigError("parent array length mismatch")
        if self.parent[self.root] != -1:
            raise ConfigError("root must have parent -1")

    def children(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.num_vars)]
        for v, p in enumerate(self.parent):
            if p >= 0:
                out[p].append(v)
        return out


def mutual_information_matrix(X: np.ndarray, vocab: int) -> np.ndarray:
    """Pairwise MI with Laplace-1 smoothed empirical joints (diagonal 0)."""
    X = np.asarray(X)
    n_items, n_vars = X.shape
    mi = np.zeros((n_vars, n_vars))
    denom = n_items + vocab * vocab
    for i in range(n_vars):
        for j in range(i + 1, n_vars):
            idx = X[:, i].astype(np.int64) * vocab + X[:, j]
            joint = (np.bincount(idx, minlength=vocab * vocab)
                     .reshape(vocab, vocab) + 1.0) / denom
            pi = joint.sum(axis=1, keepdims=True)
            pj = joint.sum(axis=0, keepdims=True)
            val = float((joint * (np.log(joint) - np.log(pi) - np.log(pj))).sum())
            mi[i, j] = mi[j, i] = max(val, 0.0)
    return mi


def chow_liu(X: np.ndarray, vocab: int) -> ChowLiuTree:
    """Maximum-MI spanning tree; ties break toward the lexicographically
    smallest (i, j) edge, root is variable 0."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] < 2:
        raise DataError("need a 2-d dataset with at least 2 variables")
    if X.shape[0] < 1:
        raise DataError("need at least one sample")
    n_vars = X.shape[1]
    mi = mutual_information_matrix(X, vocab)
    edges = sorted(((i, j) for i in range(n_vars) for j in range(i + 1, n_vars)),
                   key=lambda e: (-mi[e], e))
    group = list(range(n_vars))

    def find(a: int) -> int:
        while group[a] != a:
            group[a] = group[group[a]]
            a = group[a]
        return a

    adj: list[list[int]] = [[] for _ in range(n_vars)]
    picked = 0
    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            group[ri] = rj
            adj[i].append(j)
            adj[j].append(i)
            picked += 1
            if picked == n_vars - 1:
                break
    parent = [-2] * n_vars
    parent[0] = -1
    stack = [0]
    while stack:
        u = stack.pop()
        for v in sorted(adj[u], reverse=True):
            if parent[v] == -2:
                parent[v] = u
                stack.append(v)
    weights = tuple(0.0 if p < 0 else float(mi[v, p])
                    for v, p in enumerate(parent))
    return ChowLiuTree(num_vars=n_vars, parent=tuple(parent), root=0,
                       mi_weights=weights)


# ---------------------------------------------------------------------------
# HCLT


@dataclass(frozen=True)
class HcltSpec:
    """Latent-tree circuit: one h-state latent per tree node, leaf
    categoricals per variable, sum blocks along tree edges."""

    tree: ChowLiuTree
    hidden: int
    vocab: int
    sum_kind: str = "dense"
    depth: int | None = None
    base: int | None = None

    def with_hidden(self, hidden: int, sum_kind: str | None = None) -> "HcltSpec":
        return replace(self, hidden=hidden,
                       sum_kind=sum_kind if sum_kind else self.sum_kind)


def build_hclt(spec: HcltSpec, seed=0) -> CircuitGraph:
    """Compile the latent tree bottom-up; children messages pass through edge
    sum blocks and join the node's leaf in a Hadamard block."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tree, h, V = spec.tree, spec.hidden, spec.vocab
    children = tree.children()
    blocks: list = []
    labels: list[str] = []
    params: dict[int, monarch.SumParam] = {}
    tables: dict[int, np.ndarray] = {}
    message: dict[int, int] = {}

    order: list[int] = []
    stack = [tree.root]
    while stack:  # preorder, then reversed for bottom-up
        u = stack.pop()
        order.append(u)
        stack.extend(reversed(children[u]))

    for u in reversed(order):
        t = rng.random((h, V)) + 0.1
        t /= t.sum(axis=1, keepdims=True)
        tables[u] = t
        blocks.append(LeafBlock(var=u, size=h, table_id=u))
        labels.append(f"leaf:{u}")
        parts = [len(blocks) - 1]
        for c in children[u]:
            params[c] = _transition_param(rng, spec.sum_kind, h, spec.depth,
                                          spec.base)
            blocks.append(SumBlock(children=(message[c],), param_id=c, size=h))
            labels.append(f"edge:{c}")
            parts.append(len(blocks) - 1)
        if len(parts) == 1:
            message[u] = parts[0]
        else:
            blocks.append(ProductBlock(kind=HADAMARD, children=tuple(parts),
                                       size=h))
            labels.append(f"mix:{u}")
            message[u] = len(blocks) - 1

    prior_id = tree.num_vars
    params[prior_id] = monarch.random_dense(rng, 1, h)
    blocks.append(SumBlock(children=(message[tree.root],), param_id=prior_id,
                           size=1))
    labels.append("prior")
    return CircuitGraph(blocks=blocks, root=len(blocks) - 1, params=params,
                        leaf_tables=tables, vocab=V, normalized=True,
                        labels=labels,
                        meta={"arch": "hclt", "hidden": h,
                              "sum_kind": spec.sum_kind,
                              "parent": list(tree.parent)})


# ---------------------------------------------------------------------------
# pruning


def prune_hidden_states(graph: CircuitGraph, keep_fraction: float,
                        calibration: np.ndarray,
                        workers: int | None = None) -> CircuitGraph:
    """Deactivate low-posterior hidden states, layer by layer.

    States of every multi-output sum parameter are ranked by their average
    flow mass on the calibration batch (ties keep the lower index).  The
    lowest (1 - keep_fraction) states have their producing rows zeroed, every
    consumer drops the dead inputs, and surviving rows are renormalized
    exactly, so the result stays a distribution over the retained states.
    At least one state per layer always survives.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError(f"keep fraction {keep_fraction} outside (0, 1]")
    if keep_fraction == 1.0:
        return clone_for_prune(graph)
    table = flows(graph, calibration, workers=workers)
    out = clone_for_prune(graph)

    dead_by_param: dict[int, np.ndarray] = {}
    for pid, param in out.params.items():
        if isinstance(param, monarch.IdentityParam) or param.out_dim <= 1:
            continue
        mass = monarch.output_state_mass(param, table.sum_acc[pid])
        keep = max(1, int(np.floor(keep_fraction * param.out_dim + 1e-9)))
        if keep >= param.out_dim:
            continue
        order = np.argsort(-mass, kind="stable")
        dead_by_param[pid] = np.sort(order[keep:])

    if not dead_by_param:
        return out

    # dead masks per block: sum outputs seed them, products propagate them
    dead_block: dict[int, np.ndarray] = {}
    for idx, b in enumerate(out.blocks):
        if isinstance(b, SumBlock) and b.param_id in dead_by_param:
            mask = np.zeros(b.size, dtype=bool)
            mask[dead_by_param[b.param_id]] = True
            dead_block[idx] = mask
        elif isinstance(b, ProductBlock):
            masks = [dead_block.get(c) for c in b.children]
            if all(m is None for m in masks):
                continue
            if b.kind == HADAMARD:
                acc = np.zeros(b.size, dtype=bool)
                for m in masks:
                    if m is not None:
                        acc |= m
                dead_block[idx] = acc
            else:
                sizes = [out.blocks[c].size for c in b.children]
                acc = np.zeros(sizes, dtype=bool)
                for axis, m in enumerate(masks):
                    if m is not None:
                        shape = [1] * len(sizes)
                        shape[axis] = sizes[axis]
                        acc |= m.reshape(shape)
                dead_block[idx] = acc.reshape(-1)

    input_dead: dict[int, np.ndarray] = {}
    for idx, b in enumerate(out.blocks):
        if not isinstance(b, SumBlock):
            continue
        segs = [dead_block.get(c, np.zeros(out.blocks[c].size, dtype=bool))
                for c in b.children]
        mask = np.concatenate(segs)
        if not mask.any():
            continue
        cur = input_dead.get(b.param_id)
        input_dead[b.param_id] = mask if cur is None else (cur | mask)

    for pid, dead in dead_by_param.items():
        monarch.zero_output_states_(out.params[pid], dead)
    for pid, mask in input_dead.items():
        param = out.params[pid]
        monarch.zero_input_states_(param, np.nonzero(mask)[0])
    for pid in set(dead_by_param) | set(input_dead):
        param = out.params[pid]
        masses = monarch.row_masses(param)
        with np.errstate(divide="ignore"):
            scale = np.where(masses > 0, 1.0 / np.where(masses > 0, masses, 1.0),
                             0.0)
        monarch.scale_output_states_(param, scale)
    out.meta["pruned_states"] = {int(pid): [int(v) for v in dead]
                                 for pid, dead in dead_by_param.items()}
    return out


def clone_for_prune(graph: CircuitGraph) -> CircuitGraph:
    from .circuit import clone_graph
    return clone_graph(graph, copy_params=True)
