"""Tensorized smooth/decomposable probabilistic circuits.

A circuit is a topologically ordered list of blocks (leaf, product, sum) over
integer-valued variables with a shared vocabulary.  Leaf blocks hold
categorical tables; sum blocks reference a shared parameter registry so that
positions of a homogeneous model can tie their weights; product blocks are
Hadamard (elementwise) or Kronecker (all-pairs) with row-major flattening,
first child most significant.

All evaluation runs in log space with max-shifted log-sum-exp at sum blocks.
The flow pass computes expected edge counts (EM sufficient statistics) in one
backward sweep; batch items are processed in fixed-size chunks whose partial
tables are merged in chunk order, so results are bit-reproducible regardless
of the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import monarch
from .errors import ContractError, DataError, DimensionError
from .monarch import IdentityParam, SumParam

HADAMARD = "hadamard"
KRONECKER = "kronecker"

_NINF = -np.inf


@dataclass(frozen=True)
class LeafBlock:
    """size categorical nodes over one variable; rows of the shared table."""

    var: int
    size: int
    table_id: int


@dataclass(frozen=True)
class ProductBlock:
    kind: str  # HADAMARD | KRONECKER
    children: tuple[int, ...]
    size: int


@dataclass(frozen=True)
class SumBlock:
    children: tuple[int, ...]
    param_id: int
    size: int


Block = LeafBlock | ProductBlock | SumBlock


@dataclass
class CircuitGraph:
    """Layered DAG of blocks in topological order (children precede parents).

    `params` and `leaf_tables` are registries shared between blocks; several
    blocks referencing one id share (tie) that parameter.  `labels` carry the
    constructor-emitted block names used for product alignment.  Topology is
    immutable; parameters may be replaced between evaluation passes.
    """

    blocks: list[Block]
    root: int
    params: dict[int, SumParam]
    leaf_tables: dict[int, np.ndarray]
    vocab: int
    normalized: bool = False
    labels: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._scopes: list[frozenset[int]] | None = None

    @property
    def num_vars(self) -> int:
        return 1 + max((b.var for b in self.blocks if isinstance(b, LeafBlock)),
                       default=-1)

    def scopes(self) -> list[frozenset[int]]:
        if self._scopes is None:
            out: list[frozenset[int]] = []
            for b in self.blocks:
                if isinstance(b, LeafBlock):
                    out.append(frozenset((b.var,)))
                else:
                    s: set[int] = set()
                    for c in b.children:
                        s |= out[c]
                    out.append(frozenset(s))
            self._scopes = out
        return self._scopes

    def scope(self, idx: int) -> frozenset[int]:
        return self.scopes()[idx]

    def block_size(self, idx: int) -> int:
        return self.blocks[idx].size


def clone_graph(graph: CircuitGraph, copy_params: bool = True) -> CircuitGraph:
    params = {k: (monarch.copy_param(p) if copy_params else p)
              for k, p in graph.params.items()}
    tables = {k: (t.copy() if copy_params else t)
              for k, t in graph.leaf_tables.items()}
    return CircuitGraph(blocks=list(graph.blocks), root=graph.root, params=params,
                        leaf_tables=tables, vocab=graph.vocab,
                        normalized=graph.normalized,
                        labels=list(graph.labels) if graph.labels else None,
                        meta=dict(graph.meta))


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    kind: str  # structure | smoothness | decomposability | dimension | normalization
    block: int
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, kind: str, block: int, message: str) -> None:
        self.violations.append(Violation(kind, block, message))

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "\n".join(f"[{v.kind}] block {v.block}: {v.message}"
                         for v in self.violations)


NORM_TOL = 1e-9


def validate(graph: CircuitGraph) -> ValidationReport:
    """Collect every smoothness, decomposability, dimension, and (when the
    circuit is flagged normalized) row-normalization violation.  Violations
    are data, not exceptions."""
    rep = ValidationReport()
    n = len(graph.blocks)
    if not 0 <= graph.root < n:
        rep.add("structure", graph.root, "root index out of range")
        return rep
    scopes: list[set[int]] = []
    for idx, b in enumerate(graph.blocks):
        if isinstance(b, LeafBlock):
            scopes.append({b.var})
            tab = graph.leaf_tables.get(b.table_id)
            if tab is None:
                rep.add("structure", idx, f"missing leaf table {b.table_id}")
            elif tab.shape != (b.size, graph.vocab):
                rep.add("dimension", idx,
                        f"leaf table shape {tab.shape} != {(b.size, graph.vocab)}")
            else:
                if (tab < 0).any():
                    rep.add("normalization", idx, "negative leaf entries")
                if graph.normalized:
                    err = float(np.abs(tab.sum(axis=1) - 1.0).max())
                    if err > NORM_TOL:
                        rep.add("normalization", idx,
                                f"leaf rows deviate from 1 by {err:.3g}")
            continue
        bad_child = [c for c in b.children if not 0 <= c < idx]
        if bad_child or not b.children:
            scopes.append(set())
            rep.add("structure", idx, f"bad child references {bad_child}")
            continue
        child_scopes = [scopes[c] for c in b.children]
        if isinstance(b, ProductBlock):
            union: set[int] = set()
            overlap = False
            for s in child_scopes:
                if union & s:
                    overlap = True
                union |= s
            scopes.append(union)
            if overlap:
                rep.add("decomposability", idx,
                        "product children have overlapping scopes")
            if b.kind == HADAMARD:
                sizes = {graph.blocks[c].size for c in b.children}
                if sizes != {b.size}:
                    rep.add("dimension", idx,
                            f"Hadamard children sizes {sorted(sizes)} != {b.size}")
            elif b.kind == KRONECKER:
                prod = 1
                for c in b.children:
                    prod *= graph.blocks[c].size
                if prod != b.size:
                    rep.add("dimension", idx,
                            f"Kronecker size {prod} != declared {b.size}")
            else:
                rep.add("structure", idx, f"unknown product kind {b.kind!r}")
        else:  # SumBlock
            scopes.append(set(child_scopes[0]))
            if any(s != child_scopes[0] for s in child_scopes[1:]):
                rep.add("smoothness", idx, "sum children scopes differ")
            param = graph.params.get(b.param_id)
            if param is None:
                rep.add("structure", idx, f"missing parameter {b.param_id}")
                continue
            in_dim = sum(graph.blocks[c].size for c in b.children)
            if param.in_dim != in_dim:
                rep.add("dimension", idx,
                        f"param input dim {param.in_dim} != child total {in_dim}")
            if param.out_dim != b.size:
                rep.add("dimension", idx,
                        f"param output dim {param.out_dim} != block size {b.size}")
            if monarch.param_min_entry(param) < 0:
                rep.add("normalization", idx, "negative sum weights")
            if graph.normalized:
                err = monarch.row_stochastic_error(param)
                if err > NORM_TOL:
                    rep.add("normalization", idx,
                            f"sum rows deviate from 1 by {err:.3g}")
    return rep


# ---------------------------------------------------------------------------
# forward evaluation


def _check_assignments(graph: CircuitGraph, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2:
        raise DimensionError(f"assignments must be 2-d, got shape {X.shape}")
    if X.shape[1] < graph.num_vars:
        raise DimensionError(
            f"assignment covers {X.shape[1]} variables, circuit needs "
            f"{graph.num_vars}")
    if X.size and (X.min() < 0 or X.max() >= graph.vocab):
        raise DataError(
            f"assignment value out of vocabulary range [0, {graph.vocab})")
    return X.astype(np.int64, copy=False)


def _last_use(graph: CircuitGraph) -> list[int]:
    last = list(range(len(graph.blocks)))
    for idx, b in enumerate(graph.blocks):
        if not isinstance(b, LeafBlock):
            for c in b.children:
                last[c] = idx
    last[graph.root] = len(graph.blocks)
    return last


def _forward_log(graph: CircuitGraph, X: np.ndarray,
                 assigned: np.ndarray | None = None,
                 keep_cache: bool = False):
    """One bottom-up pass.  Returns (root log values (B,), sum caches or None).

    `assigned` is a per-variable boolean mask; unassigned variables are
    marginalized by pinning their leaf outputs at log 1 = 0.  Block value
    arrays are freed as soon as their last consumer has run.
    """
    B = X.shape[0]
    last = _last_use(graph)
    log_tables: dict[int, np.ndarray] = {}
    values: dict[int, np.ndarray] = {}
    caches: dict[int, object] | None = {} if keep_cache else None
    for idx, b in enumerate(graph.blocks):
        if isinstance(b, LeafBlock):
            if assigned is None or assigned[b.var]:
                lt = log_tables.get(b.table_id)
                if lt is None:
                    with np.errstate(divide="ignore"):
                        lt = np.log(graph.leaf_tables[b.table_id])
                    log_tables[b.table_id] = lt
                v = np.ascontiguousarray(lt[:, X[:, b.var]].T)
            else:
                v = np.zeros((B, b.size))
        elif isinstance(b, ProductBlock):
            if b.kind == HADAMARD:
                v = values[b.children[0]].copy()
                for c in b.children[1:]:
                    v += values[c]
            else:
                v = values[b.children[0]]
                for c in b.children[1:]:
                    cv = values[c]
                    v = (v[:, :, None] + cv[:, None, :]).reshape(B, -1)
        else:
            if len(b.children) == 1:
                logx = values[b.children[0]]
            else:
                logx = np.concatenate([values[c] for c in b.children], axis=1)
            v, cache = monarch.param_apply_log(graph.params[b.param_id], logx,
                                               keep_cache=keep_cache)
            if keep_cache:
                caches[idx] = cache
        values[idx] = v
        for c in (b.children if not isinstance(b, LeafBlock) else ()):
            if last[c] == idx:
                del values[c]
    root_val = values[graph.root]
    if root_val.shape[1] != 1:
        raise ContractError(
            f"root block has size {root_val.shape[1]}, expected 1")
    return root_val[:, 0], caches


def evaluate_log_batch(graph: CircuitGraph, X: np.ndarray,
                       chunk: int = 8192) -> np.ndarray:
    """log p(x) for every row of X (items x variables)."""
    X = _check_assignments(graph, X)
    outs = []
    for lo in range(0, X.shape[0], chunk):
        vals, _ = _forward_log(graph, X[lo:lo + chunk])
        outs.append(vals)
    if not outs:
        return np.zeros(0)
    return np.concatenate(outs)


def evaluate_log(graph: CircuitGraph, x: np.ndarray) -> float:
    """log p(x) for one full assignment (dense vector indexed by variable)."""
    x = np.asarray(x)
    if x.ndim != 1:
        raise DimensionError("evaluate_log expects a single assignment vector")
    return float(evaluate_log_batch(graph, x[None, :])[0])


def marginalize_log(graph: CircuitGraph, evidence: dict[int, int]) -> float:
    """log of the marginal probability of a partial assignment.

    Unassigned leaves are set to log 1; with empty evidence this returns the
    log normalization constant (0 for a normalized circuit)."""
    nv = graph.num_vars
    for var in evidence:
        if not 0 <= var < nv:
            raise DataError(f"evidence variable {var} outside root scope")
    row = np.zeros((1, nv), dtype=np.int64)
    assigned = np.zeros(nv, dtype=bool)
    for var, val in evidence.items():
        if not 0 <= val < graph.vocab:
            raise DataError(f"evidence value {val} out of vocabulary range")
        row[0, var] = val
        assigned[var] = True
    vals, _ = _forward_log(graph, row, assigned=assigned)
    return float(vals[0])


# ---------------------------------------------------------------------------
# sampling


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample(graph: CircuitGraph, seed) -> np.ndarray:
    """Draw one full assignment by top-down ancestral sampling."""
    return sample_batch(graph, 1, seed)[0]


def sample_batch(graph: CircuitGraph, count: int, seed) -> np.ndarray:
    """Draw `count` assignments; deterministic for a fixed seed."""
    if not graph.normalized:
        raise ContractError("sampling requires a normalized circuit")
    rng = _as_rng(seed)
    nv = graph.num_vars
    out = np.full((count, nv), -1, dtype=np.int64)
    child_offsets: dict[int, list[int]] = {}
    for idx, b in enumerate(graph.blocks):
        if isinstance(b, SumBlock):
            offs = [0]
            for c in b.children:
                offs.append(offs[-1] + graph.blocks[c].size)
            child_offsets[idx] = offs
    for item in range(count):
        stack: list[tuple[int, int]] = [(graph.root, 0)]
        while stack:
            idx, k = stack.pop()
            b = graph.blocks[idx]
            if isinstance(b, LeafBlock):
                p = graph.leaf_tables[b.table_id][k]
                out[item, b.var] = rng.choice(graph.vocab, p=p / p.sum())
            elif isinstance(b, ProductBlock):
                if b.kind == HADAMARD:
                    stack.extend((c, k) for c in b.children)
                else:
                    sizes = [graph.blocks[c].size for c in b.children]
                    for c, ck in zip(b.children, np.unravel_index(k, sizes)):
                        stack.append((c, int(ck)))
            else:
                row = monarch.param_row(graph.params[b.param_id], k)
                total = row.sum()
                if total <= 0:
                    raise ContractError(f"sum block {idx} row {k} has no mass")
                i = int(rng.choice(row.size, p=row / total))
                offs = child_offsets[idx]
                pos = int(np.searchsorted(offs, i, side="right")) - 1
                stack.append((b.children[pos], i - offs[pos]))
    if (out < 0).any():
        raise ContractError("sampling left variables unassigned")
    return out


# ---------------------------------------------------------------------------
# flows


@dataclass
class FlowTable:
    """Expected-count accumulators mirroring every trainable parameter.

    `sum_acc[param_id]` matches the parameter layout ((out, in) for dense,
    per-factor tensors for Monarch, per-layer matrices for tied Monarch);
    `leaf_acc[table_id]` is (nodes, vocab).  Items whose probability
    underflows to zero contribute nothing and are tallied in
    `zero_flow_items`.  Merging adds accumulators elementwise and is
    performed in a fixed chunk order by `flows`.
    """

    sum_acc: dict[int, object]
    leaf_acc: dict[int, np.ndarray]
    zero_flow_items: int = 0
    item_count: int = 0
    total_loglik: float = 0.0  # summed log p over the finite items

    @classmethod
    def zeros_for(cls, graph: CircuitGraph) -> "FlowTable":
        return cls(
            sum_acc={pid: monarch.zero_accumulator(p)
                     for pid, p in graph.params.items()},
            leaf_acc={tid: np.zeros_like(t)
                      for tid, t in graph.leaf_tables.items()},
        )

    def merge_(self, other: "FlowTable") -> None:
        for pid, acc in other.sum_acc.items():
            monarch.accumulate_(self.sum_acc[pid], acc)
        for tid, acc in other.leaf_acc.items():
            self.leaf_acc[tid] += acc
        self.zero_flow_items += other.zero_flow_items
        self.item_count += other.item_count
        self.total_loglik += other.total_loglik


def worker_count(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("MC_WORKERS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def _flow_chunk_bytes(graph: CircuitGraph) -> int:
    per_item = 64
    for b in graph.blocks:
        if isinstance(b, SumBlock):
            p = graph.params[b.param_id]
            if isinstance(p, monarch.MonarchParam):
                sizes = [p.in_dim]
                r_out = 1
                for t in range(p.depth):
                    sizes.append(sizes[-1] // p.in_dims[t] * r_out * p.out_dims[t])
                    r_out *= p.out_dims[t]
                per_item += 8 * sum(sizes)
            else:
                per_item += 8 * (p.in_dim + p.out_dim)
        per_item += 8 * b.size
    return per_item


def flow_chunk_size(graph: CircuitGraph, budget_bytes: int = 1 << 28) -> int:
    """Items per flow chunk; derived from the graph only, never from the
    worker count, so chunk boundaries (and hence sums) are reproducible."""
    return int(np.clip(budget_bytes // max(1, _flow_chunk_bytes(graph)), 8, 1024))


def _flow_one_chunk(graph: CircuitGraph, X: np.ndarray) -> FlowTable:
    table = FlowTable.zeros_for(graph)
    logroot, caches = _forward_log(graph, X, keep_cache=True)
    finite = np.isfinite(logroot)
    table.zero_flow_items = int((~finite).sum())
    table.item_count = X.shape[0]
    table.total_loglik = float(logroot[finite].sum())
    if not finite.all():
        keep = np.nonzero(finite)[0]
        if keep.size == 0:
            return table
        X = X[keep]
        # recompute caches on the surviving items only
        logroot, caches = _forward_log(graph, X, keep_cache=True)
    B = X.shape[0]
    flow: dict[int, np.ndarray] = {graph.root: np.zeros((B, 1))}

    def send(child: int, logf: np.ndarray) -> None:
        cur = flow.get(child)
        flow[child] = logf if cur is None else np.logaddexp(cur, logf)

    for idx in range(len(graph.blocks) - 1, -1, -1):
        logf = flow.pop(idx, None)
        if logf is None:
            continue
        b = graph.blocks[idx]
        if isinstance(b, LeafBlock):
            f = np.exp(logf)  # (B, size)
            acc_t = np.zeros((graph.vocab, b.size))
            np.add.at(acc_t, X[:, b.var], f)
            table.leaf_acc[b.table_id] += acc_t.T
        elif isinstance(b, ProductBlock):
            if b.kind == HADAMARD:
                for c in b.children:
                    send(c, logf)
            else:
                sizes = [graph.blocks[c].size for c in b.children]
                shaped = logf.reshape(B, *sizes)
                for axis, c in enumerate(b.children):
                    other = tuple(a + 1 for a in range(len(sizes)) if a != axis)
                    with np.errstate(divide="ignore"):
                        m = shaped.max(axis=other, keepdims=True)
                        ms = np.where(np.isfinite(m), m, 0.0)
                        part = np.log(np.exp(shaped - ms).sum(axis=other)) \
                            + np.squeeze(m, axis=other)
                    send(c, part)
        else:
            param = graph.params[b.param_id]
            logf_in, edges = monarch.param_backward_log(param, caches[idx], logf)
            monarch.accumulate_(table.sum_acc[b.param_id], edges)
            off = 0
            for c in b.children:
                size = graph.blocks[c].size
                send(c, logf_in[:, off:off + size])
                off += size
    return table


def flows(graph: CircuitGraph, X: np.ndarray, workers: int | None = None,
          chunk: int | None = None) -> FlowTable:
    """Expected edge counts over a batch of full assignments.

    For each sum edge (n, c) the accumulator receives
    sum_x theta_{c|n} p_c(x) (d p_root / d p_n)(x) / p_root(x);
    leaf accumulators count (node, symbol) posteriors analogously.
    """
    if not graph.normalized:
        raise ContractError("flows require a normalized circuit")
    X = _check_assignments(graph, X)
    if X.shape[0] == 0:
        raise ContractError("flows require a non-empty batch")
    if X.shape[1] < graph.num_vars:
        raise DimensionError("flows require full assignments")
    size = chunk or flow_chunk_size(graph)
    chunks = [X[lo:lo + size] for lo in range(0, X.shape[0], size)]
    nworkers = worker_count(workers)
    total = FlowTable.zeros_for(graph)
    if nworkers == 1 or len(chunks) == 1:
        parts = (_flow_one_chunk(graph, c) for c in chunks)
    else:
        pool = ThreadPoolExecutor(max_workers=nworkers)
        try:
            parts = list(pool.map(lambda c: _flow_one_chunk(graph, c), chunks))
        finally:
            pool.shutdown(wait=True)
    for part in parts:
        total.merge_(part)
    return total
