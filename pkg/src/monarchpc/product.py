"""Circuit multiplication: materialize products of compatible circuits.

Multiplying d structurally aligned circuits produces a circuit over the same
variables whose value is exactly the product of the factor values.  Aligned
leaf blocks multiply their categorical tables across the latent axes
(Kronecker state order, first factor most significant); aligned Hadamard
blocks compose index-wise; aligned sum blocks become tied depth-d Monarch
factorizations whose materialization is the Kronecker product of the factor
weight matrices.  The result is unnormalized; `renormalize` turns it back
into a locally normalized circuit representing the same distribution up to
the global constant.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import monarch
from .circuit import (HADAMARD, CircuitGraph, LeafBlock, ProductBlock,
                      SumBlock, clone_graph)
from .errors import ContractError, DataError
from .monarch import DenseParam, IdentityParam, MonarchParam


@dataclass(frozen=True)
class Incompatibility:
    block: int | None
    reason: str


@dataclass
class IncompatibilityReport:
    problems: list[Incompatibility]

    def __str__(self) -> str:
        return "; ".join(f"block {p.block}: {p.reason}" for p in self.problems)


def _skeleton(graph: CircuitGraph) -> tuple:
    rows = []
    scopes = graph.scopes()
    for idx, b in enumerate(graph.blocks):
        if isinstance(b, LeafBlock):
            rows.append(("leaf", b.var, None, None))
        elif isinstance(b, ProductBlock):
            rows.append(("product", b.kind, b.children, tuple(sorted(scopes[idx]))))
        else:
            rows.append(("sum", None, b.children, tuple(sorted(scopes[idx]))))
    return tuple(rows)


@dataclass(frozen=True)
class CompatibilityCertificate:
    """Positional block alignment across structurally identical circuits."""

    num_circuits: int
    block_count: int
    fingerprint: tuple


def check_compatible(circuits: list[CircuitGraph]):
    """Certificate when all circuits share one block-level skeleton (same
    topology, scopes, product kinds); otherwise an IncompatibilityReport."""
    if len(circuits) < 2:
        raise ContractError("need at least two circuits to multiply")
    base = circuits[0]
    base_scope = frozenset().union(*base.scopes()) if base.blocks else frozenset()
    for g in circuits[1:]:
        scope = frozenset().union(*g.scopes()) if g.blocks else frozenset()
        if scope != base_scope:
            raise DataError("circuits range over different variable sets")
        if g.vocab != base.vocab:
            raise DataError("circuits have different vocabularies")
    problems: list[Incompatibility] = []
    skeletons = [_skeleton(g) for g in circuits]
    counts = {len(s) for s in skeletons}
    if len(counts) > 1:
        problems.append(Incompatibility(None,
                                        f"block counts differ: {sorted(counts)}"))
        return IncompatibilityReport(problems)
    for idx in range(len(skeletons[0])):
        rows = [s[idx] for s in skeletons]
        if any(r != rows[0] for r in rows[1:]):
            kinds = [r[0] for r in rows]
            if len(set(kinds)) > 1:
                reason = f"block kinds differ: {kinds}"
            elif rows[0][0] == "leaf":
                reason = f"leaf variables differ: {[r[1] for r in rows]}"
            elif any(r[3] != rows[0][3] for r in rows):
                reason = f"scope split differs: {[r[3] for r in rows]}"
            else:
                reason = f"structure differs: {rows}"
            problems.append(Incompatibility(idx, reason))
            break
    if problems:
        return IncompatibilityReport(problems)
    return CompatibilityCertificate(num_circuits=len(circuits),
                                    block_count=len(skeletons[0]),
                                    fingerprint=skeletons[0])


def multiply(circuits: list[CircuitGraph],
             certificate: CompatibilityCertificate) -> CircuitGraph:
    """Product circuit with tied Monarch sum blocks; evaluates to the exact
    product of the factor circuits on every assignment (unnormalized)."""
    if not isinstance(certificate, CompatibilityCertificate):
        raise ContractError("multiply requires a compatibility certificate")
    if (certificate.num_circuits != len(circuits)
            or certificate.fingerprint != _skeleton(circuits[0])):
        raise ContractError("certificate does not match the given circuits")
    for g in circuits:
        for pid, p in g.params.items():
            if not isinstance(p, DenseParam):
                raise ContractError(
                    "multiply supports dense sum blocks only; "
                    f"param {pid} is {p.kind}")

    base = circuits[0]
    blocks: list = []
    params: dict[int, monarch.SumParam] = {}
    tables: dict[int, np.ndarray] = {}
    param_key: dict[tuple, int] = {}
    table_key: dict[tuple, int] = {}

    for idx in range(len(base.blocks)):
        parts = [g.blocks[idx] for g in circuits]
        b0 = parts[0]
        if isinstance(b0, LeafBlock):
            key = tuple(b.table_id for b in parts)
            tid = table_key.get(key)
            if tid is None:
                tab = circuits[0].leaf_tables[parts[0].table_id]
                for g, b in zip(circuits[1:], parts[1:]):
                    other = g.leaf_tables[b.table_id]
                    tab = (tab[:, None, :] * other[None, :, :]).reshape(
                        -1, base.vocab)
                tid = len(tables)
                tables[tid] = tab
                table_key[key] = tid
            size = int(np.prod([b.size for b in parts]))
            blocks.append(LeafBlock(var=b0.var, size=size, table_id=tid))
        elif isinstance(b0, ProductBlock):
            if b0.kind != HADAMARD:
                raise ContractError(
                    "multiply supports Hadamard product blocks only")
            size = int(np.prod([b.size for b in parts]))
            blocks.append(ProductBlock(kind=HADAMARD, children=b0.children,
                                       size=size))
        else:
            if any(len(b.children) != 1 for b in parts):
                raise ContractError(
                    "multiply supports single-child sum blocks only")
            key = tuple(b.param_id for b in parts)
            pid = param_key.get(key)
            if pid is None:
                mats = [g.params[b.param_id].weight
                        for g, b in zip(circuits, parts)]
                pid = len(params)
                params[pid] = monarch.tied_monarch(mats)
                param_key[key] = pid
            size = int(np.prod([b.size for b in parts]))
            blocks.append(SumBlock(children=b0.children, param_id=pid,
                                   size=size))

    meta = {k: v for k, v in base.meta.items()
            if k in ("arch", "length", "homogeneous", "parent")}
    meta["product_of"] = len(circuits)
    return CircuitGraph(blocks=blocks, root=base.root, params=params,
                        leaf_tables=tables, vocab=base.vocab, normalized=False,
                        labels=list(base.labels) if base.labels else None,
                        meta=meta)


def untie(graph: CircuitGraph) -> CircuitGraph:
    """Replace tied factorizations with independent full-tensor copies.

    Evaluation is unchanged (bitwise); afterwards each factor slice has its
    own storage so EM can move them apart."""
    out = clone_graph(graph, copy_params=True)
    for pid, p in out.params.items():
        if isinstance(p, MonarchParam) and p.tied:
            out.params[pid] = monarch.untie_param(p)
    return out


# scales this close to 1 are treated as exact, keeping parameters bit-identical
TRIVIAL_LOG_MASS = 1e-10


def renormalize(graph: CircuitGraph) -> CircuitGraph:
    """Locally renormalize every sum row and leaf row, pushing mass
    corrections upward so the distribution changes only by the global
    constant.

    Node masses (per-block normalization integrals) are computed in log
    space in one bottom-up sweep; each sum map is conjugated by its
    input/output mass diagonals, which Monarch structure absorbs into its
    first and last factors.  A parameter shared by blocks whose local scales
    genuinely differ (as in products of homogeneous chains) is unshared
    first: no single stochastic parameter can absorb position-dependent
    corrections.  Structurally dead rows (zero mass) are replaced by uniform
    rows, counted in ``meta['renormalize_dead_rows']``, and warned about.
    """
    out = clone_graph(graph, copy_params=True)
    dead_rows = 0

    log_mass: dict[int, np.ndarray] = {}
    with np.errstate(divide="ignore"):
        for idx, b in enumerate(out.blocks):
            if isinstance(b, LeafBlock):
                log_mass[idx] = np.log(out.leaf_tables[b.table_id].sum(axis=1))
            elif isinstance(b, ProductBlock):
                if b.kind == HADAMARD:
                    m = log_mass[b.children[0]].copy()
                    for c in b.children[1:]:
                        m += log_mass[c]
                else:
                    m = log_mass[b.children[0]]
                    for c in b.children[1:]:
                        m = (m[:, None] + log_mass[c][None, :]).reshape(-1)
                log_mass[idx] = m
            else:
                log_in = np.concatenate([log_mass[c] for c in b.children])
                log_out, _ = monarch.param_apply_log(out.params[b.param_id],
                                                     log_in[None, :])
                log_mass[idx] = log_out[0]

    for tid, tab in out.leaf_tables.items():
        sums = tab.sum(axis=1, keepdims=True)
        if np.abs(sums - 1.0).max() <= TRIVIAL_LOG_MASS:
            continue
        zero = sums[:, 0] <= 0
        if zero.any():
            dead_rows += int(zero.sum())
            tab = np.where(zero[:, None], 1.0 / tab.shape[1], tab)
            sums = tab.sum(axis=1, keepdims=True)
        out.leaf_tables[tid] = tab / sums

    # group rescale jobs per parameter; unshare when scales differ
    jobs: dict[int, list[tuple[int, np.ndarray, np.ndarray]]] = {}
    for idx, b in enumerate(out.blocks):
        if not isinstance(b, SumBlock):
            continue
        log_in = np.concatenate([log_mass[c] for c in b.children])
        jobs.setdefault(b.param_id, []).append((idx, log_in, log_mass[idx]))

    def trivial(job) -> bool:
        _, li, lo = job
        return (np.isfinite(li).all() and np.isfinite(lo).all()
                and float(np.abs(li).max(initial=0.0)) <= TRIVIAL_LOG_MASS
                and float(np.abs(lo).max(initial=0.0)) <= TRIVIAL_LOG_MASS)

    next_pid = max(out.params, default=-1) + 1
    reassign: dict[int, int] = {}
    for pid, job_list in jobs.items():
        active = [j for j in job_list if not trivial(j)]
        if not active:
            continue
        groups: dict[bytes, list] = {}
        for j in active:
            groups.setdefault(j[1].tobytes() + j[2].tobytes(), []).append(j)
        group_list = list(groups.values())
        keep_original = len(active) == len(job_list) and len(group_list) == 1
        for k, grp in enumerate(group_list):
            if keep_original and k == 0:
                target = pid
            else:
                target = next_pid
                out.params[target] = monarch.copy_param(out.params[pid])
                next_pid += 1
                for idx, _, _ in grp:
                    reassign[idx] = target
            dead_rows += _rescale_param(out, target, grp[0][1], grp[0][2])

    if reassign:
        blocks = list(out.blocks)
        for idx, pid in reassign.items():
            b = blocks[idx]
            blocks[idx] = SumBlock(children=b.children, param_id=pid, size=b.size)
        out.blocks = blocks
        used = {b.param_id for b in blocks if isinstance(b, SumBlock)}
        for pid in list(out.params):
            if pid not in used:
                del out.params[pid]

    out.normalized = True
    out.meta["renormalize_dead_rows"] = dead_rows
    if dead_rows:
        warnings.warn(f"renormalize replaced {dead_rows} dead rows by uniform",
                      stacklevel=2)
    return out


def _rescale_param(out: CircuitGraph, pid: int, log_in: np.ndarray,
                   log_out: np.ndarray) -> int:
    """Conjugate one sum parameter by diag(exp(log_in)) / diag(exp(log_out))
    in place; returns the number of dead rows replaced by uniform."""
    param = out.params[pid]
    if isinstance(param, IdentityParam):
        return 0  # identity masses match exactly; nothing to scale
    if isinstance(param, MonarchParam) and param.tied:
        param = monarch.untie_param(param)
        out.params[pid] = param
    finite_in = np.isfinite(log_in)
    finite_out = np.isfinite(log_out)
    center = float(np.mean(log_in[finite_in])) if finite_in.any() else 0.0
    in_scale = np.where(finite_in, np.exp(log_in - center), 0.0)
    out_scale = np.where(finite_out, np.exp(center - log_out), 0.0)
    monarch.scale_input_states_(param, in_scale)
    monarch.scale_output_states_(param, out_scale)
    dead = int((~finite_out).sum())
    if isinstance(param, DenseParam):
        w = param.weight
        if dead:
            w = np.where(~finite_out[:, None], 1.0 / w.shape[1], w)
        sums = w.sum(axis=1, keepdims=True)
        param.weight = w / np.where(sums > 0, sums, 1.0)
    else:
        monarch.rebalance_slices_(param)
        if dead:
            # a dead output state maps 1:1 to a final-stage slice; a uniform
            # slice there composes with the stochastic earlier stages into a
            # valid stochastic row
            f = param.factors[-1]
            moved = np.moveaxis(f, 0, -1)  # (n_d, m_1..m_{d-1}, m_d) view
            mask = (~finite_out).reshape(param.out_dims)
            n_d = param.in_dims[-1]
            moved[:, mask] = 1.0 / n_d
    return dead
