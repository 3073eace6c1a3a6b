"""Sum-block parameterizations: dense, generalized Monarch, and identity maps.

A sum block computes a non-negative linear map from the concatenated child
nodes to its own nodes.  Three parameterizations are supported:

* ``DenseParam``: an explicit (out x in) weight matrix.
* ``MonarchParam``: a depth-d factorization.  Inputs are viewed as a tensor of
  shape ``(n_1, ..., n_d)`` flattened row-major (first index most
  significant).  Stage ``t`` contracts the leading axis with factor ``A^t`` of
  shape ``(m_t, n_t, n_{t+1}, ..., n_d, m_1, ..., m_{t-1})`` -- a batched
  matrix product over all trailing axes -- and then left-shifts the result
  (leading axis moves to the back).  After d stages the output is laid out as
  ``(m_1, ..., m_d)``.  The materialized matrix entry is
  ``M[j, i] = prod_t A^t[j_t, i_t, i_{t+1:d}, j_{1:t-1}]``.
  With ``tied=True`` every trailing slice of each factor shares one
  ``(m_t, n_t)`` matrix and the materialization is exactly the Kronecker
  product of those matrices.
* ``IdentityParam``: a fixed pass-through (used for plumbing, not trained).

Parameters are stored in linear space; log-space application takes logs on
the fly, mapping exact zeros to -inf.  Normalization is per row for dense
weights and per contraction slice ``A^t[j, :, r]`` for Monarch factors; a
product of slice-stochastic stages is row-stochastic as a whole map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError

PARAM_FLOOR = 1e-8

_NINF = -np.inf


@dataclass
class DenseParam:
    """Explicit weight matrix, shape (out, in), non-negative."""

    weight: np.ndarray

    @property
    def kind(self) -> str:
        return "dense"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class MonarchParam:
    """Depth-d Monarch factorization.

    ``factors[t]`` has the full shape
    ``(m_t, n_t, n_{t+1}, ..., n_d, m_1, ..., m_{t-1})``, or ``(m_t, n_t)``
    when ``tied`` (one shared slice per stage; materializes to the Kronecker
    product of the slices).
    """

    in_dims: tuple[int, ...]
    out_dims: tuple[int, ...]
    factors: list[np.ndarray] = field(repr=False)
    tied: bool = False

    def __post_init__(self):
        self.in_dims = tuple(int(v) for v in self.in_dims)
        self.out_dims = tuple(int(v) for v in self.out_dims)
        if len(self.in_dims) != len(self.out_dims) or len(self.in_dims) < 1:
            raise DimensionError("in_dims and out_dims must have equal positive depth")
        if len(self.factors) != len(self.in_dims):
            raise DimensionError("one factor tensor per layer required")
        for t, f in enumerate(self.factors):
            want = (self.out_dims[t], self.in_dims[t]) if self.tied else factor_shape(
                t, self.in_dims, self.out_dims)
            if f.shape != want:
                raise DimensionError(
                    f"factor {t} has shape {f.shape}, expected {want}")

    @property
    def kind(self) -> str:
        return "monarch_tied" if self.tied else "monarch"

    @property
    def depth(self) -> int:
        return len(self.in_dims)

    @property
    def in_dim(self) -> int:
        return int(np.prod(self.in_dims))

    @property
    def out_dim(self) -> int:
        return int(np.prod(self.out_dims))


@dataclass
class IdentityParam:
    """Fixed identity map on `size` nodes."""

    size: int

    @property
    def kind(self) -> str:
        return "identity"

    @property
    def in_dim(self) -> int:
        return self.size

    @property
    def out_dim(self) -> int:
        return self.size


SumParam = DenseParam | MonarchParam | IdentityParam


def factor_shape(t: int, in_dims: tuple[int, ...], out_dims: tuple[int, ...]) -> tuple[int, ...]:
    """Full (untied) shape of stage-t factor, 0-indexed t."""
    return (out_dims[t], in_dims[t]) + tuple(in_dims[t + 1:]) + tuple(out_dims[:t])


def full_factors(param: MonarchParam) -> list[np.ndarray]:
    """Stage factors at full shape; tied factors are broadcast views (no copy)."""
    if not param.tied:
        return param.factors
    out = []
    for t, f in enumerate(param.factors):
        shape = factor_shape(t, param.in_dims, param.out_dims)
        out.append(np.broadcast_to(f.reshape(f.shape + (1,) * (len(shape) - 2)), shape))
    return out


def tied_monarch(matrices: list[np.ndarray]) -> MonarchParam:
    """Tied Monarch whose materialization is the Kronecker product of `matrices`."""
    if any(m.ndim != 2 for m in matrices):
        raise DimensionError("tied Monarch factors must be 2-d matrices")
    return MonarchParam(
        in_dims=tuple(m.shape[1] for m in matrices),
        out_dims=tuple(m.shape[0] for m in matrices),
        factors=[np.array(m, dtype=np.float64) for m in matrices],
        tied=True,
    )


def untie_param(param: MonarchParam) -> MonarchParam:
    """Independent full-tensor copy of a tied factorization; same linear map."""
    if not param.tied:
        return MonarchParam(param.in_dims, param.out_dims,
                            [f.copy() for f in param.factors], tied=False)
    return MonarchParam(param.in_dims, param.out_dims,
                        [f.copy() for f in full_factors(param)], tied=False)


# ---------------------------------------------------------------------------
# application


def _stage_views(param: MonarchParam):
    """(A, lead_in, lead_out, rest) per stage, with A reshaped (out, in, rest)."""
    facs = full_factors(param)
    views = []
    rest_in = param.in_dim
    rest_out = 1
    for t in range(param.depth):
        n_t, m_t = param.in_dims[t], param.out_dims[t]
        rest = (rest_in // n_t) * rest_out
        # contiguity keeps tied (broadcast) and untied factors on one BLAS
        # path, so untying is a bitwise no-op for evaluation
        A = np.ascontiguousarray(facs[t]).reshape(m_t, n_t, rest)
        views.append((A, n_t, m_t, rest))
        rest_in //= n_t
        rest_out *= m_t
    return views


def monarch_apply(param: MonarchParam, x: np.ndarray) -> np.ndarray:
    """Linear-space apply; x is (in,) or (batch, in).  Equals materialize(param) @ x."""
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x2.shape[1] != param.in_dim:
        raise DimensionError(f"input length {x2.shape[1]} != {param.in_dim}")
    cur = x2
    for A, n_t, m_t, rest in _stage_views(param):
        xr = cur.reshape(cur.shape[0], n_t, rest)
        # z[r, j, b] = sum_i A[j, i, r] x[b, i, r]
        z = np.matmul(A.transpose(2, 0, 1), xr.transpose(2, 1, 0))
        cur = z.transpose(2, 0, 1).reshape(cur.shape[0], -1)  # left shift
    return cur[0] if squeeze else cur


def monarch_apply_logspace(param: MonarchParam, logx: np.ndarray,
                           keep_stages: bool = False):
    """Log-space apply via per-stage shifted log-sum-exp.

    Returns (log output, stage log activations) where the stage list holds the
    d+1 intermediate states (flat, batch-first) when requested, else None.
    """
    squeeze = logx.ndim == 1
    cur = np.atleast_2d(np.asarray(logx, dtype=np.float64))
    if cur.shape[1] != param.in_dim:
        raise DimensionError(f"input length {cur.shape[1]} != {param.in_dim}")
    batch = cur.shape[0]
    stages = [cur] if keep_stages else None
    for A, n_t, m_t, rest in _stage_views(param):
        xr = cur.reshape(batch, n_t, rest)
        shift = xr.max(axis=1)
        shift = np.where(np.isfinite(shift), shift, 0.0)
        y = np.exp(xr - shift[:, None, :])
        z = np.matmul(A.transpose(2, 0, 1), y.transpose(2, 1, 0))  # (rest, m, B)
        with np.errstate(divide="ignore"):
            logz = np.log(z.transpose(2, 0, 1))  # (B, rest, m)
        logz += shift[:, :, None]
        cur = logz.reshape(batch, -1)  # (rest, m) raveled == left shift
        if keep_stages:
            stages.append(cur)
    return (cur[0] if squeeze else cur), stages


def monarch_apply_transpose(param: MonarchParam, y: np.ndarray) -> np.ndarray:
    """Linear-space transposed apply: materialize(param).T @ y."""
    squeeze = y.ndim == 1
    cur = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if cur.shape[1] != param.out_dim:
        raise DimensionError(f"input length {cur.shape[1]} != {param.out_dim}")
    batch = cur.shape[0]
    for A, n_t, m_t, rest in reversed(_stage_views(param)):
        yr = cur.reshape(batch, rest, m_t).transpose(0, 2, 1)  # undo left shift
        # x[r, i, b] = sum_j A[j, i, r] y[b, j, r]
        x = np.matmul(A.transpose(2, 1, 0), yr.transpose(2, 1, 0))
        cur = x.transpose(2, 1, 0).reshape(batch, -1)
    return cur[0] if squeeze else cur


def materialize(param: SumParam, max_entries: int = 1 << 20) -> np.ndarray:
    """Dense (out, in) matrix of the map.  Test-scale only; guarded by size.

    For Monarch factorizations this contracts the entry formula directly
    (independent of the staged apply path).
    """
    if isinstance(param, DenseParam):
        return param.weight.copy()
    if isinstance(param, IdentityParam):
        return np.eye(param.size)
    if param.in_dim * param.out_dim > max_entries:
        raise ContractError(
            f"refusing to materialize {param.out_dim}x{param.in_dim} "
            f"(> {max_entries} entries)")
    d = param.depth
    letters = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"
    if 2 * d > len(letters):
        raise ContractError("depth too large to materialize")
    j = letters[:d]
    i = letters[d:2 * d]
    subs = []
    for t in range(d):
        subs.append(j[t] + i[t] + i[t + 1:] + j[:t])
    spec = ",".join(subs) + "->" + j + i
    out = np.einsum(spec, *full_factors(param), optimize=True)
    return np.ascontiguousarray(out.reshape(param.out_dim, param.in_dim))


def param_apply_log(param: SumParam, logx: np.ndarray, keep_cache: bool = False):
    """Log-space apply for any param kind; returns (log out, cache).

    The cache carries whatever the matching backward pass needs: stage logs
    for Monarch, (log in, log out) for dense, nothing for identity.
    """
    if isinstance(param, IdentityParam):
        return logx, None
    if isinstance(param, DenseParam):
        W = param.weight
        shift = logx.max(axis=1)
        shift = np.where(np.isfinite(shift), shift, 0.0)
        y = np.exp(logx - shift[:, None])
        with np.errstate(divide="ignore"):
            logz = np.log(y @ W.T)
        logz += shift[:, None]
        return logz, ((logx, logz) if keep_cache else None)
    logz, stages = monarch_apply_logspace(param, logx, keep_stages=keep_cache)
    return logz, stages


def param_apply_linear(param: SumParam, x: np.ndarray) -> np.ndarray:
    if isinstance(param, IdentityParam):
        return np.asarray(x, dtype=np.float64).copy()
    if isinstance(param, DenseParam):
        return np.asarray(x, dtype=np.float64) @ param.weight.T
    return monarch_apply(param, x)


def param_row(param: SumParam, k: int) -> np.ndarray:
    """Row k of the materialized matrix, without materializing."""
    if isinstance(param, DenseParam):
        return param.weight[k].copy()
    if isinstance(param, IdentityParam):
        row = np.zeros(param.size)
        row[k] = 1.0
        return row
    e = np.zeros(param.out_dim)
    e[k] = 1.0
    return monarch_apply_transpose(param, e)


# ---------------------------------------------------------------------------
# flow backward pass

def _finite_or(x: np.ndarray, alt: float) -> np.ndarray:
    return np.where(np.isfinite(x), x, alt)


def _stage_backward(A: np.ndarray, logx: np.ndarray, logz: np.ndarray,
                    logf: np.ndarray):
    """Backward through one batched contraction.

    A: (out, in, rest); logx: (B, in, rest); logz/logf: (B, out, rest).
    Returns (log input flows (B, in, rest), edge flow sums (out, in, rest)).

    Edge flows are sum_b F[b,j,r] * A[j,i,r] * x[b,i,r] / z[b,j,r]; the outer
    product over b is computed with a per-(b, r) balanced shift so neither
    side can overflow even when z is astronomically small.
    """
    with np.errstate(invalid="ignore"):
        q = np.where(logf == _NINF, _NINF, logf - logz)  # log(F/z)
    xmax = logx.max(axis=1)  # (B, rest)
    qmax = q.max(axis=1)
    s = np.where(np.isfinite(xmax) & np.isfinite(qmax), 0.5 * (xmax - qmax), 0.0)
    G = np.exp(q + s[:, None, :])
    V = np.exp(logx - s[:, None, :])
    # edge[r, j, i] = sum_b G[b, j, r] V[b, i, r]
    edge = np.matmul(G.transpose(2, 1, 0), V.transpose(2, 0, 1))
    edge = A * edge.transpose(1, 2, 0)
    # input flows: logx + log sum_j A[j,i,r] exp(q[b,j,r])
    qg = _finite_or(qmax, 0.0)
    g2 = np.exp(q - qg[:, None, :])
    t = np.matmul(A.transpose(2, 1, 0), g2.transpose(2, 1, 0))  # (rest, in, B)
    with np.errstate(divide="ignore"):
        logt = np.log(t.transpose(2, 1, 0))  # (B, in, rest)
    logf_in = logx + logt + qg[:, None, :]
    return logf_in, edge


def param_backward_log(param: SumParam, cache, logf_out: np.ndarray):
    """Propagate log node flows through a sum map and collect edge flows.

    Returns (log input flows (B, in), edge accumulators mirroring the
    parameter shape: (out, in) for dense, per-factor tensors for Monarch and
    per-layer (m_t, n_t) matrices for tied Monarch; None for identity).
    """
    if isinstance(param, IdentityParam):
        return logf_out, None
    if isinstance(param, DenseParam):
        logx, logz = cache
        B = logx.shape[0]
        logf_in, edge = _stage_backward(
            param.weight[:, :, None], logx.reshape(B, -1, 1),
            logz.reshape(B, -1, 1), logf_out.reshape(B, -1, 1))
        return logf_in.reshape(B, -1), edge[:, :, 0]
    stages = cache
    B = logf_out.shape[0]
    logf = logf_out
    edges: list[np.ndarray | None] = [None] * param.depth
    views = _stage_views(param)
    for t in reversed(range(param.depth)):
        A, n_t, m_t, rest = views[t]
        logz = stages[t + 1].reshape(B, rest, m_t).transpose(0, 2, 1)
        logf_pre = logf.reshape(B, rest, m_t).transpose(0, 2, 1)
        logx = stages[t].reshape(B, n_t, rest)
        logf_in, edge = _stage_backward(A, logx, logz, logf_pre)
        if param.tied:
            edges[t] = edge.sum(axis=2)
        else:
            edges[t] = edge.reshape(factor_shape(t, param.in_dims, param.out_dims))
        logf = logf_in.reshape(B, -1)
    return logf, edges


# ---------------------------------------------------------------------------
# normalization, initialization, EM row updates


def zero_accumulator(param: SumParam):
    """Flow accumulator mirroring the parameter shape (None for identity)."""
    if isinstance(param, IdentityParam):
        return None
    if isinstance(param, DenseParam):
        return np.zeros_like(param.weight)
    return [np.zeros_like(f) for f in param.factors]


def accumulate_(acc, update) -> None:
    """In-place acc += update for matching accumulator structures."""
    if acc is None or update is None:
        return
    if isinstance(acc, list):
        for a, u in zip(acc, update):
            a += u
    else:
        acc += update


def row_convex_update(old: np.ndarray, acc: np.ndarray, eta: float,
                      floor: float = PARAM_FLOOR) -> np.ndarray:
    """Per-row convex combination of old weights and normalized counts.

    Rows of `acc` with zero total keep the old row.  The result is floored at
    `floor` and renormalized, so every returned row is stochastic with a
    minimum entry >= floor * (1 - small slack).
    """
    totals = acc.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        target = np.where(totals > 0, acc / np.where(totals > 0, totals, 1.0), old)
    new = (1.0 - eta) * old + eta * target
    new = np.maximum(new, floor)
    new /= new.sum(axis=-1, keepdims=True)
    return new


def em_update_param_(param: SumParam, acc, eta: float,
                     floor: float = PARAM_FLOOR) -> None:
    """Apply an EM row update in place.  Rows are weight-matrix rows for
    dense params and contraction slices A^t[j, :, r] for Monarch factors."""
    if isinstance(param, IdentityParam):
        return
    if isinstance(param, DenseParam):
        param.weight = row_convex_update(param.weight, acc, eta, floor)
        return
    for t in range(param.depth):
        f = param.factors[t]
        a = acc[t]
        moved = np.moveaxis(f, 1, -1)  # contraction axis last
        new = row_convex_update(moved, np.moveaxis(a, 1, -1), eta, floor)
        param.factors[t] = np.ascontiguousarray(np.moveaxis(new, -1, 1))


def normalize_param_(param: SumParam) -> None:
    """Force rows (dense) / contraction slices (Monarch) to be stochastic."""
    if isinstance(param, IdentityParam):
        return
    if isinstance(param, DenseParam):
        s = param.weight.sum(axis=1, keepdims=True)
        param.weight = np.where(s > 0, param.weight / np.where(s > 0, s, 1.0),
                                1.0 / param.weight.shape[1])
        return
    for t, f in enumerate(param.factors):
        s = f.sum(axis=1, keepdims=True)
        param.factors[t] = np.where(s > 0, f / np.where(s > 0, s, 1.0),
                                    1.0 / f.shape[1])


def row_stochastic_error(param: SumParam) -> float:
    """Max |row sum - 1| over dense rows / Monarch contraction slices."""
    if isinstance(param, IdentityParam):
        return 0.0
    if isinstance(param, DenseParam):
        return float(np.abs(param.weight.sum(axis=1) - 1.0).max())
    return max(float(np.abs(f.sum(axis=1) - 1.0).max()) for f in param.factors)


def param_min_entry(param: SumParam) -> float:
    if isinstance(param, IdentityParam):
        return 0.0
    if isinstance(param, DenseParam):
        return float(param.weight.min())
    return min(float(f.min()) for f in param.factors)


def scale_input_states_(param: SumParam, scale: np.ndarray) -> None:
    """Right-multiply the materialized map by diag(scale) in place.

    For Monarch factorizations every input index appears in the first factor,
    so the scaling is absorbed there without touching the other stages."""
    if isinstance(param, IdentityParam):
        raise ContractError("identity params cannot be rescaled")
    if isinstance(param, DenseParam):
        param.weight = param.weight * scale[None, :]
        return
    if param.tied:
        raise ContractError("untie before rescaling a tied factorization")
    f = param.factors[0]
    param.factors[0] = f * scale.reshape(param.in_dims)[None, ...]


def scale_output_states_(param: SumParam, scale: np.ndarray) -> None:
    """Left-multiply the materialized map by diag(scale) in place.

    Every output index appears in the final factor (its own bit leads, the
    others sit in the trailing batch axes), so the scaling lands there."""
    if isinstance(param, IdentityParam):
        raise ContractError("identity params cannot be rescaled")
    if isinstance(param, DenseParam):
        param.weight = param.weight * scale[:, None]
        return
    if param.tied:
        raise ContractError("untie before rescaling a tied factorization")
    f = param.factors[-1]
    moved = np.moveaxis(f, 0, -1)  # view: (n_d, m_1, ..., m_{d-1}, m_d)
    moved *= scale.reshape(param.out_dims)  # writes through into the factor


def zero_output_states_(param: SumParam, dead: np.ndarray) -> None:
    """Zero the materialized rows of the given output states in place."""
    scale = np.ones(param.out_dim)
    scale[dead] = 0.0
    scale_output_states_(param, scale)


def zero_input_states_(param: SumParam, dead: np.ndarray) -> None:
    """Zero the materialized columns onto the given input states in place."""
    scale = np.ones(param.in_dim)
    scale[dead] = 0.0
    scale_input_states_(param, scale)


def row_masses(param: SumParam) -> np.ndarray:
    """Row sums of the materialized map (materialization-free)."""
    return param_apply_linear(param, np.ones(param.in_dim))


def output_state_mass(param: SumParam, acc) -> np.ndarray:
    """Per-output-state flow mass from an edge-flow accumulator."""
    if isinstance(param, IdentityParam):
        raise ContractError("identity params carry no flows")
    if isinstance(param, DenseParam):
        return acc.sum(axis=1)
    if param.tied:
        raise ContractError("untie before reading per-state masses")
    tail = acc[-1].sum(axis=1)  # (m_d, m_1, ..., m_{d-1})
    return np.moveaxis(tail, 0, -1).reshape(-1)


def rebalance_slices_(param: MonarchParam) -> None:
    """Restore per-slice stochasticity of an untied factorization in place,
    preserving the materialized map exactly up to the final-stage row totals.

    Each stage's contraction slices are normalized and their sums pushed into
    the next stage's matching entries; the last stage's slice sums equal the
    global row sums and are normalized away (zero slices stay zero)."""
    if param.tied:
        raise ContractError("rebalancing applies to untied factorizations")
    d = param.depth
    for t in range(d):
        f = param.factors[t]
        sums = f.sum(axis=1)  # (m_t, i_{t+1:d}, j_{1:t-1})
        with np.errstate(invalid="ignore", divide="ignore"):
            param.factors[t] = np.where(sums[:, None] > 0, f / sums[:, None], 0.0)
        if t + 1 < d:
            # next factor axes: (j_{t+1}, i_{t+1}, i_{t+2:d}, j_{1:t});
            # sums axes moved to (i_{t+1:d}, j_{1:t-1}, j_t) line up after axis 0
            param.factors[t + 1] = param.factors[t + 1] * np.moveaxis(
                sums, 0, -1)[None, ...]


def random_dense(rng: np.random.Generator, out_dim: int, in_dim: int) -> DenseParam:
    w = rng.random((out_dim, in_dim)) + 0.1
    w /= w.sum(axis=1, keepdims=True)
    return DenseParam(w)


def random_monarch(rng: np.random.Generator, in_dims, out_dims,
                   tied: bool = False) -> MonarchParam:
    in_dims = tuple(in_dims)
    out_dims = tuple(out_dims)
    factors = []
    for t in range(len(in_dims)):
        shape = ((out_dims[t], in_dims[t]) if tied
                 else factor_shape(t, in_dims, out_dims))
        f = rng.random(shape) + 0.1
        f /= f.sum(axis=1, keepdims=True)
        factors.append(f)
    return MonarchParam(in_dims, out_dims, factors, tied=tied)


def copy_param(param: SumParam) -> SumParam:
    if isinstance(param, DenseParam):
        return DenseParam(param.weight.copy())
    if isinstance(param, IdentityParam):
        return IdentityParam(param.size)
    return MonarchParam(param.in_dims, param.out_dims,
                        [f.copy() for f in param.factors], tied=param.tied)


def param_flops(param: SumParam) -> int:
    """Multiply-add count of one application."""
    if isinstance(param, IdentityParam):
        return 0
    if isinstance(param, DenseParam):
        return int(param.weight.shape[0] * param.weight.shape[1])
    total = 0
    for t in range(param.depth):
        total += int(np.prod(factor_shape(t, param.in_dims, param.out_dims)))
    return total


def param_element_count(param: SumParam) -> int:
    if isinstance(param, IdentityParam):
        return 0
    if isinstance(param, DenseParam):
        return int(param.weight.size)
    return sum(int(f.size) for f in param.factors)
