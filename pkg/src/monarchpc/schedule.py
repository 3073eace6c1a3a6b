"""Dimension-schedule planning and FLOPs/memory accounting for sum blocks.

A square hidden size h can be factored into per-layer dimensions
``(c_1, ..., c_d)`` with ``prod c_t = h``.  Choosing d = 2 gives the classic
two-layer factorization with cost ``2 h^{3/2}``; pushing the base down to
``c = 2`` gives a butterfly schedule of depth ``log2 h`` and cost
``2 h log2 h``; a dense block costs ``h^2``.  For a square depth-d schedule
the multiply-add count per application is ``h * sum_t c_t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class DimSchedule:
    """Per-layer dimensions for a square h -> h Monarch sum block."""

    hidden: int
    dims: tuple[int, ...]
    base: float

    @property
    def depth(self) -> int:
        return len(self.dims)

    def __post_init__(self):
        if int(np.prod(self.dims)) != self.hidden:
            raise ConfigError(f"dims {self.dims} do not multiply to {self.hidden}")
        if any(d < 2 for d in self.dims):
            raise ConfigError(f"dims {self.dims} contain degenerate layers")


def _balanced_dims(h: int, depth: int) -> tuple[int, ...]:
    """Near-equal factorization of h into `depth` integer dims >= 2.

    Perfect d-th powers split evenly.  Otherwise each step takes the divisor
    closest to the remaining geometric mean (ties to the smaller divisor) and
    the result is sorted ascending, so larger dims come last.
    """
    m = round(h ** (1.0 / depth))
    if m >= 2 and m ** depth == h:
        return (m,) * depth

    dims = []
    rem = h
    for layers_left in range(depth, 0, -1):
        if layers_left == 1:
            dims.append(rem)
            break
        target = rem ** (1.0 / layers_left)
        divisors = [v for v in range(2, rem + 1) if rem % v == 0]
        if not divisors:
            raise ConfigError(f"cannot split {h} into {depth} factors >= 2")
        pick = min(divisors, key=lambda v: (abs(v - target), v))
        dims.append(pick)
        rem //= pick
    dims.sort()
    if any(d < 2 for d in dims):
        raise ConfigError(f"cannot split {h} into {depth} factors >= 2")
    return tuple(dims)


def plan_schedule(h: int, depth: int | None = None, base: int | None = None,
                  dims: tuple[int, ...] | None = None) -> DimSchedule:
    """Plan per-layer dims for hidden size h.

    Exactly one of `depth`, `base`, or explicit `dims` selects the schedule;
    the default is depth 2.  base=2 yields the butterfly schedule of depth
    log2(h); base=sqrt(h) yields depth 2.
    """
    if h < 4:
        raise ConfigError(f"hidden size {h} < 4 cannot be factored")
    given = sum(x is not None for x in (depth, base, dims))
    if given > 1:
        raise ConfigError("specify at most one of depth, base, dims")
    if dims is not None:
        dims = tuple(int(v) for v in dims)
        return DimSchedule(hidden=h, dims=dims, base=float(max(dims)))
    if base is not None:
        if base < 2:
            raise ConfigError(f"base {base} < 2")
        d = round(np.log(h) / np.log(base))
        if d < 1 or base ** d != h:
            raise ConfigError(f"base {base} does not divide hidden size {h} evenly")
        return DimSchedule(hidden=h, dims=(int(base),) * d, base=float(base))
    d = 2 if depth is None else int(depth)
    if d < 1:
        raise ConfigError(f"depth {d} < 1")
    if d == 1:
        return DimSchedule(hidden=h, dims=(h,), base=float(h))
    return DimSchedule(hidden=h, dims=_balanced_dims(h, d), base=h ** (1.0 / d))


def monarch_flops(in_dims: tuple[int, ...], out_dims: tuple[int, ...]) -> int:
    """Exact multiply-add count of a staged apply with the given dims."""
    total = 0
    d = len(in_dims)
    for t in range(d):
        rest = int(np.prod(in_dims[t + 1:], dtype=np.int64)) * int(
            np.prod(out_dims[:t], dtype=np.int64))
        total += out_dims[t] * in_dims[t] * rest
    return int(total)


def flops_per_apply(spec: DimSchedule | int) -> int:
    """Multiply-adds per application: h^2 for a dense block of size h,
    the exact per-layer contraction sum for a schedule."""
    if isinstance(spec, DimSchedule):
        return monarch_flops(spec.dims, spec.dims)
    h = int(spec)
    return h * h


def memory_elements(kind: str, h: int, n: int, batch: int,
                    depth: int | None = None) -> tuple[int, int]:
    """(parameter elements, activation elements) for a length-n model.

    Dense: (h^2, n*h*batch).  Depth-d Monarch: (sum_t c_t * h, d*n*h*batch),
    which is d*h^{(d+1)/d} parameters for an even split.
    """
    if h < 1 or n < 1 or batch < 1:
        raise ConfigError("h, n, and batch must be positive")
    if kind == "dense":
        return h * h, n * h * batch
    if kind == "monarch":
        sched = plan_schedule(h, depth=2 if depth is None else depth)
        return flops_per_apply(sched), sched.depth * n * h * batch
    raise ConfigError(f"unknown model kind {kind!r}")
