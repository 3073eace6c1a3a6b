"""Butterfly factor matrices and their correspondence with Monarch layers.

A butterfly factor ``B(i, D)`` (D = 2^d) is block-diagonal with blocks of
size ``D / 2^(i-1)``, each block having nonzeros only on the diagonals of its
four quadrant submatrices; every factor has exactly 2D structural nonzeros.
Unfurling reshapes a dense (d+1)-dimensional ``2 x ... x 2`` tensor into such
a factor: bit i of the row/column indexes the tensor's first/last axis, all
other bits are tied between row and column.

A depth-d Monarch factorization with every layer dimension equal to 2 spans
exactly the same matrices as products of butterfly factors.  Note the order:
with rows/columns flattened most-significant-bit first, the Monarch staged
apply contracts bit 1 first, which corresponds to the matrix product
``B(d,D) @ B(d-1,D) @ ... @ B(1,D)`` (the factor applied first appears
rightmost).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .monarch import MonarchParam


@dataclass(frozen=True)
class ButterflyFactorMatrix:
    """One sparse butterfly factor, stored dense at test scale."""

    index: int  # i in 1..d
    size: int   # D = 2^d
    matrix: np.ndarray

    @property
    def nonzeros(self) -> int:
        return int(np.count_nonzero(self.matrix))

    def pattern_ok(self) -> bool:
        """True iff all nonzeros lie inside the B(index, size) pattern."""
        mask = butterfly_pattern_mask(self.index, self.size)
        return bool(((self.matrix != 0) <= mask).all())


def butterfly_pattern_mask(i: int, size: int) -> np.ndarray:
    """Boolean mask of the 2*size structural positions of B(i, size)."""
    d = size.bit_length() - 1
    if size != 1 << d or not 1 <= i <= d:
        raise DimensionError(f"invalid butterfly factor index {i} for size {size}")
    block = size >> (i - 1)
    r = np.arange(size)
    same_block = (r[:, None] // block) == (r[None, :] // block)
    on_diagonal = (r[:, None] % (block // 2)) == (r[None, :] % (block // 2))
    return same_block & on_diagonal


def butterfly_unfurl(tensor: np.ndarray, i: int) -> ButterflyFactorMatrix:
    """Unfurl a (d+1)-dim 2x...x2 tensor into the butterfly factor B(i, 2^d).

    Entry [j, j'] equals tensor[j_i, j_1..j_{i-1}, j_{i+1}..j_d, j'_i] when
    all bits other than i agree, else 0; bits are most-significant first.
    """
    d = tensor.ndim - 1
    if tensor.shape != (2,) * (d + 1):
        raise DimensionError(f"expected a (d+1)-dim 2x..x2 tensor, got {tensor.shape}")
    if not 1 <= i <= d:
        raise DimensionError(f"layer index {i} out of range 1..{d}")
    size = 1 << d
    hi, lo = 1 << (i - 1), 1 << (d - i)
    # group bits around position i: (j_<i, j_i, j_>i, j'_i)
    grouped = np.moveaxis(tensor, 0, i - 1).reshape(hi, 2, lo, 2)
    out = np.einsum("paqb,pr,qs->paqrbs", grouped, np.eye(hi), np.eye(lo))
    return ButterflyFactorMatrix(index=i, size=size,
                                 matrix=out.reshape(size, size))


def butterfly_as_monarch(tensors: list[np.ndarray]) -> MonarchParam:
    """Depth-d Monarch layers (all dims 2) for a stack of butterfly tensors.

    The returned factorization materializes to the sparse matrix product
    ``B(d,D) @ ... @ B(1,D)`` where ``B(i,D) = butterfly_unfurl(tensors[i-1], i)``.
    """
    d = len(tensors)
    if d < 1:
        raise DimensionError("need at least one factor tensor")
    for a in tensors:
        if a.shape != (2,) * (d + 1):
            raise DimensionError(
                f"every tensor must be {(2,) * (d + 1)}, got {a.shape}")
    factors = []
    for t in range(d):  # 0-indexed layer; unfurl index is t+1
        perm = [0, d] + list(range(t + 1, d)) + list(range(1, t + 1))
        factors.append(np.ascontiguousarray(
            np.transpose(tensors[t], perm).astype(np.float64)))
    return MonarchParam(in_dims=(2,) * d, out_dims=(2,) * d,
                        factors=factors, tied=False)
