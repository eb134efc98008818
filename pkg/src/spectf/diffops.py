"""Discrete difference operators in banded form.

Operators are defined on the index grid (unit spacing): row ``j`` of the
first-order operator carries ``-1`` at column ``j`` and ``+1`` at column
``j + 1``. Physical grid spacing is never folded in; it only rescales the
penalty weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np


class DimensionError(ValueError):
    """Raised when operator and vector/matrix dimensions are incompatible."""


@dataclass(frozen=True)
class DifferenceOperator:
    """Forward-difference matrix of a given order.

    Attributes
    ----------
    order : int
        Number of differences applied (the ``k + 1`` of a ``D^(k+1)`` penalty).
        Order 0 is the identity and is used internally by the ADMM splitting.
    p : int
        Grid length (number of columns).
    bands : numpy.ndarray, shape (p - order, order + 1)
        ``bands[j, i]`` is the coefficient at row ``j``, column ``j + i``.
    """

    order: int
    p: int
    bands: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.bands.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.p - self.order, self.p)

    @property
    def rows(self) -> int:
        return self.p - self.order

    def apply(self, x):
        return apply(self, x)

    def apply_transpose(self, v):
        return apply_transpose(self, v)

    def todense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        rows = np.arange(self.rows)
        for i in range(self.order + 1):
            out[rows, rows + i] = self.bands[:, i]
        return out

    def __neg__(self) -> "DifferenceOperator":
        return DifferenceOperator(self.order, self.p, -self.bands)


@dataclass(frozen=True)
class AugmentedOperator:
    """One or two difference operators, zero-padded for scalar covariates.

    The operator acts on ``theta = (f, gamma)`` with ``len(f) = p`` and
    ``len(gamma) = r``; the ``r`` trailing columns are identically zero so
    scalar coefficients are never penalized. With two bases the padded
    operators are stacked row-wise.
    """

    bases: tuple[DifferenceOperator, ...]
    r: int = 0

    @property
    def stacked(self) -> bool:
        return len(self.bases) > 1

    @property
    def p(self) -> int:
        return self.bases[0].p

    @property
    def block_rows(self) -> tuple[int, ...]:
        return tuple(b.rows for b in self.bases)

    @property
    def shape(self) -> tuple[int, int]:
        return (sum(self.block_rows), self.p + self.r)

    def apply(self, x):
        return apply(self, x)

    def apply_transpose(self, v):
        return apply_transpose(self, v)

    def todense(self) -> np.ndarray:
        blocks = [np.hstack([b.todense(), np.zeros((b.rows, self.r))]) for b in self.bases]
        return np.vstack(blocks)


Operator = Union[DifferenceOperator, AugmentedOperator]


def build_difference_operator(p: int, order: int) -> DifferenceOperator:
    """Build the ``order``-th forward-difference matrix on ``p`` points.

    Uses the recursion ``D^(m+1) = D^(1)_(p-m) D^(m)`` directly on the band
    storage: row ``j`` of the new operator is row ``j + 1`` minus row ``j``
    of the old one, shifted by one column.

    Parameters
    ----------
    p : int
        Grid length.
    order : int
        Difference order, ``0 <= order < p``. Order 0 gives the identity.

    Raises
    ------
    DimensionError
        If ``p <= order`` (the operator would have no rows).
    """
    p = int(p)
    order = int(order)
    if order < 0:
        raise ValueError(f"order must be nonnegative, got {order}")
    if p <= order:
        raise DimensionError(f"grid length p={p} must exceed difference order {order}")
    bands = np.ones((p, 1))
    for m in range(order):
        rows = p - m - 1
        new = np.zeros((rows, m + 2))
        new[:, 1:] += bands[1:rows + 1]
        new[:, :-1] -= bands[:rows]
        bands = new
    return DifferenceOperator(order, p, bands)


def augment_operator(
    base: Union[DifferenceOperator, Sequence[DifferenceOperator]], r: int = 0
) -> AugmentedOperator:
    """Zero-pad ``r`` scalar-covariate columns and stack a pair of operators."""
    if r < 0:
        raise ValueError(f"r must be nonnegative, got {r}")
    bases = (base,) if isinstance(base, DifferenceOperator) else tuple(base)
    if not 1 <= len(bases) <= 2:
        raise ValueError("expected one operator or a pair of operators")
    if len({b.p for b in bases}) != 1:
        raise DimensionError(f"stacked operators disagree on p: {[b.p for b in bases]}")
    return AugmentedOperator(bases, int(r))


def _apply_base(op: DifferenceOperator, x: np.ndarray) -> np.ndarray:
    rows = op.rows
    if x.ndim == 1:
        out = np.zeros(rows)
        for i in range(op.order + 1):
            out += op.bands[:, i] * x[i:i + rows]
    else:
        out = np.zeros((rows,) + x.shape[1:])
        for i in range(op.order + 1):
            out += op.bands[:, i, None] * x[i:i + rows]
    return out


def _apply_transpose_base(op: DifferenceOperator, v: np.ndarray) -> np.ndarray:
    rows = op.rows
    out = np.zeros((op.p,) + v.shape[1:])
    for i in range(op.order + 1):
        coef = op.bands[:, i] if v.ndim == 1 else op.bands[:, i, None]
        out[i:i + rows] += coef * v
    return out


def apply(op: Operator, x) -> np.ndarray:
    """Compute ``D @ x`` for a vector or a matrix with ``p (+ r)`` rows."""
    x = np.asarray(x, dtype=float)
    n_cols = op.shape[1]
    if x.shape[0] != n_cols:
        raise DimensionError(f"operator has {n_cols} columns, input has {x.shape[0]} rows")
    if isinstance(op, DifferenceOperator):
        return _apply_base(op, x)
    head = x[:op.p]
    return np.concatenate([_apply_base(b, head) for b in op.bases], axis=0)


def apply_transpose(op: Operator, v) -> np.ndarray:
    """Compute ``D.T @ v``."""
    v = np.asarray(v, dtype=float)
    n_rows = op.shape[0]
    if v.shape[0] != n_rows:
        raise DimensionError(f"operator has {n_rows} rows, input has {v.shape[0]}")
    if isinstance(op, DifferenceOperator):
        return _apply_transpose_base(op, v)
    out = np.zeros((op.p + op.r,) + v.shape[1:])
    start = 0
    for b in op.bases:
        out[:op.p] += _apply_transpose_base(b, v[start:start + b.rows])
        start += b.rows
    return out


def gram_banded(op: DifferenceOperator) -> np.ndarray:
    """Upper banded storage of ``D.T @ D``, LAPACK ``ab`` layout.

    Returns an array of shape ``(order + 1, p)`` with
    ``ab[order + i - j, j] == (D.T D)[i, j]`` for ``i <= j``, which is the
    layout expected by :func:`scipy.linalg.cholesky_banded`.
    """
    w = op.order
    ab = np.zeros((w + 1, op.p))
    # (D^T D)[c, c + s] = sum_j bands[j, c - j] * bands[j, c + s - j]
    for s in range(w + 1):
        for i in range(w + 1 - s):
            ab[w - s, np.arange(op.rows) + i + s] += op.bands[:, i] * op.bands[:, i + s]
    return ab


def banded_to_dense(ab: np.ndarray) -> np.ndarray:
    """Expand symmetric upper banded storage into a dense matrix."""
    w = ab.shape[0] - 1
    p = ab.shape[1]
    out = np.zeros((p, p))
    for s in range(w + 1):
        diag = ab[w - s, s:]
        idx = np.arange(p - s)
        out[idx, idx + s] = diag
        out[idx + s, idx] = diag
    return out


def gram(op: Operator, dense: bool = True) -> np.ndarray:
    """``D.T @ D``.

    For a plain :class:`DifferenceOperator` with ``dense=False`` the upper
    banded storage is returned (bandwidth ``2 * order + 1``). Augmented
    operators always return a dense ``(p + r, p + r)`` matrix.
    """
    if isinstance(op, DifferenceOperator):
        ab = gram_banded(op)
        return ab if not dense else banded_to_dense(ab)
    if not dense:
        raise ValueError("banded gram is only available for a single unpadded operator")
    n = op.p + op.r
    out = np.zeros((n, n))
    for b in op.bases:
        out[:op.p, :op.p] += banded_to_dense(gram_banded(b))
    return out
