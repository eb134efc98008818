"""Exact 1-D fused lasso by dynamic programming.

Solves ``min_b 0.5 * ||z - b||^2 + lam * sum_j |b[j+1] - b[j]|`` in linear
time. The forward pass carries the derivative of the partial objective as a
piecewise-linear function stored by its knots and per-knot slope/intercept
increments; clipping it to ``[-lam, lam]`` yields the back-pointers
``lo[j] <= b[j] <= hi[j]`` used by the backward pass.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _fused_dp(z, lam, out):
    m = z.shape[0]
    if m == 1 or lam <= 0.0:
        out[:] = z
        return
    cap = 2 * m + 2
    knot = np.empty(cap)
    da = np.empty(cap)
    dc = np.empty(cap)
    lo = np.empty(m - 1)
    hi = np.empty(m - 1)
    left = m + 1
    right = m  # knots live in [left, right]; empty when left > right

    # derivative of the partial objective on the outermost segments
    a_first, c_first = 1.0, -z[0]
    a_last, c_last = 1.0, -z[0]

    for k in range(m - 1):
        # lower back-pointer: where the derivative crosses -lam
        a, c = a_first, c_first
        j = left
        while j <= right:
            if a * knot[j] + c > -lam:
                break
            a += da[j]
            c += dc[j]
            j += 1
        tm = (-lam - c) / a
        a_lo, c_lo, new_left = a, c, j

        # upper back-pointer: where the derivative crosses +lam
        a, c = a_last, c_last
        j = right
        while j >= new_left:
            if a * knot[j] + c < lam:
                break
            a -= da[j]
            c -= dc[j]
            j -= 1
        tp = (lam - c) / a
        a_hi, c_hi, new_right = a, c, j

        lo[k] = tm
        hi[k] = tp
        left = new_left - 1
        knot[left] = tm
        da[left] = a_lo
        dc[left] = c_lo + lam
        right = new_right + 1
        knot[right] = tp
        da[right] = -a_hi
        dc[right] = lam - c_hi

        # add the next quadratic; outside the knots the clipped part is -lam / +lam
        a_first, c_first = 1.0, -lam - z[k + 1]
        a_last, c_last = 1.0, lam - z[k + 1]

    # minimizer of the final partial objective: derivative crosses 0
    a, c = a_first, c_first
    j = left
    while j <= right:
        if a * knot[j] + c > 0.0:
            break
        a += da[j]
        c += dc[j]
        j += 1
    out[m - 1] = -c / a
    for k in range(m - 2, -1, -1):
        b = out[k + 1]
        if b > hi[k]:
            b = hi[k]
        elif b < lo[k]:
            b = lo[k]
        out[k] = b


def fused_lasso_1d(z, lam: float) -> np.ndarray:
    """Exact minimizer of ``0.5 * ||z - b||^2 + lam * TV(b)``.

    Parameters
    ----------
    z : array-like, shape (m,)
        Target vector; must be finite.
    lam : float
        Nonnegative fusion weight. ``lam == 0`` returns a copy of ``z``.

    Returns
    -------
    numpy.ndarray, shape (m,)
        Piecewise-constant solution.
    """
    z = np.ascontiguousarray(z, dtype=float)
    if z.ndim != 1 or z.size < 1:
        raise ValueError("z must be a non-empty 1-D array")
    if not np.all(np.isfinite(z)):
        raise ValueError("z contains NaN or Inf")
    lam = float(lam)
    if not np.isfinite(lam) or lam < 0:
        raise ValueError(f"lam must be a finite nonnegative number, got {lam}")
    out = np.empty_like(z)
    _fused_dp(z, lam, out)
    return out


def kkt_check(z, lam: float, delta, jump_tol: float = 1e-10) -> float:
    """Maximum violation of the fused-lasso optimality conditions.

    With ``c_j = sum_{i <= j} (delta_i - z_i)``, optimality requires
    ``|c_j| <= lam`` on every boundary, ``c_j = lam * sign(delta_{j+1} - delta_j)``
    where the solution jumps (by more than ``jump_tol``), and ``c_m = 0``.
    """
    z = np.asarray(z, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if z.shape != delta.shape:
        raise ValueError("z and delta must have the same shape")
    c = np.cumsum(delta - z)
    viol = abs(c[-1])
    if z.size == 1:
        return float(viol)
    c = c[:-1]
    jump = np.diff(delta)
    moving = np.abs(jump) > jump_tol
    free = np.maximum(np.abs(c[~moving]) - lam, 0.0)
    tight = np.abs(c[moving] - lam * np.sign(jump[moving]))
    for part in (free, tight):
        if part.size:
            viol = max(viol, float(part.max()))
    return float(viol)
