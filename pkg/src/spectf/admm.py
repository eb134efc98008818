"""Specialized ADMM for l1-penalized difference regression.

The problem

    minimize  ||y - X alpha||_2^2 + sum_i lam_i * ||D^(k_i + 1) alpha_f||_1

is split with the constraint ``D^(k_i) alpha_f = delta_i`` so each
``delta_i`` sub-problem is a 1-D fused lasso, solved exactly by
:func:`spectf.fused1d.fused_lasso_1d`. The augmented term is
``rho * ||D alpha - delta + u||^2``, which gives the updates

    alpha <- (X'X + rho D'D)^{-1} (X'y + rho D'(delta - u))
    delta <- fused_lasso_1d(D alpha + u, lam / (2 rho))   (block-wise)
    u     <- u + D alpha - delta

with ``rho = lam``. With two penalties each block gets its own ``rho_i = lam_i``
(floored at a small fraction of the larger weight), so the augmented term
becomes ``sum_i rho_i ||D_i alpha - delta_i + u_i||^2``. Columns past the
first ``p`` hold unpenalized scalar coefficients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import scipy.linalg
from numba import njit

from .diffops import DimensionError, augment_operator, build_difference_operator, gram
from .fused1d import _fused_dp

logger = logging.getLogger(__name__)


class SingularSystemError(np.linalg.LinAlgError):
    """The ADMM normal matrix could not be factorized even after jitter."""


@dataclass(frozen=True)
class PenaltyTerm:
    """One ``lam * ||D^(k+1) f||_1`` term; ``k + 1`` is the penalized derivative order."""

    k: int
    lam: float

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"k must be nonnegative, got {self.k}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError(f"lam must be finite and nonnegative, got {self.lam}")

    @property
    def order(self) -> int:
        return self.k + 1


@dataclass(frozen=True)
class PenaltySpec:
    """One or two penalty terms with distinct derivative orders."""

    terms: tuple[PenaltyTerm, ...]

    def __post_init__(self):
        terms = tuple(self.terms)
        object.__setattr__(self, "terms", terms)
        if not 1 <= len(terms) <= 2:
            raise ValueError("a penalty has one or two terms")
        if len({t.k for t in terms}) != len(terms):
            raise ValueError("penalty orders must be distinct")

    @classmethod
    def from_orders(cls, orders: Sequence[int], lams: Union[float, Sequence[float]]) -> "PenaltySpec":
        """Build from penalized derivative orders, e.g. ``orders=(4, 1)``."""
        orders = [int(o) for o in np.atleast_1d(orders)]
        lams = [float(v) for v in np.broadcast_to(np.asarray(lams, dtype=float), (len(orders),))]
        return cls(tuple(PenaltyTerm(o - 1, lam) for o, lam in zip(orders, lams)))

    @property
    def orders(self) -> tuple[int, ...]:
        return tuple(t.order for t in self.terms)

    @property
    def lams(self) -> tuple[float, ...]:
        return tuple(t.lam for t in self.terms)

    @property
    def strength(self) -> float:
        return float(sum(self.lams))

    def with_lams(self, lams: Sequence[float]) -> "PenaltySpec":
        return PenaltySpec(tuple(PenaltyTerm(t.k, float(v)) for t, v in zip(self.terms, lams)))

    def to_dict(self) -> dict:
        return {"terms": [{"k": t.k, "order": t.order, "lam": t.lam} for t in self.terms]}

    @classmethod
    def from_dict(cls, d: dict) -> "PenaltySpec":
        return cls(tuple(PenaltyTerm(int(t["k"]), float(t["lam"])) for t in d["terms"]))


@dataclass(frozen=True)
class AdmmState:
    alpha: np.ndarray
    delta: np.ndarray
    u: np.ndarray
    iter: int = 0
    primal_res: float = 0.0
    dual_res: float = 0.0
    converged: bool = True
    rho: float = 0.0
    objective: float = float("nan")
    penalty: Optional[PenaltySpec] = None
    rhos: tuple = ()


@dataclass(frozen=True)
class AdmmConfig:
    """Solver settings.

    ``rho_rule="lambda"`` fixes each block's ``rho`` to its penalty weight;
    ``"max"`` shares the largest weight across blocks; ``"custom"`` uses
    ``rho`` for every block.
    """

    rho_rule: str = "lambda"
    rho: Optional[float] = None
    max_iter: int = 5000
    eps_abs: float = 1e-5
    eps_rel: float = 1e-4
    warm_start: Optional[AdmmState] = None

    def __post_init__(self):
        if self.rho_rule not in ("lambda", "max", "custom"):
            raise ValueError(f"unknown rho_rule {self.rho_rule!r}")
        if self.rho_rule == "custom" and not (self.rho and self.rho > 0):
            raise ValueError("custom rho_rule needs a positive rho")
        if self.max_iter < 1 or self.eps_abs <= 0 or self.eps_rel <= 0:
            raise ValueError("max_iter must be >= 1 and tolerances positive")


# ---------------------------------------------------------------------------
# compiled kernels


@njit(cache=True, nogil=True)
def _diff(x, k, out, tmp):
    n = x.shape[0]
    tmp[:n] = x
    for m in range(k):
        for i in range(n - m - 1):
            tmp[i] = tmp[i + 1] - tmp[i]
    out[:] = tmp[:n - k]


@njit(cache=True, nogil=True)
def _diff_t(v, k, out, tmp):
    # out += D^(k)' v, len(out) = len(v) + k
    m = v.shape[0]
    tmp[:m] = v
    for s in range(k):
        length = m + s
        prev = 0.0
        for i in range(length + 1):
            cur = tmp[i] if i < length else 0.0
            tmp[i] = prev - cur
            prev = cur
    for i in range(m + k):
        out[i] += tmp[i]


@njit(cache=True, nogil=True)
def _cho_solve(L, b, out):
    n = b.shape[0]
    for i in range(n):
        s = b[i]
        for j in range(i):
            s -= L[i, j] * out[j]
        out[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = out[i]
        for j in range(i + 1, n):
            s -= L[j, i] * out[j]
        out[i] = s / L[i, i]


@njit(cache=True, nogil=True)
def _admm_loop(L, Xty, p, ks, fw, rhos, alpha, delta, u, max_iter, eps_abs, eps_rel):
    P = alpha.shape[0]
    M = delta.shape[0]
    nb = ks.shape[0]
    starts = np.zeros(nb + 1, dtype=np.int64)
    for b in range(nb):
        starts[b + 1] = starts[b] + p - ks[b]
    rhs = np.empty(P)
    Da = np.empty(M)
    z = np.empty(M)
    dnew = np.empty(M)
    w = np.empty(M)
    back = np.zeros(P)
    tmp = np.empty(P + 1)
    sqrtM = np.sqrt(M)
    sqrtP = np.sqrt(P)
    pres = np.inf
    dres = np.inf
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        for i in range(M):
            w[i] = delta[i] - u[i]
        rhs[:] = Xty
        for b in range(nb):
            back[:] = 0.0
            _diff_t(w[starts[b]:starts[b + 1]], ks[b], back[:p], tmp)
            for i in range(p):
                rhs[i] += rhos[b] * back[i]
        _cho_solve(L, rhs, alpha)
        for b in range(nb):
            _diff(alpha[:p], ks[b], Da[starts[b]:starts[b + 1]], tmp)
        for i in range(M):
            z[i] = Da[i] + u[i]
        for b in range(nb):
            _fused_dp(z[starts[b]:starts[b + 1]], fw[b], dnew[starts[b]:starts[b + 1]])
        r2 = 0.0
        nDa = 0.0
        nd = 0.0
        for i in range(M):
            rr = Da[i] - dnew[i]
            u[i] += rr
            r2 += rr * rr
            nDa += Da[i] * Da[i]
            nd += dnew[i] * dnew[i]
            w[i] = dnew[i] - delta[i]
            delta[i] = dnew[i]
        pres = np.sqrt(r2)
        # dual residual ||sum_b rho_b D_b'(delta_new - delta_old)||, scale ||sum_b rho_b D_b'u_b||
        back[:] = 0.0
        for b in range(nb):
            for i in range(starts[b], starts[b + 1]):
                w[i] *= rhos[b]
            _diff_t(w[starts[b]:starts[b + 1]], ks[b], back[:p], tmp)
        s2 = 0.0
        for i in range(p):
            s2 += back[i] * back[i]
        dres = np.sqrt(s2)
        back[:] = 0.0
        for b in range(nb):
            for i in range(starts[b], starts[b + 1]):
                w[i] = rhos[b] * u[i]
            _diff_t(w[starts[b]:starts[b + 1]], ks[b], back[:p], tmp)
        su = 0.0
        for i in range(p):
            su += back[i] * back[i]
        eps_pri = sqrtM * eps_abs + eps_rel * max(np.sqrt(nDa), np.sqrt(nd))
        eps_dual = sqrtP * eps_abs + eps_rel * np.sqrt(su)
        if pres <= eps_pri and dres <= eps_dual:
            converged = True
            break
    return it, pres, dres, converged


# ---------------------------------------------------------------------------
# problem setup


def _check_design(X, y, r):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1:
        raise DimensionError("X must be 2-D and y 1-D")
    if X.shape[0] != y.shape[0]:
        raise DimensionError(f"X has {X.shape[0]} rows but y has length {y.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("design or response contains NaN or Inf")
    if r < 0 or r >= X.shape[1]:
        raise DimensionError(f"invalid number of scalar columns r={r} for {X.shape[1]} columns")
    return X, y


RHO_FLOOR = 1e-3


def _rho_for(penalty: PenaltySpec, config: AdmmConfig) -> tuple:
    """Per-block augmentation weights."""
    n = len(penalty.terms)
    if config.rho_rule == "custom":
        return (float(config.rho),) * n
    top = float(max(penalty.lams))
    if config.rho_rule == "max":
        return (top,) * n
    return tuple(max(float(l), RHO_FLOOR * top) for l in penalty.lams)


def penalty_objective(X, y, alpha, penalty: PenaltySpec, r: int = 0) -> float:
    """``||y - X alpha||^2 + sum_i lam_i ||D^(k_i+1) alpha_f||_1``."""
    X = np.asarray(X, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    p = X.shape[1] - r
    resid = np.asarray(y, dtype=float) - X @ alpha
    val = float(resid @ resid)
    for t in penalty.terms:
        if t.lam > 0:
            val += t.lam * float(np.abs(np.diff(alpha[:p], n=t.order)).sum())
    return val


class AdmmProblem:
    """Design-level cache shared by every solve on the same ``X``.

    Holds ``X'X`` and the reduced-order constraint operator; Cholesky factors
    of ``X'X + sum_i rho_i D_i'D_i`` are cached per ``rho`` tuple so repeated solves (bootstrap
    replicates, warm restarts at a fixed penalty) reuse them.
    """

    def __init__(self, X, orders: Sequence[int], r: int = 0, weights=None, max_cached: int = 4):
        X = np.asarray(X, dtype=float)
        if weights is not None:
            X = X * np.sqrt(np.asarray(weights, dtype=float))[:, None]
        self.X = X
        self.r = int(r)
        self.P = X.shape[1]
        self.p = self.P - self.r
        self.orders = tuple(int(o) for o in orders)
        if min(self.orders) < 1:
            raise ValueError("penalized derivative orders must be >= 1")
        if self.p < max(self.orders) + 1:
            raise DimensionError(
                f"grid length p={self.p} too short for a difference penalty of order {max(self.orders)}")
        # constraint uses one difference less than the penalty
        self.ks = np.array([o - 1 for o in self.orders], dtype=np.int64)
        self.constraint = augment_operator(
            [build_difference_operator(self.p, int(k)) for k in self.ks], self.r)
        self.XtX = X.T @ X
        self.block_grams = [gram(augment_operator(b, self.r)) for b in self.constraint.bases]
        self._factors: dict[tuple, np.ndarray] = {}
        self._max_cached = max_cached

    @property
    def n_constraints(self) -> int:
        return self.constraint.shape[0]

    def factor(self, rhos) -> np.ndarray:
        rhos = tuple(float(v) for v in np.broadcast_to(np.asarray(rhos, dtype=float),
                                                        (len(self.block_grams),)))
        L = self._factors.get(rhos)
        if L is not None:
            return L
        A = self.XtX.copy()
        for rho, G in zip(rhos, self.block_grams):
            A += rho * G
        try:
            L = scipy.linalg.cholesky(A, lower=True)
        except np.linalg.LinAlgError:
            jitter = 1e-10 * np.trace(A) / self.P
            logger.debug("Cholesky failed at rho=%s; adding ridge jitter %g", rhos, jitter)
            try:
                L = scipy.linalg.cholesky(A + jitter * np.eye(self.P), lower=True)
            except np.linalg.LinAlgError as exc:
                raise SingularSystemError(
                    "X'X + rho D'D is singular; add a ridge jitter or increase the penalty") from exc
        if len(self._factors) >= self._max_cached:
            self._factors.pop(next(iter(self._factors)))
        self._factors[rhos] = L
        return L

    def solve(self, y, penalty: PenaltySpec, config: Optional[AdmmConfig] = None,
              weights=None) -> AdmmState:
        config = config or AdmmConfig()
        if penalty.orders != self.orders:
            raise ValueError(f"penalty orders {penalty.orders} do not match problem orders {self.orders}")
        y = np.asarray(y, dtype=float)
        if weights is not None:
            y = y * np.sqrt(np.asarray(weights, dtype=float))
        if y.shape[0] != self.X.shape[0]:
            raise DimensionError(f"y has length {y.shape[0]}, expected {self.X.shape[0]}")
        M = self.n_constraints
        if penalty.strength == 0.0:
            alpha = np.linalg.lstsq(self.X, y, rcond=None)[0]
            delta = self.constraint.apply(alpha)
            return AdmmState(alpha, delta, np.zeros(M), 0, 0.0, 0.0, True, 0.0,
                             penalty_objective(self.X, y, alpha, penalty, self.r), penalty)
        rhos = _rho_for(penalty, config)
        L = self.factor(rhos)
        rho_vec = np.repeat(rhos, self.constraint.block_rows)
        warm = config.warm_start
        if warm is not None and warm.alpha.shape == (self.P,) and warm.delta.shape == (M,):
            alpha = warm.alpha.astype(float).copy()
            delta = warm.delta.astype(float).copy()
            # scaled dual is y_dual / rho; keep y_dual fixed across rho changes
            old = np.repeat(warm.rhos, self.constraint.block_rows) if warm.rhos else np.full(M, warm.rho)
            u = warm.u.astype(float) * (old / rho_vec)
        else:
            alpha = np.zeros(self.P)
            delta = np.zeros(M)
            u = np.zeros(M)
        fw = np.array([t.lam / (2.0 * rho) for t, rho in zip(penalty.terms, rhos)])
        Xty = self.X.T @ y
        it, pres, dres, conv = _admm_loop(L, Xty, self.p, self.ks, fw, np.array(rhos), alpha, delta, u,
                                          int(config.max_iter), float(config.eps_abs),
                                          float(config.eps_rel))
        if not conv:
            logger.debug("ADMM hit max_iter=%d (primal %.3g, dual %.3g)", it, pres, dres)
        obj = penalty_objective(self.X, y, alpha, penalty, self.r)
        return AdmmState(alpha, delta, u, int(it), float(pres), float(dres), bool(conv), max(rhos), obj,
                         penalty, rhos)


# ---------------------------------------------------------------------------
# public operations


def admm_solve(X, y, penalty: PenaltySpec, config: Optional[AdmmConfig] = None, r: int = 0) -> AdmmState:
    """Solve the penalized least-squares problem for one penalty.

    Parameters
    ----------
    X : array-like, shape (n, p + r)
        Design; the last ``r`` columns are unpenalized scalar covariates.
    y : array-like, shape (n,)
    penalty : PenaltySpec
        One term, or two terms (the stacked mixed penalty).
    config : AdmmConfig, optional
    r : int
        Number of trailing unpenalized columns.
    """
    X, y = _check_design(X, y, r)
    return AdmmProblem(X, penalty.orders, r).solve(y, penalty, config)


def mixed_solve(X, y, penalty: PenaltySpec, config: Optional[AdmmConfig] = None, r: int = 0) -> AdmmState:
    """Two-term penalty ``lam_1 ||D^(k+1) f||_1 + lam_2 ||D^(l+1) f||_1``."""
    if len(penalty.terms) != 2:
        raise ValueError("mixed_solve needs a two-term penalty")
    return admm_solve(X, y, penalty, config, r)


def solve_path(X, y, penalty_grid: Iterable[PenaltySpec], config: Optional[AdmmConfig] = None,
               r: int = 0, problem: Optional[AdmmProblem] = None) -> list:
    """Warm-started solutions along a grid sorted by decreasing strength.

    Returns one entry per grid point: an :class:`AdmmState`, or the exception
    raised at that point (the path continues past failures).
    """
    grid = list(penalty_grid)
    if not grid:
        raise ValueError("penalty grid is empty")
    strengths = [g.strength for g in grid]
    if any(a < b for a, b in zip(strengths, strengths[1:])):
        raise ValueError("penalty grid must be sorted by decreasing total penalty")
    X, y = _check_design(X, y, r)
    config = config or AdmmConfig()
    if problem is None:
        problem = AdmmProblem(X, grid[0].orders, r)
    out = []
    warm = config.warm_start
    for pen in grid:
        try:
            state = problem.solve(y, pen, replace(config, warm_start=warm))
        except (np.linalg.LinAlgError, ValueError) as exc:
            out.append(exc)
            continue
        out.append(state)
        warm = state
    return out


def null_space_basis(p: int, order: int) -> np.ndarray:
    """Orthonormal basis of polynomials of degree < ``order`` on the index grid."""
    t = np.linspace(-1.0, 1.0, p)
    V = np.vander(t, order, increasing=True)
    return np.linalg.qr(V)[0]


def polynomial_fit(X, y, order: int, r: int = 0) -> np.ndarray:
    """Least-squares fit with ``f`` restricted to the null space of ``D^(order)``."""
    X, y = _check_design(X, y, r)
    p = X.shape[1] - r
    N = np.zeros((p + r, order + r))
    N[:p, :order] = null_space_basis(p, order)
    N[p:, order:] = np.eye(r)
    c = np.linalg.lstsq(X @ N, y, rcond=None)[0]
    return N @ c


def lambda_max(X, y, order: int, r: int = 0) -> float:
    """Smallest ``lam`` at which the fit is a degree ``order - 1`` polynomial.

    At the polynomial-restricted least-squares fit ``theta0`` the gradient
    ``g = 2 X'(y - X theta0)`` is orthogonal to the polynomials, so
    ``g_f = lam D' v`` has the unique solution ``v = (D D')^{-1} D g_f / lam``;
    stationarity needs ``||v||_inf <= 1``.
    """
    X, y = _check_design(X, y, r)
    p = X.shape[1] - r
    theta0 = polynomial_fit(X, y, order, r)
    g = 2.0 * X.T @ (y - X @ theta0)
    D = build_difference_operator(p, order)
    Dd = D.todense()
    v = scipy.linalg.cho_solve(scipy.linalg.cho_factor(Dd @ Dd.T), D.apply(g[:p]))
    return float(np.max(np.abs(v)))


def lambda_grid(lam_max: float, num: int = 50, ratio: float = 1e-4) -> np.ndarray:
    """Geometric grid from ``lam_max`` down to ``ratio * lam_max``."""
    if lam_max <= 0:
        return np.zeros(1)
    return np.geomspace(lam_max, lam_max * ratio, num)
