"""Functional trend-filtering models.

The conditional mean uses the plain grid dot product ``X_i . f`` as the
discretized integral; grid spacing is kept only as reporting metadata.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.special

from .admm import (AdmmConfig, AdmmProblem, AdmmState, PenaltySpec, lambda_grid,
                   lambda_max, null_space_basis)
from .diffops import DimensionError, augment_operator, build_difference_operator, gram

logger = logging.getLogger(__name__)

MODEL_FORMAT = "spectf-model"
MODEL_VERSION = 1
PROB_CLAMP = 1e-8
WEIGHT_FLOOR = 1e-6
DIVERGENCE_NORM = 1e6


class DivergenceError(RuntimeError):
    """Raised when the GLM coefficients blow up (typically separation)."""


# ---------------------------------------------------------------------------
# response families


@dataclass(frozen=True)
class ResponseFamily:
    """Exponential family with its canonical link.

    For canonical links the IRLS working weight equals the variance function,
    ``W = V(mu)``.
    """

    kind: str = "gaussian"

    def __post_init__(self):
        if self.kind not in ("gaussian", "bernoulli", "poisson"):
            raise ValueError(f"unknown family {self.kind!r}")

    @property
    def link(self) -> str:
        return {"gaussian": "identity", "bernoulli": "logit", "poisson": "log"}[self.kind]

    def mean(self, eta):
        eta = np.asarray(eta, dtype=float)
        if self.kind == "gaussian":
            return eta
        if self.kind == "bernoulli":
            return np.clip(scipy.special.expit(eta), PROB_CLAMP, 1.0 - PROB_CLAMP)
        return np.exp(np.minimum(eta, 700.0))

    def linkfun(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.kind == "gaussian":
            return mu
        if self.kind == "bernoulli":
            return scipy.special.logit(mu)
        return np.log(mu)

    def variance(self, mu):
        mu = np.asarray(mu, dtype=float)
        if self.kind == "gaussian":
            return np.ones_like(mu)
        if self.kind == "bernoulli":
            return mu * (1.0 - mu)
        return mu

    def deviance(self, y, mu) -> float:
        """Total deviance; equals the residual sum of squares for Gaussian."""
        y = np.asarray(y, dtype=float)
        mu = np.asarray(mu, dtype=float)
        if self.kind == "gaussian":
            return float(np.sum((y - mu) ** 2))
        if self.kind == "bernoulli":
            return float(-2.0 * np.sum(y * np.log(mu) + (1.0 - y) * np.log1p(-mu)))
        ylogy = scipy.special.xlogy(y, y / mu)
        return float(2.0 * np.sum(ylogy - (y - mu)))

    def validate(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if not np.all(np.isfinite(y)):
            raise ValueError("response contains NaN or Inf")
        if self.kind == "bernoulli" and not np.all((y == 0) | (y == 1)):
            raise ValueError("Bernoulli responses must be 0 or 1")
        if self.kind == "poisson" and not np.all((y >= 0) & (y == np.round(y))):
            raise ValueError("Poisson responses must be nonnegative integers")
        return y

    def initial_mean(self, y):
        y = np.asarray(y, dtype=float)
        if self.kind == "gaussian":
            return y.copy()
        return (y + y.mean()) / 2.0


GAUSSIAN = ResponseFamily("gaussian")
BERNOULLI = ResponseFamily("bernoulli")
POISSON = ResponseFamily("poisson")


def as_family(family) -> ResponseFamily:
    return family if isinstance(family, ResponseFamily) else ResponseFamily(str(family))


# ---------------------------------------------------------------------------
# fitted model


@dataclass(frozen=True)
class TfFit:
    """A fitted functional coefficient and scalar coefficients.

    ``gamma_hat`` includes the intercept first when ``intercept`` is true.
    ``state`` carries the final solver state for warm restarts and is not
    serialized.
    """

    f_hat: np.ndarray
    gamma_hat: np.ndarray
    penalty: PenaltySpec
    family: ResponseFamily = GAUSSIAN
    diagnostics: dict = field(default_factory=dict)
    grid: Optional[np.ndarray] = None
    intercept: bool = False
    scalar_names: tuple = ()
    metadata: dict = field(default_factory=dict)
    state: Optional[AdmmState] = field(default=None, repr=False, compare=False)

    @property
    def p(self) -> int:
        return self.f_hat.shape[0]

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.f_hat, self.gamma_hat])

    def design(self, X, Z=None) -> np.ndarray:
        return build_design(X, Z, self.intercept, p=self.p, r_expected=len(self.gamma_hat))

    def linear_predictor(self, X, Z=None) -> np.ndarray:
        return self.design(X, Z) @ self.theta

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "family": self.family.kind,
            "link": self.family.link,
            "penalty": self.penalty.to_dict(),
            "intercept": self.intercept,
            "grid": None if self.grid is None else [float(v) for v in self.grid],
            "f_hat": [float(v) for v in self.f_hat],
            "gamma_hat": [float(v) for v in self.gamma_hat],
            "scalar_names": list(self.scalar_names),
            "diagnostics": _jsonable(self.diagnostics),
            "metadata": _jsonable(self.metadata),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "TfFit":
        if d.get("format") != MODEL_FORMAT:
            raise ValueError("not a spectf model document")
        if int(d.get("version", 0)) > MODEL_VERSION:
            raise ValueError(f"model version {d['version']} is newer than supported {MODEL_VERSION}")
        return cls(
            f_hat=np.asarray(d["f_hat"], dtype=float),
            gamma_hat=np.asarray(d["gamma_hat"], dtype=float),
            penalty=PenaltySpec.from_dict(d["penalty"]),
            family=ResponseFamily(d["family"]),
            diagnostics=d.get("diagnostics", {}),
            grid=None if d.get("grid") is None else np.asarray(d["grid"], dtype=float),
            intercept=bool(d.get("intercept", False)),
            scalar_names=tuple(d.get("scalar_names", ())),
            metadata=d.get("metadata", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "TfFit":
        return cls.from_dict(json.loads(text))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, PenaltySpec):
        return obj.to_dict()
    return obj


def build_design(X, Z=None, intercept: bool = False, p: Optional[int] = None,
                 r_expected: Optional[int] = None) -> np.ndarray:
    """``[X | 1 | Z]`` with the intercept column first among the scalars."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DimensionError("X must be a 2-D array of spectra")
    if p is not None and X.shape[1] != p:
        raise DimensionError(f"spectra have {X.shape[1]} grid points, model expects {p}")
    n = X.shape[0]
    blocks = [X]
    if intercept:
        blocks.append(np.ones((n, 1)))
    if Z is not None:
        Z = np.asarray(Z, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        if Z.shape[0] != n:
            raise DimensionError(f"Z has {Z.shape[0]} rows, X has {n}")
        blocks.append(Z)
    out = np.hstack(blocks) if len(blocks) > 1 else X
    if r_expected is not None and out.shape[1] - X.shape[1] != r_expected:
        raise DimensionError(
            f"model has {r_expected} scalar coefficients, design provides {out.shape[1] - X.shape[1]}")
    return out


def _scalar_names(Z, intercept, names):
    r = 0 if Z is None else (1 if np.ndim(Z) == 1 else np.shape(Z)[1])
    if names is None:
        names = [f"z{j + 1}" for j in range(r)]
    names = list(names)
    if len(names) != r:
        raise DimensionError(f"{len(names)} scalar names for {r} scalar columns")
    return tuple((["intercept"] if intercept else []) + names)


def _make_fit(theta, p, penalty, family, state, grid, intercept, names, diagnostics, metadata=None):
    return TfFit(
        f_hat=np.asarray(theta[:p], dtype=float).copy(),
        gamma_hat=np.asarray(theta[p:], dtype=float).copy(),
        penalty=penalty,
        family=family,
        diagnostics=diagnostics,
        grid=None if grid is None else np.asarray(grid, dtype=float),
        intercept=intercept,
        scalar_names=names,
        metadata=dict(metadata or {}),
        state=state,
    )


# ---------------------------------------------------------------------------
# fitting


def fit_gaussian(X, y, penalty: PenaltySpec, Z=None, intercept: bool = False,
                 config: Optional[AdmmConfig] = None, grid=None, scalar_names=None,
                 problem: Optional[AdmmProblem] = None, metadata=None) -> TfFit:
    """Gaussian functional (or partial functional) trend-filtering fit.

    Minimizes ``||y - X f - Z gamma||^2 + sum_i lam_i ||D^(k_i+1) f||_1``;
    scalar coefficients are unpenalized.
    """
    Xt = build_design(X, Z, intercept)
    y = GAUSSIAN.validate(y)
    n, P = Xt.shape
    p = np.shape(X)[1]
    if n < 2:
        raise ValueError("need at least two observations")
    if y.shape[0] != n:
        raise DimensionError(f"y has length {y.shape[0]}, design has {n} rows")
    names = _scalar_names(Z, intercept, scalar_names)
    if np.ptp(y) == 0.0 and y[0] != 0.0:
        if not intercept:
            raise ValueError("constant response without an intercept column")
        theta = np.zeros(P)
        theta[p] = y[0]
        diag = {"iterations": 0, "converged": True, "objective": 0.0, "degenerate": "intercept-only"}
        return _make_fit(theta, p, penalty, GAUSSIAN, None, grid, intercept, names, diag, metadata)
    if problem is None:
        problem = AdmmProblem(Xt, penalty.orders, P - p)
    state = problem.solve(y, penalty, config)
    resid = y - Xt @ state.alpha
    diag = {
        "iterations": state.iter,
        "converged": state.converged,
        "primal_res": state.primal_res,
        "dual_res": state.dual_res,
        "objective": state.objective,
        "rho": state.rho,
        "sigma2": float(resid @ resid / n),
    }
    return _make_fit(state.alpha, p, penalty, GAUSSIAN, state, grid, intercept, names, diag, metadata)


def fit_mixed(X, y, penalty: PenaltySpec, **kwargs) -> TfFit:
    """Two-term penalty fit; see :func:`fit_gaussian`."""
    if len(penalty.terms) != 2:
        raise ValueError("fit_mixed needs a two-term penalty")
    return fit_gaussian(X, y, penalty, **kwargs)


def penalized_deviance(family: ResponseFamily, Xt, y, theta, penalty: PenaltySpec, p: int) -> float:
    mu = family.mean(Xt @ theta)
    val = family.deviance(y, mu)
    for t in penalty.terms:
        if t.lam > 0:
            val += t.lam * float(np.abs(np.diff(theta[:p], n=t.order)).sum())
    return val


def fit_glm(X, y, family, penalty: PenaltySpec, Z=None, intercept: bool = False,
            config: Optional[AdmmConfig] = None, max_outer: int = 100, tol: float = 1e-6,
            max_halving: int = 20, warm_start: Optional[TfFit] = None, grid=None,
            scalar_names=None, metadata=None) -> TfFit:
    """Generalized functional trend filtering by penalized IRLS.

    Each outer iteration forms the working response
    ``s = eta + (y - mu) / V(mu)`` and weights ``W = V(mu)``, then solves
    ``||W^(1/2) (s - X theta)||^2 + penalty`` with the ADMM (warm-started at
    the current iterate). A step that increases the penalized deviance is
    halved up to ``max_halving`` times.
    """
    family = as_family(family)
    if family.kind == "gaussian":
        return fit_gaussian(X, y, penalty, Z=Z, intercept=intercept, config=config, grid=grid,
                            scalar_names=scalar_names, metadata=metadata)
    y = family.validate(y)
    Xt = build_design(X, Z, intercept)
    n, P = Xt.shape
    p = np.shape(X)[1]
    r = P - p
    if y.shape[0] != n:
        raise DimensionError(f"y has length {y.shape[0]}, design has {n} rows")
    names = _scalar_names(Z, intercept, scalar_names)
    config = config or AdmmConfig()

    if warm_start is not None:
        theta = warm_start.theta.copy()
        eta = Xt @ theta
        mu = family.mean(eta)
        state = warm_start.state
        obj = penalized_deviance(family, Xt, y, theta, penalty, p)
    else:
        theta = None
        mu = family.initial_mean(y)
        eta = family.linkfun(mu)
        state = None
        obj = np.inf
    trace = []
    halvings = []
    inner_iters = 0
    converged = False
    outer = 0
    for outer in range(1, max_outer + 1):
        V = family.variance(mu)
        W = np.maximum(V, WEIGHT_FLOOR)
        s = eta + (y - mu) / W
        problem = AdmmProblem(Xt, penalty.orders, r, weights=W)
        cfg = replace(config, warm_start=state)
        new_state = problem.solve(s, penalty, cfg, weights=W)
        inner_iters += new_state.iter
        cand = new_state.alpha
        new_obj = penalized_deviance(family, Xt, y, cand, penalty, p)
        h = 0
        if theta is not None:
            while not new_obj <= obj and h < max_halving:
                h += 1
                cand = theta + 0.5 * (cand - theta)
                new_obj = penalized_deviance(family, Xt, y, cand, penalty, p)
            if not new_obj <= obj:
                # no descent along the Newton direction: the iterate is stationary to precision
                cand, new_obj = theta, obj
        if not np.all(np.isfinite(cand)) or np.max(np.abs(cand)) > DIVERGENCE_NORM:
            raise DivergenceError(
                "coefficients diverged (|theta| > 1e6), likely separation; increase the penalty")
        halvings.append(h)
        trace.append(new_obj)
        if h > 0:
            delta = problem.constraint.apply(cand)
            new_state = replace(new_state, alpha=cand, delta=delta, u=new_state.u)
        change = abs(obj - new_obj)
        theta, obj, state = cand, new_obj, new_state
        eta = Xt @ theta
        mu = family.mean(eta)
        if np.isfinite(change) and change <= tol * (abs(new_obj) + 0.1):
            converged = True
            break
    diag = {
        "outer_iterations": outer,
        "inner_iterations": inner_iters,
        "converged": converged,
        "objective": obj,
        "objective_trace": trace,
        "halvings": halvings,
        "deviance": family.deviance(y, mu),
    }
    return _make_fit(theta, p, penalty, family, state, grid, intercept, names, diag, metadata)


def fit(X, y, penalty: PenaltySpec, family="gaussian", **kwargs) -> TfFit:
    family = as_family(family)
    if family.kind == "gaussian":
        kwargs.pop("max_outer", None)
        kwargs.pop("warm_start", None)
        return fit_gaussian(X, y, penalty, **kwargs)
    return fit_glm(X, y, family, penalty, **kwargs)


def fit_spline_baseline(X, y, lam: float, Z=None, intercept: bool = False, grid=None,
                        scalar_names=None, family="gaussian", max_iter: int = 100,
                        tol: float = 1e-8) -> TfFit:
    """Penalized-spline comparator with a squared second-difference penalty.

    Gaussian: ``(X'X + lam D2'D2)^{-1} X'y``. Other families minimize
    ``deviance + lam ||D2 f||^2`` by IRLS with step-halving.
    """
    family = as_family(family)
    Xt = build_design(X, Z, intercept)
    y = family.validate(y)
    n, P = Xt.shape
    p = np.shape(X)[1]
    if y.shape[0] != n:
        raise DimensionError(f"y has length {y.shape[0]}, design has {n} rows")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    names = _scalar_names(Z, intercept, scalar_names)
    D = augment_operator(build_difference_operator(p, 2), P - p)
    G = gram(D)
    penalty = PenaltySpec.from_orders([2], lam)

    def objective(theta):
        return family.deviance(y, family.mean(Xt @ theta)) + lam * float(theta @ G @ theta)

    if family.kind == "gaussian":
        theta = _spd_solve(Xt.T @ Xt + lam * G, Xt.T @ y)
        diag = {"estimator": "spline", "penalty_norm": "l2", "objective": objective(theta)}
        return _make_fit(theta, p, penalty, family, None, grid, intercept, names, diag)

    mu = family.initial_mean(y)
    eta = family.linkfun(mu)
    theta, obj = None, np.inf
    converged = False
    for it in range(1, max_iter + 1):
        W = np.maximum(family.variance(mu), WEIGHT_FLOOR)
        s = eta + (y - mu) / W
        cand = _spd_solve(Xt.T @ (W[:, None] * Xt) + lam * G, Xt.T @ (W * s))
        new = objective(cand)
        if theta is not None:
            h = 0
            while not new <= obj and h < 20:
                cand = theta + 0.5 * (cand - theta)
                new = objective(cand)
                h += 1
            if not new <= obj:
                converged = True
                break
        done = theta is not None and abs(obj - new) <= tol * (abs(new) + 0.1)
        theta, obj = cand, new
        eta = Xt @ theta
        mu = family.mean(eta)
        if done:
            converged = True
            break
    diag = {"estimator": "spline", "penalty_norm": "l2", "objective": obj,
            "outer_iterations": it, "converged": converged}
    return _make_fit(theta, p, penalty, family, None, grid, intercept, names, diag)


def _spd_solve(A, b):
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A), b)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(A) / A.shape[0]
        try:
            return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A + jitter * np.eye(A.shape[0])), b)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(A, b, rcond=None)[0]


def predict(fit: TfFit, X_new, Z_new=None) -> np.ndarray:
    """Mean response on the natural scale (fitted value, probability or rate)."""
    return fit.family.mean(fit.linear_predictor(X_new, Z_new))


def predict_label(fit: TfFit, X_new, Z_new=None) -> np.ndarray:
    """0/1 labels for a Bernoulli model at the 0.5 probability threshold."""
    if fit.family.kind != "bernoulli":
        raise ValueError("labels are only defined for Bernoulli models")
    return (predict(fit, X_new, Z_new) >= 0.5).astype(int)


# ---------------------------------------------------------------------------
# lambda grids


def glm_lambda_max(X, y, family, order: int, Z=None, intercept: bool = False) -> float:
    """Smallest ``lam`` giving a polynomial ``f`` for a GLM (deviance scaling)."""
    family = as_family(family)
    Xt = build_design(X, Z, intercept)
    p = np.shape(X)[1]
    r = Xt.shape[1] - p
    if family.kind == "gaussian":
        return lambda_max(Xt, y, order, r)
    y = family.validate(y)
    N = np.zeros((p + r, order + r))
    N[:p, :order] = null_space_basis(p, order)
    N[p:, order:] = np.eye(r)
    XN = Xt @ N
    c = _newton_glm(XN, y, family)
    mu = family.mean(XN @ c)
    g = 2.0 * Xt.T @ (y - mu)
    D = build_difference_operator(p, order).todense()
    v = scipy.linalg.cho_solve(scipy.linalg.cho_factor(D @ D.T), D @ g[:p])
    return float(np.max(np.abs(v)))


def _newton_glm(X, y, family, max_iter=100, tol=1e-10, ridge=1e-8):
    # small unpenalized IRLS used for the null-space fit
    mu = family.initial_mean(y)
    eta = family.linkfun(mu)
    beta = np.linalg.lstsq(X, eta, rcond=None)[0]
    for _ in range(max_iter):
        mu = family.mean(X @ beta)
        W = np.maximum(family.variance(mu), WEIGHT_FLOOR)
        H = X.T @ (W[:, None] * X) + ridge * np.eye(X.shape[1])
        step = np.linalg.solve(H, X.T @ (y - mu))
        beta = beta + step
        if np.max(np.abs(step)) < tol * (1 + np.max(np.abs(beta))):
            break
    return beta


def default_lambda_grid(X, y, orders: Sequence[int], family="gaussian", Z=None, intercept=False,
                        num: Optional[int] = None, ratio: float = 1e-4) -> list:
    """Penalty grid from per-order ``lambda_max`` down to ``ratio * lambda_max``.

    One order gives a 50-point geometric path; two orders give a 15 x 15
    product grid in serpentine order (consecutive points are neighbours along
    the ``lam_1`` axis, so warm starts stay local).
    """
    orders = [int(o) for o in orders]
    lmax = [glm_lambda_max(X, y, family, o, Z, intercept) for o in orders]
    if len(orders) == 1:
        lams = lambda_grid(lmax[0], num or 50, ratio)
        return [PenaltySpec.from_orders(orders, lam) for lam in lams]
    num = num or 15
    l1 = lambda_grid(lmax[0], num, ratio)
    l2 = lambda_grid(lmax[1], num, ratio)
    return penalty_grid_2d(orders, l1, l2)


def penalty_grid_2d(orders, lam1s, lam2s) -> list:
    lam1s = np.sort(np.asarray(lam1s, dtype=float))[::-1]
    lam2s = np.sort(np.asarray(lam2s, dtype=float))[::-1]
    grid = []
    for i, l2 in enumerate(lam2s):
        row = lam1s if i % 2 == 0 else lam1s[::-1]
        grid.extend(PenaltySpec.from_orders(orders, (l1, l2)) for l1 in row)
    return grid


# ---------------------------------------------------------------------------
# model selection


@dataclass(frozen=True)
class CvReport:
    grid: list
    mean: np.ndarray
    se: np.ndarray
    fold_scores: np.ndarray
    best: PenaltySpec
    best_index: int
    folds: int
    seed: int
    loss: str
    misclassification: Optional[np.ndarray] = None
    mode: str = "kfold"
    failures: int = 0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "folds": self.folds,
            "seed": self.seed,
            "loss": self.loss,
            "best_index": self.best_index,
            "best": self.best.to_dict(),
            "grid": [g.to_dict() for g in self.grid],
            "mean": _jsonable(self.mean),
            "se": _jsonable(self.se),
            "misclassification": None if self.misclassification is None else _jsonable(self.misclassification),
            "failures": self.failures,
        }


def fold_assignment(y, K: int, seed: int, stratify: bool = False) -> np.ndarray:
    """Deterministic fold labels ``0..K-1``; stratified by class when asked."""
    y = np.asarray(y)
    n = y.shape[0]
    rng = np.random.default_rng(seed)
    folds = np.empty(n, dtype=int)
    if stratify:
        offset = 0
        for cls in np.unique(y):
            idx = np.flatnonzero(y == cls)
            idx = idx[rng.permutation(idx.size)]
            folds[idx] = (np.arange(idx.size) + offset) % K
            offset += idx.size
    else:
        perm = rng.permutation(n)
        folds[perm] = np.arange(n) % K
    return folds


def score_path(X, y, grid: Sequence[PenaltySpec], family, X_eval, y_eval, Z=None, Z_eval=None,
               intercept=False, config: Optional[AdmmConfig] = None, keep_fits: bool = False):
    """Fit along ``grid`` with warm starts; score each fit on the evaluation set.

    Returns ``(loss, misclassification, fits)``; failed grid points score
    ``inf`` and have ``None`` fits.
    """
    family = as_family(family)
    config = config or AdmmConfig()
    losses = np.full(len(grid), np.inf)
    miscls = np.full(len(grid), np.nan)
    fits = []
    Xt = build_design(X, Z, intercept)
    p = np.shape(X)[1]
    problem = None
    prev: Optional[TfFit] = None
    for j, pen in enumerate(grid):
        try:
            if family.kind == "gaussian":
                if problem is None or problem.orders != pen.orders:
                    problem = AdmmProblem(Xt, pen.orders, Xt.shape[1] - p)
                warm = prev.state if prev is not None else None
                f = fit_gaussian(X, y, pen, Z=Z, intercept=intercept,
                                 config=replace(config, warm_start=warm), problem=problem)
            else:
                f = fit_glm(X, y, family, pen, Z=Z, intercept=intercept, config=config, warm_start=prev)
        except (np.linalg.LinAlgError, DivergenceError, FloatingPointError, ValueError) as exc:
            logger.debug("fit failed at %s: %s", pen, exc)
            fits.append(None)
            prev = None
            continue
        prev = f
        mu = predict(f, X_eval, Z_eval)
        if family.kind == "gaussian":
            losses[j] = float(np.mean((np.asarray(y_eval) - mu) ** 2))
        else:
            losses[j] = family.deviance(y_eval, mu) / len(y_eval)
            if family.kind == "bernoulli":
                miscls[j] = float(np.mean((mu >= 0.5).astype(int) != np.asarray(y_eval)))
        fits.append(f if keep_fits else None)
    return losses, miscls, fits


def select_best(grid: Sequence[PenaltySpec], mean_scores) -> int:
    """Index of the minimum mean score; ties go to the larger total penalty."""
    mean_scores = np.asarray(mean_scores, dtype=float)
    best = np.nanmin(mean_scores)
    ties = np.flatnonzero(mean_scores == best)
    return int(max(ties, key=lambda i: (grid[i].strength, -i)))


def cross_validate(X, y, penalty_grid: Sequence[PenaltySpec], family="gaussian", Z=None,
                   intercept: bool = False, K: int = 10, seed: int = 0,
                   config: Optional[AdmmConfig] = None, holdout=None, threads: int = 1) -> CvReport:
    """K-fold (or holdout) selection over a penalty grid.

    Folds are a deterministic function of ``seed`` and are stratified for
    Bernoulli responses. Loss is mean squared error (Gaussian) or mean
    deviance; Bernoulli misclassification is reported alongside. With
    ``holdout=(X_val, y_val[, Z_val])`` the model is trained on all data and
    scored once on the validation set.
    """
    family = as_family(family)
    grid = list(penalty_grid)
    if not grid:
        raise ValueError("penalty grid is empty")
    X = np.asarray(X, dtype=float)
    y = family.validate(y)
    Z = None if Z is None else np.asarray(Z, dtype=float)
    loss_name = "mse" if family.kind == "gaussian" else "deviance"

    if holdout is not None:
        X_val, y_val = holdout[0], family.validate(holdout[1])
        Z_val = holdout[2] if len(holdout) > 2 else None
        loss, mis, _ = score_path(X, y, grid, family, X_val, y_val, Z, Z_val, intercept, config)
        idx = select_best(grid, loss)
        return CvReport(grid, loss, np.zeros_like(loss), loss[None, :], grid[idx], idx, 1, seed,
                        loss_name, mis if family.kind == "bernoulli" else None, "holdout",
                        int(np.sum(~np.isfinite(loss))))

    if K < 2:
        raise ValueError("K must be at least 2")
    folds = fold_assignment(y, K, seed, stratify=family.kind == "bernoulli")

    def run(k):
        tr, te = folds != k, folds == k
        return score_path(X[tr], y[tr], grid, family, X[te], y[te],
                          None if Z is None else Z[tr], None if Z is None else Z[te],
                          intercept, config)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(K)))
    else:
        results = [run(k) for k in range(K)]
    scores = np.vstack([r[0] for r in results])
    mis = np.vstack([r[1] for r in results])
    with np.errstate(invalid="ignore"):
        mean = scores.mean(axis=0)
        se = scores.std(axis=0, ddof=1) / np.sqrt(K)
    idx = select_best(grid, mean)
    return CvReport(grid, mean, se, scores, grid[idx], idx, K, seed, loss_name,
                    mis.mean(axis=0) if family.kind == "bernoulli" else None, "kfold",
                    int(np.sum(~np.isfinite(scores))))
