"""Synthetic benchmark: covariate generation, target functions, scenarios, MISE.

Functional covariates are cubic B-spline curves on ``[0, 1]`` (10 equispaced
internal knots, standard-normal coefficients) evaluated on an equispaced
grid. The covariate matrix is generated once per benchmark from ``x_seed``
and reused by every repetition; responses, scalar covariates and validation
sets are redrawn per repetition.

Signal-to-noise ratio is ``sd(mu) / sd(noise)``. Benchmark MISE is taken on
the index grid (unit spacing), the same discretization as the model integral.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.special

from .admm import AdmmConfig
from .models import (BERNOULLI, GAUSSIAN, default_lambda_grid, fit_spline_baseline, predict,
                     score_path, select_best)

logger = logging.getLogger(__name__)

# f1 is a cubic B-spline with internal knots 0.2, 0.75, 0.9; these coefficients
# were drawn once from a standard normal (numpy default_rng(20230515)) and are fixed.
F1_KNOTS = (0.2, 0.75, 0.9)
F1_COEFFICIENTS = np.array([0.444305, -0.395839, 1.473599, -1.586537, -1.559338, -0.511762, -0.170986])
F3_LIMITS = (-0.3, 0.5)
HAT_DOMAIN = (-5.0, 5.0)
DEFAULT_GAMMA = (2.0, -1.0, 1.0, 0.0, 0.0)
DEFAULT_X_SEED = 20230515


# ---------------------------------------------------------------------------
# B-splines


def clamped_knots(internal: Sequence[float], degree: int = 3, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    internal = np.asarray(internal, dtype=float)
    return np.concatenate([np.full(degree + 1, lo), internal, np.full(degree + 1, hi)])


def bspline_basis(x, knots, degree: int = 3) -> np.ndarray:
    """Evaluate every B-spline basis function at ``x`` by Cox-de Boor recursion.

    Returns an array of shape ``(len(x), len(knots) - degree - 1)``. The
    right end of the knot range belongs to the last non-empty interval, so
    clamped bases sum to one on the closed domain.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    t = np.asarray(knots, dtype=float)
    n_intervals = t.size - 1
    B = np.zeros((x.size, n_intervals))
    for i in range(n_intervals):
        if t[i] < t[i + 1]:
            B[:, i] = (t[i] <= x) & (x < t[i + 1])
    last = np.flatnonzero(t[:-1] < t[1:])[-1]
    B[x == t[-1], last] = 1.0
    for d in range(1, degree + 1):
        nb = n_intervals - d
        new = np.zeros((x.size, nb))
        for i in range(nb):
            left = t[i + d] - t[i]
            right = t[i + d + 1] - t[i + 1]
            if left > 0:
                new[:, i] += (x - t[i]) / left * B[:, i]
            if right > 0:
                new[:, i] += (t[i + d + 1] - x) / right * B[:, i + 1]
        B = new
    return B


def unit_grid(p: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, p)


def covariate_basis(p: int, n_internal: int = 10) -> np.ndarray:
    internal = np.linspace(0.0, 1.0, n_internal + 2)[1:-1]
    return bspline_basis(unit_grid(p), clamped_knots(internal))


def gen_functional_covariates(n: int, p: int, seed: int, n_internal: int = 10) -> np.ndarray:
    """``n`` random cubic-spline curves on ``p`` equispaced points of ``[0, 1]``."""
    if n < 1 or p < 1:
        raise ValueError("n and p must be positive")
    basis = covariate_basis(p, n_internal)
    coef = np.random.default_rng(seed).standard_normal((n, basis.shape[1]))
    return coef @ basis.T


# ---------------------------------------------------------------------------
# targets


def native_grid(which: str, p: int) -> np.ndarray:
    """Grid of ``which`` in its own domain: ``[0, 1]`` for f1, ``[-5, 5]`` otherwise."""
    if which == "f1":
        return unit_grid(p)
    if which in ("f2", "f3"):
        return np.linspace(HAT_DOMAIN[0], HAT_DOMAIN[1], p)
    raise ValueError(f"unknown target {which!r}")


def mexican_hat(w):
    w = np.asarray(w, dtype=float)
    return (1.0 - w ** 2) * np.exp(-w ** 2 / 2.0)


def target_function(which: str, p: int) -> np.ndarray:
    if p < 8:
        raise ValueError("target functions need p >= 8")
    w = native_grid(which, p)
    if which == "f1":
        return bspline_basis(w, clamped_knots(F1_KNOTS)) @ F1_COEFFICIENTS
    f = mexican_hat(w)
    if which == "f3":
        f = np.clip(f, *F3_LIMITS)
    return f


def mise(f_hat, f_true, grid=None) -> float:
    """Integrated squared error as a Riemann sum on an equispaced grid.

    ``sum_j (f_hat_j - f_true_j)^2 * h`` with ``h`` the spacing of ``grid``.
    Without a grid the spacing is 1, the index grid on which the model
    integral ``X_i . f`` is itself discretized; the benchmark reports MISE on
    that scale.
    """
    f_hat = np.asarray(f_hat, dtype=float)
    f_true = np.asarray(f_true, dtype=float)
    if f_hat.shape != f_true.shape or f_hat.ndim != 1:
        raise ValueError("f_hat and f_true must be 1-D with equal lengths")
    h = 1.0
    if grid is not None:
        grid = np.asarray(grid, dtype=float)
        if grid.shape != f_hat.shape:
            raise ValueError("grid must match f_hat in length")
        if grid.size > 1:
            steps = np.diff(grid)
            h = float(steps.mean())
            if h <= 0 or np.ptp(steps) > 1e-8 * h:
                raise ValueError("grid must be equispaced and ascending")
    return float(np.sum((f_hat - f_true) ** 2) * h)


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str = "a"
    target: str = "f2"
    n: int = 250
    p: int = 100
    snr: float = 4.0
    r: int = 5
    gamma: tuple = DEFAULT_GAMMA
    seed: int = 0
    x_seed: int = DEFAULT_X_SEED
    noiseless: bool = False

    def __post_init__(self):
        if self.kind not in ("a", "b", "c"):
            raise ValueError(f"unknown scenario {self.kind!r}")
        if self.target not in ("f1", "f2", "f3"):
            raise ValueError(f"unknown target {self.target!r}")
        if self.n < 1 or self.p < 8:
            raise ValueError("need n >= 1 and p >= 8")
        if self.snr <= 0:
            raise ValueError("snr must be positive")
        if self.kind == "b" and len(self.gamma) != self.r:
            raise ValueError("gamma must have r entries")

    @property
    def family(self):
        return BERNOULLI if self.kind == "c" else GAUSSIAN


@dataclass(frozen=True)
class SyntheticDataset:
    X: np.ndarray
    Z: Optional[np.ndarray]
    y: np.ndarray
    f_true: np.ndarray
    mu_true: np.ndarray
    grid: np.ndarray
    sigma: float = 0.0


def gen_scenario(spec: ScenarioSpec, X: Optional[np.ndarray] = None, rng=None) -> SyntheticDataset:
    """Draw one dataset. ``X`` defaults to the fixed covariates for ``spec.x_seed``."""
    if X is None:
        X = gen_functional_covariates(spec.n, spec.p, spec.x_seed)
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    f = target_function(spec.target, spec.p)
    mu = X @ f
    Z = None
    if spec.kind == "b":
        Z = rng.standard_normal((X.shape[0], spec.r))
        mu = mu + Z @ np.asarray(spec.gamma, dtype=float)
    sigma = 0.0
    if spec.kind == "c":
        y = (rng.random(X.shape[0]) < scipy.special.expit(mu)).astype(float)
    elif spec.noiseless:
        y = mu.copy()
    else:
        sigma = float(np.std(mu) / spec.snr)
        y = mu + sigma * rng.standard_normal(X.shape[0])
    return SyntheticDataset(X, Z, y, f, mu, unit_grid(spec.p), sigma)


# ---------------------------------------------------------------------------
# MISE benchmark

ESTIMATORS = ("TF-4", "TF-1", "MTF", "SPL")
ESTIMATOR_ORDERS = {"TF-4": (4,), "TF-1": (1,), "MTF": (4, 1)}


@dataclass(frozen=True)
class BenchmarkConfig:
    reps: int = 100
    seed: int = 0
    n: int = 250
    p: int = 100
    snr: float = 4.0
    scenarios: tuple = ("a", "b", "c")
    targets: tuple = ("f1", "f2", "f3")
    estimators: tuple = ESTIMATORS
    n_lambda: int = 50
    n_lambda_2d: int = 15
    n_lambda_spline: int = 50
    val_size: Optional[int] = None
    x_seed: int = DEFAULT_X_SEED
    threads: int = 1
    max_iter: int = 5000
    cells: Optional[tuple] = None   # ((scenario, target, estimators), ...) overrides the full product

    def cell_list(self) -> list:
        if self.cells is not None:
            return [(sc, tg, tuple(est)) for sc, tg, est in self.cells]
        return [(sc, tg, tuple(self.estimators)) for sc in self.scenarios for tg in self.targets]


@dataclass
class BenchmarkReport:
    config: BenchmarkConfig
    mise: dict = field(default_factory=dict)       # (scenario, target, estimator) -> array
    failures: dict = field(default_factory=dict)   # same key -> count

    def rows(self) -> list:
        out = []
        for (sc, tg, est), vals in self.mise.items():
            vals = np.asarray(vals, dtype=float)
            ok = vals[np.isfinite(vals)]
            k = ok.size
            mean = float(ok.mean()) if k else float("nan")
            se = float(ok.std(ddof=1) / np.sqrt(k)) if k > 1 else float("nan")
            out.append({"scenario": sc, "function": tg, "estimator": est, "mean_mise": mean,
                        "se_mise": se, "reps": k, "seed": self.config.seed})
        return out

    def lookup(self, scenario, target, estimator) -> dict:
        for row in self.rows():
            if (row["scenario"], row["function"], row["estimator"]) == (scenario, target, estimator):
                return row
        raise KeyError((scenario, target, estimator))

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["scenario", "function", "estimator", "mean_mise", "se_mise", "reps", "seed"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def _spline_lambdas(X, num):
    from .diffops import build_difference_operator, gram
    D = build_difference_operator(X.shape[1], 2)
    scale = np.trace(X.T @ X) / np.trace(gram(D))
    return np.geomspace(scale * 1e2, scale * 1e-6, num)


def _tune_spline(data, val, family, num):
    lams = _spline_lambdas(data.X, num)
    best, best_loss = None, np.inf
    for lam in lams:
        try:
            f = fit_spline_baseline(data.X, data.y, lam, Z=data.Z, family=family)
        except (np.linalg.LinAlgError, FloatingPointError, ValueError):
            continue
        mu = predict(f, val.X, val.Z)
        loss = (float(np.mean((val.y - mu) ** 2)) if family.kind == "gaussian"
                else family.deviance(val.y, mu) / len(val.y))
        if loss < best_loss:
            best, best_loss = f, loss
    return best


def _tune_tf(data, val, family, orders, cfg: BenchmarkConfig):
    num = cfg.n_lambda if len(orders) == 1 else cfg.n_lambda_2d
    grid = default_lambda_grid(data.X, data.y, orders, family, data.Z, num=num)
    losses, _, fits = score_path(data.X, data.y, grid, family, val.X, val.y, data.Z, val.Z,
                                 config=AdmmConfig(max_iter=cfg.max_iter), keep_fits=True)
    if not np.any(np.isfinite(losses)):
        return None
    return fits[select_best(grid, losses)]


def run_cell_rep(kind: str, target: str, rep: int, X, X_val, cfg: BenchmarkConfig,
                 estimators: Optional[Sequence[str]] = None) -> dict:
    """MISE of every estimator on one repetition of one scenario/target cell.

    The repetition's random stream depends only on ``(seed, kind, target, rep)``,
    so results do not depend on which other cells or estimators are run.
    """
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(ord(kind), int(target[1]), rep))
    rng_train, rng_val = (np.random.default_rng(s) for s in ss.spawn(2))
    spec = ScenarioSpec(kind, target, X.shape[0], X.shape[1], cfg.snr, x_seed=cfg.x_seed)
    data = gen_scenario(spec, X, rng_train)
    val = gen_scenario(spec, X_val, rng_val)
    family = spec.family
    out = {}
    for est in (estimators or cfg.estimators):
        if est not in ESTIMATORS:
            raise ValueError(f"unknown estimator {est!r}")
        try:
            if est == "SPL":
                f = _tune_spline(data, val, family, cfg.n_lambda_spline)
            else:
                f = _tune_tf(data, val, family, ESTIMATOR_ORDERS[est], cfg)
        except Exception as exc:  # recorded as a failed repetition
            logger.warning("%s/%s/%s rep %d failed: %s", kind, target, est, rep, exc)
            f = None
        out[est] = float("nan") if f is None else mise(f.f_hat, data.f_true)
    return out


def run_table1(reps: int = 100, seed: int = 0, threads: int = 1, **kwargs) -> BenchmarkReport:
    """Repeat every scenario x target x estimator cell with validation-set tuning.

    Tuning picks the penalty minimizing validation loss (squared error, or
    deviance for Bernoulli) on an independent validation sample of size
    ``val_size`` (default ``n``) drawn from the same law.
    """
    if reps < 10:
        raise ValueError("reps must be at least 10")
    cfg = BenchmarkConfig(reps=reps, seed=seed, threads=threads, **kwargs)
    X = gen_functional_covariates(cfg.n, cfg.p, cfg.x_seed)
    X_val = gen_functional_covariates(cfg.val_size or cfg.n, cfg.p, cfg.x_seed + 1)
    report = BenchmarkReport(cfg)
    cells = cfg.cell_list()
    tasks = [(sc, tg, est, rep) for sc, tg, est in cells for rep in range(reps)]

    def run(task):
        return run_cell_rep(task[0], task[1], task[3], X, X_val, cfg, task[2])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    for sc, tg, ests in cells:
        for est in ests:
            vals = np.array([res[est] for (s, t, _, _), res in zip(tasks, results)
                             if s == sc and t == tg])
            report.mise[(sc, tg, est)] = vals
            report.failures[(sc, tg, est)] = int(np.sum(~np.isfinite(vals)))
    return report


def config_dict(cfg: BenchmarkConfig) -> dict:
    d = asdict(cfg)

    def plain(v):
        return [plain(x) for x in v] if isinstance(v, (tuple, list)) else v
    return {k: plain(v) for k, v in d.items()}
