"""Wild-bootstrap variability bands for Gaussian trend-filtering fits.

Each replicate perturbs the fitted values with residuals multiplied by
i.i.d. zero-mean, unit-variance auxiliary draws and refits at the original
penalty, warm-started at the original solution. Pointwise bands are the
empirical quantiles of the replicate curves.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .admm import AdmmConfig, AdmmProblem, _rho_for
from .ingest import format_float as _fmt
from .models import TfFit

logger = logging.getLogger(__name__)

SQRT5 = np.sqrt(5.0)


@dataclass(frozen=True)
class AuxiliaryLaw:
    """Zero-mean, unit-variance multiplier distribution.

    ``mammen``: two-point law on ``(1 + sqrt5)/2`` with probability
    ``(sqrt5 - 1)/(2 sqrt5)`` and ``(1 - sqrt5)/2`` otherwise (third moment 1,
    fourth moment 2). ``rademacher``: +-1 with equal probability.
    ``uniform``: uniform on ``[-sqrt3, sqrt3]``.
    """

    kind: str = "mammen"

    def __post_init__(self):
        aliases = {"mammen-two-point": "mammen", "uniform-sqrt3": "uniform"}
        kind = aliases.get(self.kind, self.kind)
        if kind not in ("mammen", "rademacher", "uniform"):
            raise ValueError(f"unknown auxiliary law {self.kind!r}")
        object.__setattr__(self, "kind", kind)

    @property
    def moments(self) -> tuple:
        """Raw moments ``E w, E w^2, E w^3, E w^4``."""
        return {"mammen": (0.0, 1.0, 1.0, 2.0),
                "rademacher": (0.0, 1.0, 0.0, 1.0),
                "uniform": (0.0, 1.0, 0.0, 1.8)}[self.kind]


def _generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def draw_auxiliary(law, m: int, seed) -> np.ndarray:
    """``m`` i.i.d. multipliers; identical output for identical ``seed``."""
    law = law if isinstance(law, AuxiliaryLaw) else AuxiliaryLaw(str(law))
    if m < 1:
        raise ValueError("m must be positive")
    rng = _generator(seed)
    if law.kind == "mammen":
        hi = rng.random(m) < (SQRT5 - 1.0) / (2.0 * SQRT5)
        return np.where(hi, (1.0 + SQRT5) / 2.0, (1.0 - SQRT5) / 2.0)
    if law.kind == "rademacher":
        return np.where(rng.random(m) < 0.5, -1.0, 1.0)
    return rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), m)


def replicate_seed(seed: int, b: int) -> np.random.SeedSequence:
    """Independent substream of replicate ``b``."""
    return np.random.SeedSequence(seed, spawn_key=(b,))


def _quantiles(samples: np.ndarray, conf_level: float):
    a = 1.0 - conf_level
    # smallest value whose empirical CDF reaches the level
    lo = np.quantile(samples, a / 2.0, axis=0, method="inverted_cdf")
    hi = np.quantile(samples, 1.0 - a / 2.0, axis=0, method="inverted_cdf")
    return lo, hi


def _check_level(conf_level: float, B: int):
    if not 0.0 < conf_level < 1.0:
        raise ValueError("conf_level must lie in (0, 1)")
    if B * (1.0 - conf_level) / 2.0 < 5.0 - 1e-9:
        raise ValueError(
            f"B={B} is too small for conf_level={conf_level}: need B * alpha / 2 >= 5")


@dataclass(frozen=True)
class BootstrapBands:
    """Pointwise bands for ``f`` and percentile intervals for scalar coefficients."""

    conf_level: float
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    gamma_hat: np.ndarray
    gamma_lower: np.ndarray
    gamma_upper: np.ndarray
    B: int
    law: str
    seed: int
    scalar_names: tuple = ()
    grid: Optional[np.ndarray] = None
    f_samples: np.ndarray = field(default=None, repr=False)
    gamma_samples: np.ndarray = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict)

    @property
    def significant_mask(self) -> np.ndarray:
        return (self.lower > 0.0) | (self.upper < 0.0)

    @property
    def scalar_intervals(self) -> list:
        """``(name, lower, estimate, upper)`` for every scalar coefficient."""
        return [(n, float(lo), float(e), float(hi)) for n, lo, e, hi in
                zip(self.scalar_names, self.gamma_lower, self.gamma_hat, self.gamma_upper)]

    def at_level(self, conf_level: float) -> "BootstrapBands":
        """Bands at another level from the same replicates."""
        return bands_from_samples(self.estimate, self.gamma_hat, self.f_samples, self.gamma_samples,
                                  conf_level, self.law, self.seed, self.scalar_names, self.grid,
                                  self.diagnostics)

    def to_csv(self) -> str:
        """Columns ``wavelength, estimate, lower, upper, significant``."""
        grid = self.grid if self.grid is not None else np.arange(1, self.estimate.size + 1)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["wavelength", "estimate", "lower", "upper", "significant"])
        for g, e, lo, hi, s in zip(grid, self.estimate, self.lower, self.upper, self.significant_mask):
            w.writerow([_fmt(g), _fmt(e), _fmt(lo), _fmt(hi), int(s)])
        return buf.getvalue()

    def scalar_table_csv(self) -> str:
        """Scalar coefficients with lower/upper quantiles and significance."""
        a = 1.0 - self.conf_level
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["covariate", f"lower_{a / 2:g}", "estimate", f"upper_{1 - a / 2:g}", "significant"])
        for name, lo, e, hi in self.scalar_intervals:
            w.writerow([name, _fmt(lo), _fmt(e), _fmt(hi), int(lo > 0 or hi < 0)])
        return buf.getvalue()


def bands_from_samples(estimate, gamma_hat, f_samples, gamma_samples, conf_level: float,
                       law: str = "mammen", seed: int = 0, scalar_names=(), grid=None,
                       diagnostics=None) -> BootstrapBands:
    f_samples = np.asarray(f_samples, dtype=float)
    B = f_samples.shape[0]
    _check_level(conf_level, B)
    lo, hi = _quantiles(f_samples, conf_level)
    gamma_samples = np.asarray(gamma_samples, dtype=float).reshape(B, -1)
    if gamma_samples.shape[1]:
        glo, ghi = _quantiles(gamma_samples, conf_level)
    else:
        glo = ghi = np.zeros(0)
    return BootstrapBands(conf_level, np.asarray(estimate, dtype=float), lo, hi,
                          np.asarray(gamma_hat, dtype=float), glo, ghi, B, law, seed,
                          tuple(scalar_names), grid, f_samples, gamma_samples, dict(diagnostics or {}))


def wild_bootstrap(fit: TfFit, X, y, Z=None, B: int = 1000, law="mammen", conf_level: float = 0.95,
                   seed: int = 0, config: Optional[AdmmConfig] = None, threads: int = 1) -> BootstrapBands:
    """Wild-bootstrap bands for a Gaussian fit at its own penalty.

    Parameters
    ----------
    fit : TfFit
        Gaussian fit whose penalty is reused unchanged by every replicate.
    X, y, Z
        The data the fit was computed on.
    B : int
        Number of replicates, at least 100 and with ``B * alpha / 2 >= 5``.
    law : str or AuxiliaryLaw
        ``"mammen"`` (default), ``"rademacher"`` or ``"uniform"``.
    conf_level : float
        Band level ``1 - alpha``.
    seed : int
        Replicate ``b`` draws from ``SeedSequence(seed, spawn_key=(b,))``, so
        the result does not depend on ``threads``.

    Notes
    -----
    A replicate whose perturbed response equals ``y`` (all residuals zero)
    poses the original problem and returns the original estimate.
    """
    if fit.family.kind != "gaussian":
        raise ValueError("wild bootstrap is only available for Gaussian fits")
    if B < 100:
        raise ValueError("B must be at least 100")
    _check_level(conf_level, B)
    law = law if isinstance(law, AuxiliaryLaw) else AuxiliaryLaw(str(law))
    Xt = fit.design(X, Z)
    y = np.asarray(y, dtype=float)
    if y.shape[0] != Xt.shape[0]:
        raise ValueError(f"y has length {y.shape[0]}, design has {Xt.shape[0]} rows")
    theta = fit.theta
    yhat = Xt @ theta
    resid = y - yhat
    p = fit.p
    config = config or AdmmConfig()
    penalty = fit.penalty

    degenerate = fit.diagnostics.get("degenerate") is not None or penalty.strength == 0.0
    problem = AdmmProblem(Xt, penalty.orders, Xt.shape[1] - p)
    warm = fit.state
    if warm is None or warm.alpha.shape != theta.shape or warm.delta.shape != (problem.n_constraints,):
        warm = None
    if not degenerate:
        # factor once up front; worker threads only read the cache
        problem.factor(_rho_for(penalty, config))
        if warm is None:
            warm = problem.solve(y, penalty, config)
    cfg = replace(config, warm_start=warm)

    def replicate(b):
        w = draw_auxiliary(law, y.shape[0], replicate_seed(seed, b))
        ystar = yhat + resid * w
        if np.array_equal(ystar, y):
            return theta.copy(), 0, penalty
        if degenerate:
            return np.linalg.lstsq(Xt, ystar, rcond=None)[0], 0, penalty
        st = problem.solve(ystar, penalty, cfg)
        return st.alpha, st.iter, st.penalty

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(replicate, range(B)))
    else:
        results = [replicate(b) for b in range(B)]
    samples = np.vstack([r[0] for r in results])
    iters = np.array([r[1] for r in results])
    diag = {
        "same_penalty": all(r[2] == penalty for r in results),
        "penalty": penalty.to_dict(),
        "mean_iterations": float(iters.mean()),
        "max_iterations": int(iters.max()),
        "sigma_resid": float(np.sqrt(resid @ resid / y.shape[0])),
    }
    return bands_from_samples(fit.f_hat, fit.gamma_hat, samples[:, :p], samples[:, p:], conf_level,
                              law.kind, seed, fit.scalar_names, fit.grid, diag)
