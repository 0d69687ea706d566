"""Monte Carlo comparison of adjusted and standard random-effects meta-analysis.

Each repetition simulates one regression dataset, turns its slope estimate
into ``K`` analyst estimates (identical copies, or perturbed copies when
``tau > 0``), and fits both the standard REML random-effects model and the
two-stage single-dataset model with weights ``1/K``.

Random streams come from a counter-based generator (Philox) keyed by
``(seed, condition key, rep_index, stream)``, so any repetition can be
regenerated on its own and results do not depend on execution order or on
the number of worker processes.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .classical import _pool, _reml
from .data import EstimateSet
from .errors import NonConvergence, TooFewSamples

DEFAULT_SEED = 20240917
FULL_REPS = 10_000
DESK_REPS = 2_000
ALPHA = 0.05

GRID_K = (3, 10, 30, 100, 300)
GRID_BETA = (0.0, 0.3)
GRID_TAU = (0.0, 0.1)

SE_FACTOR_RANGE = (0.75, 1.20)

_STREAM_DATA = 0
_STREAM_ANALYSTS = 1


@dataclass(frozen=True)
class SimCondition:
    K: int
    beta: float
    tau: float
    n_obs: int = 100
    n_reps: int = FULL_REPS
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.n_obs < 3:
            # an intercept and slope leave no residual df below three points
            raise ValueError("n_obs must be >= 3")
        if self.n_reps < 1:
            raise ValueError("n_reps must be >= 1")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")

    @property
    def key(self) -> int:
        """Stable 64-bit key for the data-generating parameters."""
        text = f"{self.K}|{float(self.beta)!r}|{float(self.tau)!r}|{self.n_obs}"
        return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def factorial_grid(n_reps: int = FULL_REPS, seed: int = DEFAULT_SEED) -> list[SimCondition]:
    """The full-factorial 5 x 2 x 2 grid."""
    return [
        SimCondition(K=K, beta=b, tau=t, n_reps=n_reps, seed=seed)
        for t, b, K in itertools.product(GRID_TAU, GRID_BETA, GRID_K)
    ]


def _rng(cond: SimCondition, rep_index: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence([cond.seed & (2**64 - 1), cond.key, rep_index, stream])
    return np.random.Generator(np.random.Philox(ss))


def ols_slope(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Slope and its conventional standard error (``n - 2`` residual df)."""
    n = x.size
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx <= 0:
        raise ZeroDivisionError("predictor has zero variance")
    b = float(xc @ (y - y.mean())) / sxx
    a = y.mean() - b * x.mean()
    resid = y - a - b * x
    sigma2 = float(resid @ resid) / (n - 2)
    return b, math.sqrt(sigma2 / sxx)


def _draw(cond: SimCondition, rep_index: int) -> tuple[np.ndarray, np.ndarray]:
    rng = _rng(cond, rep_index, _STREAM_DATA)
    while True:
        x = rng.standard_normal(cond.n_obs)
        eps = rng.standard_normal(cond.n_obs)
        try:
            b, s = ols_slope(x, cond.beta * x + eps)
        except ZeroDivisionError:
            continue
        break
    if cond.tau == 0:
        return np.full(cond.K, b), np.full(cond.K, s)
    rng2 = _rng(cond, rep_index, _STREAM_ANALYSTS)
    delta = rng2.normal(0.0, cond.tau, cond.K)
    u = rng2.uniform(*SE_FACTOR_RANGE, cond.K)
    return b + delta, s * u


def generate_replication(cond: SimCondition, rep_index: int) -> EstimateSet:
    """Analyst estimates for one repetition of ``cond``."""
    y, se = _draw(cond, rep_index)
    return EstimateSet.from_arrays(y, se, scale_tag="beta")


# --------------------------------------------------------------------------
# performance measures
# --------------------------------------------------------------------------


def mcse(measure_kind: str, samples) -> float:
    """Monte Carlo standard error of a performance measure.

    ``measure_kind`` is one of

    * ``"rejection_rate"`` -- samples are 0/1 rejection indicators;
    * ``"mean"``, ``"bias"``, ``"avg_se"`` -- sample SD over root n;
    * ``"emp_se"`` -- samples are the estimates, ``SD / sqrt(2 (n - 1))``;
    * ``"rmse"`` -- samples are errors ``mu_hat - beta``; delta method on
      the root of the mean squared error.
    """
    x = np.asarray(samples, dtype=float)
    n = x.size
    if n < 2:
        raise TooFewSamples("need at least 2 samples")
    if measure_kind == "rejection_rate":
        p = x.mean()
        return math.sqrt(max(p * (1 - p), 0.0) / n)
    if measure_kind in ("mean", "bias", "avg_se"):
        return float(x.std(ddof=1)) / math.sqrt(n)
    if measure_kind == "emp_se":
        return float(x.std(ddof=1)) / math.sqrt(2 * (n - 1))
    if measure_kind == "rmse":
        sq = x * x
        rmse = math.sqrt(sq.mean())
        if rmse == 0:
            return 0.0
        return float(sq.std(ddof=1)) / math.sqrt(n) / (2 * rmse)
    raise ValueError(f"unknown measure kind {measure_kind!r}")


@dataclass(frozen=True)
class MethodSummary:
    avg_se: float
    emp_se: float
    rejection_rate: float
    bias: float
    rmse: float
    mcse_avg_se: float
    mcse_emp_se: float
    mcse_rejection_rate: float
    mcse_bias: float
    mcse_rmse: float
    n_used: int


def summarize(mu: np.ndarray, se: np.ndarray, p: np.ndarray, beta: float) -> MethodSummary:
    err = mu - beta
    rej = (p < ALPHA).astype(float)
    return MethodSummary(
        avg_se=float(se.mean()),
        emp_se=float(mu.std(ddof=1)),
        rejection_rate=float(rej.mean()),
        bias=float(err.mean()),
        rmse=math.sqrt(float((err * err).mean())),
        mcse_avg_se=mcse("avg_se", se),
        mcse_emp_se=mcse("emp_se", mu),
        mcse_rejection_rate=mcse("rejection_rate", rej),
        mcse_bias=mcse("bias", err),
        mcse_rmse=mcse("rmse", err),
        n_used=int(mu.size),
    )


@dataclass(frozen=True)
class SimReport:
    condition: SimCondition
    adjusted: MethodSummary
    unadjusted: MethodSummary
    n_failed: int
    draws: dict = field(default_factory=dict, compare=False, repr=False)

    def rows(self) -> list[dict]:
        """One flat record per method, for tabular output."""
        c = asdict(self.condition)
        out = []
        for method in ("adjusted", "unadjusted"):
            row = {**c, "method": method, "n_failed": self.n_failed}
            row.update(asdict(getattr(self, method)))
            out.append(row)
        return out


def _fit_rep(y: np.ndarray, se: np.ndarray) -> tuple[float, ...]:
    vi = se * se
    K = y.size
    tau2 = _reml(y, vi).tau2_hat
    mu_u, se_u = _pool(y, vi + tau2)
    mu_a, se_a = _pool(y, vi * K + tau2)
    return mu_a, se_a, mu_u, se_u, tau2


def _run_reps(cond: SimCondition, start: int, stop: int) -> np.ndarray:
    out = np.full((stop - start, 5), np.nan)
    for i, r in enumerate(range(start, stop)):
        y, se = _draw(cond, r)
        try:
            out[i] = _fit_rep(y, se)
        except NonConvergence:
            pass
    return out


def run_condition(cond: SimCondition, n_jobs: int = 1, chunk: int = 250) -> SimReport:
    """Simulate ``cond.n_reps`` repetitions and aggregate both methods.

    Repetitions where the fit fails are dropped and counted in
    ``n_failed``. Results are identical for any ``n_jobs``.
    """
    bounds = [(s, min(s + chunk, cond.n_reps)) for s in range(0, cond.n_reps, chunk)]
    if n_jobs == 1 or len(bounds) == 1:
        parts = [_run_reps(cond, a, b) for a, b in bounds]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            parts = list(ex.map(_run_reps, [cond] * len(bounds), *zip(*bounds)))
    res = np.concatenate(parts)
    ok = np.isfinite(res).all(axis=1)
    res = res[ok]
    mu_a, se_a, mu_u, se_u, tau2 = res.T
    p_a = 2 * stats.norm.sf(np.abs(mu_a / se_a))
    p_u = 2 * stats.norm.sf(np.abs(mu_u / se_u))
    return SimReport(
        condition=cond,
        adjusted=summarize(mu_a, se_a, p_a, cond.beta),
        unadjusted=summarize(mu_u, se_u, p_u, cond.beta),
        n_failed=int((~ok).sum()),
        draws={"mu_adj": mu_a, "se_adj": se_a, "mu_unadj": mu_u, "se_unadj": se_u, "tau2": tau2},
    )


def run_grid(conditions, n_jobs: int = 1) -> list[SimReport]:
    return [run_condition(c, n_jobs=n_jobs) for c in conditions]
