"""Classical common-effect and random-effects meta-analysis.

Two families of fits live here:

* the standard (unadjusted) fits, which treat every estimate as coming from
  independent data, and
* the single-dataset (adjusted) fits, which raise each estimate's likelihood
  to a fractional power ``w_k``. For a normal likelihood that is the same as
  dividing the sampling variance by ``w_k``.

The adjusted random-effects fit is two-stage: heterogeneity is estimated by
REML on the unweighted variances, then held fixed while the pooled effect is
estimated from the inflated variances ``se_k**2 / w_k + tau2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .data import ClassicalFit, EstimateSet, WeightScheme
from .errors import NonConvergence, TooFewEstimates

REML_XTOL = 1e-10
QPROFILE_XTOL = 1e-8
_REML_SCAN = 48


@dataclass(frozen=True)
class RemlResult:
    tau2_hat: float
    converged: bool
    iterations: int
    loglik: float

    @property
    def tau_hat(self) -> float:
        return math.sqrt(self.tau2_hat)


def _z_crit(level: float) -> float:
    if not 0 < level < 1:
        raise ValueError(f"confidence level must be in (0, 1), got {level!r}")
    return float(stats.norm.ppf(0.5 + level / 2))


def _pool(y: np.ndarray, v: np.ndarray) -> tuple[float, float]:
    """Inverse-variance weighted mean and its standard error."""
    a = 1.0 / v
    sa = math.fsum(a)
    mu = math.fsum(a * y) / sa
    # a convex combination cannot leave the data range; clip rounding noise
    mu = min(max(mu, float(y.min())), float(y.max()))
    return mu, math.sqrt(1.0 / sa)


def _wald(mu: float, se: float, level: float) -> dict:
    z = mu / se
    crit = _z_crit(level)
    return dict(
        mu_hat=mu,
        se_mu=se,
        ci_mu=(mu - crit * se, mu + crit * se),
        z=z,
        p_mu=float(2 * stats.norm.sf(abs(z))),
        level=level,
    )


def _need(estimates: EstimateSet, k: int = 2) -> None:
    if estimates.K < k:
        raise TooFewEstimates(f"need at least {k} estimates, got {estimates.K}")


def _weights_for(estimates: EstimateSet, w: WeightScheme) -> np.ndarray:
    w.check_aligned(estimates)
    return w.array


# --------------------------------------------------------------------------
# heterogeneity
# --------------------------------------------------------------------------


def restricted_loglik(tau2: float, y: np.ndarray, vi: np.ndarray) -> float:
    """Restricted log-likelihood of ``y_k ~ N(mu, vi_k + tau2)`` with mu profiled out."""
    v = vi + tau2
    a = 1.0 / v
    sa = a.sum()
    mu = (a * y).sum() / sa
    K = y.size
    return -0.5 * (
        (K - 1) * math.log(2 * math.pi)
        + np.log(v).sum()
        + math.log(sa)
        + ((y - mu) ** 2 * a).sum()
    )


def _restricted_loglik_many(tau2: np.ndarray, y: np.ndarray, vi: np.ndarray) -> np.ndarray:
    v = vi[None, :] + tau2[:, None]
    a = 1.0 / v
    sa = a.sum(axis=1)
    mu = (a * y).sum(axis=1) / sa
    r = y[None, :] - mu[:, None]
    return -0.5 * (
        (y.size - 1) * math.log(2 * math.pi)
        + np.log(v).sum(axis=1)
        + np.log(sa)
        + (r * r * a).sum(axis=1)
    )


def reml_tau(estimates: EstimateSet) -> RemlResult:
    """REML estimate of the between-estimate variance.

    A coarse scan over ``[0, tau2_max]`` locates the best bracket, which is
    then refined with bounded Brent. The boundary ``tau2 = 0`` is a legitimate
    optimum and is returned exactly when it wins.

    Raises
    ------
    TooFewEstimates
        If fewer than two estimates are given.
    NonConvergence
        If the bounded search does not converge.
    """
    _need(estimates)
    return _reml(estimates.y, estimates.se**2)


def _reml(y: np.ndarray, vi: np.ndarray) -> RemlResult:
    tau2_max = max(10 * float(np.var(y, ddof=1)), 10 * float(vi.max()))

    def nll(t2):
        return -restricted_loglik(t2, y, vi)

    scan = np.concatenate(([0.0], tau2_max * np.geomspace(1e-8, 1.0, _REML_SCAN)))
    vals = -_restricted_loglik_many(scan, y, vi)
    i = int(np.argmin(vals))
    if i == 0 and vals[0] <= vals[1]:
        lo, hi = 0.0, scan[1]
    else:
        lo, hi = scan[max(i - 1, 0)], scan[min(i + 1, scan.size - 1)]

    res = optimize.minimize_scalar(
        nll, bounds=(lo, hi), method="bounded", options={"xatol": REML_XTOL, "maxiter": 500}
    )
    if not res.success:
        raise NonConvergence(f"REML search failed: {res.message}")
    # bounded Brent never evaluates the endpoints themselves
    best_t, best_f = float(res.x), float(res.fun)
    for t in (lo, hi):
        f = nll(t)
        if f <= best_f:
            best_t, best_f = float(t), f
    return RemlResult(
        tau2_hat=best_t, converged=True, iterations=int(res.nfev) + scan.size, loglik=-best_f
    )


def generalized_q(tau2: float, y: np.ndarray, vi: np.ndarray) -> float:
    a = 1.0 / (vi + tau2)
    mu = min(max((a * y).sum() / a.sum(), y.min()), y.max())
    return float(((y - mu) ** 2 * a).sum())


def q_profile_ci(estimates: EstimateSet, level: float = 0.95) -> tuple[float, float]:
    """Q-profile confidence interval for tau (SD scale), truncated at zero.

    The generalized Q statistic decreases in ``tau2``; each bound is the
    ``tau`` where it crosses a chi-square quantile with ``K - 1`` df. When
    Q at zero already lies below the lower quantile the interval collapses to
    the point ``(0, 0)``.
    """
    _need(estimates)
    if not 0 < level < 1:
        raise ValueError(f"confidence level must be in (0, 1), got {level!r}")
    y = estimates.y
    vi = estimates.se**2
    df = estimates.K - 1
    alpha = 1 - level
    q_for_lower = stats.chi2.ppf(1 - alpha / 2, df)
    q_for_upper = stats.chi2.ppf(alpha / 2, df)

    def g(tau, target):
        return generalized_q(tau * tau, y, vi) - target

    q0 = generalized_q(0.0, y, vi)

    def solve(target):
        if q0 <= target:
            return 0.0
        hi = math.sqrt(max(float(np.var(y)), float(vi.max())))
        for _ in range(200):
            if g(hi, target) < 0:
                break
            hi *= 2
        else:
            raise NonConvergence("could not bracket Q-profile bound")
        return float(optimize.bisect(g, 0.0, hi, args=(target,), xtol=QPROFILE_XTOL, maxiter=500))

    return solve(q_for_lower), solve(q_for_upper)


def q_test(estimates: EstimateSet) -> tuple[float, float]:
    """Cochran's Q and its chi-square upper-tail p-value."""
    _need(estimates)
    q = generalized_q(0.0, estimates.y, estimates.se**2)
    return q, float(stats.chi2.sf(q, estimates.K - 1))


# --------------------------------------------------------------------------
# fits
# --------------------------------------------------------------------------


def _common(estimates: EstimateSet, v: np.ndarray, level: float, adjusted: bool) -> ClassicalFit:
    mu, se = _pool(estimates.y, v)
    q, p_tau = q_test(estimates) if estimates.K >= 2 else (0.0, float("nan"))
    return ClassicalFit(
        **_wald(mu, se, level), model_kind="common", adjusted=adjusted, q_stat=q, p_tau=p_tau
    )


def fit_standard_common(estimates: EstimateSet, level: float = 0.95) -> ClassicalFit:
    """Standard inverse-variance common-effect fit."""
    return _common(estimates, estimates.se**2, level, adjusted=False)


def fit_sd_common(estimates: EstimateSet, w: WeightScheme, level: float = 0.95) -> ClassicalFit:
    """Single-dataset common-effect fit: variances divided by the weights."""
    wk = _weights_for(estimates, w)
    return _common(estimates, estimates.se**2 / wk, level, adjusted=True)


def _random(estimates, v_stage2, tau2, level, adjusted, reml):
    mu, se = _pool(estimates.y, v_stage2 + tau2)
    q, p_tau = q_test(estimates)
    extra = {"tau2_hat": tau2}
    if reml is not None:
        extra["reml_iterations"] = reml.iterations
        extra["reml_loglik"] = reml.loglik
    return ClassicalFit(
        **_wald(mu, se, level),
        model_kind="random",
        adjusted=adjusted,
        tau_hat=math.sqrt(tau2),
        ci_tau=q_profile_ci(estimates, level),
        q_stat=q,
        p_tau=p_tau,
        extra=extra,
    )


def _stage1(estimates, tau2):
    _need(estimates)
    if tau2 is not None:
        if tau2 < 0:
            raise ValueError("tau2 must be >= 0")
        return float(tau2), None
    r = reml_tau(estimates)
    return r.tau2_hat, r


def fit_standard_random(
    estimates: EstimateSet, level: float = 0.95, tau2: float | None = None
) -> ClassicalFit:
    """Standard REML random-effects fit.

    Passing ``tau2`` skips REML and uses the given heterogeneity variance.
    """
    tau2, reml = _stage1(estimates, tau2)
    return _random(estimates, estimates.se**2, tau2, level, False, reml)


def fit_sd_random(
    estimates: EstimateSet, w: WeightScheme, level: float = 0.95, tau2: float | None = None
) -> ClassicalFit:
    """Two-stage single-dataset random-effects fit.

    Stage 1 estimates ``tau2`` by REML on the unweighted variances (or takes
    ``tau2`` as given). Stage 2 pools with variances ``se_k**2 / w_k + tau2``.
    Heterogeneity outputs (``tau_hat``, ``ci_tau``, ``q_stat``, ``p_tau``)
    all come from the unweighted stage.
    """
    _need(estimates)
    wk = _weights_for(estimates, w)
    tau2, reml = _stage1(estimates, tau2)
    return _random(estimates, estimates.se**2 / wk, tau2, level, True, reml)
