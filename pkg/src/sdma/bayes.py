"""Bayesian single-dataset meta-analysis by conjugacy and 1-D quadrature.

Every model here is normal in ``mu`` given ``tau``, so ``mu`` is integrated
out in closed form: with effective variances ``v_k`` and a ``N(m, s**2)``
prior, ``y ~ N(m 1, diag(v) + s**2 11')``, whose log density takes O(K) via
the matrix-determinant lemma and Sherman-Morrison. The only non-conjugate
parameter is ``tau``, which is handled on a grid.

Tempered likelihood
-------------------
Raising ``N(y_k; theta, se_k**2)`` to the power ``w_k`` gives, up to a
factor that depends on ``se_k`` and ``w_k`` only, ``N(y_k; theta,
se_k**2 / w_k)``. That factor is identical under the null and alternative
of any effect test that shares the same weights, so it cancels in every
Bayes factor computed here and is dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .data import EstimateSet, WeightScheme
from .errors import (
    NegativeTau,
    NullOutsideSupport,
    QuadratureNonConvergence,
    TooFewEstimates,
    UnknownScale,
)

LOG_2PI = math.log(2 * math.pi)
N_GRID = 2048
MAX_DOUBLINGS = 4
QUAD_TOL = 1e-4
# window around the posterior mode (log-density drop) covered by the dense grid
_WINDOW_DROP = 40.0
_CHUNK = 1 << 22

UNIT_INFORMATION = {"log_or": 2.0, "log_rr": 2.0, "smd": 2.0, "beta": 0.87}


@dataclass(frozen=True)
class Normal:
    mean: float
    sd: float


@dataclass(frozen=True)
class Point:
    value: float = 0.0


@dataclass(frozen=True)
class PriorSpec:
    """Priors for the effect and heterogeneity tests.

    Under H1, ``mu ~ N(mu_mean, mu_sd**2)`` and ``tau ~ N+(0, tau_sd**2)``;
    both nulls are point masses at zero. ``spike_tau``, when set, replaces
    the stage-1 posterior median as the fixed ``tau`` in stage 2.
    """

    mu_sd: float
    tau_sd: float
    mu_mean: float = 0.0
    spike_tau: float | None = None
    ui: float | None = None
    scale_tag: str = "generic"

    def __post_init__(self):
        if not (self.mu_sd > 0 and self.tau_sd > 0):
            raise ValueError("prior standard deviations must be > 0")
        if self.spike_tau is not None and self.spike_tau < 0:
            raise NegativeTau("spike_tau must be >= 0")

    @property
    def mu_alt(self) -> Normal:
        return Normal(self.mu_mean, self.mu_sd)

    @property
    def mu_null(self) -> Point:
        return Point(0.0)


def unit_information_prior(scale_tag: str, ui: float | None = None) -> PriorSpec:
    """Unit-information priors: ``mu ~ N(0, UI)``, ``tau ~ N+(0, UI / 2)``.

    ``UI`` is 2 for log odds/risk ratios and standardized mean differences,
    0.87 for standardized regression coefficients, and must be given
    explicitly for ``"generic"``. An explicit ``ui`` overrides the table.
    """
    if ui is None:
        if scale_tag == "generic":
            raise UnknownScale("scale 'generic' needs an explicit unit information value")
        try:
            ui = UNIT_INFORMATION[scale_tag]
        except KeyError:
            raise UnknownScale(f"unknown scale {scale_tag!r}") from None
    elif scale_tag not in UNIT_INFORMATION and scale_tag != "generic":
        raise UnknownScale(f"unknown scale {scale_tag!r}")
    ui = float(ui)
    if not ui > 0 or not math.isfinite(ui):
        raise UnknownScale(f"unit information must be a positive number, got {ui!r}")
    return PriorSpec(mu_sd=ui, tau_sd=ui / 2, ui=ui, scale_tag=scale_tag)


# --------------------------------------------------------------------------
# marginal likelihoods
# --------------------------------------------------------------------------


def _effective_vi(estimates: EstimateSet, w: WeightScheme | np.ndarray | None) -> np.ndarray:
    vi = estimates.se**2
    if w is None:
        return vi
    if isinstance(w, WeightScheme):
        w.check_aligned(estimates)
        w = w.array
    return vi / np.asarray(w, dtype=float)


def _loglik_tau2(y, vi, tau2, mu_prior) -> np.ndarray:
    """Log marginal density of ``y`` for each value in the 1-D array ``tau2``."""
    tau2 = np.atleast_1d(np.asarray(tau2, dtype=float))
    out = np.empty(tau2.size)
    K = y.size
    step = max(1, _CHUNK // max(K, 1))
    for s in range(0, tau2.size, step):
        v = vi[None, :] + tau2[s : s + step, None]
        a = 1.0 / v
        logv = np.log(v).sum(axis=1)
        if isinstance(mu_prior, Point):
            r = y - mu_prior.value
            out[s : s + step] = -0.5 * (K * LOG_2PI + logv + (r * r * a).sum(axis=1))
        else:
            r = y - mu_prior.mean
            s2 = mu_prior.sd**2
            A = a.sum(axis=1)
            B = (r * a).sum(axis=1)
            C = (r * r * a).sum(axis=1)
            denom = 1.0 + s2 * A
            out[s : s + step] = -0.5 * (
                K * LOG_2PI + logv + np.log(denom) + C - s2 * B * B / denom
            )
    return out


def marginal_loglik_given_tau(
    estimates: EstimateSet,
    w: WeightScheme | None,
    tau: float,
    mu_prior: Normal | Point,
) -> float:
    """Log marginal likelihood at a fixed ``tau``.

    Parameters
    ----------
    estimates : EstimateSet
    w : WeightScheme or None
        Fractional likelihood weights; ``None`` gives the unweighted model.
    tau : float
        Between-estimate SD, ``>= 0``.
    mu_prior : Normal or Point
        ``Normal`` integrates ``mu`` out analytically; ``Point`` fixes it.
    """
    if tau < 0:
        raise NegativeTau(f"tau must be >= 0, got {tau!r}")
    vi = _effective_vi(estimates, w)
    return float(_loglik_tau2(estimates.y, vi, tau * tau, mu_prior)[0])


# --------------------------------------------------------------------------
# tau quadrature
# --------------------------------------------------------------------------


def _logsumexp_trapz(logf: np.ndarray, x: np.ndarray) -> float:
    m = float(logf.max())
    return m + math.log(np.trapezoid(np.exp(logf - m), x))


def _composite_grid(logf, tau_hi: float, n: int) -> np.ndarray:
    """Linear grid on ``[0, tau_hi]`` merged with a dense grid around the mode."""
    base = np.linspace(0.0, tau_hi, n)
    vals = logf(base)
    i = int(np.argmax(vals))
    lo, hi = base[max(i - 1, 0)], base[min(i + 1, n - 1)]
    res = optimize.minimize_scalar(
        lambda t: -logf(np.array([t]))[0], bounds=(lo, hi), method="bounded",
        options={"xatol": 1e-12 * max(tau_hi, 1.0)},
    )
    mode, fmax = float(res.x), -float(res.fun)
    if vals[i] > fmax:
        mode, fmax = float(base[i]), float(vals[i])
    cut = fmax - _WINDOW_DROP

    def drop(t):
        return logf(np.array([t]))[0] - cut

    a = 0.0 if drop(0.0) >= 0 else optimize.brentq(drop, 0.0, mode, xtol=1e-14)
    b = tau_hi if drop(tau_hi) >= 0 else optimize.brentq(drop, mode, tau_hi, xtol=1e-14)
    dense = np.linspace(a, b, n)
    return np.unique(np.concatenate((base, dense)))


def _tau_quadrature(logf, tau_hi: float, n_grid: int, max_doublings: int):
    """Integrate ``exp(logf)`` over ``[0, tau_hi]``, doubling until stable.

    Returns the grid, ``logf`` on it and the log integral.
    """
    grid = _composite_grid(logf, tau_hi, n_grid)
    vals = logf(grid)
    log_int = _logsumexp_trapz(vals, grid)
    n = n_grid
    for _ in range(max_doublings):
        n *= 2
        g2 = _composite_grid(logf, tau_hi, n)
        v2 = logf(g2)
        li2 = _logsumexp_trapz(v2, g2)
        stable = abs(li2 - log_int) < QUAD_TOL
        grid, vals, log_int = g2, v2, li2
        if stable:
            return grid, vals, log_int
    raise QuadratureNonConvergence(
        f"tau quadrature unstable after {max_doublings} grid doublings"
    )


def _grid_quantile(grid, density, cdf, p: float) -> float:
    """Invert the trapezoid CDF exactly (density linear between nodes)."""
    j = int(np.searchsorted(cdf, p, side="left"))
    if j <= 0:
        return float(grid[0])
    if j >= grid.size:
        return float(grid[-1])
    i = j - 1
    h = grid[j] - grid[i]
    d0, d1 = density[i], density[j]
    target = p - cdf[i]
    slope = (d1 - d0) / h
    # root of d0*x + slope*x**2/2 = target in rationalized form
    disc = max(d0 * d0 + 2 * slope * target, 0.0)
    denom = d0 + math.sqrt(disc)
    x = 2 * target / denom if denom > 0 else 0.0
    return float(min(max(grid[i] + x, grid[i]), grid[j]))


@dataclass(frozen=True)
class TauPosterior:
    grid: np.ndarray
    density: np.ndarray
    median: float
    cri: tuple[float, float]
    log_marginal_alt: float
    log_marginal_null: float

    @property
    def cdf(self) -> np.ndarray:
        steps = 0.5 * (self.density[1:] + self.density[:-1]) * np.diff(self.grid)
        return np.concatenate(([0.0], np.cumsum(steps)))

    def quantile(self, p: float) -> float:
        return _grid_quantile(self.grid, self.density, self.cdf, p)

    @property
    def log_bf10(self) -> float:
        return self.log_marginal_alt - self.log_marginal_null


def _tau_hi(y: np.ndarray, tau_sd: float) -> float:
    return max(float(stats.halfnorm.ppf(0.9999, scale=tau_sd)), 10 * float(np.std(y, ddof=1)))


def _log_halfnormal(tau, sd):
    return math.log(2) - 0.5 * LOG_2PI - math.log(sd) - 0.5 * (tau / sd) ** 2


def tau_posterior(
    estimates: EstimateSet,
    priors: PriorSpec,
    level: float = 0.95,
    n_grid: int = N_GRID,
    max_doublings: int = MAX_DOUBLINGS,
) -> TauPosterior:
    """Posterior of ``tau`` under the unweighted random-effects model.

    ``mu`` is integrated out under its alternative prior. The posterior
    median and equal-tailed interval come from the normalized grid CDF.

    Raises
    ------
    TooFewEstimates
    QuadratureNonConvergence
        If doubling the grid keeps moving the log marginal by more than 1e-4.
    """
    if estimates.K < 2:
        raise TooFewEstimates("tau posterior needs at least 2 estimates")
    y = estimates.y
    vi = estimates.se**2
    mu_prior = priors.mu_alt

    def logf(t):
        return _loglik_tau2(y, vi, t * t, mu_prior) + _log_halfnormal(t, priors.tau_sd)

    grid, vals, log_alt = _tau_quadrature(logf, _tau_hi(y, priors.tau_sd), n_grid, max_doublings)
    density = np.exp(vals - log_alt)
    density /= np.trapezoid(density, grid)
    post = TauPosterior(
        grid=grid,
        density=density,
        median=0.0,
        cri=(0.0, 0.0),
        log_marginal_alt=log_alt,
        log_marginal_null=float(_loglik_tau2(y, vi, 0.0, mu_prior)[0]),
    )
    a = (1 - level) / 2
    return TauPosterior(
        grid=grid,
        density=density,
        median=post.quantile(0.5),
        cri=(post.quantile(a), post.quantile(1 - a)),
        log_marginal_alt=post.log_marginal_alt,
        log_marginal_null=post.log_marginal_null,
    )


def _exp(x: float) -> float:
    return math.exp(x) if x < 709.0 else math.inf


def bf_heterogeneity(estimates: EstimateSet, priors: PriorSpec, log: bool = False) -> float:
    """Bayes factor for random- over common-effect model (unweighted)."""
    lbf = tau_posterior(estimates, priors).log_bf10
    return lbf if log else _exp(lbf)


# --------------------------------------------------------------------------
# effect
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BayesFit:
    """Posterior summaries and Bayes factors.

    Bayes factors are stored on the log scale; ``bf10_*`` properties
    exponentiate and return ``inf`` on overflow.
    """

    mu_median: float
    mu_cri: tuple[float, float]
    mu_sd: float
    log_bf10_effect: float
    model_kind: str
    adjusted: bool
    tau_median: float = 0.0
    tau_cri: tuple[float, float] = (0.0, 0.0)
    log_bf10_heterogeneity: float | None = None
    tau_star: float = 0.0
    level: float = 0.95

    @property
    def bf10_effect(self) -> float:
        return _exp(self.log_bf10_effect)

    @property
    def bf01_effect(self) -> float:
        return _exp(-self.log_bf10_effect)

    @property
    def bf10_heterogeneity(self) -> float | None:
        if self.log_bf10_heterogeneity is None:
            return None
        return _exp(self.log_bf10_heterogeneity)

    @property
    def bf01_heterogeneity(self) -> float | None:
        if self.log_bf10_heterogeneity is None:
            return None
        return _exp(-self.log_bf10_heterogeneity)


def conjugate_posterior(y, v, prior: Normal) -> tuple[float, float]:
    """Posterior mean and SD of ``mu`` for ``y_k ~ N(mu, v_k)``, ``mu ~ prior``."""
    a = 1.0 / v
    prec = 1.0 / prior.sd**2 + math.fsum(a)
    mean = (prior.mean / prior.sd**2 + math.fsum(a * y)) / prec
    return mean, 1.0 / math.sqrt(prec)


def _stage2(y, vi_w, tau_star, priors, level):
    v = vi_w + tau_star**2
    mean, sd = conjugate_posterior(y, v, priors.mu_alt)
    zc = float(stats.norm.ppf(0.5 + level / 2))
    t2 = np.array([tau_star**2])
    lbf = float(
        _loglik_tau2(y, vi_w, t2, priors.mu_alt)[0] - _loglik_tau2(y, vi_w, t2, priors.mu_null)[0]
    )
    return mean, sd, (mean - zc * sd, mean + zc * sd), lbf


def _check_kind(model_kind, K):
    if model_kind not in ("common", "random"):
        raise ValueError(f"unknown model kind {model_kind!r}")
    if model_kind == "random" and K < 2:
        raise TooFewEstimates("random-effects model needs at least 2 estimates")


def fit_bayes_sd(
    estimates: EstimateSet,
    w: WeightScheme,
    priors: PriorSpec,
    model_kind: str = "random",
    level: float = 0.95,
    tau_post: TauPosterior | None = None,
) -> BayesFit:
    """Two-stage Bayesian single-dataset meta-analysis.

    Stage 1 (random only): posterior of ``tau`` from the unweighted model;
    ``tau*`` is its median unless ``priors.spike_tau`` is set. Stage 2:
    conjugate posterior of ``mu`` and the effect Bayes factor under the
    weighted likelihood with ``tau`` fixed at ``tau*``. A precomputed
    ``tau_post`` may be passed to avoid redoing stage 1.
    """
    _check_kind(model_kind, estimates.K)
    vi_w = _effective_vi(estimates, w)
    tau_med, tau_cri, lbf_het = 0.0, (0.0, 0.0), None
    tau_star = 0.0
    if model_kind == "random":
        tp = tau_post if tau_post is not None else tau_posterior(estimates, priors, level)
        tau_med, tau_cri, lbf_het = tp.median, tp.cri, tp.log_bf10
        tau_star = tp.median
    if priors.spike_tau is not None and model_kind == "random":
        tau_star = float(priors.spike_tau)
    mean, sd, cri, lbf = _stage2(estimates.y, vi_w, tau_star, priors, level)
    return BayesFit(
        mu_median=mean,
        mu_cri=cri,
        mu_sd=sd,
        log_bf10_effect=lbf,
        model_kind=model_kind,
        adjusted=True,
        tau_median=tau_med,
        tau_cri=tau_cri,
        log_bf10_heterogeneity=lbf_het,
        tau_star=tau_star,
        level=level,
    )


def bf_effect_savage_dickey(
    estimates: EstimateSet,
    w: WeightScheme | None,
    priors: PriorSpec,
    tau_star: float,
    log: bool = False,
) -> float:
    """Effect Bayes factor as prior over posterior density of ``mu`` at zero."""
    if tau_star < 0:
        raise NegativeTau("tau_star must be >= 0")
    prior = priors.mu_alt
    if not (math.isfinite(prior.sd) and prior.sd > 0):
        raise NullOutsideSupport("point null at 0 needs a proper continuous prior around it")
    v = _effective_vi(estimates, w) + tau_star**2
    mean, sd = conjugate_posterior(estimates.y, v, prior)
    lbf = float(stats.norm.logpdf(0.0, prior.mean, prior.sd) - stats.norm.logpdf(0.0, mean, sd))
    return lbf if log else _exp(lbf)


def fit_bayes_standard(
    estimates: EstimateSet,
    priors: PriorSpec,
    model_kind: str = "random",
    level: float = 0.95,
    tau_post: TauPosterior | None = None,
) -> BayesFit:
    """Standard (unweighted) Bayesian meta-analysis, for comparison.

    The random-effects version integrates ``tau`` out under its prior in
    both effect hypotheses, so ``mu``'s posterior is a normal mixture over
    the ``tau`` grid.
    """
    _check_kind(model_kind, estimates.K)
    y = estimates.y
    vi = estimates.se**2
    if model_kind == "common":
        mean, sd, cri, lbf = _stage2(y, vi, 0.0, priors, level)
        return BayesFit(mean, cri, sd, lbf, "common", False, level=level)

    tp = tau_post if tau_post is not None else tau_posterior(estimates, priors, level)

    def logf_null(t):
        return _loglik_tau2(y, vi, t * t, priors.mu_null) + _log_halfnormal(t, priors.tau_sd)

    _, _, log_null = _tau_quadrature(logf_null, _tau_hi(y, priors.tau_sd), N_GRID, MAX_DOUBLINGS)

    # mixture over tau with trapezoid weights
    g = tp.grid
    tw = np.zeros_like(g)
    h = np.diff(g)
    tw[:-1] += 0.5 * h
    tw[1:] += 0.5 * h
    mix = tp.density * tw
    keep = mix > mix.max() * 1e-14
    mix = mix[keep] / mix[keep].sum()
    tau2 = g[keep] ** 2
    a = 1.0 / (vi[None, :] + tau2[:, None])
    prec = 1.0 / priors.mu_sd**2 + a.sum(axis=1)
    means = (priors.mu_mean / priors.mu_sd**2 + (a * y).sum(axis=1)) / prec
    sds = 1.0 / np.sqrt(prec)

    def cdf(x):
        return float((mix * stats.norm.cdf(x, means, sds)).sum())

    lo_b = float((means - 12 * sds).min())
    hi_b = float((means + 12 * sds).max())

    def q(p):
        return optimize.brentq(lambda x: cdf(x) - p, lo_b, hi_b, xtol=1e-13)

    alpha = (1 - level) / 2
    mix_mean = float((mix * means).sum())
    mix_sd = math.sqrt(float((mix * (sds**2 + (means - mix_mean) ** 2)).sum()))
    return BayesFit(
        mu_median=q(0.5),
        mu_cri=(q(alpha), q(1 - alpha)),
        mu_sd=mix_sd,
        log_bf10_effect=tp.log_marginal_alt - log_null,
        model_kind="random",
        adjusted=False,
        tau_median=tp.median,
        tau_cri=tp.cri,
        log_bf10_heterogeneity=tp.log_bf10,
        tau_star=tp.median,
        level=level,
    )
