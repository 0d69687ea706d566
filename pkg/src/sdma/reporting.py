"""CSV ingestion, analysis orchestration, JSON and SVG output."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy import stats

from . import __version__
from .bayes import (
    BayesFit,
    fit_bayes_sd,
    fit_bayes_standard,
    tau_posterior,
    unit_information_prior,
)
from .classical import (
    fit_sd_common,
    fit_sd_random,
    fit_standard_common,
    fit_standard_random,
)
from .data import (
    ClassicalFit,
    EstimateRecord,
    EstimateSet,
    WeightScheme,
    custom_weights,
    equal_weights,
    team_split_weights,
    validate_set,
)
from .errors import (
    EmptySet,
    MissingColumn,
    NonPositiveRatio,
    NonPositiveSE,
    ParseError,
    UnknownScale,
    ValidationError,
    WeightMismatch,
)

REQUIRED_COLUMNS = ("label", "team", "y", "se")
CI_COLUMNS = ("lower", "upper")
Z95 = 1.959964
RATIO_SCALES = ("log_or", "log_rr")


@dataclass(frozen=True)
class AnalysisConfig:
    """Settings for one ``analyze`` run.

    ``weight_scheme`` is ``"equal"``, ``"team_split"``, ``"column"`` (the
    CSV's ``weight`` column) or ``"file:PATH"`` (one number per line).
    """

    model_kind: str = "random"
    framework: str = "both"
    weight_scheme: str = "equal"
    scale_tag: str = "generic"
    ui: float | None = None
    input_scale: str = "additive"
    level: float = 0.95
    ci_to_se: bool = False

    def __post_init__(self):
        if self.model_kind not in ("common", "random"):
            raise ValidationError(f"model must be common or random, got {self.model_kind!r}")
        if self.framework not in ("classical", "bayes", "both"):
            raise ValidationError(f"unknown framework {self.framework!r}")
        if self.input_scale not in ("additive", "ratio"):
            raise ValidationError(f"unknown input scale {self.input_scale!r}")
        if not 0 < self.level < 1:
            raise ValidationError(f"level must be in (0, 1), got {self.level!r}")
        if self.scale_tag not in (*RATIO_SCALES, "smd", "beta", "generic"):
            raise UnknownScale(f"unknown scale {self.scale_tag!r}")
        ws = self.weight_scheme
        if ws not in ("equal", "team_split", "column") and not ws.startswith("file:"):
            raise ValidationError(f"unknown weight scheme {ws!r}")
        if self.ci_to_se and self.input_scale != "ratio":
            raise ValidationError("--ci-to-se needs ratio-scale input")

    @property
    def ratio_display(self) -> bool:
        return self.scale_tag in RATIO_SCALES or self.input_scale == "ratio"


# --------------------------------------------------------------------------
# input
# --------------------------------------------------------------------------


def _float(raw: str, row: int, column: str) -> float:
    try:
        x = float(raw)
    except (TypeError, ValueError):
        raise ParseError(row, column, f"not a number: {raw!r}") from None
    if not math.isfinite(x):
        raise ParseError(row, column, f"not finite: {raw!r}")
    return x


def read_table(path, config: AnalysisConfig) -> tuple[EstimateSet, list[float] | None]:
    """Read estimates and the optional ``weight`` column.

    Rows are numbered from 2 (the header is row 1). With ratio input the
    ``y`` column holds ratios and is log-transformed; ``se`` must already be
    on the log scale unless ``ci_to_se`` is set, in which case ``lower`` and
    ``upper`` ratio CI bounds replace it.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        reader.fieldnames = header
        needed = list(REQUIRED_COLUMNS)
        if config.ci_to_se:
            needed = [c for c in needed if c != "se"] + list(CI_COLUMNS)
        missing = [c for c in needed if c not in header]
        if missing:
            raise MissingColumn(f"missing column(s): {', '.join(missing)}")
        has_weight = "weight" in header
        records, weights = [], []
        for n, row in enumerate(reader, start=2):
            y = _float(row["y"], n, "y")
            if config.ci_to_se:
                lo = _float(row["lower"], n, "lower")
                hi = _float(row["upper"], n, "upper")
                if lo <= 0 or hi <= 0:
                    raise NonPositiveRatio(f"row {n}: CI bounds must be > 0")
                se = (math.log(hi) - math.log(lo)) / (2 * Z95)
            else:
                se = _float(row["se"], n, "se")
            if se <= 0:
                raise NonPositiveSE(f"row {n}: standard error must be > 0, got {se!r}")
            if config.input_scale == "ratio":
                if y <= 0:
                    raise NonPositiveRatio(f"row {n}: ratio must be > 0, got {y!r}")
                y = math.log(y)
            if has_weight:
                weights.append(_float(row["weight"], n, "weight"))
            records.append(
                EstimateRecord(
                    label=row["label"].strip(),
                    team=(row["team"] or "").strip(),
                    y=y,
                    se=se,
                    scale_tag=config.scale_tag,
                )
            )
    if not records:
        raise EmptySet(f"{path}: no estimates")
    return validate_set(records), (weights if has_weight else None)


def read_estimates(path, config: AnalysisConfig) -> EstimateSet:
    """Read a ``label,team,y,se[,weight]`` CSV into a validated set."""
    return read_table(path, config)[0]


def read_weights_file(path) -> list[float]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if line:
            out.append(_float(line, n, "weight"))
    return out


def resolve_weights(
    config: AnalysisConfig, estimates: EstimateSet, column: Sequence[float] | None = None
) -> WeightScheme:
    ws = config.weight_scheme
    if ws == "equal":
        return equal_weights(estimates.K)
    if ws == "team_split":
        return team_split_weights(estimates)
    raw = column if ws == "column" else read_weights_file(ws[len("file:"):])
    if raw is None:
        raise ValidationError("weight scheme 'column' needs a weight column in the input")
    if len(raw) != estimates.K:
        raise WeightMismatch(f"{len(raw)} weights for {estimates.K} estimates")
    return custom_weights(raw)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# analysis
# --------------------------------------------------------------------------


def _finite(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _ratio(x):
    if x is None:
        return None
    try:
        return math.exp(x)
    except OverflowError:
        return None


def classical_dict(fit: ClassicalFit, ratio: bool) -> dict:
    d = {
        "model_kind": fit.model_kind,
        "adjusted": fit.adjusted,
        "mu_hat": fit.mu_hat,
        "se_mu": fit.se_mu,
        "ci_mu": list(fit.ci_mu),
        "z": fit.z,
        "p_mu": fit.p_mu,
        "tau_hat": fit.tau_hat,
        "ci_tau": list(fit.ci_tau),
        "q_stat": fit.q_stat,
        "p_tau": _finite(fit.p_tau),
        "level": fit.level,
    }
    if ratio:
        d["display"] = {"mu": _ratio(fit.mu_hat), "ci_mu": [_ratio(c) for c in fit.ci_mu]}
    return d


def bayes_dict(fit: BayesFit, ratio: bool) -> dict:
    het = fit.log_bf10_heterogeneity
    d = {
        "model_kind": fit.model_kind,
        "adjusted": fit.adjusted,
        "mu_median": fit.mu_median,
        "mu_cri": list(fit.mu_cri),
        "mu_sd": fit.mu_sd,
        "log_bf10_effect": fit.log_bf10_effect,
        "bf10_effect": _finite(fit.bf10_effect),
        "bf01_effect": _finite(fit.bf01_effect),
        "tau_median": fit.tau_median,
        "tau_cri": list(fit.tau_cri),
        "tau_star": fit.tau_star,
        "log_bf10_heterogeneity": het,
        "bf10_heterogeneity": None if het is None else _finite(fit.bf10_heterogeneity),
        "bf01_heterogeneity": None if het is None else _finite(fit.bf01_heterogeneity),
        "level": fit.level,
    }
    if ratio:
        d["display"] = {"mu": _ratio(fit.mu_median), "ci_mu": [_ratio(c) for c in fit.mu_cri]}
    return d


@dataclass
class Report:
    config: AnalysisConfig
    estimates: EstimateSet
    weights: WeightScheme
    classical: dict[str, ClassicalFit] = field(default_factory=dict)
    bayes: dict[str, BayesFit] = field(default_factory=dict)
    input_digest: str | None = None
    input_path: str | None = None

    @property
    def ratio_display(self) -> bool:
        return self.config.ratio_display

    def to_dict(self) -> dict:
        ratio = self.ratio_display
        out: dict[str, Any] = {
            "provenance": {
                "tool": "sdma",
                "version": __version__,
                "config": asdict(self.config),
                "input_path": self.input_path,
                "input_sha256": self.input_digest,
            },
            "display_scale": "ratio" if ratio else "additive",
            "primary": "adjusted",
            "estimates": [
                {"label": r.label, "team": r.team, "y": r.y, "se": r.se, "weight": w}
                for r, w in zip(self.estimates.records, self.weights.weights)
            ],
        }
        if self.classical:
            out["classical"] = {k: classical_dict(v, ratio) for k, v in self.classical.items()}
        if self.bayes:
            out["bayes"] = {k: bayes_dict(v, ratio) for k, v in self.bayes.items()}
        return out

    def text(self) -> str:
        """Short human-readable summary, one line per fit."""
        ratio = self.ratio_display
        tf = math.exp if ratio else (lambda x: x)
        sym = "mu_ratio" if ratio else "mu"
        pct = f"{100 * self.config.level:g}%"
        lines = [f"K = {self.estimates.K} estimates, {self.config.model_kind}-effects model"]
        for kind, fit in self.classical.items():
            lines.append(
                f"classical {kind}: {sym} = {tf(fit.mu_hat):.2f} ({pct} CI from "
                f"{tf(fit.ci_mu[0]):.2f} to {tf(fit.ci_mu[1]):.2f}; p = {_fmt_p(fit.p_mu)})"
            )
            if fit.model_kind == "random":
                lines.append(
                    f"    tau = {fit.tau_hat:.3f} ({pct} CI from {fit.ci_tau[0]:.3f} to "
                    f"{fit.ci_tau[1]:.3f}; p = {_fmt_p(fit.p_tau)})"
                )
        for kind, fit in self.bayes.items():
            lbf = fit.log_bf10_effect
            lines.append(
                f"bayes {kind}: {sym} = {tf(fit.mu_median):.2f} ({pct} CrI from "
                f"{tf(fit.mu_cri[0]):.2f} to {tf(fit.mu_cri[1]):.2f}; {_fmt_bf(lbf)})"
            )
            if fit.log_bf10_heterogeneity is not None:
                lines.append(
                    f"    tau = {fit.tau_median:.3f} ({pct} CrI from {fit.tau_cri[0]:.3f} to "
                    f"{fit.tau_cri[1]:.3f}; {_fmt_bf(fit.log_bf10_heterogeneity)})"
                )
        return "\n".join(lines)


def _fmt_p(p):
    if p is None or not math.isfinite(p):
        return "NA"
    return "< 0.0001" if p < 1e-4 else f"{p:.4f}"


def _fmt_bf(log_bf10):
    if log_bf10 >= 0:
        x, tag = log_bf10, "BF10"
    else:
        x, tag = -log_bf10, "BF01"
    if x < math.log(1e6):
        return f"{tag} = {math.exp(x):.2f}"
    exp10 = x / math.log(10)
    return f"{tag} = {10 ** (exp10 % 1):.1f}e{int(exp10)} (log BF10 = {log_bf10:.2f})"


def run_analysis(
    config: AnalysisConfig,
    estimates: EstimateSet,
    weights: WeightScheme | None = None,
    input_digest: str | None = None,
    input_path: str | None = None,
) -> Report:
    """Fit adjusted and standard models for the configured framework(s)."""
    w = weights if weights is not None else resolve_weights(config, estimates)
    w.check_aligned(estimates)
    report = Report(config, estimates, w, input_digest=input_digest, input_path=input_path)
    lvl = config.level
    random = config.model_kind == "random"
    if config.framework in ("classical", "both"):
        if random:
            sd = fit_sd_random(estimates, w, lvl)
            std = fit_standard_random(estimates, lvl, tau2=sd.tau2_hat)
        else:
            sd = fit_sd_common(estimates, w, lvl)
            std = fit_standard_common(estimates, lvl)
        report.classical = {"adjusted": sd, "standard": std}
    if config.framework in ("bayes", "both"):
        priors = unit_information_prior(config.scale_tag, config.ui)
        tp = tau_posterior(estimates, priors, lvl) if random else None
        kind = config.model_kind
        report.bayes = {
            "adjusted": fit_bayes_sd(estimates, w, priors, kind, lvl, tau_post=tp),
            "standard": fit_bayes_standard(estimates, priors, kind, lvl, tau_post=tp),
        }
    return report


# --------------------------------------------------------------------------
# JSON
# --------------------------------------------------------------------------


def _encode(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None:
        return "null"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not math.isfinite(x):
            return "null"
        s = f"{x:.17g}"
        if not any(c in s for c in ".en"):
            s += ".0"
        return s
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [f"{pad}{_encode(v, indent, level + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    """JSON text with every float written at 17 significant digits.

    Key order follows the input mappings; non-finite floats become ``null``.
    """
    return _encode(obj, indent, 0) + "\n"


def report_schema() -> dict:
    text = resources.files("sdma").joinpath("report.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def emit_report_json(report: Report | dict, path) -> None:
    data = report.to_dict() if isinstance(report, Report) else report
    Path(path).write_text(dumps(data), encoding="utf-8")


# --------------------------------------------------------------------------
# forest plot
# --------------------------------------------------------------------------

_ROW_H = 22
_LEFT = 180
_PLOT_W = 420
_RIGHT = 200
_TOP = 40


def _nice_ticks(lo: float, hi: float, ratio: bool) -> list[float]:
    """Tick positions on the additive scale."""
    if ratio:
        cands = [0.1, 0.2, 0.25, 0.5, 0.67, 0.8, 1.0, 1.25, 1.5, 2.0, 3.0, 4.0, 5.0, 10.0]
        ticks = [math.log(c) for c in cands if lo <= math.log(c) <= hi]
        if len(ticks) < 3:
            ticks = [lo, 0.0, hi] if lo < 0 < hi else [lo, (lo + hi) / 2, hi]
        return sorted(set(ticks))
    span = hi - lo
    step = 10 ** math.floor(math.log10(span / 4)) if span > 0 else 1.0
    for m in (1, 2, 5, 10):
        if span / (m * step) <= 6:
            step *= m
            break
    start = math.ceil(lo / step) * step
    n = int(math.floor((hi - start) / step + 1e-9)) + 1
    return [round(start + i * step, 12) for i in range(n)]


def _pooled_rows(report: Report) -> list[tuple[str, float, float, float]]:
    rows = []
    names = {"adjusted": "single-dataset", "standard": "standard"}
    for kind, fit in report.classical.items():
        rows.append((f"{names[kind]} (classical)", fit.mu_hat, *fit.ci_mu))
    for kind, fit in report.bayes.items():
        rows.append((f"{names[kind]} (Bayesian)", fit.mu_median, *fit.mu_cri))
    return rows


def forest_svg(report: Report) -> str:
    """Render a forest plot as SVG text (deterministic)."""
    ratio = report.ratio_display
    zc = float(stats.norm.ppf(0.5 + report.config.level / 2))
    est = [(r.label, r.y, r.y - zc * r.se, r.y + zc * r.se) for r in report.estimates.records]
    pooled = _pooled_rows(report)
    xs = [v for row in est + pooled for v in row[1:]] + [0.0]
    lo, hi = min(xs), max(xs)
    pad = 0.05 * (hi - lo or 1.0)
    lo, hi = lo - pad, hi + pad

    def px(x):
        return _LEFT + (x - lo) / (hi - lo) * _PLOT_W

    def fmt(x):
        return f"{math.exp(x):.2f}" if ratio else f"{x:.2f}"

    n_rows = len(est) + len(pooled) + 1
    height = _TOP + n_rows * _ROW_H + 50
    width = _LEFT + _PLOT_W + _RIGHT
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    bottom = _TOP + n_rows * _ROW_H
    ref = px(0.0)
    out.append(
        f'<line class="reference" x1="{ref:.2f}" y1="{_TOP - 10}" x2="{ref:.2f}" '
        f'y2="{bottom:.2f}" stroke="#888" stroke-dasharray="4,3" data-value="{1 if ratio else 0}"/>'
    )
    for i, (label, y, a, b) in enumerate(est):
        cy = _TOP + i * _ROW_H + _ROW_H / 2
        out.append('<g class="estimate">')
        out.append(f'<text x="10" y="{cy + 4:.2f}">{_xml(label)}</text>')
        out.append(
            f'<line class="whisker" x1="{px(a):.2f}" y1="{cy:.2f}" x2="{px(b):.2f}" '
            f'y2="{cy:.2f}" stroke="black"/>'
        )
        out.append(
            f'<rect class="point" x="{px(y) - 3:.2f}" y="{cy - 3:.2f}" width="6" height="6" '
            f'fill="black"/>'
        )
        out.append(
            f'<text x="{_LEFT + _PLOT_W + 10}" y="{cy + 4:.2f}">{fmt(y)} [{fmt(a)}, {fmt(b)}]</text>'
        )
        out.append("</g>")
    sep = _TOP + len(est) * _ROW_H + _ROW_H / 2
    out.append(
        f'<line x1="10" y1="{sep:.2f}" x2="{width - 10}" y2="{sep:.2f}" stroke="#ccc"/>'
    )
    colours = {"single-dataset": "#1f5fa8", "standard": "#d9822b"}
    for j, (label, m, a, b) in enumerate(pooled):
        cy = _TOP + (len(est) + 1 + j) * _ROW_H + _ROW_H / 2
        colour = colours[label.split(" ")[0]]
        pts = f"{px(a):.2f},{cy:.2f} {px(m):.2f},{cy - 6:.2f} {px(b):.2f},{cy:.2f} {px(m):.2f},{cy + 6:.2f}"
        out.append('<g class="pooled">')
        out.append(f'<text x="10" y="{cy + 4:.2f}" font-weight="bold">{_xml(label)}</text>')
        out.append(f'<polygon class="diamond" points="{pts}" fill="{colour}"/>')
        out.append(
            f'<text x="{_LEFT + _PLOT_W + 10}" y="{cy + 4:.2f}" font-weight="bold">'
            f"{fmt(m)} [{fmt(a)}, {fmt(b)}]</text>"
        )
        out.append("</g>")
    out.append(
        f'<line class="axis" x1="{_LEFT}" y1="{bottom:.2f}" x2="{_LEFT + _PLOT_W}" '
        f'y2="{bottom:.2f}" stroke="black"/>'
    )
    for t in _nice_ticks(lo, hi, ratio):
        x = px(t)
        out.append(
            f'<line class="tick" x1="{x:.2f}" y1="{bottom:.2f}" x2="{x:.2f}" '
            f'y2="{bottom + 5:.2f}" stroke="black"/>'
        )
        lab = f"{math.exp(t):g}" if ratio else f"{t:g}"
        out.append(f'<text x="{x:.2f}" y="{bottom + 18:.2f}" text-anchor="middle">{lab}</text>')
    axis_label = "ratio (log scale)" if ratio else "effect size"
    out.append(
        f'<text x="{_LEFT + _PLOT_W / 2:.2f}" y="{bottom + 36:.2f}" '
        f'text-anchor="middle">{axis_label}</text>'
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _xml(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def emit_forest_svg(report: Report, path) -> None:
    Path(path).write_text(forest_svg(report), encoding="utf-8")
