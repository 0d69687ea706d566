"""Command-line entry point: ``sdma analyze | simulate | version``.

Exit codes: 0 success, 2 input validation failure, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

from . import __version__
from .errors import NumericalError, ValidationError
from .reporting import (
    AnalysisConfig,
    dumps,
    emit_forest_svg,
    emit_report_json,
    file_digest,
    read_table,
    resolve_weights,
    run_analysis,
)
from .simulation import DEFAULT_SEED, FULL_REPS, SimCondition, factorial_grid, run_condition

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


def _parse_scale(text: str) -> tuple[str, float | None]:
    text = text.strip()
    if text.startswith("generic:"):
        try:
            return "generic", float(text.split(":", 1)[1])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad unit information in {text!r}") from None
    tag = text.replace("-", "_")
    if tag not in ("log_or", "log_rr", "smd", "beta"):
        raise argparse.ArgumentTypeError(f"unknown scale {text!r}")
    return tag, None


def _parse_weights(text: str) -> str:
    if text in ("equal", "column"):
        return text
    if text == "team-split":
        return "team_split"
    if text.startswith("file:") and len(text) > 5:
        return text
    raise argparse.ArgumentTypeError(f"unknown weight scheme {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdma", description="Single-dataset meta-analysis")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="analyze a CSV of estimates")
    a.add_argument("--input", required=True, help="CSV with columns label,team,y,se[,weight]")
    a.add_argument("--model", choices=["common", "random"], default="random")
    a.add_argument("--framework", choices=["classical", "bayes", "both"], default="both")
    a.add_argument("--weights", type=_parse_weights, default="equal",
                   help="equal | team-split | column | file:PATH")
    a.add_argument("--scale", type=_parse_scale, default=("generic", 1.0),
                   help="log-or | log-rr | smd | beta | generic:UI")
    a.add_argument("--input-scale", choices=["additive", "ratio"], default="additive")
    a.add_argument("--ci-to-se", action="store_true",
                   help="derive log-scale SEs from ratio CI columns lower,upper")
    a.add_argument("--level", type=float, default=0.95)
    a.add_argument("--json", dest="json_path", help="write the JSON report here")
    a.add_argument("--svg", dest="svg_path", help="write a forest plot here")

    s = sub.add_parser("simulate", help="run the Monte Carlo calibration study")
    s.add_argument("--grid", default="paper", help="paper | custom:FILE (CSV with K,beta,tau[,n_obs])")
    s.add_argument("--reps", type=int, default=FULL_REPS)
    s.add_argument("--seed", type=int, default=DEFAULT_SEED)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", help="output path (.json or .csv); stdout table if omitted")

    sub.add_parser("version", help="print the version")
    return p


def _analyze(args) -> int:
    scale_tag, ui = args.scale
    config = AnalysisConfig(
        model_kind=args.model,
        framework=args.framework,
        weight_scheme=args.weights,
        scale_tag=scale_tag,
        ui=ui,
        input_scale=args.input_scale,
        level=args.level,
        ci_to_se=args.ci_to_se,
    )
    estimates, column = read_table(args.input, config)
    weights = resolve_weights(config, estimates, column)
    report = run_analysis(
        config, estimates, weights, input_digest=file_digest(args.input), input_path=args.input
    )
    print(report.text())
    if args.json_path:
        emit_report_json(report, args.json_path)
    if args.svg_path:
        emit_forest_svg(report, args.svg_path)
    return EXIT_OK


def _read_grid(spec: str, reps: int, seed: int) -> list[SimCondition]:
    if spec == "paper":
        return factorial_grid(n_reps=reps, seed=seed)
    if not spec.startswith("custom:"):
        raise ValidationError(f"unknown grid {spec!r}")
    path = spec[len("custom:"):]
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            try:
                out.append(
                    SimCondition(
                        K=int(row["K"]),
                        beta=float(row["beta"]),
                        tau=float(row["tau"]),
                        n_obs=int(row.get("n_obs") or 100),
                        n_reps=reps,
                        seed=seed,
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ValidationError(f"{path}: bad grid row {row}: {exc}") from None
    if not out:
        raise ValidationError(f"{path}: empty grid")
    return out


def sim_rows(reports) -> list[dict]:
    return [row for r in reports for row in r.rows()]


def _simulate(args) -> int:
    if args.reps < 2:
        raise ValidationError("--reps must be at least 2")
    grid = _read_grid(args.grid, args.reps, args.seed)
    reports = []
    for cond in grid:
        reports.append(run_condition(cond, n_jobs=args.jobs))
        print(
            f"K={cond.K:<4d} beta={cond.beta:<4g} tau={cond.tau:<4g} "
            f"adj se/emp={reports[-1].adjusted.avg_se / reports[-1].adjusted.emp_se:.3f} "
            f"rej adj={reports[-1].adjusted.rejection_rate:.3f} "
            f"unadj={reports[-1].unadjusted.rejection_rate:.3f}",
            file=sys.stderr,
        )
    rows = sim_rows(reports)
    if args.out and args.out.endswith(".json"):
        doc = {
            "provenance": {
                "tool": "sdma",
                "version": __version__,
                "grid": args.grid,
                "reps": args.reps,
                "seed": args.seed,
            },
            "rows": rows,
        }
        Path(args.out).write_text(dumps(doc), encoding="utf-8")
    else:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in row.items()})
        if args.out:
            Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
        else:
            sys.stdout.write(buf.getvalue())
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "version":
            print(f"sdma {__version__}")
            return EXIT_OK
        if args.command == "analyze":
            return _analyze(args)
        return _simulate(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
