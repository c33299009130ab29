"""Command-line entry point for the laboratory studies.

Exit codes: 0 success, 1 a study assertion failed, 2 configuration error.
Diagnostics go to stderr; data products are CSVs plus JSON summaries in
the output directory.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ConfigError, TwoScaleError
from .lab import (
    ExperimentConfig,
    run_convergence_study,
    run_entropy_table,
    run_hjb_study,
    run_quasi_optimality,
    run_report,
    run_sampler_diagnostics,
    run_simulate,
    run_value_ordering,
)

STUDIES = ("entropy", "sample", "simulate", "converge", "value", "hjb", "quasi", "report")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twoscale", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STUDIES:
        p = sub.add_parser(name)
        if name != "report":
            p.add_argument("--config", required=True, help="TOML experiment config")
            p.add_argument("--seed", type=int, default=None, help="override [mc].seed")
        p.add_argument("--out", default=None, help="output directory (default: config [output].dir)")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--quiet", action="store_true")
    return parser


def _log(args, message: str):
    if not args.quiet:
        print(message, file=sys.stderr)


def cli_main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "report":
            out = Path(args.out or "out")
            merged = run_report(out)
            _log(args, f"report: {len(merged['studies'])} studies, passed={merged['passed']}")
            return 0 if merged["passed"] else 1

        cfg = ExperimentConfig.from_toml(args.config)
        if args.seed is not None:
            raw = dict(cfg.raw)
            raw["mc"] = dict(raw["mc"], seed=int(args.seed))
            cfg = ExperimentConfig.from_dict(raw)
        out = Path(args.out or cfg["output"]["dir"])

        if args.command == "entropy":
            run_entropy_table(cfg, out_dir=out)
            _log(args, f"entropy table written to {out}")
            return 0
        if args.command == "sample":
            rows = run_sampler_diagnostics(cfg, out_dir=out)
            worst = max(abs(r["mean_lang"] - r["mean_quad"]) / max(r["se_mean"], 1e-300) for r in rows)
            _log(args, f"sampler diagnostics written to {out} (worst mean deviation {worst:.2f} se)")
            return 0 if worst <= 5.0 else 1
        if args.command == "simulate":
            run_simulate(cfg, out_dir=out)
            _log(args, f"trajectory written to {out}")
            return 0
        if args.command == "converge":
            report = run_convergence_study(cfg, threads=args.threads, out_dir=out)
            _log(args, f"convergence: exponent {report.decay_exponent:.3f} passed={report.passed}")
            return 0 if report.passed else 1
        if args.command == "value":
            report = run_value_ordering(cfg, out_dir=out)
            _log(
                args,
                f"value ordering: perturbed {report.perturbed.mean:.5f} "
                f"limit {report.limit.mean:.5f} effective {report.effective.mean:.5f} "
                f"passed={report.passed}",
            )
            return 0 if report.passed else 1
        if args.command == "quasi":
            report = run_quasi_optimality(cfg, out_dir=out, threads=args.threads)
            _log(args, f"quasi-optimality: final gap {report.rows[-1].gap:.5f} passed={report.passed}")
            return 0 if report.passed else 1
        if args.command == "hjb":
            result = run_hjb_study(cfg, out_dir=out)
            _log(args, f"hjb: {result}")
            return 0 if result["passed"] else 1
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TwoScaleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    raise SystemExit(cli_main())


if __name__ == "__main__":
    main()
