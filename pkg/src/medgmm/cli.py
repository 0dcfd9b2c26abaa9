"""Command-line front end.

    medgmm analyze  --data FILE --outcome Y --exposure A --mediators M1,M2 [...]
    medgmm diagnose --data FILE --outcome Y --exposure A --mediators M1,M2 [...]
    medgmm simulate --n 800 --eta 0.5 --delta 2.0 --reps 1000 --seed 42

Exit codes: 0 success, 2 bad input, 3 identification failure,
4 estimation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import secrets
import sys
from pathlib import Path

from medgmm import __version__
from medgmm.core import ModelSpec, parse_columns, read_csv
from medgmm.diagnostics import diagnose
from medgmm.errors import DataError, EstimationError, IdentificationError, MedGMMError
from medgmm.inference import estimate_effects
from medgmm.simulation import SimConfig, format_table, run_monte_carlo

SCHEMA_VERSION = "1.0"

EXIT_OK, EXIT_INPUT, EXIT_IDENTIFICATION, EXIT_ESTIMATION = 0, 2, 3, 4

log = logging.getLogger("medgmm")

DEFAULTS = {
    "data": None,
    "outcome": None,
    "exposure": None,
    "mediators": None,
    "covariates": "",
    "missing": "error",
    "method": "both",
    "se": "sandwich",
    "bootstrap_reps": 1000,
    "ci": "wald",
    "small_sample": False,
    "n": 800,
    "eta": 0.0,
    "delta": 5.0,
    "reps": 1000,
    "seed": None,
    "threads": 1,
    "out": None,
    "format": "text",
}


class InputError(Exception):
    """Bad flags or config; maps to exit code 2."""


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medgmm",
        description="Mediation analysis with multiple mediators under unmeasured "
                    "mediator-outcome confounding.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option values (flags override it)")
    common.add_argument("--seed", type=int, help="seed for all randomness")
    common.add_argument("--threads", type=int, help="worker threads for replicates")
    common.add_argument("--out", help="write the output document to this file")
    common.add_argument("--format", choices=["json", "text"])
    common.add_argument("-v", "--verbose", action="count", default=0)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="input CSV file")
    data.add_argument("--outcome")
    data.add_argument("--exposure")
    data.add_argument("--mediators", help="comma-separated mediator columns")
    data.add_argument("--covariates", help="comma-separated covariate columns")
    data.add_argument("--missing", choices=["error", "drop"],
                      help="rows with missing values: fail (default) or drop listwise")

    an = sub.add_parser("analyze", parents=[common, data],
                        help="estimate natural direct and indirect effects from a CSV")
    an.add_argument("--method", choices=["gmm", "regression", "both"])
    an.add_argument("--se", choices=["sandwich", "bootstrap", "both"])
    an.add_argument("--bootstrap-reps", type=int, dest="bootstrap_reps")
    an.add_argument("--ci", choices=["wald", "percentile"],
                    help="bootstrap interval type (default wald)")
    an.add_argument("--small-sample", action="store_const", const=True, dest="small_sample",
                    help="scale sandwich covariances by n/(n - d)")

    sub.add_parser("diagnose", parents=[common, data],
                   help="identification diagnostics only (no effect estimates)")

    sim = sub.add_parser("simulate", parents=[common],
                         help="Monte Carlo study of both estimators")
    sim.add_argument("--n", type=int)
    sim.add_argument("--eta", type=float)
    sim.add_argument("--delta", type=float)
    sim.add_argument("--reps", type=int)
    return parser


def resolve_options(args: argparse.Namespace) -> dict:
    """Flags override config-file values, which override defaults."""
    opts = dict(DEFAULTS)
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise InputError("config file must hold a JSON object")
        unknown = sorted(set(k.replace("-", "_") for k in cfg) - set(DEFAULTS))
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(unknown)}")
        opts.update({k.replace("-", "_"): v for k, v in cfg.items()})
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    if opts["seed"] is None:
        opts["seed"] = secrets.randbits(63)
        opts["seed_source"] = "entropy"
    else:
        opts["seed_source"] = "user"
    if opts["format"] not in ("json", "text"):
        raise InputError(f"format must be json or text, got {opts['format']!r}")
    if int(opts["threads"]) < 1:
        raise InputError("threads must be >= 1")
    return opts


def _spec(opts: dict, command: str) -> ModelSpec:
    for key in ("data", "outcome", "exposure", "mediators"):
        if not opts.get(key):
            raise InputError(f"--{key} is required for {command}")
    return ModelSpec(
        outcome=opts["outcome"],
        exposure=opts["exposure"],
        mediators=parse_columns(opts["mediators"]),
        covariates=parse_columns(opts["covariates"]),
        method=opts["method"],
        se_method=opts["se"],
        bootstrap_reps=int(opts["bootstrap_reps"]),
        seed=int(opts["seed"]),
        missing=opts["missing"],
        ci=opts["ci"],
        small_sample=bool(opts["small_sample"]),
    )


def _header(kind: str, opts: dict) -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": kind,
            "package_version": __version__, "seed": int(opts["seed"]),
            "seed_source": opts["seed_source"]}


def _data_block(dataset, opts) -> dict:
    return {
        "path": str(opts["data"]), "n": dataset.n, "k": dataset.k, "p": dataset.p,
        "dropped_rows": dataset.n_dropped,
        "exposure_type": "binary" if dataset.exposure_binary else "continuous",
        "roles": {"outcome": dataset.outcome_name, "exposure": dataset.exposure_name,
                  "mediators": list(dataset.mediator_names),
                  "covariates": list(dataset.covariate_names)},
    }


_LABELS = {("gmm", "nde"): "NDE", ("gmm", "nie"): "NIE",
           ("regression", "nde"): "NDE_reg", ("regression", "nie"): "NIE_reg"}


def report_lines(report) -> list:
    """Estimate +- 1.96 x standard error, one line per effect."""
    lines = [f"{report.method} ({report.se_method} SE, n={report.n})"]
    for which in ("nde", "nie"):
        est = getattr(report, which)
        se = getattr(report, f"se_{which}")
        lo, hi = getattr(report, f"ci_{which}")
        lines.append(f"  {_LABELS[report.method, which]:<8} {est:8.3f} ± {1.96 * se:.3f}"
                     f"   [{lo:.3f}, {hi:.3f}]")
    for item in report.per_mediator:
        lines.append(f"    via {item['mediator']:<10} {item['product']:8.3f} ± "
                     f"{1.96 * item['se']:.3f}")
    return lines


def _emit(doc: dict, text: str, opts: dict):
    body = json.dumps(doc, indent=2, sort_keys=False) + "\n" if opts["format"] == "json" else text
    if opts["out"]:
        Path(opts["out"]).write_text(body)
        sys.stdout.write(text)
    else:
        sys.stdout.write(body)


def _error(kind: str, code: int, exc: Exception, report=None) -> int:
    doc = {"schema_version": SCHEMA_VERSION, "kind": "error", "command": kind,
           "error": {"type": type(exc).__name__, "message": str(exc), "exit_code": code}}
    if report is not None:
        doc["diagnostics"] = report.to_dict()
    sys.stderr.write(json.dumps(doc) + "\n")
    return code


def cmd_analyze(opts: dict) -> int:
    spec = _spec(opts, "analyze")
    dataset = read_csv(opts["data"], spec)
    doc = _header("analyze", opts)
    doc["data"] = _data_block(dataset, opts)
    text = [f"data: {opts['data']} (n={dataset.n}, K={dataset.k}, p={dataset.p}, "
            f"dropped rows={dataset.n_dropped})", f"seed: {spec.seed}", ""]
    if spec.method in ("gmm", "both"):
        report = diagnose(dataset, spec.tolerances)
        doc["diagnostics"] = report.to_dict()
        text += [report.to_text(), ""]
        if opts["format"] == "text" and not opts["out"]:
            sys.stdout.write("\n".join(text) + "\n")
            text = []
        if report.verdict == "fail":
            raise IdentificationError("identification diagnostics failed: "
                                      + "; ".join(report.reasons), report)
    reports = estimate_effects(dataset, spec, threads=int(opts["threads"]))
    doc["reports"] = [r.to_dict() for r in reports]
    text.append("Effects per unit change in the exposure (estimate ± 1.96 × SE)")
    for r in reports:
        text.extend(report_lines(r))
    _emit(doc, "\n".join(text) + "\n", opts)
    return EXIT_OK


def cmd_diagnose(opts: dict) -> int:
    spec = _spec(opts, "diagnose")
    dataset = read_csv(opts["data"], spec, allow_constant_exposure=True)
    report = diagnose(dataset, spec.tolerances)
    doc = _header("diagnose", opts)
    doc["data"] = _data_block(dataset, opts)
    doc["diagnostics"] = report.to_dict()
    _emit(doc, report.to_text() + "\n", opts)
    return EXIT_OK


def cmd_simulate(opts: dict) -> int:
    try:
        config = SimConfig(n=int(opts["n"]), eta=float(opts["eta"]), delta=float(opts["delta"]),
                           reps=int(opts["reps"]), seed=int(opts["seed"]))
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    result = run_monte_carlo(config, threads=int(opts["threads"]))
    text, payload = format_table(result.rows, result)
    doc = _header("simulate", opts)
    doc.update(payload)
    _emit(doc, text, opts)
    return EXIT_OK


COMMANDS = {"analyze": cmd_analyze, "diagnose": cmd_diagnose, "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    command = args.command
    try:
        opts = resolve_options(args)
        log.info("running %s with seed %s", command, opts["seed"])
        return COMMANDS[command](opts)
    except (InputError, DataError) as exc:
        if isinstance(exc, IdentificationError) and command == "analyze":
            return _error(command, EXIT_IDENTIFICATION, exc, exc.report)
        return _error(command, EXIT_INPUT, exc)
    except IdentificationError as exc:
        return _error(command, EXIT_IDENTIFICATION, exc, exc.report)
    except (EstimationError, MedGMMError) as exc:
        return _error(command, EXIT_ESTIMATION, exc)


if __name__ == "__main__":
    sys.exit(main())
