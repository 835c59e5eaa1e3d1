"""Command-line interface: ``corrtest fit|test|simulate``.

Exit codes: 0 success, 2 usage or data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys

import numpy as np

from .exceptions import CorrTestError, DataError, DegenerateData, NumericalFailure, ParseError
from .inference import METHODS, pairwise_wald, run_tests
from .mle import DOMAINS, constrained_mle, unconstrained_mle
from .model import COUNT_FIELDS, StudyData, validate_study
from .simulation import (
    ALL_METHODS,
    DEFAULT_REPLICATES,
    SimConfig,
    estimate_power,
    estimate_type_I_error,
    sweep_uniform,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
HEADER = ("group",) + COUNT_FIELDS
REPORT_HEADER = ("method", "rejection_rate", "mc_se", "rejections", "skipped", "replicates")


class UsageError(CorrTestError, ValueError):
    """Invalid command-line flags."""


class UnknownMethod(UsageError):
    pass


# --- input ----------------------------------------------------------------

def read_study(path: str) -> StudyData:
    """Parse a ``group,m0,m1,m2,n0,n1`` CSV file."""
    try:
        handle = sys.stdin if path == "-" else open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from None
    with handle:
        rows = list(csv.reader(handle))
    numbered = [(k + 1, [c.strip() for c in row]) for k, row in enumerate(rows)
                if any(c.strip() for c in row)]
    if not numbered:
        raise ParseError("file is empty", line=1)
    line, header = numbered[0]
    if tuple(h.lower() for h in header) != HEADER:
        raise ParseError(f"expected header {','.join(HEADER)}", line=line)
    labels, counts = [], []
    for line, row in numbered[1:]:
        if len(row) != len(HEADER):
            raise ParseError(f"expected {len(HEADER)} fields, got {len(row)}", line=line)
        label = row[0]
        if label in labels:
            raise ParseError(f"duplicate group label {label!r}", line=line)
        values = []
        for name, cell in zip(COUNT_FIELDS, row[1:]):
            try:
                value = int(cell)
            except ValueError:
                raise ParseError(f"{name} = {cell!r} is not an integer", line=line) from None
            if value < 0:
                raise ParseError(f"{name} = {value} is negative", line=line)
            values.append(value)
        labels.append(label)
        counts.append(values)
    if not counts:
        raise ParseError("no groups", line=line)
    data = StudyData.from_array(np.array(counts), labels)
    return validate_study(data)


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    values = _float_list(text)
    if any(v != int(v) for v in values):
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    return [int(v) for v in values]


def _fmt(x: float, digits: int = 4) -> str:
    return "nan" if x is None or math.isnan(x) else f"{x:.{digits}f}"


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _dump(obj, out):
    out.write(json.dumps(obj, indent=2, default=_json_default, allow_nan=True) + "\n")


def _labels(data: StudyData) -> list[str]:
    return list(data.labels) if data.labels else [str(k + 1) for k in range(data.g)]


# --- fit ------------------------------------------------------------------

def cmd_fit(args, out) -> int:
    data = read_study(args.path)
    labels = _labels(data)
    h0 = constrained_mle(data)
    h1 = unconstrained_mle(data, domain=args.domain) if data.M > 0 else None
    if args.json:
        _dump({"groups": labels, "constrained": h0.as_dict(),
               "unconstrained": h1.as_dict() if h1 else None}, out)
        return EXIT_OK
    rho0 = h0.rho_hat[0]
    out.write(f"Constrained fit ({h0.method.value})\n")
    out.write(f"  pi_H0  = {_fmt(h0.pi_hat[0])}\n  R_H0   = {_fmt(h0.R_hat)}\n"
              f"  rho_H0 = {_fmt(rho0)}\n  loglik = {_fmt(h0.log_lik)}\n")
    if h1 is None:
        out.write("Unconstrained fit: not available (no bilateral subjects, R is not estimable)\n")
        return EXIT_OK
    out.write(f"Unconstrained fit ({h1.method.value}, {h1.iterations} iterations, "
              f"gradient norm {h1.gradient_norm:.2e})\n")
    width = max(8, max(len(lab) for lab in labels))
    out.write(f"  {'group':<{width}}  {'pi_hat':>8}  {'rho_hat':>8}\n")
    for lab, p, r in zip(labels, h1.pi_hat, h1.rho_hat):
        out.write(f"  {lab:<{width}}  {_fmt(p):>8}  {_fmt(r):>8}\n")
    out.write(f"  R_hat  = {_fmt(h1.R_hat)}\n  loglik = {_fmt(h1.log_lik)}\n")
    return EXIT_OK


# --- test -----------------------------------------------------------------

def _methods(spec: list[str]) -> list[str]:
    names = []
    for item in spec:
        for name in item.lower().split(","):
            name = name.strip()
            if name == "all":
                names.extend(ALL_METHODS)
            elif name in METHODS:
                names.append(name)
            elif name:
                raise UnknownMethod(f"unknown method {name!r}; choose from "
                                    f"{', '.join(ALL_METHODS)} or all")
    return list(dict.fromkeys(names))


def _group_index(data: StudyData, token: str) -> int:
    labels = _labels(data)
    if token in labels:
        return labels.index(token)
    try:
        k = int(token)
    except ValueError:
        raise UsageError(f"unknown group {token!r}") from None
    if not 1 <= k <= data.g:
        raise UsageError(f"group index {k} out of range 1..{data.g}")
    return k - 1


def cmd_test(args, out) -> int:
    methods = _methods(args.method or ["all"])
    data = read_study(args.path)
    if data.g < 2:
        raise UsageError("need at least 2 groups")
    results = list(run_tests(data, methods).values())
    if args.pair:
        i, j = (_group_index(data, t) for t in args.pair)
        if i == j:
            raise UsageError("--pair needs two different groups")
        results.append(pairwise_wald(data, i, j))
    labels = _labels(data)
    if args.json:
        records = []
        for r in results:
            rec = r.as_dict()
            if r.pair is not None:
                rec["pair"] = [labels[k] for k in r.pair]
            records.append(rec)
        _dump(records[0] if len(records) == 1 else records, out)
        return EXIT_OK
    out.write(f"{'method':<16}{'statistic':>11}{'df':>4}{'p-value':>10}\n")
    for r in results:
        name = r.method.value
        if r.pair is not None:
            name = f"Wald({labels[r.pair[0]]},{labels[r.pair[1]]})"
        out.write(f"{name:<16}{_fmt(r.statistic):>11}{r.df:>4}{_fmt(r.p_value):>10}\n")
    return EXIT_OK


# --- simulate -------------------------------------------------------------

def _resolve_seed(seed):
    if seed is None:
        return int(np.random.SeedSequence().entropy % 2**64)
    return seed


def _sizes(args, g):
    m = args.m if args.m is not None else [100] * g
    n = args.n if args.n is not None else list(m)
    if len(m) == 1:
        m = m * g
    if len(n) == 1:
        n = n * g
    if len(m) != g or len(n) != g:
        raise UsageError(f"--m and --n need 1 or {g} values")
    return m, n


def _report_csv(report) -> str:
    lines = [",".join(REPORT_HEADER)]
    for key in report.rejections:
        lines.append(",".join([key, repr(report.rejection_rate[key]), repr(report.mc_se[key]),
                               str(report.rejections[key]), str(report.skipped[key]),
                               str(report.config.replicates)]))
    return "\n".join(lines) + "\n"


def _write_out(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def cmd_simulate(args, out) -> int:
    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    if args.g < 2:
        raise UsageError("--g must be >= 2")
    if args.threads is not None and args.threads < 0:
        raise UsageError("--threads must be >= 0")
    methods = _methods(args.methods)
    seed = _resolve_seed(args.seed)
    m, n = _sizes(args, args.g)
    if args.kind == "sweep":
        result = sweep_uniform(args.g, m, n, args.pairs, args.reps, seed, methods=methods,
                               alpha=args.alpha, threads=args.threads, domain=args.domain)
        text = result.to_csv()
        info = (f"seed={seed} g={args.g} m={m} n={n} pairs={args.pairs} reps={args.reps} "
                f"alpha={args.alpha} redrawn={result.redrawn}\n")
        if args.out:
            _write_out(args.out, text)
            out.write(info)
        else:
            sys.stderr.write(info)
            out.write(text)
        return EXIT_OK

    pi = args.pi
    if pi is None:
        raise UsageError("--pi is required")
    if args.kind == "alpha":
        if len(pi) == 1:
            pi = pi * args.g
        if len(set(pi)) != 1:
            raise UsageError("alpha needs a single common --pi")
    elif len(pi) != args.g:
        raise UsageError(f"power needs {args.g} values in --pi")
    if (args.R is None) == (args.rho is None):
        raise UsageError("give exactly one of --R and --rho")
    config = SimConfig(tuple(m), tuple(n), tuple(pi), R0=args.R, rho0=args.rho,
                       replicates=args.reps, alpha=args.alpha, seed=seed,
                       methods=tuple(methods), domain=args.domain)
    run = estimate_type_I_error if args.kind == "alpha" else estimate_power
    report = run(config, threads=args.threads)
    if args.out:
        _write_out(args.out, _report_csv(report))
    if args.json:
        _dump(report.as_dict(), out)
        return EXIT_OK
    c = config
    out.write(f"seed: {c.seed}\n")
    out.write(f"g: {c.g}\nm: {list(c.m_sizes)}\nn: {list(c.n_sizes)}\npi: {list(c.pi_true)}\n"
              f"R0: {c.R0!r}\nalpha: {c.alpha}\nreplicates: {c.replicates}\n")
    out.write(f"{'method':<16}{'rate':>8}{'mc_se':>8}{'skipped':>9}\n")
    for key in report.rejections:
        out.write(f"{key:<16}{_fmt(report.rejection_rate[key]):>8}"
                  f"{_fmt(report.mc_se[key]):>8}{report.skipped[key]:>9}\n")
    if report.flagged:
        out.write(f"warning: skipped fraction >= 1% for {', '.join(report.flagged)}\n")
    out.write(f"wall_clock: {report.wall_clock:.2f}s\n")
    return EXIT_OK


# --- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corrtest",
        description="Homogeneity tests for combined unilateral and bilateral binary data "
                    "under Rosner's model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="constrained and unconstrained MLEs")
    fit.add_argument("path", help="CSV with header group,m0,m1,m2,n0,n1 ('-' for stdin)")
    fit.add_argument("--json", action="store_true")
    fit.add_argument("--domain", choices=DOMAINS, default="feasible")

    test = sub.add_parser("test", help="homogeneity tests")
    test.add_argument("path")
    test.add_argument("--method", action="append",
                      help="lr, wald, score, donner or all (repeatable or comma-separated)")
    test.add_argument("--pair", nargs=2, metavar=("I", "J"),
                      help="also run the pairwise Wald test (labels or 1-based indices)")
    test.add_argument("--json", action="store_true")

    sim = sub.add_parser("simulate", help="Monte Carlo type I error, power or uniform sweep")
    sim.add_argument("kind", choices=("alpha", "power", "sweep"))
    sim.add_argument("--g", type=int, default=2)
    sim.add_argument("--m", type=_int_list, help="bilateral sizes, one or g values")
    sim.add_argument("--n", type=_int_list, help="unilateral sizes, one or g values (default: --m)")
    sim.add_argument("--pi", type=_float_list)
    sim.add_argument("--R", type=float)
    sim.add_argument("--rho", type=float)
    sim.add_argument("--reps", type=int, default=DEFAULT_REPLICATES)
    sim.add_argument("--pairs", type=int, default=100)
    sim.add_argument("--alpha", type=float, default=0.05)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--methods", action="append", default=None)
    sim.add_argument("--threads", type=int, help="worker threads (default CORRTEST_THREADS, 0 = all)")
    sim.add_argument("--domain", choices=DOMAINS, default="feasible")
    sim.add_argument("--out", help="write the CSV table here")
    sim.add_argument("--json", action="store_true")
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if getattr(args, "methods", "") is None:
        args.methods = ["all"]
    handlers = {"fit": cmd_fit, "test": cmd_test, "simulate": cmd_simulate}
    try:
        return handlers[args.command](args, out)
    except (NumericalFailure, DegenerateData) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_NUMERIC
    except (DataError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
