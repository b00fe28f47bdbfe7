"""Command-line entry point: ``lmburden {solve,lmb,check,price}``.

Exit codes
----------
0  success
1  check tolerance breached, or solver failure other than infeasibility
2  OPF infeasible
3  unreadable / malformed input (case, income, pricing config, time series)
4  LMB withheld because the KKT Jacobian is singular or the solution is
   degenerate (diagnostics table is still written)
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .burden import burden_report, compute_lmb, household_vector, income_vector, lmb_fd_check
from .caseio import (
    Report,
    Table,
    content_hash,
    parse_case,
    parse_income,
    parse_pricing_config,
    parse_timeseries,
    save_report,
    write_report,
)
from .errors import (
    Infeasible,
    LmbError,
    MisalignedSeries,
    MissingIncome,
    MissingSeries,
    NetworkError,
    NonPositiveIncome,
    ParseError,
    SingularJacobian,
    ZeroDenominator,
)
from .grid import normalize
from .pricing import RetailConfig, lmps, retail_model0, retail_model1, retail_model2
from .qp import SolverOptions, Theta, assemble, solve
from .sensitivity import differentiate, fd_oracle

logger = logging.getLogger("lmburden")

EXIT_OK, EXIT_FAIL, EXIT_INFEASIBLE, EXIT_INPUT, EXIT_SINGULAR = 0, 1, 2, 3, 4
INPUT_ERRORS = (ParseError, NetworkError, MissingIncome, NonPositiveIncome, MissingSeries, MisalignedSeries, ZeroDenominator, OSError)


class InputError(Exception):
    pass


def _read(path) -> bytes:
    if path is None:
        raise InputError("required input file not given")
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None


def _case_format(args) -> str:
    if args.case_format:
        return args.case_format
    return "matpower" if str(args.case).endswith(".m") else "json"


def _options(args) -> SolverOptions:
    return SolverOptions(kkt_tol=args.kkt_tol, act_tol=args.act_tol, max_iter=args.max_iter, tau=args.tau)


def _load_case(args):
    raw_bytes = _read(args.case)
    raw = parse_case(raw_bytes, _case_format(args))
    ids = raw.bus_ids
    net = normalize(raw)
    net.validate()
    return raw_bytes, net, ids


def _metadata(args, command: str, case_bytes: bytes | None) -> dict:
    meta = {
        "command": command,
        "version": __version__,
        "kkt_tol": args.kkt_tol,
        "act_tol": args.act_tol,
        "tau": args.tau,
        "max_iter": args.max_iter,
    }
    if case_bytes is not None:
        meta["case_sha256"] = content_hash(case_bytes)
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    meta["timestamp"] = (
        datetime.fromtimestamp(int(epoch), tz=timezone.utc).isoformat() if epoch else None
    )
    return meta


def _emit(report: Report, args) -> None:
    files = write_report(report, args.format)
    if args.out:
        for path in save_report(files, args.out):
            logger.info("wrote %s", path)
    elif args.format == "json":
        sys.stdout.write(files["report.json"].decode())


def solution_tables(net, qp, sol, ids) -> dict:
    lam = lmps(sol.nu, qp.ptdf).lam
    dispatch = Table(["generator", "bus_id", "g_mw", "g_max_mw"])
    for j, gen in enumerate(net.generators):
        dispatch.rows.append([j + 1, ids[net.bus_index(gen.bus)], float(sol.g[j]), gen.g_max])
    flows = Table(["line", "from_bus", "to_bus", "flow_mw", "limit_mw"])
    for k, ln in enumerate(net.lines):
        flows.rows.append(
            [k + 1, ids[net.bus_index(ln.from_bus)], ids[net.bus_index(ln.to_bus)], float(sol.p[k]), ln.flow_limit]
        )
    order = sorted(range(net.n_bus), key=lambda i: ids[i])
    lmp = Table(["bus_id", "lmp"], [[ids[i], float(lam[i])] for i in order])
    nu = Table(["row", "kind", "value"])
    for k in range(net.n_line):
        nu.rows.append([k + 1, "flow", float(sol.nu[k])])
    nu.rows.append([net.n_line + 1, "balance", float(sol.nu[-1])])
    slack = qp.h - qp.G @ sol.x
    active = set(sol.active_set)
    mu = Table(["index", "constraint", "value", "slack", "active"])
    for i, label in enumerate(qp.ineq_labels()):
        mu.rows.append([i + 1, label, float(sol.mu[i]), float(slack[i]), i in active])
    return {"dispatch": dispatch, "flows": flows, "lmp": lmp, "nu": nu, "mu": mu}


# -- subcommands ----------------------------------------------------------------


def cmd_solve(args) -> int:
    case_bytes, net, ids = _load_case(args)
    theta = Theta.from_network(net)
    options = _options(args)
    qp = assemble(net, theta, options.tau)
    sol = solve(qp, options)
    report = Report(_metadata(args, "solve", case_bytes), solution_tables(net, qp, sol, ids))
    report.metadata["kkt_residual"] = sol.kkt_residual
    _emit(report, args)
    return EXIT_OK


def _pricing(args, ids) -> RetailConfig:
    if args.pricing is None:
        return RetailConfig()
    return parse_pricing_config(_read(args.pricing), bus_ids=ids)


def cmd_lmb(args) -> int:
    case_bytes, net, ids = _load_case(args)
    income = parse_income(_read(args.income))
    config = _pricing(args, ids)
    theta = Theta.from_network(net)
    s = income_vector(net, income, ids)
    hh = household_vector(net, income, ids)
    options = _options(args)
    meta = _metadata(args, "lmb", case_bytes)
    try:
        analysis = compute_lmb(net, theta, s, config, options, hh, allow_degenerate=args.allow_degenerate)
    except SingularJacobian as exc:
        analysis = getattr(exc, "analysis", None)
        if analysis is not None:
            report = burden_report(analysis, income, ids, meta)
            _emit(Report(report.metadata, {"diagnostics": report.tables["diagnostics"]}), args)
        raise
    report = burden_report(analysis, income, ids, meta)
    qp = assemble(net, theta, options.tau)
    tables = solution_tables(net, qp, analysis.solution, ids)
    report.tables = {"dispatch": tables["dispatch"], "flows": tables["flows"], "lmp": tables["lmp"], **report.tables}
    _emit(report, args)
    return EXIT_OK


def cmd_check(args) -> int:
    case_bytes, net, ids = _load_case(args)
    theta = Theta.from_network(net)
    options = _options(args)
    tol = args.tol

    _, sol, analytic = differentiate(net, theta, options)
    fd = fd_oracle(net, theta, args.fd_step, options)
    rows = []
    ok = True
    for family in ("d", "alpha", "beta"):
        a = getattr(analytic, f"dz_d{family}")
        f = getattr(fd, f"dz_d{family}")
        flags = fd.active_set_changed[family]
        keep = ~flags
        dev = float(np.max(np.abs(a[:, keep] - f[:, keep]), initial=0.0))
        scale = max(1.0, float(np.max(np.abs(a[:, keep]), initial=0.0)))
        rel = dev / scale
        passed = rel < tol
        ok &= passed
        flagged = ";".join(str(i + 1) for i in np.flatnonzero(flags))
        rows.append([f"dz/d{family}", dev, rel, flagged, "PASS" if passed else "FAIL"])

    if args.income is not None:
        income = parse_income(_read(args.income))
        config = _pricing(args, ids)
        s = income_vector(net, income, ids)
        cmp = lmb_fd_check(net, theta, s, config, args.fd_step, options)
        passed = cmp.passed(tol)
        ok &= passed
        flagged = ";".join(str(ids[i]) for i in np.flatnonzero(cmp.active_set_changed))
        rows.append(["lmb", cmp.max_abs_deviation, cmp.max_rel_deviation, flagged, "PASS" if passed else "FAIL"])

    table = Table(["quantity", "max_abs_deviation", "max_rel_deviation", "active_set_changed", "status"], rows)
    for r in rows:
        print(f"{r[0]:>10}  abs={r[1]:.3e}  rel={r[2]:.3e}  flagged=[{r[3]}]  {r[4]}")
    print("PASS" if ok else "FAIL")
    if args.out:
        meta = _metadata(args, "check", case_bytes)
        meta.update(tol=tol, fd_step=args.fd_step)
        save_report(write_report(Report(meta, {"comparison": table}), args.format), args.out)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_price(args) -> int:
    case_bytes = net = ids = None
    if args.case is not None:
        case_bytes, net, ids = _load_case(args)
    config = _pricing(args, ids)
    meta = {"command": "price", "version": __version__}

    if config.model == 0:
        if net is None:
            raise InputError("Model 0 pricing needs --case")
        theta = Theta.from_network(net)
        options = _options(args)
        qp = assemble(net, theta, options.tau)
        sol = solve(qp, options)
        lam = lmps(sol.nu, qp.ptdf)
        pi = retail_model0(lam, config, theta.d).pi
        omega = config.omega_vector(net.n_bus)
        table = Table(["bus_id", "lmp", "omega", "retail_price"])
        for i in sorted(range(net.n_bus), key=lambda i: ids[i]):
            table.rows.append([ids[i], float(lam.lam[i]), float(omega[i]), float(pi[i])])
        meta.update(_metadata(args, "price", case_bytes))
    else:
        if args.series is None:
            raise MissingSeries(f"Model {config.model} pricing needs --series")
        series = parse_timeseries(_read(args.series))
        if config.model == 1:
            prices = retail_model1(series, config.regions, config.averaging)
            table = Table(["bus_id", "retail_price"])
            for j, b in enumerate(series.bus_ids):
                table.rows.append([b, float(prices.pi[j])])
            meta["averaging"] = config.averaging
        else:
            if series.lmp is None:
                raise MissingSeries("Model 2 pricing needs an lmp (D-LMP) column")
            prices = retail_model2(series.lmp, series.omega)
            table = Table(["t", "bus_id", "dlmp", "omega", "retail_price"])
            for i, t in enumerate(series.timesteps):
                for j, b in enumerate(series.bus_ids):
                    table.rows.append([t, b, float(series.lmp[i, j]), float(series.omega[i, j]), float(prices.pi[i, j])])
    meta["model"] = config.model
    _emit(Report(meta, {"retail_prices": table}), args)
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--case", help="network case file")
    common.add_argument("--case-format", choices=["matpower", "json"], default=None,
                        help="case format (default: by extension, .m is matpower)")
    common.add_argument("--income", help="income CSV (bus_id,income,households)")
    common.add_argument("--pricing", help="retail pricing config (JSON)")
    common.add_argument("--series", help="time-series CSV for Model 1/2 pricing")
    common.add_argument("--out", help="output directory")
    common.add_argument("--format", choices=["csv", "json"], default="csv")
    common.add_argument("--kkt-tol", type=float, default=1e-8)
    common.add_argument("--act-tol", type=float, default=1e-7)
    common.add_argument("--max-iter", type=int, default=200)
    common.add_argument("--tau", type=float, default=1e-6)
    common.add_argument("--fd-step", type=float, default=1e-4, help="relative finite-difference step")
    common.add_argument("--tol", type=float, default=1e-4, help="check tolerance (relative)")
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="lmburden", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve the DC OPF and write dispatch, flows, duals, LMPs")
    p_lmb = sub.add_parser("lmb", parents=[common], help="energy burden and locational marginal burden tables")
    p_lmb.add_argument("--allow-degenerate", action="store_true",
                       help="report LMBs at non-strictly-complementary points if the Jacobian is invertible")
    sub.add_parser("check", parents=[common], help="compare analytic sensitivities with finite differences")
    sub.add_parser("price", parents=[common], help="retail prices under Model 0, 1 or 2")
    return parser


COMMANDS = {"solve": cmd_solve, "lmb": cmd_lmb, "check": cmd_check, "price": cmd_price}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.ERROR if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Infeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SingularJacobian as exc:
        print(f"singular: {exc}", file=sys.stderr)
        return EXIT_SINGULAR
    except INPUT_ERRORS as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except LmbError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
