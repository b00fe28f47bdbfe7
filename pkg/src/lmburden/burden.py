"""Energy burden and locational marginal burden (Model 0 pricing).

``b = diag(d / s) pi`` and, differentiating with ``pi = lambda(nu*(d)) + omega
+ Phi d``::

    db/dd = diag(d / s) (-[F^T 1] dnu*/dd + Phi) + diag(pi / s)

The gradient of total burden is the column sum of that matrix; the LMB to
others is the column sum without the diagonal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .caseio import PERIOD_HOURS, IncomeTable, Report, Table
from .errors import DimensionMismatch, InvalidStep, MissingIncome, ModelMismatch, NonPositiveIncome, SingularJacobian
from .grid import Network, ptdf
from .pricing import RetailConfig, lmps, retail_model0
from .qp import OpfSolution, SolverOptions, Theta, assemble, solve
from .sensitivity import (
    RegularityDiagnostics,
    SolutionJacobian,
    check_regularity,
    fd_step,
    kkt_jacobian,
    solution_jacobian,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BurdenVector:
    b: np.ndarray
    per_household_average: np.ndarray | None = None


@dataclass(frozen=True)
class LmbResult:
    lmb_matrix: np.ndarray
    gradient: np.ndarray
    lmb_to_others: np.ndarray
    lmp: np.ndarray
    pi: np.ndarray
    burden: BurdenVector
    diagnostics: RegularityDiagnostics | None = None

    @property
    def diagonal(self) -> np.ndarray:
        return np.diag(self.lmb_matrix).copy()


def income_vector(network: Network, income, bus_ids=None) -> np.ndarray:
    """Incomes aligned with ``network.buses``.

    ``income`` is an :class:`IncomeTable` (looked up by ``bus_ids``, default
    the network's own ids) or an array already in bus order.
    """
    if isinstance(income, IncomeTable):
        ids = list(bus_ids) if bus_ids is not None else network.bus_ids
        missing = [b for b in ids if b not in income.records]
        if missing:
            raise MissingIncome(f"no income data for buses {missing}")
        return np.array([income.income(b) for b in ids], dtype=float)
    s = np.asarray(income, dtype=float).ravel()
    if s.shape != (network.n_bus,):
        raise DimensionMismatch(f"income has length {s.size}, network has {network.n_bus} buses")
    return s


def household_vector(network: Network, income: IncomeTable, bus_ids=None) -> np.ndarray:
    ids = list(bus_ids) if bus_ids is not None else network.bus_ids
    return np.array([income.households(b) for b in ids], dtype=float)


def static_burden(d, s, pi, households=None) -> BurdenVector:
    """Energy burden ``d * pi / s`` per bus.

    With ``households`` the household-averaged variant ``d * pi / (s * n_hh)``
    is returned alongside (NaN where the count is zero).
    """
    d, s, pi = (np.asarray(v, dtype=float).ravel() for v in (d, s, pi))
    if not (d.shape == s.shape == pi.shape):
        raise DimensionMismatch("demand, income and price vectors differ in length")
    bad = (d > 0) & ~(s > 0)
    if np.any(bad):
        raise NonPositiveIncome(f"non-positive income at buses with demand: {list(np.flatnonzero(bad) + 1)}")
    with np.errstate(divide="ignore", invalid="ignore"):
        b = np.where(d > 0, d * pi / np.where(s > 0, s, 1.0), 0.0)
    if np.any((b > 1) | (b < 0)):
        logger.warning("energy burden outside (0, 1] at buses %s", list(np.flatnonzero((b > 1) | (b < 0)) + 1))
    hh = None
    if households is not None:
        n = np.asarray(households, dtype=float).ravel()
        if n.shape != d.shape:
            raise DimensionMismatch("household counts differ in length from demand")
        with np.errstate(divide="ignore", invalid="ignore"):
            hh = np.where(n > 0, b / np.where(n > 0, n, 1.0), np.nan)
    return BurdenVector(b, hh)


def _model0_prices(theta, sol, config, F):
    lmp = lmps(sol.nu, F)
    return lmp.lam, retail_model0(lmp, config, theta.d).pi


def lmb_matrix(
    network: Network,
    theta: Theta,
    income,
    solution: OpfSolution,
    sensitivity: SolutionJacobian,
    config: RetailConfig | None = None,
    households=None,
) -> LmbResult:
    """LMB matrix, total-burden gradient and LMB-to-others at one OPF point."""
    config = config or RetailConfig()
    if config.model != 0:
        raise ModelMismatch("the LMB matrix is defined for Model 0 pricing only")
    s = income_vector(network, income)
    if np.any(~(s > 0)):
        raise NonPositiveIncome(f"income must be positive at every bus: {list(np.flatnonzero(~(s > 0)) + 1)}")
    N = network.n_bus
    F = ptdf(network)
    d = theta.d
    lam, pi = _model0_prices(theta, solution, config, F)
    price_map = np.vstack([F, np.ones((1, N))]).T  # [F^T 1], N x (M+1)
    dpi_dd = -price_map @ sensitivity.dnu_dd + config.phi_matrix(N)
    L = (d / s)[:, None] * dpi_dd + np.diag(pi / s)
    grad = L.sum(axis=0)
    others = grad - np.diag(L)
    return LmbResult(
        lmb_matrix=L,
        gradient=grad,
        lmb_to_others=others,
        lmp=lam,
        pi=pi,
        burden=static_burden(d, s, pi, households),
    )


def total_burden_gradient(d, s, pi, price_map, dnu_dd) -> np.ndarray:
    """``-d^T diag(s)^-1 [F^T 1] dnu/dd + pi^T diag(s)^-1`` (zero profit term)."""
    d, s, pi = (np.asarray(v, dtype=float) for v in (d, s, pi))
    return -(d / s) @ price_map @ dnu_dd + pi / s


@dataclass(frozen=True)
class LmbAnalysis:
    """Everything computed along the solve -> differentiate -> burden path."""

    network: Network
    theta: Theta
    solution: OpfSolution
    diagnostics: RegularityDiagnostics
    result: LmbResult | None
    labels: list = field(default_factory=list)


def compute_lmb(
    network: Network,
    theta: Theta,
    income,
    config: RetailConfig | None = None,
    options: SolverOptions | None = None,
    households=None,
    allow_degenerate: bool = False,
) -> LmbAnalysis:
    """Solve, check regularity, differentiate and build the LMB result.

    When strict complementarity fails the LMB matrix is withheld
    (:class:`SingularJacobian` is raised, carrying the diagnostics) unless
    ``allow_degenerate`` is set and the Jacobian is still invertible.
    """
    options = options or SolverOptions()
    qp = assemble(network, theta, options.tau)
    sol = solve(qp, options)
    jac = kkt_jacobian(qp, sol)
    diag = check_regularity(jac, sol, qp=qp)
    labels = qp.ineq_labels()
    if diag.jacobian_singular or (not diag.is_strictly_complementary and not allow_degenerate):
        names = ", ".join(labels[i] for i in diag.degenerate) or "none identified"
        err = SingularJacobian(
            "LMB withheld: solution is not regular "
            f"(strictly complementary={diag.is_strictly_complementary}, "
            f"jacobian singular={diag.jacobian_singular}); degenerate constraints: {names}",
            diag.degenerate,
        )
        err.analysis = LmbAnalysis(network, theta, sol, diag, None, labels)
        raise err
    sens = solution_jacobian(jac, qp, network)
    res = lmb_matrix(network, theta, income, sol, sens, config, households)
    res = LmbResult(res.lmb_matrix, res.gradient, res.lmb_to_others, res.lmp, res.pi, res.burden, diag)
    return LmbAnalysis(network, theta, sol, diag, res, labels)


@dataclass(frozen=True)
class FdComparison:
    analytic: np.ndarray
    finite_difference: np.ndarray
    active_set_changed: np.ndarray
    max_abs_deviation: float
    max_rel_deviation: float

    def passed(self, tol: float) -> bool:
        # strict: a zero tolerance never passes
        return bool(self.max_rel_deviation < tol)


def relative_deviation(analytic, fd, floor_rel: float = 1e-6) -> np.ndarray:
    """Entrywise ``|a - f| / max(|a|, |f|, floor)`` with ``floor = floor_rel * max|a|``."""
    a, f = np.asarray(analytic), np.asarray(fd)
    floor = floor_rel * max(np.max(np.abs(a), initial=0.0), 1e-300)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)


def burden_at(network, theta, income, config, options) -> tuple[np.ndarray, tuple]:
    qp = assemble(network, theta, options.tau)
    sol = solve(qp, options)
    s = income_vector(network, income)
    pi = retail_model0(lmps(sol.nu, qp.ptdf), config, theta.d).pi
    return theta.d * pi / s, sol.active_set


def lmb_fd_check(
    network: Network,
    theta: Theta,
    income,
    config: RetailConfig | None = None,
    h: float = 1e-4,
    options: SolverOptions | None = None,
    analytic: np.ndarray | None = None,
) -> FdComparison:
    """Central-difference burden Jacobian compared with the analytic LMB matrix.

    Columns whose perturbed solves change the active set are flagged and left
    out of the deviation statistics.
    """
    if not h > 0:
        raise InvalidStep(f"finite-difference step must be positive, got {h!r}")
    config = config or RetailConfig()
    options = options or SolverOptions()
    if analytic is None:
        analytic = compute_lmb(network, theta, income, config, options).result.lmb_matrix
    _, base_active = burden_at(network, theta, income, config, options)
    N = network.n_bus
    fd = np.zeros((N, N))
    changed = np.zeros(N, dtype=bool)
    for j in range(N):
        step = fd_step(theta.d[j], h)
        up = theta.d.copy()
        up[j] += step
        lo = theta.d.copy()
        central = lo[j] - step >= 0
        if central:
            lo[j] -= step
        bu, au = burden_at(network, theta.with_demand(up), income, config, options)
        bl, al = burden_at(network, theta.with_demand(lo), income, config, options)
        fd[:, j] = (bu - bl) / (2 * step if central else step)
        changed[j] = au != base_active or al != base_active
    keep = ~changed
    if np.any(keep):
        abs_dev = float(np.max(np.abs(analytic[:, keep] - fd[:, keep])))
        rel_dev = float(np.max(relative_deviation(analytic[:, keep], fd[:, keep])))
    else:
        abs_dev = rel_dev = 0.0
    return FdComparison(analytic, fd, changed, abs_dev, rel_dev)


def burden_report(
    analysis: LmbAnalysis,
    income: IncomeTable | None = None,
    bus_ids=None,
    metadata: dict | None = None,
) -> Report:
    """Tables behind burden-vs-income, LMB-vs-income and LMB-to-others plots.

    ``bus_ids`` are the ids to print (defaults to the network's); rows are
    sorted by bus id.
    """
    net = analysis.network
    ids = list(bus_ids) if bus_ids is not None else net.bus_ids
    res = analysis.result
    order = sorted(range(net.n_bus), key=lambda i: ids[i])
    period = income.period if income is not None else None
    hours = PERIOD_HOURS.get(str(period).lower()) if period else None

    cols = [
        "bus_id", "income", "households", "demand_mwh", "lmp", "retail_price",
        "static_burden", "burden_per_household", "lmb_diagonal", "lmb_diagonal_per_household",
        "lmb_to_others", "total_burden_gradient",
    ]
    if hours is not None:
        cols.append("lmb_diagonal_per_mw_period")
    burden_tbl = Table(cols)
    diag_only = Table(["bus_id", "lmb_diagonal"])
    others_tbl = Table(["bus_id", "lmb_to_others"])
    matrix_tbl = Table(["bus_id"] + [f"d_{ids[j]}" for j in order])
    if res is not None:
        for i in order:
            bid = ids[i]
            rec = income.records.get(bid) if income is not None else None
            hh = res.burden.per_household_average
            row = [
                bid,
                rec.income if rec else None,
                rec.households if rec else None,
                float(analysis.theta.d[i]),
                float(res.lmp[i]),
                float(res.pi[i]),
                float(res.burden.b[i]),
                None if hh is None or not np.isfinite(hh[i]) else float(hh[i]),
                float(res.lmb_matrix[i, i]),
                float(res.lmb_matrix[i, i] / rec.households) if rec and rec.households > 0 else None,
                float(res.lmb_to_others[i]),
                float(res.gradient[i]),
            ]
            if hours is not None:
                row.append(float(res.lmb_matrix[i, i] * hours))
            burden_tbl.rows.append(row)
            diag_only.rows.append([bid, float(res.lmb_matrix[i, i])])
            others_tbl.rows.append([bid, float(res.lmb_to_others[i])])
            matrix_tbl.rows.append([bid] + [float(res.lmb_matrix[i, j]) for j in order])

    d = analysis.diagnostics
    diag_tbl = Table(["quantity", "value"])
    diag_tbl.rows = [
        ["min_complementarity_gap", float(d.min_complementarity_gap)],
        ["is_strictly_complementary", bool(d.is_strictly_complementary)],
        ["jacobian_singular", bool(d.jacobian_singular)],
        ["condition_estimate", float(d.condition_estimate)],
        ["degenerate_constraints", ";".join(analysis.labels[i] for i in d.degenerate) or "none"],
        ["kkt_residual", float(analysis.solution.kkt_residual)],
    ]
    meta = dict(metadata or {})
    if period:
        meta["income_period"] = period
    tables = {
        "burden": burden_tbl,
        "lmb_diagonal": diag_only,
        "lmb_to_others": others_tbl,
        "lmb_matrix": matrix_tbl,
        "diagnostics": diag_tbl,
    }
    return Report(meta, tables)
