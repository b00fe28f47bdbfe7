"""Differentiating the OPF solution map through its KKT conditions.

With ``k(z; theta)`` the KKT operator and ``z = (x, mu, nu)``, the implicit
function theorem gives ``dz/dtheta = -(dk/dz)^{-1} dk/dtheta`` wherever the
KKT Jacobian is nonsingular. The parameter derivatives of ``k`` are read off
term by term:

* demand ``d_i`` only enters ``y = (F d, 1^T d)``, so the column is
  ``-(F[:, i], 1)`` in the equality rows and zero elsewhere;
* linear cost ``beta_j`` enters ``w``: ``e_j`` in the stationarity rows;
* quadratic cost ``alpha_j`` enters ``2 Q x``: ``2 g_j e_j`` in the
  stationarity rows.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.linalg.lapack import dgecon

from .errors import InvalidStep, NotConverged, SingularJacobian
from .grid import Network
from .qp import OpfSolution, QpForm, SolverOptions, Theta, assemble, solve

logger = logging.getLogger(__name__)

SINGULAR_COND = 1.0 / np.sqrt(np.finfo(float).eps)
DEFAULT_GAP_TOL = 1e-6
IFT_RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class KktJacobian:
    matrix: np.ndarray
    condition_estimate: float
    solution: OpfSolution = field(repr=False)
    row_scale: np.ndarray = field(repr=False)
    lu: tuple | None = field(default=None, repr=False)


@dataclass(frozen=True)
class RegularityDiagnostics:
    min_complementarity_gap: float
    is_strictly_complementary: bool
    jacobian_singular: bool
    degenerate: tuple[int, ...] = ()
    condition_estimate: float = float("nan")


@dataclass(frozen=True)
class SolutionJacobian:
    """Blocks of dz/dtheta. Rows follow ``z = (g, p, mu, nu)``.

    ``active_set_changed`` is only populated by :func:`fd_oracle`; it maps a
    parameter family (``"d"``, ``"alpha"``, ``"beta"``) to a boolean mask of
    columns whose perturbed solves left the baseline active set.
    """

    dz_dd: np.ndarray
    dz_dalpha: np.ndarray
    dz_dbeta: np.ndarray
    n_gen: int
    n_line: int
    active_set_changed: dict = field(default_factory=dict)
    ift_residual: float = float("nan")

    def _rows(self, var: str) -> slice:
        K, M = self.n_gen, self.n_line
        return {
            "g": slice(0, K),
            "p": slice(K, K + M),
            "mu": slice(K + M, 3 * K + 3 * M),
            "nu": slice(3 * K + 3 * M, 3 * K + 4 * M + 1),
        }[var]

    def block(self, var: str, param: str) -> np.ndarray:
        mat = {"d": self.dz_dd, "alpha": self.dz_dalpha, "beta": self.dz_dbeta}[param]
        return mat[self._rows(var)]

    @property
    def dnu_dd(self) -> np.ndarray:
        return self.block("nu", "d")

    @property
    def dg_dd(self) -> np.ndarray:
        return self.block("g", "d")

    @property
    def dp_dd(self) -> np.ndarray:
        return self.block("p", "d")

    @property
    def dmu_dd(self) -> np.ndarray:
        return self.block("mu", "d")

    def full(self) -> np.ndarray:
        """Columns ordered (alpha, beta, d)."""
        return np.hstack([self.dz_dalpha, self.dz_dbeta, self.dz_dd])


def _raw_kkt_jacobian(qp: QpForm, sol: OpfSolution) -> np.ndarray:
    n, m, p = qp.n_var, qp.n_ineq, qp.n_eq
    x = sol.x
    J = np.zeros((n + m + p, n + m + p))
    J[:n, :n] = qp.hessian
    J[:n, n : n + m] = qp.G.T
    J[:n, n + m :] = qp.A.T
    J[n : n + m, :n] = sol.mu[:, None] * qp.G
    J[n : n + m, n : n + m] = np.diag(qp.G @ x - qp.h)
    J[n + m :, :n] = qp.A
    return J


def kkt_jacobian(qp: QpForm, sol: OpfSolution, tol: float = 1e-6) -> KktJacobian:
    """Assemble dk/dz at a converged solution and estimate its condition.

    Complementarity rows are equilibrated by their largest entry (floored at
    the strict-complementarity gap tolerance) before factorizing, so the
    estimate reflects degeneracy rather than the size of bounds or multipliers. A row where both the
    multiplier and the slack vanish stays tiny and drives the estimate up.
    Row scaling leaves the solution of any linear system unchanged.
    """
    if not sol.kkt_residual <= tol:
        raise NotConverged(f"solution KKT residual {sol.kkt_residual:.3e} exceeds {tol:.1e}")
    J = _raw_kkt_jacobian(qp, sol)
    n, m = qp.n_var, qp.n_ineq
    row_scale = np.ones(J.shape[0])
    row_max = np.max(np.abs(J[n : n + m]), axis=1, initial=0.0)
    row_scale[n : n + m] = 1.0 / np.maximum(row_max, DEFAULT_GAP_TOL)
    Js = row_scale[:, None] * J

    lu = None
    cond = np.inf
    with warnings.catch_warnings():
        warnings.simplefilter("error", sla.LinAlgWarning)
        try:
            lu = sla.lu_factor(Js)
        except (sla.LinAlgWarning, np.linalg.LinAlgError, ValueError):
            lu = None
    if lu is not None and np.all(np.diag(lu[0]) != 0):
        anorm = np.linalg.norm(Js, 1)
        rcond, info = dgecon(lu[0], anorm, norm="1")
        cond = 1.0 / rcond if rcond > 0 else np.inf
    else:
        lu = None
    return KktJacobian(J, float(cond), sol, row_scale, lu)


def check_regularity(
    jac: KktJacobian, sol: OpfSolution, gap_tol: float = DEFAULT_GAP_TOL, qp: QpForm | None = None
) -> RegularityDiagnostics:
    """Strict complementarity and nonsingularity diagnostics."""
    n = sol.x.size
    m = sol.mu.size
    if qp is not None:
        slack = qp.h - qp.G @ sol.x
    else:
        # diag(Gx - h) sits in the middle block of the Jacobian
        slack = -np.diag(jac.matrix)[n : n + m]
    gaps = np.maximum(sol.mu, np.abs(slack))
    min_gap = float(np.min(gaps, initial=np.inf))
    degenerate = tuple(int(i) for i in np.flatnonzero(gaps <= gap_tol))
    singular = jac.lu is None or not jac.condition_estimate <= SINGULAR_COND
    return RegularityDiagnostics(
        min_complementarity_gap=min_gap,
        is_strictly_complementary=min_gap > gap_tol,
        jacobian_singular=bool(singular),
        degenerate=degenerate,
        condition_estimate=jac.condition_estimate,
    )


def parameter_jacobian(qp: QpForm, sol: OpfSolution, n_bus: int) -> tuple[np.ndarray, ...]:
    """dk/dtheta split into its (d, alpha, beta) column blocks."""
    n, m, p = qp.n_var, qp.n_ineq, qp.n_eq
    K = qp.n_gen
    rows = n + m + p
    dk_dd = np.zeros((rows, n_bus))
    dk_dd[n + m : n + m + p - 1, :] = -qp.ptdf
    dk_dd[n + m + p - 1, :] = -1.0
    dk_dalpha = np.zeros((rows, K))
    dk_dalpha[:K, :K] = np.diag(2.0 * sol.g)
    dk_dbeta = np.zeros((rows, K))
    dk_dbeta[:K, :K] = np.eye(K)
    return dk_dd, dk_dalpha, dk_dbeta


def solution_jacobian(
    jac: KktJacobian, qp: QpForm, network: Network, gap_tol: float = DEFAULT_GAP_TOL
) -> SolutionJacobian:
    """Solve ``(dk/dz) (dz/dtheta) = -dk/dtheta`` by dense LU."""
    sol = jac.solution
    diag = check_regularity(jac, sol, gap_tol, qp)
    labels = qp.ineq_labels()
    if diag.jacobian_singular:
        names = ", ".join(labels[i] for i in diag.degenerate) or "none identified"
        raise SingularJacobian(
            f"KKT Jacobian is singular (cond ~ {diag.condition_estimate:.3g}); "
            f"degenerate constraints: {names}",
            diag.degenerate,
        )
    if not diag.is_strictly_complementary:
        logger.warning(
            "strict complementarity fails at %s; sensitivities are one-sided at best",
            ", ".join(labels[i] for i in diag.degenerate),
        )
    blocks = parameter_jacobian(qp, sol, network.n_bus)
    rhs = -np.hstack(blocks)
    X = sla.lu_solve(jac.lu, jac.row_scale[:, None] * rhs)
    resid = float(np.max(np.abs(jac.matrix @ X - rhs), initial=0.0))
    if not resid <= IFT_RESIDUAL_TOL:
        raise SingularJacobian(
            f"implicit-function solve residual {resid:.3e} exceeds {IFT_RESIDUAL_TOL:.0e}",
            diag.degenerate,
        )
    N, K = network.n_bus, qp.n_gen
    return SolutionJacobian(
        dz_dd=X[:, :N],
        dz_dalpha=X[:, N : N + K],
        dz_dbeta=X[:, N + K :],
        n_gen=K,
        n_line=qp.n_line,
        ift_residual=resid,
    )


def differentiate(network: Network, theta: Theta, options: SolverOptions | None = None):
    """Solve and differentiate; returns ``(qp, solution, jacobian)``."""
    options = options or SolverOptions()
    qp = assemble(network, theta, options.tau)
    sol = solve(qp, options)
    jac = kkt_jacobian(qp, sol)
    return qp, sol, solution_jacobian(jac, qp, network)


def fd_step(value: float, rel_step: float) -> float:
    return rel_step * max(1.0, abs(value))


def fd_oracle(
    network: Network, theta: Theta, h: float = 1e-4, options: SolverOptions | None = None
) -> SolutionJacobian:
    """Central-difference estimate of dz/dtheta by re-solving the OPF.

    The step for parameter ``i`` is ``h * max(1, |theta_i|)``. A column falls
    back to a forward difference when the backward step would make a
    non-negative parameter negative. Columns whose perturbed solves change the
    active set are flagged in ``active_set_changed``.
    """
    if not h > 0:
        raise InvalidStep(f"finite-difference step must be positive, got {h!r}")
    options = options or SolverOptions()
    base_qp = assemble(network, theta, options.tau)
    base = solve(base_qp, options)

    def solve_at(th: Theta):
        sol = solve(assemble(network, th, options.tau), options)
        return sol.z, sol.active_set

    results = {}
    changed = {}
    for family in ("d", "alpha", "beta"):
        values = getattr(theta, family)
        cols = np.zeros((base.z.size, values.size))
        flags = np.zeros(values.size, dtype=bool)
        for i, v in enumerate(values):
            step = fd_step(v, h)
            up = values.copy()
            up[i] = v + step
            lo = values.copy()
            central = family == "beta" or v - step >= 0
            lo[i] = v - step if central else v
            zu, au = solve_at(_replace(theta, family, up))
            zl, al = solve_at(_replace(theta, family, lo))
            cols[:, i] = (zu - zl) / (2 * step if central else step)
            flags[i] = au != base.active_set or al != base.active_set
        results[family] = cols
        changed[family] = flags
    return SolutionJacobian(
        dz_dd=results["d"],
        dz_dalpha=results["alpha"],
        dz_dbeta=results["beta"],
        n_gen=network.n_gen,
        n_line=network.n_line,
        active_set_changed=changed,
    )


def _replace(theta: Theta, family: str, values: np.ndarray) -> Theta:
    kw = {"d": theta.d, "alpha": theta.alpha, "beta": theta.beta}
    kw[family] = values
    return Theta(**kw)
