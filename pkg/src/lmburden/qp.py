"""Parameterized DC OPF as a standard-form QP, and its primal-dual solver.

The program is::

    minimize    x^T Q x + w^T x
    subject to  G x <= h,   A x = y

with ``x = (g, p)``, ``Q = blockdiag(diag(alpha), tau I)`` and ``w = (beta, 0)``,
so the generator cost is ``alpha g^2 + beta g`` and the objective Hessian is
``2Q``. Duals follow the Lagrangian ``f(x) + mu^T (Gx - h) + nu^T (Ax - y)``;
``nu[:M]`` belong to the PTDF flow rows and ``nu[M]`` to the power balance.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog

from .errors import (
    DimensionMismatch,
    Infeasible,
    MaxIterations,
    RankDeficientEquality,
    Unbounded,
)
from .grid import Network, generator_incidence, ptdf

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Theta:
    """Problem parameters ``(d, alpha, beta)``."""

    d: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        for name in ("d", "alpha", "beta"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if np.any(self.d < 0):
            raise ValueError("demand must be non-negative")
        if self.alpha.shape != self.beta.shape:
            raise DimensionMismatch("alpha and beta lengths differ")

    @classmethod
    def from_network(cls, network: Network, d=None) -> "Theta":
        return cls(network.demand if d is None else d, network.alpha, network.beta)

    def with_demand(self, d) -> "Theta":
        return Theta(d, self.alpha, self.beta)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.d, self.alpha, self.beta])


@dataclass(frozen=True)
class SolverOptions:
    kkt_tol: float = 1e-8
    act_tol: float = 1e-7
    max_iter: int = 200
    tau: float = 1e-6


@dataclass(frozen=True)
class QpForm:
    Q: np.ndarray
    w: np.ndarray
    A: np.ndarray
    y: np.ndarray
    G: np.ndarray
    h: np.ndarray
    tau: float
    n_gen: int
    n_line: int
    ptdf: np.ndarray = field(repr=False)
    gen_incidence: np.ndarray = field(repr=False)

    @property
    def n_var(self) -> int:
        return self.n_gen + self.n_line

    @property
    def n_ineq(self) -> int:
        return self.G.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A.shape[0]

    @property
    def hessian(self) -> np.ndarray:
        return 2.0 * self.Q

    def objective(self, x: np.ndarray) -> float:
        return float(x @ self.Q @ x + self.w @ x)

    def ineq_labels(self) -> list[str]:
        K, M = self.n_gen, self.n_line
        return (
            [f"g{j + 1}>=0" for j in range(K)]
            + [f"g{j + 1}<=gmax" for j in range(K)]
            + [f"p{k + 1}>=-pmax" for k in range(M)]
            + [f"p{k + 1}<=pmax" for k in range(M)]
        )


@dataclass(frozen=True)
class OpfSolution:
    g: np.ndarray
    p: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    active_set: tuple[int, ...]
    kkt_residual: float
    objective: float
    iterations: int = 0

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.g, self.p])

    @property
    def z(self) -> np.ndarray:
        return np.concatenate([self.g, self.p, self.mu, self.nu])

    @property
    def nu_flow(self) -> np.ndarray:
        return self.nu[:-1]

    @property
    def nu_balance(self) -> float:
        return float(self.nu[-1])


def assemble(network: Network, theta: Theta, tau: float = 1e-6) -> QpForm:
    """Build ``(Q, w, A, y, G, h)`` for the given network and parameters."""
    N, M, K = network.n_bus, network.n_line, network.n_gen
    if theta.d.shape != (N,):
        raise DimensionMismatch(f"demand has length {theta.d.size}, network has {N} buses")
    if theta.alpha.shape != (K,):
        raise DimensionMismatch(f"alpha/beta have length {theta.alpha.size}, network has {K} generators")
    if not tau > 0:
        raise ValueError("tau must be positive")

    F = ptdf(network)
    B = generator_incidence(network)
    ones = np.ones(N)

    Q = np.zeros((K + M, K + M))
    Q[:K, :K] = np.diag(theta.alpha)
    Q[K:, K:] = tau * np.eye(M)
    w = np.concatenate([theta.beta, np.zeros(M)])

    A = np.zeros((M + 1, K + M))
    A[:M, :K] = F @ B
    A[:M, K:] = -np.eye(M)
    A[M, :K] = ones @ B
    y = np.concatenate([F @ theta.d, [ones @ theta.d]])

    IK, IM = np.eye(K), np.eye(M)
    G = np.zeros((2 * K + 2 * M, K + M))
    G[:K, :K] = -IK
    G[K : 2 * K, :K] = IK
    G[2 * K : 2 * K + M, K:] = -IM
    G[2 * K + M :, K:] = IM
    pbar = network.flow_limits
    h = np.concatenate([np.zeros(K), network.g_max, pbar, pbar])

    if np.linalg.matrix_rank(A) < M + 1:
        raise RankDeficientEquality("equality constraint matrix A is rank deficient")
    return QpForm(Q, w, A, y, G, h, tau, K, M, F, B)


def kkt_operator(qp: QpForm, x, mu, nu) -> np.ndarray:
    """Stacked stationarity, complementarity and equality residuals."""
    x, mu, nu = (np.asarray(v, dtype=float) for v in (x, mu, nu))
    if x.shape != (qp.n_var,) or mu.shape != (qp.n_ineq,) or nu.shape != (qp.n_eq,):
        raise DimensionMismatch("candidate dimensions do not match the QP")
    stat = qp.hessian @ x + qp.w + qp.G.T @ mu + qp.A.T @ nu
    comp = mu * (qp.G @ x - qp.h)
    eq = qp.A @ x - qp.y
    return np.concatenate([stat, comp, eq])


def kkt_residual(qp: QpForm, z) -> float:
    """Infinity norm of the KKT operator at ``z = (x, mu, nu)``.

    ``z`` may be an :class:`OpfSolution` or a flat vector.
    """
    if isinstance(z, OpfSolution):
        x, mu, nu = z.x, z.mu, z.nu
    else:
        z = np.asarray(z, dtype=float)
        n, m = qp.n_var, qp.n_ineq
        if z.shape != (n + m + qp.n_eq,):
            raise DimensionMismatch(f"z has length {z.size}, expected {n + m + qp.n_eq}")
        x, mu, nu = z[:n], z[n : n + m], z[n + m :]
    return float(np.max(np.abs(kkt_operator(qp, x, mu, nu)), initial=0.0))


# -- solver ---------------------------------------------------------------------


def _check_feasible(qp: QpForm) -> None:
    K = qp.n_gen
    total_cap = float(qp.h[K : 2 * K].sum())
    total_demand = float(qp.y[-1])
    if total_demand > total_cap * (1 + 1e-12):
        raise Infeasible(
            f"total demand {total_demand:g} MW exceeds generating capacity {total_cap:g} MW",
            certificate={"kind": "capacity", "demand": total_demand, "capacity": total_cap},
        )
    res = linprog(
        np.zeros(qp.n_var),
        A_ub=qp.G,
        b_ub=qp.h,
        A_eq=qp.A,
        b_eq=qp.y,
        bounds=[(None, None)] * qp.n_var,
        method="highs",
    )
    if res.status == 2:
        raise Infeasible("no dispatch satisfies the flow and generation limits", certificate={"kind": "lp", "message": res.message})


def _solve_kkt_system(H, Aeq, r1, r2):
    """Solve [[H, Aeq^T], [Aeq, 0]] [u; v] = [r1; r2]."""
    n, m = H.shape[0], Aeq.shape[0]
    Kmat = np.zeros((n + m, n + m))
    Kmat[:n, :n] = H
    Kmat[:n, n:] = Aeq.T
    Kmat[n:, :n] = Aeq
    rhs = np.concatenate([r1, r2])
    with warnings.catch_warnings():
        warnings.simplefilter("error", sla.LinAlgWarning)
        try:
            sol = sla.solve(Kmat, rhs, assume_a="sym")
        except (np.linalg.LinAlgError, sla.LinAlgWarning, ValueError):
            sol = np.linalg.lstsq(Kmat, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def _interior_point(qp: QpForm, tol: float, max_iter: int):
    """Mehrotra predictor-corrector for the inequality/equality QP."""
    H, w, A, y, G, h = qp.hessian, qp.w, qp.A, qp.y, qp.G, qp.h
    n, m = qp.n_var, qp.n_ineq

    # Starting point: minimize f + 0.5 |h - Gx|^2 on Ax = y, then shift.
    x, nu = _solve_kkt_system(H + G.T @ G, A, -w + G.T @ h, y)
    s = h - G @ x
    scale = 1.0 + np.abs(h)
    s = np.maximum(s, 1e-2 * scale)
    mu = np.ones(m)

    hnorm = 1.0 + max(np.max(np.abs(h), initial=0.0), np.max(np.abs(y), initial=0.0))
    wnorm = 1.0 + np.max(np.abs(w), initial=0.0)
    it = 0
    for it in range(1, max_iter + 1):
        rd = H @ x + w + G.T @ mu + A.T @ nu
        rp = A @ x - y
        ri = G @ x + s - h
        gap = float(s @ mu) / max(m, 1)
        if (
            np.max(np.abs(rd), initial=0.0) <= tol * wnorm
            and np.max(np.abs(rp), initial=0.0) <= tol * hnorm
            and np.max(np.abs(ri), initial=0.0) <= tol * hnorm
            and gap <= tol
        ):
            return x, s, mu, nu, it
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e15:
            raise Unbounded("interior-point iterates diverged")

        W = mu / s
        Hbar = H + G.T @ (W[:, None] * G)

        def direction(rc):
            # rc: complementarity residual S mu - target
            r1 = -rd - G.T @ ((-rc + mu * ri) / s)
            dx, dnu = _solve_kkt_system(Hbar, A, r1, -rp)
            ds = -ri - G @ dx
            dmu = (-rc - mu * ds) / s
            return dx, ds, dmu, dnu

        def step_len(v, dv):
            neg = dv < 0
            if not np.any(neg):
                return 1.0
            return min(1.0, float(np.min(-v[neg] / dv[neg])))

        # predictor
        dx, ds, dmu, dnu = direction(s * mu)
        a_aff = min(step_len(s, ds), step_len(mu, dmu))
        gap_aff = float((s + a_aff * ds) @ (mu + a_aff * dmu)) / max(m, 1)
        sigma = (gap_aff / gap) ** 3 if gap > 0 else 0.0
        # corrector
        dx, ds, dmu, dnu = direction(s * mu + ds * dmu - sigma * gap)
        a = min(1.0, 0.99 * min(step_len(s, ds), step_len(mu, dmu)))
        x = x + a * dx
        s = s + a * ds
        mu = mu + a * dmu
        nu = nu + a * dnu
        s = np.maximum(s, 1e-300)
        mu = np.maximum(mu, 1e-300)
    raise MaxIterations(f"interior point did not converge in {max_iter} iterations")


def _equality_qp(qp: QpForm, active: list[int]):
    """Solve the QP with the given inequalities held as equalities."""
    Gw = qp.G[active]
    Aeq = np.vstack([Gw, qp.A])
    x, lam = _solve_kkt_system(qp.hessian, Aeq, -qp.w, np.concatenate([qp.h[active], qp.y]))
    mu = np.zeros(qp.n_ineq)
    mu[active] = lam[: len(active)]
    nu = lam[len(active) :]
    return x, mu, nu


def _refine(qp: QpForm, x, s, mu, nu, act_tol: float, kkt_tol: float):
    """Sharpen an interior-point point by re-solving on its active set.

    Constraints with small slack (or a multiplier dominating the slack) are
    held as equalities; the resulting linear KKT system is solved exactly.
    A few primal-dual exchange steps repair a wrong guess.
    """
    scale = np.maximum(1.0, np.abs(qp.h))
    active = sorted(int(i) for i in np.flatnonzero((s < act_tol * scale) | (mu > s)))
    feas_tol = 1e-9
    for _ in range(2 * qp.n_ineq + 5):
        xr, mur, nur = _equality_qp(qp, active)
        slack = qp.h - qp.G @ xr
        viol = -slack / scale
        neg = [i for i in active if mur[i] < -1e-10]
        if not neg and np.all(viol <= feas_tol):
            mur = np.where(mur < 0, 0.0, mur)
            return xr, mur, nur, tuple(active)
        if neg:
            worst = min(neg, key=lambda i: mur[i])
            active.remove(worst)
        else:
            worst = int(np.argmax(viol))
            if worst in active:
                break
            active = sorted(active + [worst])
    return None


def solve(qp: QpForm, options: SolverOptions | None = None) -> OpfSolution:
    """Solve the QP to primal-dual optimality.

    Raises :class:`Infeasible` when no point satisfies the constraints and
    :class:`MaxIterations` when neither the interior-point iterate nor its
    active-set refinement meets ``options.kkt_tol``.
    """
    options = options or SolverOptions()
    _check_feasible(qp)
    K = qp.n_gen
    if np.any(np.diag(qp.Q)[:K] == 0):
        logger.warning("generators with alpha = 0: dispatch ties are broken only by the flow regularization")

    x, s, mu, nu, iters = _interior_point(qp, min(1e-10, options.kkt_tol), options.max_iter)

    candidates = []
    refined = _refine(qp, x, s, mu, nu, options.act_tol, options.kkt_tol)
    if refined is not None:
        candidates.append(refined)
    scale = np.maximum(1.0, np.abs(qp.h))
    ipm_active = tuple(int(i) for i in np.flatnonzero(s < options.act_tol * scale))
    candidates.append((x, mu, nu, ipm_active))

    best = None
    for xc, muc, nuc, act in candidates:
        res = kkt_residual(qp, np.concatenate([xc, muc, nuc]))
        if best is None or res < best[-1]:
            best = (xc, muc, nuc, act, res)
        if res <= options.kkt_tol:
            break
    xc, muc, nuc, act, res = best
    if res > options.kkt_tol:
        raise MaxIterations(f"KKT residual {res:.3e} above tolerance {options.kkt_tol:.1e}")
    muc = np.where(muc < 0, 0.0, muc)
    return OpfSolution(
        g=xc[:K].copy(),
        p=xc[K:].copy(),
        mu=muc,
        nu=nuc,
        active_set=tuple(sorted(act)),
        kkt_residual=res,
        objective=qp.objective(xc),
        iterations=iters,
    )


def solve_opf(network: Network, theta: Theta, options: SolverOptions | None = None):
    """Assemble and solve in one call; returns ``(qp, solution)``."""
    options = options or SolverOptions()
    qp = assemble(network, theta, options.tau)
    return qp, solve(qp, options)
