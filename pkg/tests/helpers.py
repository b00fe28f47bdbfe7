"""Network builders and independent oracles shared by the test modules.

The oracles deliberately avoid the package's solver and sensitivity code:
DC power flow through the Laplacian pseudo-inverse, the OPF through
enumeration of active sets, constraint checks straight from the model
equations.
"""

from __future__ import annotations

import itertools

import numpy as np

from lmburden.grid import Bus, Generator, Line, Network, generator_incidence, ptdf
from lmburden.qp import SolverOptions, Theta, solve_opf


def one_bus(alpha=0.5, beta=10.0, gmax=100.0, d=10.0) -> Network:
    return Network((Bus(1, "only", True, d),), (), (Generator(1, alpha, beta, gmax),))


def triangle(b=10.0, limits=(1000.0, 1000.0, 1000.0), demand=(0.0, 50.0, 80.0)) -> Network:
    buses = tuple(Bus(i + 1, f"b{i + 1}", i == 0, demand[i]) for i in range(3))
    lines = (Line(1, 2, b, limits[0]), Line(2, 3, b, limits[1]), Line(1, 3, b, limits[2]))
    gens = (Generator(1, 0.01, 10.0, 200.0), Generator(3, 0.02, 30.0, 200.0))
    return Network(buses, lines, gens)


def two_bus_congested(limit=30.0, d2=80.0) -> Network:
    """Cheap generation at bus 1, expensive at bus 2, one line between."""
    buses = (Bus(1, "a", True, 0.0), Bus(2, "b", False, d2))
    return Network(buses, (Line(1, 2, 10.0, limit),), (Generator(1, 0.01, 10.0, 200.0), Generator(2, 0.05, 40.0, 200.0)))


def degenerate_fixture() -> Network:
    """Generator 1 sits exactly at its cap with a zero multiplier.

    The cap is set to the unconstrained optimum of the same network, so the
    bound is binding and its multiplier vanishes at once.
    """

    def make(cap):
        buses = (Bus(1, "a", True, 0.0), Bus(2, "b", False, 10.0))
        return Network(buses, (Line(1, 2, 10.0, 100.0),), (Generator(1, 1.0, 0.0, cap), Generator(2, 1.0, 0.0, 100.0)))

    free = make(100.0)
    _, sol = solve_opf(free, Theta.from_network(free))
    return make(float(sol.g[0]))


def random_network(rng: np.random.Generator, n_bus: int, max_lines: int = 7, unlimited=False) -> Network:
    edges = set()
    for i in range(1, n_bus):
        edges.add((int(rng.integers(0, i)), i))
    extra = [(a, b) for a in range(n_bus) for b in range(a + 1, n_bus) if (a, b) not in edges]
    rng.shuffle(extra)
    room = max(0, max_lines - len(edges))
    for e in extra[: int(rng.integers(0, min(len(extra), room) + 1))]:
        edges.add(e)
    buses = tuple(Bus(i + 1, "", i == 0, float(rng.uniform(5, 60))) for i in range(n_bus))
    lines = tuple(
        Line(a + 1, b + 1, float(rng.uniform(2, 20)), 1e6 if unlimited else float(rng.uniform(20, 120)))
        for a, b in sorted(edges)
    )
    k = int(rng.integers(1, n_bus + 1))
    at = sorted(int(v) for v in rng.choice(n_bus, k, replace=False))
    gens = tuple(
        Generator(b + 1, float(rng.uniform(0.005, 0.1)), float(rng.uniform(5, 40)), float(rng.uniform(50, 250)))
        for b in at
    )
    return Network(buses, lines, gens)


# -- oracles ------------------------------------------------------------------------


def dc_power_flow(network: Network, injection: np.ndarray) -> np.ndarray:
    """Line flows for a balanced injection via the Laplacian pseudo-inverse."""
    n = network.n_bus
    L = np.zeros((n, n))
    for ln in network.lines:
        i, j = network.bus_index(ln.from_bus), network.bus_index(ln.to_bus)
        L[i, i] += ln.susceptance
        L[j, j] += ln.susceptance
        L[i, j] -= ln.susceptance
        L[j, i] -= ln.susceptance
    angles = np.linalg.pinv(L) @ injection
    return np.array(
        [ln.susceptance * (angles[network.bus_index(ln.from_bus)] - angles[network.bus_index(ln.to_bus)]) for ln in network.lines]
    )


def opf_constraint_residuals(network: Network, d, g, p) -> dict:
    """Residuals of the DC OPF constraints written out term by term."""
    F, B = ptdf(network), generator_incidence(network)
    return {
        "flow": F @ (B @ g - d) - p,
        "balance": np.sum(B @ g) - np.sum(d),
        "gen_low": -g,
        "gen_high": g - network.g_max,
        "flow_high": np.abs(p) - network.flow_limits,
    }


def enumerate_opf(network: Network, theta: Theta, tau: float = 1e-6):
    """Brute-force OPF: try every active set of size <= K - 1.

    Each candidate holds a subset of bounds as equalities (at most one side
    per variable), solves the equality-constrained QP, and is kept if primal
    feasible. Returns ``(objective, x, mu, nu)`` of the best candidate; duals
    are those of the best candidate that is also dual feasible.
    """
    F, B = ptdf(network), generator_incidence(network)
    K, M, N = network.n_gen, network.n_line, network.n_bus
    n = K + M
    H = np.zeros((n, n))
    H[:K, :K] = 2 * np.diag(theta.alpha)
    H[K:, K:] = 2 * tau * np.eye(M)
    c = np.concatenate([theta.beta, np.zeros(M)])
    Aeq = np.vstack([np.hstack([F @ B, -np.eye(M)]), np.concatenate([np.ones(N) @ B, np.zeros(M)])])
    beq = np.concatenate([F @ theta.d, [theta.d.sum()]])
    # bound rows: (row of G, rhs), ordered like the package: -g<=0, g<=gmax, -p<=pbar, p<=pbar
    G = np.vstack([-np.eye(n)[:K], np.eye(n)[:K], -np.eye(n)[K:], np.eye(n)[K:]])
    h = np.concatenate([np.zeros(K), network.g_max, network.flow_limits, network.flow_limits])
    pairs = [(j, K + j) for j in range(K)] + [(2 * K + k, 2 * K + M + k) for k in range(M)]

    best = None
    best_kkt = None
    for size in range(0, K):
        for vars_ in itertools.combinations(range(len(pairs)), size):
            for sides in itertools.product((0, 1), repeat=size):
                W = [pairs[v][s] for v, s in zip(vars_, sides)]
                C = np.vstack([G[W], Aeq]) if W else Aeq
                r = np.concatenate([h[W], beq]) if W else beq
                if np.linalg.matrix_rank(C) < C.shape[0]:
                    continue
                m = C.shape[0]
                Kkt = np.block([[H, C.T], [C, np.zeros((m, m))]])
                try:
                    sol = np.linalg.solve(Kkt, np.concatenate([-c, r]))
                except np.linalg.LinAlgError:
                    continue
                x, lam = sol[:n], sol[n:]
                if np.any(G @ x - h > 1e-7 * np.maximum(1, np.abs(h))):
                    continue
                obj = float(x @ (H / 2) @ x + c @ x)
                mu = np.zeros(len(h))
                mu[W] = lam[: len(W)]
                nu = lam[len(W):]
                if best is None or obj < best[0]:
                    best = (obj, x, mu, nu)
                if np.all(mu >= -1e-9) and (best_kkt is None or obj < best_kkt[0]):
                    best_kkt = (obj, x, mu, nu)
    return best, best_kkt


def regular_random_cases(seed: int, count: int, n_range=(2, 5), max_lines=7, options=None):
    """Yield ``(network, theta, incomes, analysis)`` for strictly complementary cases."""
    from lmburden.burden import compute_lmb
    from lmburden.errors import Infeasible, SingularJacobian

    rng = np.random.default_rng(seed)
    found = 0
    while found < count:
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        net = random_network(rng, n, max_lines)
        theta = Theta.from_network(net)
        s = rng.uniform(2e4, 1e5, n)
        try:
            analysis = compute_lmb(net, theta, s, options=options or SolverOptions())
        except (Infeasible, SingularJacobian):
            continue
        found += 1
        yield net, theta, s, analysis


def kink_fixture(margin: float = 1e-3) -> Network:
    """Two-bus case whose line sits ``margin`` MW below its limit.

    A small demand increase at bus 2 makes the line bind.
    """

    def make(limit):
        buses = (Bus(1, "a", True, 0.0), Bus(2, "b", False, 200.0))
        return Network(buses, (Line(1, 2, 10.0, limit),), (Generator(1, 0.01, 10.0, 500.0), Generator(2, 0.05, 12.0, 500.0)))

    free = make(1e4)
    _, sol = solve_opf(free, Theta.from_network(free))
    return make(float(abs(sol.p[0])) + margin)
