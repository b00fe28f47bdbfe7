import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from helpers import enumerate_opf, one_bus, opf_constraint_residuals, random_network, triangle
from lmburden.errors import DimensionMismatch, Infeasible
from lmburden.grid import Bus, Generator, Line, Network
from lmburden.qp import Theta, assemble, kkt_operator, kkt_residual, solve, solve_opf


def test_assemble_one_bus():
    net = one_bus()
    qp = assemble(net, Theta.from_network(net))
    np.testing.assert_array_equal(qp.A, [[1.0]])
    np.testing.assert_array_equal(qp.y, [10.0])
    np.testing.assert_array_equal(qp.G, [[-1.0], [1.0]])
    np.testing.assert_array_equal(qp.h, [0.0, 100.0])


def test_assemble_q_block():
    net = Network((Bus(1, is_slack=True), Bus(2)), (Line(1, 2, 1.0, 5.0),), (Generator(1, 0.5, 1.0, 10.0),))
    qp = assemble(net, Theta.from_network(net), tau=1e-6)
    np.testing.assert_array_equal(qp.Q, np.diag([0.5, 1e-6]))
    np.testing.assert_array_equal(qp.w, [1.0, 0.0])


def test_assemble_matches_model_constraints():
    rng = np.random.default_rng(3)
    net = random_network(rng, 3)
    theta = Theta.from_network(net)
    qp = assemble(net, theta)
    g = rng.uniform(0, 50, net.n_gen)
    p = rng.normal(size=net.n_line)
    res = opf_constraint_residuals(net, theta.d, g, p)
    Ax_y = qp.A @ np.concatenate([g, p]) - qp.y
    np.testing.assert_allclose(Ax_y[:-1], res["flow"], atol=1e-12)
    assert Ax_y[-1] == pytest.approx(res["balance"], abs=1e-12)


def test_dimension_mismatch():
    net = one_bus()
    with pytest.raises(DimensionMismatch):
        assemble(net, Theta(np.array([1.0, 2.0]), net.alpha, net.beta))


def test_one_bus_solution():
    net = one_bus()
    _, sol = solve_opf(net, Theta.from_network(net))
    assert sol.g[0] == pytest.approx(10.0, abs=1e-9)
    assert sol.nu[-1] == pytest.approx(-20.0, abs=1e-9)
    assert sol.kkt_residual <= 1e-8


def test_zero_demand():
    net = triangle(demand=(0.0, 0.0, 0.0))
    _, sol = solve_opf(net, Theta.from_network(net))
    np.testing.assert_allclose(sol.g, 0.0, atol=1e-9)
    np.testing.assert_allclose(sol.p, 0.0, atol=1e-9)


def test_capacity_infeasible():
    net = one_bus(d=150.0)
    with pytest.raises(Infeasible):
        solve_opf(net, Theta.from_network(net))


def test_flow_infeasible():
    net = Network(
        (Bus(1, is_slack=True), Bus(2, demand=50.0)), (Line(1, 2, 1.0, 10.0),), (Generator(1, 0.1, 1.0, 100.0),)
    )
    with pytest.raises(Infeasible):
        solve_opf(net, Theta.from_network(net))


def test_residual_perturbation_in_g_row():
    net = one_bus()
    qp, sol = solve_opf(net, Theta.from_network(net))
    base = kkt_operator(qp, sol.x, sol.mu, sol.nu)
    x = sol.x.copy()
    x[0] += 1.0
    moved = kkt_operator(qp, x, sol.mu, sol.nu)
    assert moved[0] - base[0] == pytest.approx(2 * 0.5)
    assert kkt_residual(qp, np.concatenate([x, sol.mu, sol.nu])) >= 1.0 - 1e-9


def test_residual_at_zero_bounded_by_w():
    net = triangle()
    qp = assemble(net, Theta.from_network(net))
    z = np.zeros(qp.n_var + qp.n_ineq + qp.n_eq)
    assert kkt_residual(qp, z) >= np.max(np.abs(qp.w))
    with pytest.raises(DimensionMismatch):
        kkt_residual(qp, z[:-1])


def check_invariants(net, theta, qp, sol):
    res = opf_constraint_residuals(net, theta.d, sol.g, sol.p)
    assert abs(res["balance"]) <= 1e-6
    assert np.max(np.abs(res["flow"]), initial=0) <= 1e-6
    assert np.max(res["gen_low"]) <= 1e-8 and np.max(res["gen_high"]) <= 1e-8
    assert np.max(res["flow_high"], initial=-1) <= 1e-8
    assert np.all(sol.mu >= 0)
    slack = qp.h - qp.G @ sol.x
    assert np.max(np.abs(sol.mu * slack)) <= 1e-8
    assert sol.kkt_residual <= 1e-8
    assert kkt_residual(qp, sol) <= 1e-8


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.filter_too_much])
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 5))
def test_solution_invariants(seed, n):
    net = random_network(np.random.default_rng(seed), n)
    theta = Theta.from_network(net)
    try:
        qp, sol = solve_opf(net, theta)
    except Infeasible:
        return
    check_invariants(net, theta, qp, sol)


@pytest.mark.parametrize("seed", range(12))
def test_matches_enumeration_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    net = random_network(rng, int(rng.integers(2, 5)), max_lines=5)
    theta = Theta.from_network(net)
    try:
        qp, sol = solve_opf(net, theta)
    except Infeasible:
        best, _ = enumerate_opf(net, theta)
        assert best is None
        return
    best, best_kkt = enumerate_opf(net, theta)
    assert best_kkt is not None
    assert qp.objective(sol.x) == pytest.approx(best_kkt[0], rel=1e-6, abs=1e-9)
