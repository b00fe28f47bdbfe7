import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from helpers import one_bus, random_network, triangle
from lmburden.errors import DimensionMismatch, Infeasible, MisalignedSeries, MissingSeries, ModelMismatch, ZeroDenominator
from lmburden.pricing import LmpVector, RetailConfig, TimeSeriesTable, lmps, retail_model0, retail_model1, retail_model2
from lmburden.qp import SolverOptions, Theta, solve_opf

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_uniform_price_without_congestion_duals():
    F = np.array([[0.0, -0.5, -0.25], [0.0, 0.5, -0.25]])
    np.testing.assert_array_equal(lmps([0.0, 0.0, -7.0], F).lam, [7.0, 7.0, 7.0])


def test_one_bus_lmp():
    net = one_bus()
    qp, sol = solve_opf(net, Theta.from_network(net))
    assert lmps(sol.nu, qp.ptdf).lam[0] == pytest.approx(20.0, abs=1e-9)


def test_lmps_dimension():
    with pytest.raises(DimensionMismatch):
        lmps([1.0, 2.0, 3.0], np.zeros((1, 2)))


@given(
    nu1=arrays(float, 3, elements=finite),
    nu2=arrays(float, 3, elements=finite),
    a=finite,
    b=finite,
)
def test_lmp_map_is_linear(nu1, nu2, a, b):
    F = np.array([[0.0, -2 / 3, -1 / 3], [0.0, 1 / 3, -1 / 3]])
    lhs = lmps(a * nu1 + b * nu2, F).lam
    rhs = a * lmps(nu1, F).lam + b * lmps(nu2, F).lam
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 6))
def test_uncongested_prices_uniform(seed, n):
    net = random_network(np.random.default_rng(seed), n, unlimited=True)
    theta = Theta.from_network(net)
    try:
        qp, sol = solve_opf(net, theta, SolverOptions(tau=1e-10))
    except Infeasible:
        return
    assert np.ptp(lmps(sol.nu, qp.ptdf).lam) <= 1e-6
    # at the default tau the only spread is the regularization term -F^T (2 tau p)
    qp, sol = solve_opf(net, theta)
    lam = lmps(sol.nu, qp.ptdf).lam
    artifact = -qp.ptdf.T @ (2 * qp.tau * sol.p)
    assert np.ptp(lam - artifact) <= 1e-6


def test_model0_examples():
    lam = LmpVector(np.array([20.0, 25.0]))
    np.testing.assert_array_equal(retail_model0(lam, RetailConfig()).pi, [20.0, 25.0])
    np.testing.assert_array_equal(retail_model0(lam, RetailConfig(omega=5.0)).pi, [25.0, 30.0])
    cfg = RetailConfig(omega=1.0, phi=np.array([0.01, 0.01]))
    np.testing.assert_allclose(retail_model0(lam, cfg, d=[10.0, 10.0]).pi, [21.1, 26.1])
    with pytest.raises(ModelMismatch):
        retail_model0(lam, RetailConfig(model=1))


def test_config_validation():
    with pytest.raises(ValueError):
        RetailConfig(omega=-1.0)
    with pytest.raises(ValueError):
        RetailConfig(phi=np.array([-0.1]))
    with pytest.raises(ValueError):
        RetailConfig(regions=((1, 2), (2, 3)))


def series(demand, lmp, omega=None):
    demand = np.asarray(demand, dtype=float)
    T, N = demand.shape
    return TimeSeriesTable(
        tuple(range(1, N + 1)), tuple(range(T)), demand, np.zeros_like(demand) if omega is None else omega, lmp
    )


def test_model1_two_steps():
    s = series([[1.0], [3.0]], np.array([[10.0], [20.0]]))
    assert retail_model1(s).pi[0] == pytest.approx(17.5)


def test_model1_constant_price():
    s = series([[4.0, 1.0], [4.0, 2.0], [4.0, 7.0]], np.full((3, 2), 20.0))
    np.testing.assert_allclose(retail_model1(s).pi, 20.0)


def test_model1_region_of_identical_nodes():
    d = np.array([[1.0, 1.0], [3.0, 3.0]])
    lam = np.array([[10.0, 10.0], [20.0, 20.0]])
    s = series(d, lam)
    per_node = retail_model1(s).pi
    per_region = retail_model1(s, [(1, 2)], "per-region").pi
    np.testing.assert_allclose(per_region, per_node)


def test_model1_errors():
    with pytest.raises(ZeroDenominator):
        retail_model1(series([[0.0], [0.0]], np.ones((2, 1))))
    with pytest.raises(MissingSeries):
        retail_model1(series([[1.0]], None))
    with pytest.raises(MissingSeries):
        retail_model1(series([[1.0]], np.ones((1, 1))), [(1, 9)], "per-region")


@given(
    d=arrays(float, (4, 3), elements=st.floats(0.1, 100)),
    lam=arrays(float, (4, 3), elements=st.floats(-50, 200)),
    om=arrays(float, (4, 3), elements=st.floats(0, 30)),
)
def test_model1_weighted_average_bounds(d, lam, om):
    pi = retail_model1(series(d, lam, om)).pi
    base = pi - om.sum(axis=0) / d.sum(axis=0)
    assert np.all(base >= lam.min(axis=0) - 1e-9)
    assert np.all(base <= lam.max(axis=0) + 1e-9)


def test_model2_examples():
    lam = np.array([[5.0, 6.0]])
    np.testing.assert_array_equal(retail_model2(lam, np.ones((1, 2))).pi, [[6.0, 7.0]])
    np.testing.assert_array_equal(retail_model2(lam, np.zeros((1, 2))).pi, lam)
    with pytest.raises(MisalignedSeries):
        retail_model2(np.ones((2, 2)), np.ones((3, 2)))


@given(lam=arrays(float, 3, elements=st.floats(0, 200)), om=arrays(float, 3, elements=st.floats(0, 20)), T=st.integers(1, 5))
def test_model2_constant_equals_model0(lam, om, T):
    m2 = retail_model2(np.tile(lam, (T, 1)), np.tile(om, (T, 1))).pi
    m0 = retail_model0(LmpVector(lam), RetailConfig(omega=om)).pi
    for row in m2:
        np.testing.assert_array_equal(row, m0)


def test_negative_lmps_pass_through(caplog):
    caplog.set_level(logging.WARNING, logger="lmburden")
    F = np.zeros((0, 1))
    lam = lmps([5.0], F)
    assert lam.lam[0] == -5.0
    assert "non-positive" in caplog.text


def test_triangle_prices_positive():
    net = triangle(limits=(20.0, 1000.0, 1000.0))
    qp, sol = solve_opf(net, Theta.from_network(net))
    assert np.all(lmps(sol.nu, qp.ptdf).lam > 0)
