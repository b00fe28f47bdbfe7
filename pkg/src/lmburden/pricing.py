"""LMP recovery from OPF duals and retail price models 0, 1 and 2.

Retail price decomposition: ``pi = lambda + omega + Phi d`` (wholesale LMP,
utility operating cost, linear profit term).

* Model 0 exposes every bus to its LMP (plus optional omega / Phi).
* Model 1 averages cost over a time horizon, per node or per utility region.
  Time integrals are left-Riemann sums over the supplied intervals.
* Model 2 adds a per-node, per-timestep adder to externally supplied D-LMPs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, MisalignedSeries, MissingSeries, ModelMismatch, ZeroDenominator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LmpVector:
    lam: np.ndarray

    def __len__(self):
        return self.lam.size


def lmps(nu, F) -> LmpVector:
    """LMPs ``lambda = -[F^T 1] nu``.

    ``nu`` holds the M flow-row duals followed by the power-balance dual.
    """
    nu = np.asarray(nu, dtype=float).ravel()
    F = np.atleast_2d(np.asarray(F, dtype=float))
    M = F.shape[0] if F.size else 0
    N = F.shape[1]
    if nu.size != M + 1:
        raise DimensionMismatch(f"nu has length {nu.size}, expected M + 1 = {M + 1}")
    lam = -(F.T @ nu[:M]) - nu[M] * np.ones(N)
    if np.any(lam <= 0):
        logger.warning("non-positive LMPs at buses %s", list(np.flatnonzero(lam <= 0) + 1))
    return LmpVector(lam)


@dataclass(frozen=True)
class RetailConfig:
    """Retail pricing configuration.

    ``omega`` is a scalar or a per-bus array ($/MWh adder for Model 0, $ per
    timestep for Model 1). ``phi`` holds the diagonal of the profit-rate
    matrix, or the full matrix. ``regions`` lists bus ids per utility for
    Model 1 per-region averaging.
    """

    model: int = 0
    omega: float | np.ndarray = 0.0
    phi: np.ndarray | None = None
    regions: tuple[tuple[int, ...], ...] | None = None
    averaging: str = "per-node"

    def __post_init__(self):
        if self.model not in (0, 1, 2):
            raise ValueError(f"unknown retail model {self.model!r}")
        if self.averaging not in ("per-node", "per-region"):
            raise ValueError(f"averaging must be 'per-node' or 'per-region', got {self.averaging!r}")
        if np.any(np.asarray(self.omega, dtype=float) < 0):
            raise ValueError("operating costs omega must be non-negative")
        if self.phi is not None and np.any(np.asarray(self.phi, dtype=float) < 0):
            raise ValueError("profit-rate entries must be non-negative")
        if self.regions is not None:
            object.__setattr__(self, "regions", tuple(tuple(int(b) for b in r) for r in self.regions))
            flat = [b for r in self.regions for b in r]
            if len(flat) != len(set(flat)):
                raise ValueError("utility regions overlap")

    def omega_vector(self, n: int) -> np.ndarray:
        om = np.asarray(self.omega, dtype=float)
        if om.ndim == 0:
            return np.full(n, float(om))
        if om.shape != (n,):
            raise DimensionMismatch(f"omega has length {om.size}, expected {n}")
        return om

    def phi_matrix(self, n: int) -> np.ndarray:
        if self.phi is None:
            return np.zeros((n, n))
        phi = np.asarray(self.phi, dtype=float)
        if phi.ndim == 0:
            return float(phi) * np.eye(n)
        if phi.ndim == 1:
            if phi.size != n:
                raise DimensionMismatch(f"phi has length {phi.size}, expected {n}")
            return np.diag(phi)
        if phi.shape != (n, n):
            raise DimensionMismatch(f"phi has shape {phi.shape}, expected ({n}, {n})")
        return phi


@dataclass(frozen=True)
class RetailPrices:
    """``pi`` is length N (Models 0/1) or (T, N) for Model 2."""

    pi: np.ndarray
    model: int
    labels: tuple = field(default=())

    def __post_init__(self):
        if np.any(~np.isfinite(self.pi)):
            raise ValueError("retail prices must be finite")
        if np.any(self.pi < 0):
            logger.warning("negative retail prices present")


def retail_model0(lmp: LmpVector, config: RetailConfig, d=None) -> RetailPrices:
    """``pi = lambda + omega + Phi d``."""
    if config.model != 0:
        raise ModelMismatch(f"retail_model0 called with model {config.model}")
    n = lmp.lam.size
    pi = lmp.lam + config.omega_vector(n)
    if config.phi is not None:
        if d is None:
            raise ValueError("profit term requires the demand vector")
        pi = pi + config.phi_matrix(n) @ np.asarray(d, dtype=float)
    return RetailPrices(pi, 0)


@dataclass(frozen=True)
class TimeSeriesTable:
    """Per-bus interval data. Arrays are (T, N); column ``j`` is ``bus_ids[j]``."""

    bus_ids: tuple[int, ...]
    timesteps: tuple[int, ...]
    demand: np.ndarray
    omega: np.ndarray
    lmp: np.ndarray | None = None

    def __post_init__(self):
        shape = (len(self.timesteps), len(self.bus_ids))
        for name in ("demand", "omega", "lmp"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=float)
            if arr.shape != shape:
                raise MisalignedSeries(f"{name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)
        if np.any(self.demand < 0):
            raise ValueError("demand must be non-negative")


def retail_model1(
    series: TimeSeriesTable,
    regions: Sequence[Sequence[int]] | None = None,
    averaging: str = "per-node",
) -> RetailPrices:
    """Time-averaged utility rates.

    Per node: ``pi_k = sum_t (d_k lambda_k + omega_k) / sum_t d_k``.
    Per region: one price ``u / D`` for every bus in the region, where ``u``
    sums purchase and operating cost over nodes and time and ``D`` is the
    region's total demand over the horizon.

    ``regions`` lists bus ids; omitted means every bus is its own region.
    """
    if series.lmp is None:
        raise MissingSeries("Model 1 needs an lmp column in the time series")
    cost = series.demand * series.lmp + series.omega
    n = len(series.bus_ids)
    col = {b: j for j, b in enumerate(series.bus_ids)}
    if averaging == "per-node":
        groups = [[j] for j in range(n)]
    elif averaging == "per-region":
        if regions is None:
            raise ValueError("per-region averaging requires utility regions")
        groups = []
        for r in regions:
            try:
                groups.append([col[b] for b in r])
            except KeyError as exc:
                raise MissingSeries(f"no series for bus {exc.args[0]} in region {list(r)}") from None
        covered = {j for g in groups for j in g}
        groups += [[j] for j in range(n) if j not in covered]
    else:
        raise ValueError(f"unknown averaging {averaging!r}")

    pi = np.full(n, np.nan)
    for g in groups:
        total_d = series.demand[:, g].sum()
        if total_d <= 0:
            buses = [series.bus_ids[j] for j in g]
            raise ZeroDenominator(f"total demand over the horizon is zero for buses {buses}")
        pi[g] = cost[:, g].sum() / total_d
    return RetailPrices(pi, 1, tuple(series.bus_ids))


def retail_model2(dlmp_series, omega_series) -> RetailPrices:
    """``pi(t) = lambda(t) + omega(t)`` elementwise; inputs are (T, N)."""
    lam = np.atleast_2d(np.asarray(dlmp_series, dtype=float))
    om = np.atleast_2d(np.asarray(omega_series, dtype=float))
    if lam.shape != om.shape:
        raise MisalignedSeries(f"D-LMP series {lam.shape} and omega series {om.shape} are not aligned")
    return RetailPrices(lam + om, 2)
