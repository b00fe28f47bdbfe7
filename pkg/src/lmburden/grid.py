"""Network description and derived DC linear-algebra objects.

Conventions
-----------
* Line ``k`` carries positive flow from ``from_bus`` to ``to_bus``.
* The PTDF matrix ``F`` (M x N) maps nodal injections (withdrawn at the slack
  bus) to line flows; the slack column is identically zero.
* Everything is stored in physical units: MW, $/MWh, $/MW^2h. Susceptances are
  per unit; the PTDF does not depend on the MVA base.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import (
    ConflictingColocatedGenerators,
    DisconnectedNetwork,
    NetworkError,
    SingularBusMatrix,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Bus:
    id: int
    name: str = ""
    is_slack: bool = False
    # Base-case demand used to seed the parameter vector; MW (MWh per hour).
    demand: float = 0.0


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    susceptance: float
    flow_limit: float

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise NetworkError(f"line {self.from_bus}->{self.to_bus} is a self loop")
        if not self.susceptance > 0:
            raise NetworkError(f"line {self.from_bus}->{self.to_bus}: susceptance must be > 0")
        if not self.flow_limit > 0:
            raise NetworkError(f"line {self.from_bus}->{self.to_bus}: flow limit must be > 0")


@dataclass(frozen=True)
class Generator:
    bus: int
    alpha: float
    beta: float
    g_max: float

    def __post_init__(self):
        if self.alpha < 0:
            raise NetworkError(f"generator at bus {self.bus}: alpha must be >= 0")
        if not self.g_max > 0:
            raise NetworkError(f"generator at bus {self.bus}: g_max must be > 0")


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...] = ()
    generators: tuple[Generator, ...] = ()
    mva_base: float = 100.0
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "generators", tuple(self.generators))
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate bus ids")
        if not ids:
            raise NetworkError("network has no buses")
        index = {bid: i for i, bid in enumerate(ids)}
        for ln in self.lines:
            if ln.from_bus not in index or ln.to_bus not in index:
                raise NetworkError(f"line {ln.from_bus}->{ln.to_bus} references an unknown bus")
        for gen in self.generators:
            if gen.bus not in index:
                raise NetworkError(f"generator references unknown bus {gen.bus}")
        object.__setattr__(self, "_index", index)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def bus_index(self, bus_id: int) -> int:
        return self._index[bus_id]

    @property
    def slack_index(self) -> int:
        slack = [i for i, b in enumerate(self.buses) if b.is_slack]
        if len(slack) != 1:
            raise NetworkError(f"expected exactly one slack bus, found {len(slack)}")
        return slack[0]

    @property
    def demand(self) -> np.ndarray:
        return np.array([b.demand for b in self.buses], dtype=float)

    @property
    def susceptances(self) -> np.ndarray:
        return np.array([ln.susceptance for ln in self.lines], dtype=float)

    @property
    def flow_limits(self) -> np.ndarray:
        return np.array([ln.flow_limit for ln in self.lines], dtype=float)

    @property
    def alpha(self) -> np.ndarray:
        return np.array([g.alpha for g in self.generators], dtype=float)

    @property
    def beta(self) -> np.ndarray:
        return np.array([g.beta for g in self.generators], dtype=float)

    @property
    def g_max(self) -> np.ndarray:
        return np.array([g.g_max for g in self.generators], dtype=float)

    def is_connected(self) -> bool:
        n = self.n_bus
        if n == 1:
            return True
        rows = [self._index[ln.from_bus] for ln in self.lines]
        cols = [self._index[ln.to_bus] for ln in self.lines]
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        n_comp, _ = connected_components(adj, directed=False)
        return n_comp == 1

    def validate(self) -> None:
        """Check the structural invariants needed by the OPF."""
        if self.n_gen < 1:
            raise NetworkError("network needs at least one generator")
        self.slack_index  # noqa: B018 - raises on 0 or >1 slack buses
        if not self.is_connected():
            raise DisconnectedNetwork("bus graph is not connected")


def line_incidence(network: Network) -> np.ndarray:
    """Signed line-bus incidence C (M x N): +1 at from bus, -1 at to bus."""
    C = np.zeros((network.n_line, network.n_bus))
    for k, ln in enumerate(network.lines):
        C[k, network.bus_index(ln.from_bus)] = 1.0
        C[k, network.bus_index(ln.to_bus)] = -1.0
    return C


def ptdf(network: Network) -> np.ndarray:
    """Susceptance-weighted PTDF matrix with a zero column at the slack bus.

    ``F = diag(b) C [B_red^-1]`` where ``B_bus = C^T diag(b) C`` is reduced by
    deleting the slack row and column.
    """
    if not network.is_connected():
        raise DisconnectedNetwork("bus graph is not connected")
    slack = network.slack_index
    n, m = network.n_bus, network.n_line
    F = np.zeros((m, n))
    if m == 0 or n == 1:
        return F
    C = line_incidence(network)
    b = network.susceptances
    Bbus = C.T @ (b[:, None] * C)
    keep = np.array([i for i in range(n) if i != slack])
    Bred = Bbus[np.ix_(keep, keep)]
    try:
        cond = np.linalg.cond(Bred)
    except np.linalg.LinAlgError as exc:
        raise SingularBusMatrix(str(exc)) from exc
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularBusMatrix(f"reduced bus susceptance matrix is singular (cond={cond:.3g})")
    # F_red = diag(b) C_red Bred^{-1}  ->  solve Bred^T X^T = (diag(b) C_red)^T
    W = b[:, None] * C[:, keep]
    F[:, keep] = np.linalg.solve(Bred.T, W.T).T
    return F


def generator_incidence(network: Network) -> np.ndarray:
    """Generator-to-bus incidence B (N x K)."""
    B = np.zeros((network.n_bus, network.n_gen))
    for j, gen in enumerate(network.generators):
        B[network.bus_index(gen.bus), j] = 1.0
    return B


def normalize(raw: Network) -> Network:
    """Merge co-located identical-cost generators and remap bus ids to 1..N.

    Buses keep their original order. When no bus is flagged as slack the one
    with the lowest original id becomes the slack. Generators are ordered by
    bus. Idempotent.
    """
    buses = list(raw.buses)
    n_slack = sum(b.is_slack for b in buses)
    if n_slack > 1:
        raise NetworkError(f"{n_slack} buses flagged as slack")
    if n_slack == 0:
        lowest = min(b.id for b in buses)
        logger.warning("no slack bus marked; using bus %d", lowest)
        buses = [replace(b, is_slack=(b.id == lowest)) for b in buses]

    remap = {b.id: i + 1 for i, b in enumerate(buses)}
    new_buses = tuple(replace(b, id=remap[b.id], name=b.name or str(b.id)) for b in buses)
    new_lines = tuple(
        replace(ln, from_bus=remap[ln.from_bus], to_bus=remap[ln.to_bus]) for ln in raw.lines
    )

    merged: dict[int, Generator] = {}
    for gen in raw.generators:
        bus = remap[gen.bus]
        prev = merged.get(bus)
        if prev is None:
            merged[bus] = replace(gen, bus=bus)
        elif prev.alpha == gen.alpha and prev.beta == gen.beta:
            merged[bus] = replace(prev, g_max=prev.g_max + gen.g_max)
        else:
            raise ConflictingColocatedGenerators(
                f"bus {gen.bus} hosts generators with different cost coefficients "
                f"({prev.alpha}, {prev.beta}) vs ({gen.alpha}, {gen.beta})"
            )
    new_gens = tuple(merged[b] for b in sorted(merged))
    return Network(new_buses, new_lines, new_gens, raw.mva_base)
