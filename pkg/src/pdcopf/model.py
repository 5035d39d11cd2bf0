"""Physical network model shared by every solver.

All quantities are stored in per-unit on ``base_mva``.  Cost coefficients are
stored so that ``c2 * p**2 + c1 * p`` with ``p`` in per-unit gives $/h, i.e.
``c2 = c2_mw * base**2`` and ``c1 = c1_mw * base``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

# s_max used for branches without a thermal rating (MATPOWER rateA = 0).
UNLIMITED = 1e10


class BusKind(str, Enum):
    LOAD = "load"
    GENERATOR = "generator"
    REFERENCE = "reference"


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    g_shunt: float = 0.0
    b_shunt: float = 0.0
    v_min: float = 0.9
    v_max: float = 1.1
    bus_kind: BusKind = BusKind.LOAD

    def __post_init__(self):
        if not 0.0 < self.v_min <= self.v_max:
            raise NetworkError(f"bus {self.id}: voltage bounds must satisfy 0 < v_min <= v_max")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float = 0.0
    s_max: float = UNLIMITED
    in_service: bool = True
    tap: float = 1.0
    shift: float = 0.0  # radians

    def __post_init__(self):
        if not self.tap > 0.0:
            raise NetworkError("branch tap ratio must be positive")
        if self.from_bus == self.to_bus:
            raise NetworkError(f"branch {self.from_bus}-{self.to_bus} connects a bus to itself")
        if self.s_max < 0:
            raise NetworkError("branch s_max must be nonnegative")
        branch_admittance(self.r, self.x)

    @property
    def g_series(self) -> float:
        return branch_admittance(self.r, self.x)[0]

    @property
    def b_series(self) -> float:
        return branch_admittance(self.r, self.x)[1]

    @property
    def b_shunt_half(self) -> float:
        return 0.5 * self.b_charging

    @property
    def limited(self) -> bool:
        return self.s_max < UNLIMITED


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    c2: float = 0.0
    c1: float = 0.0

    def __post_init__(self):
        if self.p_min > self.p_max or self.q_min > self.q_max:
            raise NetworkError(f"generator at bus {self.bus}: inverted bounds")
        if self.c2 < 0:
            raise NetworkError(f"generator at bus {self.bus}: c2 < 0 gives a nonconvex cost")


def branch_admittance(r: float, x: float) -> tuple[float, float]:
    """Series admittance ``1 / (r + jx)`` as ``(g, b)``."""
    z2 = r * r + x * x
    if not z2 > 0.0:
        raise NetworkError("zero-impedance branch (r = x = 0) has no finite admittance")
    return r / z2, -x / z2


@dataclass(frozen=True)
class Network:
    """Buses, branches and generators with nominal demand.

    Bus references inside branches and generators are dense 0-based indices;
    ``bus_ids`` keeps the external numbering of the source file.
    """

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    nominal_pd: np.ndarray
    nominal_qd: np.ndarray
    bus_ids: tuple[int, ...] = ()
    name: str = "network"
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        nb = len(self.buses)
        object.__setattr__(self, "nominal_pd", np.asarray(self.nominal_pd, dtype=float).copy())
        object.__setattr__(self, "nominal_qd", np.asarray(self.nominal_qd, dtype=float).copy())
        self.nominal_pd.setflags(write=False)
        self.nominal_qd.setflags(write=False)
        if not self.bus_ids:
            object.__setattr__(self, "bus_ids", tuple(range(1, nb + 1)))
        if self.nominal_pd.shape != (nb,) or self.nominal_qd.shape != (nb,):
            raise NetworkError("nominal demand vectors must have one entry per bus")
        for br in self.branches:
            if not (0 <= br.from_bus < nb and 0 <= br.to_bus < nb):
                raise NetworkError(f"dangling branch endpoint {br.from_bus}-{br.to_bus}")
        for gen in self.generators:
            if not 0 <= gen.bus < nb:
                raise NetworkError(f"dangling generator bus {gen.bus}")
        refs = [i for i, b in enumerate(self.buses) if b.bus_kind == BusKind.REFERENCE]
        if len(refs) != 1:
            raise NetworkError(f"expected exactly one reference bus, found {len(refs)}")
        if not self.is_connected():
            raise NetworkError("in-service branches do not connect all buses")

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        return (
            self.base_mva == other.base_mva
            and self.buses == other.buses
            and self.branches == other.branches
            and self.generators == other.generators
            and np.array_equal(self.nominal_pd, other.nominal_pd)
            and np.array_equal(self.nominal_qd, other.nominal_qd)
            and self.bus_ids == other.bus_ids
        )

    __hash__ = None

    # sizes -----------------------------------------------------------------
    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @cached_property
    def ref_bus(self) -> int:
        return next(i for i, b in enumerate(self.buses) if b.bus_kind == BusKind.REFERENCE)

    # topology ----------------------------------------------------------------
    @cached_property
    def active_branches(self) -> np.ndarray:
        return np.array([i for i, br in enumerate(self.branches) if br.in_service], dtype=int)

    def is_connected(self, removed=()) -> bool:
        removed = set(removed)
        rows, cols = [], []
        for i, br in enumerate(self.branches):
            if br.in_service and i not in removed:
                rows.append(br.from_bus)
                cols.append(br.to_bus)
        nb = len(self.buses)
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nb, nb))
        n_comp, _ = connected_components(graph, directed=False)
        return n_comp == 1

    @cached_property
    def incidence(self) -> np.ndarray:
        """Dense ``|E| x |N|`` incidence, +1 at from-bus, -1 at to-bus.

        Rows of out-of-service branches are zero.
        """
        a = np.zeros((self.n_branch, self.n_bus))
        for i, br in enumerate(self.branches):
            if br.in_service:
                a[i, br.from_bus] = 1.0
                a[i, br.to_bus] = -1.0
        return a

    @cached_property
    def gen_incidence(self) -> np.ndarray:
        """``|N| x |G|`` map from generator output to bus injection."""
        a = np.zeros((self.n_bus, self.n_gen))
        for k, g in enumerate(self.generators):
            a[g.bus, k] = 1.0
        return a

    # stacked arrays ------------------------------------------------------------
    def _branch_array(self, attr):
        return np.array([getattr(br, attr) for br in self.branches], dtype=float)

    @cached_property
    def branch_from(self) -> np.ndarray:
        return np.array([br.from_bus for br in self.branches], dtype=int)

    @cached_property
    def branch_to(self) -> np.ndarray:
        return np.array([br.to_bus for br in self.branches], dtype=int)

    @cached_property
    def g_series(self) -> np.ndarray:
        return self._branch_array("g_series")

    @cached_property
    def b_series(self) -> np.ndarray:
        return self._branch_array("b_series")

    @cached_property
    def b_shunt_half(self) -> np.ndarray:
        return self._branch_array("b_shunt_half")

    @cached_property
    def s_max(self) -> np.ndarray:
        return self._branch_array("s_max")

    @cached_property
    def tap(self) -> np.ndarray:
        return self._branch_array("tap")

    @cached_property
    def shift(self) -> np.ndarray:
        return self._branch_array("shift")

    @cached_property
    def g_shunt(self) -> np.ndarray:
        return np.array([b.g_shunt for b in self.buses], dtype=float)

    @cached_property
    def b_shunt(self) -> np.ndarray:
        return np.array([b.b_shunt for b in self.buses], dtype=float)

    @cached_property
    def v_min(self) -> np.ndarray:
        return np.array([b.v_min for b in self.buses], dtype=float)

    @cached_property
    def v_max(self) -> np.ndarray:
        return np.array([b.v_max for b in self.buses], dtype=float)

    def _gen_array(self, attr):
        return np.array([getattr(g, attr) for g in self.generators], dtype=float)

    @cached_property
    def gen_bus(self) -> np.ndarray:
        return np.array([g.bus for g in self.generators], dtype=int)

    @cached_property
    def p_min(self) -> np.ndarray:
        return self._gen_array("p_min")

    @cached_property
    def p_max(self) -> np.ndarray:
        return self._gen_array("p_max")

    @cached_property
    def q_min(self) -> np.ndarray:
        return self._gen_array("q_min")

    @cached_property
    def q_max(self) -> np.ndarray:
        return self._gen_array("q_max")

    @cached_property
    def c2(self) -> np.ndarray:
        return self._gen_array("c2")

    @cached_property
    def c1(self) -> np.ndarray:
        return self._gen_array("c1")

    # derived quantities --------------------------------------------------------
    def total_cost(self, dispatch) -> float:
        return total_cost(self, dispatch)

    def marginal_cost(self, dispatch) -> np.ndarray:
        return 2.0 * self.c2 * np.asarray(dispatch, dtype=float) + self.c1

    def with_branch_out(self, index: int) -> "Network":
        branches = list(self.branches)
        branches[index] = dataclasses.replace(branches[index], in_service=False)
        return dataclasses.replace(self, branches=tuple(branches), metadata=dict(self.metadata))

    def lmp_to_mwh(self, lmp) -> np.ndarray:
        """Convert per-unit prices ($/h per p.u.) to $/MWh."""
        return np.asarray(lmp, dtype=float) / self.base_mva


@dataclass(frozen=True)
class DemandSample:
    pd: np.ndarray
    qd: np.ndarray
    sample_id: int = 0
    rng_seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "pd", np.asarray(self.pd, dtype=float))
        object.__setattr__(self, "qd", np.asarray(self.qd, dtype=float))
        if self.pd.shape != self.qd.shape:
            raise ValueError("pd and qd must have the same length")

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([self.pd, self.qd])

    @classmethod
    def nominal(cls, network: Network, sample_id: int = 0) -> "DemandSample":
        return cls(network.nominal_pd.copy(), network.nominal_qd.copy(), sample_id)


def total_cost(network: Network, dispatch) -> float:
    """Production cost in $/h for a per-unit dispatch."""
    p = np.asarray(dispatch, dtype=float)
    if p.shape != (network.n_gen,):
        raise ValueError(f"dispatch has shape {p.shape}, expected ({network.n_gen},)")
    return float(np.sum(network.c2 * p * p + network.c1 * p))


def scale_demand(network: Network, pd_factor, qd_factor, sample_id: int = 0) -> DemandSample:
    return DemandSample(
        network.nominal_pd * np.asarray(pd_factor, dtype=float),
        network.nominal_qd * np.asarray(qd_factor, dtype=float),
        sample_id,
    )
