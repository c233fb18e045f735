"""Immutable three-phase radial feeder data model."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np

from svvc.devices import RegulatorSpec, TapState

PHASES = ("A", "B", "C")
PHASE_INDEX = {p: i for i, p in enumerate(PHASES)}

LINE = "line"
REGULATOR = "regulator"
SWITCH = "switch"
TRANSFORMER = "transformer"
BRANCH_KINDS = (LINE, REGULATOR, SWITCH, TRANSFORMER)

WYE = "wye"
DELTA = "delta"
LOAD_MODELS = ("pq", "i", "z")
# delta phase pairs AB, BC, CA
DELTA_PAIRS = ((0, 1), (1, 2), (2, 0))


class FeederError(ValueError):
    """Invalid feeder data: parse problems, dangling references, topology."""


@dataclass(frozen=True)
class Bus:
    id: str
    phases: tuple[int, ...]
    base_kv: float  # line-to-neutral kV
    is_source: bool = False


@dataclass(frozen=True, eq=False)
class Branch:
    """Series element between two buses.

    ``z_ohm`` is the 3x3 series impedance in ohms referred to the to-bus
    voltage base; ``y_shunt`` the total 3x3 shunt admittance in siemens, split
    equally between the ends.  Rows/columns of absent phases are zero.
    """

    name: str
    from_bus: str
    to_bus: str
    kind: str = LINE
    z_ohm: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), complex))
    y_shunt: np.ndarray = field(default_factory=lambda: np.zeros((3, 3), complex))
    length: float = 0.0
    regulator: Optional[str] = None

    @property
    def series(self) -> bool:
        return self.kind in (LINE, TRANSFORMER)


@dataclass(frozen=True)
class Load:
    """Per-phase (wye) or per-phase-pair (delta: AB, BC, CA) load.

    ``distributed_fraction`` of the load sits at the upstream end of the
    branch feeding ``bus``; the rest sits at ``bus``.
    """

    name: str
    bus: str
    conn: str = WYE
    model: str = "pq"
    p_kw: tuple[float, float, float] = (0.0, 0.0, 0.0)
    q_kvar: tuple[float, float, float] = (0.0, 0.0, 0.0)
    distributed_fraction: float = 0.0


@dataclass(frozen=True)
class Shunt:
    """Fixed capacitor, ``q_kvar`` per phase at rated line-to-neutral ``kv``."""

    name: str
    bus: str
    q_kvar: tuple[float, float, float]
    kv: float


@dataclass(frozen=True)
class InverterSite:
    id: str
    bus: str
    phases: tuple[int, ...]
    p_rating_kw: float
    s_rating_kva: float
    smart: bool = False

    def phase_share(self, total: float) -> float:
        return total / len(self.phases)


@dataclass(frozen=True, eq=False)
class FeederModel:
    name: str
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    loads: tuple[Load, ...] = ()
    inverters: tuple[InverterSite, ...] = ()
    regulators: tuple[RegulatorSpec, ...] = ()
    shunts: tuple[Shunt, ...] = ()
    base_mva: float = 1.0
    source_pu: float = 1.0
    source_angle_deg: float = 0.0
    initial_taps: Optional[TapState] = None

    def __post_init__(self):
        object.__setattr__(self, "_cache", {})
        self.validate()

    # ---- validation -----------------------------------------------------
    def validate(self) -> None:
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise FeederError(f"duplicate bus ids: {dup}")
        for b in self.buses:
            if not b.phases:
                raise FeederError(f"bus {b.id} has no phases")
            if b.base_kv <= 0:
                raise FeederError(f"bus {b.id} has nonpositive base_kv")
        sources = [b for b in self.buses if b.is_source]
        if len(sources) != 1:
            raise FeederError(f"feeder must have exactly one source bus, found {len(sources)}")
        bus_ids = set(ids)
        reg_ids = {r.id for r in self.regulators}
        names = [br.name for br in self.branches]
        if len(set(names)) != len(names):
            raise FeederError("duplicate branch names")
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in bus_ids:
                    raise FeederError(f"branch {br.name} references unknown bus {end!r}")
            if br.kind not in BRANCH_KINDS:
                raise FeederError(f"branch {br.name}: unknown kind {br.kind!r}")
            if br.kind == REGULATOR:
                if br.regulator not in reg_ids:
                    raise FeederError(f"regulator branch {br.name} references unknown regulator {br.regulator!r}")
                if np.any(br.z_ohm != 0):
                    raise FeederError(f"regulator branch {br.name} must carry zero impedance")
            if br.kind == LINE and not np.allclose(br.z_ohm, br.z_ohm.T):
                raise FeederError(f"line {br.name} impedance is not symmetric")
        branch_names = set(names)
        for r in self.regulators:
            if r.branch not in branch_names:
                raise FeederError(f"regulator {r.id} references unknown branch {r.branch!r}")
        if len(self.branches) != len(self.buses) - 1:
            raise FeederError(
                f"non-radial topology: {len(self.branches)} branches for {len(self.buses)} buses")
        topo = self._topology()  # raises on cycles / disconnection
        by_id = self.bus_map
        for br in self.branches:
            fp, tp = set(by_id[br.from_bus].phases), set(by_id[br.to_bus].phases)
            if not tp <= fp:
                raise FeederError(
                    f"inconsistent phasing on {br.name}: {br.to_bus} phases not served by {br.from_bus}")
        for ld in self.loads:
            if ld.bus not in bus_ids:
                raise FeederError(f"load {ld.name} references unknown bus {ld.bus!r}")
            if ld.conn not in (WYE, DELTA) or ld.model not in LOAD_MODELS:
                raise FeederError(f"load {ld.name}: bad connection/model {ld.conn}/{ld.model}")
            if min(ld.p_kw) < 0 or min(ld.q_kvar) < 0:
                raise FeederError(f"load {ld.name} has negative magnitude")
            if not 0.0 <= ld.distributed_fraction <= 1.0:
                raise FeederError(f"load {ld.name}: distributed_fraction outside [0, 1]")
            if ld.distributed_fraction > 0 and by_id[ld.bus].is_source:
                raise FeederError(f"load {ld.name}: distributed load at source bus")
            self._check_load_phases(ld, by_id[ld.bus].phases)
            if ld.distributed_fraction > 0:
                parent = topo["parent_bus"][ld.bus]
                self._check_load_phases(ld, by_id[parent].phases)
        for sh in self.shunts:
            if sh.bus not in bus_ids:
                raise FeederError(f"shunt {sh.name} references unknown bus {sh.bus!r}")
        inv_ids = [s.id for s in self.inverters]
        if len(set(inv_ids)) != len(inv_ids):
            raise FeederError("duplicate inverter ids")
        for s in self.inverters:
            if s.bus not in bus_ids:
                raise FeederError(f"inverter {s.id} references unknown bus {s.bus!r}")
            if not set(s.phases) <= set(by_id[s.bus].phases) or not s.phases:
                raise FeederError(f"inverter {s.id}: phases not present at bus {s.bus}")
            if s.s_rating_kva < s.p_rating_kw or s.p_rating_kw < 0:
                raise FeederError(f"inverter {s.id}: s_rating must be >= p_rating >= 0")
        if self.initial_taps is not None:
            self.initial_taps.validate(self.regulators)

    @staticmethod
    def _check_load_phases(ld: Load, phases: tuple[int, ...]) -> None:
        present = set(phases)
        for k in range(3):
            if ld.p_kw[k] == 0 and ld.q_kvar[k] == 0:
                continue
            need = {k} if ld.conn == WYE else set(DELTA_PAIRS[k])
            if not need <= present:
                raise FeederError(f"inconsistent phasing: load {ld.name} uses phases missing at its bus")

    # ---- topology -------------------------------------------------------
    @cached_property
    def bus_map(self) -> dict[str, Bus]:
        return {b.id: b for b in self.buses}

    @cached_property
    def branch_map(self) -> dict[str, Branch]:
        return {b.name: b for b in self.branches}

    @cached_property
    def regulator_map(self) -> dict[str, RegulatorSpec]:
        return {r.id: r for r in self.regulators}

    @property
    def source(self) -> Bus:
        return next(b for b in self.buses if b.is_source)

    def _topology(self) -> dict:
        if "topology" in self._cache:
            return self._cache["topology"]
        adj: dict[str, list[Branch]] = {b.id: [] for b in self.buses}
        for br in self.branches:
            adj[br.from_bus].append(br)
            adj[br.to_bus].append(br)
        src = self.source.id
        order: list[Branch] = []
        parent_bus = {src: None}
        parent_branch: dict[str, Branch] = {}
        depth = {src: 0}
        bus_order = [src]
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for br in adj[u]:
                if br.from_bus == u:
                    v = br.to_bus
                elif br.to_bus == u:
                    if parent_branch.get(u) is br:
                        continue
                    raise FeederError(f"branch {br.name} points toward the source; orient from->to downstream")
                else:  # pragma: no cover
                    continue
                if v in parent_bus:
                    raise FeederError(f"non-radial topology: cycle through bus {v}")
                parent_bus[v] = u
                parent_branch[v] = br
                depth[v] = depth[u] + 1
                order.append(br)
                bus_order.append(v)
                queue.append(v)
        if len(bus_order) != len(self.buses):
            missing = sorted(set(adj) - set(bus_order))
            raise FeederError(f"non-radial topology: buses not connected to source: {missing[:5]}")
        topo = {"order": order, "parent_bus": parent_bus, "parent_branch": parent_branch,
                "depth": depth, "bus_order": bus_order}
        self._cache["topology"] = topo
        return topo

    @property
    def branch_order(self) -> list[Branch]:
        """Branches in breadth-first order from the source."""
        return self._topology()["order"]

    def parent_bus(self, bus_id: str) -> Optional[str]:
        return self._topology()["parent_bus"][bus_id]

    def depth(self, bus_id: str) -> int:
        return self._topology()["depth"][bus_id]

    def downstream_buses(self, bus_id: str) -> set[str]:
        """``bus_id`` and every bus fed through it."""
        children: dict[str, list[str]] = self._cache.get("children")
        if children is None:
            children = {b.id: [] for b in self.buses}
            for br in self.branch_order:
                children[br.from_bus].append(br.to_bus)
            self._cache["children"] = children
        out, stack = set(), [bus_id]
        while stack:
            u = stack.pop()
            out.add(u)
            stack.extend(children[u])
        return out

    # ---- phase-node indexing -------------------------------------------
    @cached_property
    def nodes(self) -> list[tuple[str, int]]:
        """Phase-nodes (bus id, phase index) in breadth-first bus order."""
        out = []
        for bid in self._topology()["bus_order"]:
            for p in sorted(self.bus_map[bid].phases):
                out.append((bid, p))
        return out

    @cached_property
    def node_index(self) -> dict[tuple[str, int], int]:
        return {n: i for i, n in enumerate(self.nodes)}

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def bus_nodes(self, bus_id: str) -> list[int]:
        return [self.node_index[(bus_id, p)] for p in sorted(self.bus_map[bus_id].phases)]

    @cached_property
    def source_nodes(self) -> np.ndarray:
        return np.array(self.bus_nodes(self.source.id), dtype=int)

    @cached_property
    def node_base_kv(self) -> np.ndarray:
        return np.array([self.bus_map[b].base_kv for b, _ in self.nodes])

    @property
    def phase_base_kva(self) -> float:
        return self.base_mva * 1000.0 / 3.0

    def z_base(self, bus_id: str) -> float:
        kv = self.bus_map[bus_id].base_kv
        return kv * kv * 1000.0 / self.phase_base_kva

    # ---- inverter phase slots -------------------------------------------
    @cached_property
    def inverter_slots(self) -> list[tuple[int, int, int]]:
        """(site index, phase, node index) for each inverter phase."""
        out = []
        for k, site in enumerate(self.inverters):
            for p in sorted(site.phases):
                out.append((k, p, self.node_index[(site.bus, p)]))
        return out

    @cached_property
    def smart_slots(self) -> list[int]:
        return [i for i, (k, _, _) in enumerate(self.inverter_slots) if self.inverters[k].smart]

    def slot_label(self, slot: int) -> str:
        k, p, _ = self.inverter_slots[slot]
        return f"{self.inverters[k].id}.{PHASES[p]}"

    # ---- regulators -----------------------------------------------------
    def regulator_branch(self, reg_id: str) -> Branch:
        return self.branch_map[self.regulator_map[reg_id].branch]

    def regulators_by_depth(self) -> list[RegulatorSpec]:
        """Most-upstream first; ties broken by id."""
        return sorted(self.regulators,
                      key=lambda r: (self.depth(self.regulator_branch(r.id).to_bus), r.id))

    def regulator_phases(self, reg_id: str) -> tuple[int, ...]:
        return tuple(sorted(self.bus_map[self.regulator_branch(reg_id).to_bus].phases))

    def default_taps(self) -> TapState:
        if self.initial_taps is not None:
            return self.initial_taps
        return TapState.zeros(self.regulators)

    # ---- summaries ------------------------------------------------------
    @property
    def load_buses(self) -> list[str]:
        seen = []
        for ld in self.loads:
            if ld.bus not in seen:
                seen.append(ld.bus)
        return seen

    def memo(self, key, factory):
        """Per-model memoisation for derived, tap-dependent structures."""
        cache = self._cache
        if key not in cache:
            if len(cache) > 4096:
                for k in [k for k in cache if isinstance(k, tuple)][:2048]:
                    del cache[k]
            cache[key] = factory()
        return cache[key]
