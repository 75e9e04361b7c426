"""Grid case ingestion and bus admittance matrices.

Case files are UTF-8 JSON with top-level keys ``buses``, ``branches``,
``generators``, ``loads``, ``limits``.  All electrical quantities are in
per-unit on the case base, angles in radians, costs in $/h per per-unit
power.  Branches store the series admittance parts (g, b) directly, so an
inductive line of reactance x carries b = -x / (r^2 + x^2) < 0.  The bus
admittance matrix follows the standard convention: Y[i, j] = -y_series for
i != j, and Y[i, i] collects incident series admittances plus shunts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

GENERATOR = "generator"
LOAD = "load"
INFINITE = "infinite"

_BUS_KINDS = (GENERATOR, LOAD, INFINITE)
_FAULT_TYPES = ("midpoint_ltg", "bus_ltg")


class CaseError(ValueError):
    """Raised when a case or scenario file fails parsing or validation."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    shunt_g: float = 0.0
    shunt_b: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    g: float
    b: float
    s_max: float = float("inf")
    shunt_b: float = 0.0  # total line charging, split half per end

    def series_admittance(self) -> complex:
        return complex(self.g, self.b)


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    a1: float = 0.0
    a2: float = 0.0
    m: float = 0.0
    d: float = 0.0
    v_set: float = 1.0
    p_set: float | None = None


@dataclass(frozen=True)
class Load:
    bus: int
    p: float
    q: float = 0.0
    d: float = 0.0


@dataclass(frozen=True)
class Limits:
    v_min: float
    v_max: float
    angle_min: float
    angle_max: float


@dataclass(frozen=True)
class PowerCase:
    """Static grid description.

    Bus kinds: ``generator`` buses carry swing dynamics (inertia m, damping
    d from the attached generator), ``load`` buses carry first-order angle
    dynamics (damping d from the attached load), ``infinite`` buses are
    static during transients and serve as the angle reference.
    """

    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    limits: Limits
    name: str = ""
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._index.update({b.id: k for k, b in enumerate(self.buses)})
        _validate_case(self)

    # -- index helpers -------------------------------------------------

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_pos(self, bus_id: int) -> int:
        try:
            return self._index[bus_id]
        except KeyError:
            raise CaseError(f"unknown bus {bus_id}") from None

    @property
    def gen_positions(self) -> list[int]:
        """Positions of generator-kind buses, in bus order."""
        return [k for k, b in enumerate(self.buses) if b.kind == GENERATOR]

    @property
    def load_positions(self) -> list[int]:
        return [k for k, b in enumerate(self.buses) if b.kind == LOAD]

    @property
    def infinite_positions(self) -> list[int]:
        return [k for k, b in enumerate(self.buses) if b.kind == INFINITE]

    @property
    def dynamic_positions(self) -> list[int]:
        """Dynamic-state bus positions: generators first, then loads."""
        return self.gen_positions + self.load_positions

    @property
    def slack_position(self) -> int:
        """Angle-reference bus: the infinite bus if present, else the
        first generator bus."""
        inf = self.infinite_positions
        if inf:
            return inf[0]
        gens = self.gen_positions
        if not gens:
            raise CaseError("case has no generator or infinite bus")
        return gens[0]

    def generator_at(self, pos: int) -> Generator | None:
        bid = self.buses[pos].id
        for g in self.generators:
            if g.bus == bid:
                return g
        return None

    def loads_at(self, pos: int) -> list[Load]:
        bid = self.buses[pos].id
        return [l for l in self.loads if l.bus == bid]

    def inertia(self, pos: int) -> float:
        g = self.generator_at(pos)
        if g is None or self.buses[pos].kind != GENERATOR:
            raise CaseError(f"bus {self.buses[pos].id} has no swing dynamics")
        return g.m

    def damping(self, pos: int) -> float:
        kind = self.buses[pos].kind
        if kind == GENERATOR:
            return self.generator_at(pos).d
        if kind == LOAD:
            return sum(l.d for l in self.loads_at(pos))
        raise CaseError(f"bus {self.buses[pos].id} is static")

    def load_p(self) -> np.ndarray:
        p = np.zeros(self.n_bus)
        for l in self.loads:
            p[self.bus_pos(l.bus)] += l.p
        return p

    def load_q(self) -> np.ndarray:
        q = np.zeros(self.n_bus)
        for l in self.loads:
            q[self.bus_pos(l.bus)] += l.q
        return q

    def v_setpoints(self) -> np.ndarray:
        """Voltage setpoints for PV/slack buses; 1.0 elsewhere."""
        v = np.ones(self.n_bus)
        for g in self.generators:
            v[self.bus_pos(g.bus)] = g.v_set
        return v


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Square complex bus admittance matrix with per-branch phase angles.

    alpha[k] = atan2(G_ij, B_ij) of the off-diagonal entry belonging to
    branch k, which vanishes for lossless branches.
    """

    y: np.ndarray
    branch_alpha: np.ndarray
    branch_mag: np.ndarray
    in_service: tuple[int, ...]

    @property
    def g(self) -> np.ndarray:
        return self.y.real

    @property
    def b(self) -> np.ndarray:
        return self.y.imag

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class FaultSpec:
    """Scenario description as read from a scenario JSON file.

    ``injection_scope`` controls the fault-window injection overrides:
    "faulted" zeroes generation/load at faulted buses only, "system"
    everywhere, "none" keeps injections untouched.
    """

    faulted_branch: int | None
    fault_type: str
    t_clear: float
    fault_bus: int | None = None
    permanent: bool = False
    fault_admittance: complex = complex(5.0, -5.0)
    injection_scope: str = "faulted"


def _req(obj: dict, key: str, ctx: str):
    if key not in obj:
        raise CaseError(f"{ctx}: missing field '{key}'")
    return obj[key]


def _validate_case(case: PowerCase) -> None:
    seen = set()
    for b in case.buses:
        if b.kind not in _BUS_KINDS:
            raise CaseError(f"bus {b.id}: unknown kind '{b.kind}'")
        if b.id in seen:
            raise CaseError(f"duplicate bus id {b.id}")
        seen.add(b.id)
    gen_buses = set()
    for g in case.generators:
        if g.bus not in seen:
            raise CaseError(f"generator references unknown bus {g.bus}")
        kind = case.buses[case.bus_pos(g.bus)].kind
        if kind == LOAD:
            raise CaseError(f"generator at bus {g.bus} which is a load bus")
        if kind == GENERATOR:
            if g.bus in gen_buses:
                raise CaseError(f"multiple generators at bus {g.bus}")
            gen_buses.add(g.bus)
            if not g.m > 0.0:
                raise CaseError(f"generator at bus {g.bus}: inertia m must be > 0")
            if not g.d > 0.0:
                raise CaseError(f"generator at bus {g.bus}: damping d must be > 0")
        if g.a1 < 0.0:
            raise CaseError(f"generator at bus {g.bus}: a1 must be >= 0")
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise CaseError(f"generator at bus {g.bus}: empty limit box")
    for k, b in enumerate(case.buses):
        if b.kind == GENERATOR and b.id not in gen_buses:
            raise CaseError(f"generator bus {b.id} has no generator entry")
    for l in case.loads:
        if l.bus not in seen:
            raise CaseError(f"load references unknown bus {l.bus}")
    for pos in case.load_positions:
        if not case.damping(pos) > 0.0:
            raise CaseError(
                f"load bus {case.buses[pos].id}: total damping d must be > 0")
    for br in case.branches:
        if br.from_bus not in seen:
            raise CaseError(f"unknown bus {br.from_bus} in branch")
        if br.to_bus not in seen:
            raise CaseError(f"unknown bus {br.to_bus} in branch")
        if br.from_bus == br.to_bus:
            raise CaseError(f"branch {br.from_bus}-{br.to_bus} is a self-loop")
    lim = case.limits
    if not lim.v_min > 0.0:
        raise CaseError("v_min must be > 0")
    if lim.v_min > lim.v_max:
        raise CaseError("v_min must not exceed v_max")
    if lim.angle_min > lim.angle_max:
        raise CaseError("angle_min must not exceed angle_max")
    if case.n_bus > 1:
        _check_connected(case)


def _check_connected(case: PowerCase) -> None:
    adj: dict[int, set[int]] = {k: set() for k in range(case.n_bus)}
    for br in case.branches:
        i, j = case.bus_pos(br.from_bus), case.bus_pos(br.to_bus)
        adj[i].add(j)
        adj[j].add(i)
    seen = {0}
    stack = [0]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != case.n_bus:
        missing = sorted(case.buses[k].id for k in range(case.n_bus) if k not in seen)
        raise CaseError(f"graph not connected; unreachable buses {missing}")


def load_case(path: str) -> PowerCase:
    """Parse a case JSON file and return a validated PowerCase."""
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise CaseError(f"case file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise CaseError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    return case_from_dict(raw, name=str(path))


def case_from_dict(raw: dict, name: str = "") -> PowerCase:
    buses = tuple(
        Bus(
            id=int(_req(b, "id", "bus")),
            kind=str(_req(b, "kind", "bus")),
            shunt_g=float(b.get("shunt_g", 0.0)),
            shunt_b=float(b.get("shunt_b", 0.0)),
        )
        for b in _req(raw, "buses", "case")
    )
    branches = tuple(
        Branch(
            from_bus=int(_req(br, "from", "branch")),
            to_bus=int(_req(br, "to", "branch")),
            g=float(br.get("g", 0.0)),
            b=float(_req(br, "b", "branch")),
            s_max=float(br.get("s_max", float("inf"))),
            shunt_b=float(br.get("shunt_b", 0.0)),
        )
        for br in _req(raw, "branches", "case")
    )
    generators = tuple(
        Generator(
            bus=int(_req(g, "bus", "generator")),
            p_min=float(g.get("p_min", 0.0)),
            p_max=float(_req(g, "p_max", "generator")),
            q_min=float(g.get("q_min", -10.0)),
            q_max=float(g.get("q_max", 10.0)),
            a1=float(g.get("a1", 0.0)),
            a2=float(g.get("a2", 0.0)),
            m=float(g.get("m", 0.0)),
            d=float(g.get("d", 0.0)),
            v_set=float(g.get("v_set", 1.0)),
            p_set=(float(g["p_set"]) if "p_set" in g else None),
        )
        for g in _req(raw, "generators", "case")
    )
    loads = tuple(
        Load(
            bus=int(_req(l, "bus", "load")),
            p=float(_req(l, "p", "load")),
            q=float(l.get("q", 0.0)),
            d=float(l.get("d", 0.0)),
        )
        for l in _req(raw, "loads", "case")
    )
    lim = _req(raw, "limits", "case")
    limits = Limits(
        v_min=float(_req(lim, "v_min", "limits")),
        v_max=float(_req(lim, "v_max", "limits")),
        angle_min=float(lim.get("angle_min", -math.pi / 2)),
        angle_max=float(lim.get("angle_max", math.pi / 2)),
    )
    return PowerCase(
        base_mva=float(raw.get("base_mva", 100.0)),
        buses=buses,
        branches=branches,
        generators=generators,
        loads=loads,
        limits=limits,
        name=raw.get("name", name),
    )


def load_scenario(path: str) -> FaultSpec:
    """Parse a fault scenario JSON file."""
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise CaseError(f"scenario file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise CaseError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None
    return scenario_from_dict(raw)


def scenario_from_dict(raw: dict) -> FaultSpec:
    ftype = str(_req(raw, "fault_type", "scenario"))
    if ftype not in _FAULT_TYPES:
        raise CaseError(f"scenario: unknown fault_type '{ftype}'")
    t_clear = float(_req(raw, "t_clear", "scenario"))
    if not t_clear > 0.0:
        raise CaseError("scenario: t_clear must be > 0")
    fb = raw.get("faulted_branch")
    fbus = raw.get("fault_bus")
    if ftype == "midpoint_ltg" and fb is None:
        raise CaseError("scenario: midpoint_ltg requires 'faulted_branch'")
    if ftype == "bus_ltg" and fbus is None:
        raise CaseError("scenario: bus_ltg requires 'fault_bus'")
    ya = raw.get("fault_admittance", [5.0, -5.0])
    scope = str(raw.get("injection_scope", "faulted"))
    if scope not in ("faulted", "system", "none"):
        raise CaseError(f"scenario: unknown injection_scope '{scope}'")
    return FaultSpec(
        faulted_branch=(int(fb) if fb is not None else None),
        fault_type=ftype,
        t_clear=t_clear,
        fault_bus=(int(fbus) if fbus is not None else None),
        permanent=bool(raw.get("permanent", False)),
        fault_admittance=complex(float(ya[0]), float(ya[1])),
        injection_scope=scope,
    )


def _branch_entries(case: PowerCase, branches: tuple[int, ...]) -> np.ndarray:
    n = case.n_bus
    y = np.zeros((n, n), dtype=complex)
    for k in branches:
        br = case.branches[k]
        i, j = case.bus_pos(br.from_bus), case.bus_pos(br.to_bus)
        ys = br.series_admittance()
        y[i, j] -= ys
        y[j, i] -= ys
        y[i, i] += ys + 0.5j * br.shunt_b
        y[j, j] += ys + 0.5j * br.shunt_b
    for k, bus in enumerate(case.buses):
        y[k, k] += complex(bus.shunt_g, bus.shunt_b)
    return y


def _alphas(case: PowerCase, y: np.ndarray, branches: tuple[int, ...]):
    alpha = np.zeros(len(branches))
    mag = np.zeros(len(branches))
    for idx, k in enumerate(branches):
        br = case.branches[k]
        i, j = case.bus_pos(br.from_bus), case.bus_pos(br.to_bus)
        mag[idx] = abs(y[i, j])
        # alpha = arctan(G/B) of the off-diagonal entry; atan2 keeps the
        # branch angle in (-pi/2, pi/2] since B_ij > 0 for real lines
        if mag[idx] > 0.0:
            alpha[idx] = math.atan2(y[i, j].real, y[i, j].imag)
    return alpha, mag


def in_service(case: PowerCase, variant: str = "base",
               scenario: FaultSpec | None = None) -> tuple[int, ...]:
    """Indices of branches carrying flow under the given variant."""
    all_branches = tuple(range(len(case.branches)))
    if variant == "base":
        return all_branches
    if scenario is None:
        raise CaseError(f"variant '{variant}' requires a scenario")
    if scenario.fault_type == "midpoint_ltg":
        k = scenario.faulted_branch
        if k is None or not 0 <= k < len(case.branches):
            raise CaseError(f"scenario references nonexistent branch {k}")
        return tuple(i for i in all_branches if i != k)
    # bus faults clear by removing the fault shunt; topology restores
    return all_branches


def build_admittance(case: PowerCase, variant: str = "base",
                     scenario: FaultSpec | None = None) -> AdmittanceMatrix:
    """Build the bus admittance matrix Y, Y'' (faulted) or Y' (post-fault).

    A midpoint line-to-ground fault removes the faulted branch and grounds
    both end buses through half of the faulted line (series admittance of
    a half-length line is twice the full-line value).  A bus fault adds
    the fault admittance as a shunt at the faulted bus; clearing restores
    the original topology.
    """
    if variant not in ("base", "faulted", "postfault"):
        raise CaseError(f"unknown admittance variant '{variant}'")
    if variant == "base":
        branches = tuple(range(len(case.branches)))
        y = _branch_entries(case, branches)
    else:
        if scenario is None:
            raise CaseError(f"variant '{variant}' requires a scenario")
        if scenario.fault_type == "midpoint_ltg":
            k = scenario.faulted_branch
            if k is None or not 0 <= k < len(case.branches):
                raise CaseError(f"scenario references nonexistent branch {k}")
            branches = tuple(i for i in range(len(case.branches)) if i != k)
            y = _branch_entries(case, branches)
            if variant == "faulted":
                br = case.branches[k]
                i, j = case.bus_pos(br.from_bus), case.bus_pos(br.to_bus)
                half = 2.0 * br.series_admittance()
                y[i, i] += half
                y[j, j] += half
        else:  # bus_ltg
            fpos = case.bus_pos(scenario.fault_bus)
            branches = tuple(range(len(case.branches)))
            y = _branch_entries(case, branches)
            if variant == "faulted":
                y[fpos, fpos] += scenario.fault_admittance
    alpha, mag = _alphas(case, y, branches)
    return AdmittanceMatrix(y=y, branch_alpha=alpha, branch_mag=mag,
                            in_service=branches)
