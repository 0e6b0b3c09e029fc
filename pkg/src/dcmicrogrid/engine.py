"""Fixed-step simulation of the DC bus.

Two execution modes share one world description:

* ``energy``: quasi-static power balance at coarse steps (1 s by default).
  PV sits at its maximum power point, CC nodes draw their commanded
  current and the single CV node absorbs whatever is left. When the CV
  node cannot absorb the residual the bus voltage droops.
* ``transient``: the bus capacitor is integrated explicitly (1 ms by
  default). The CV node runs a PI voltage loop, CC nodes an averaged
  boost inductor with a PI duty loop, and the supercapacitor regulator
  fires outside its deadband.

The loop is single threaded. Other threads talk to it only through
:meth:`Simulation.submit`, which enqueues immutable commands that are
applied at the next step boundary.
"""

from __future__ import annotations

import bisect
from collections import deque
import logging
import math
import time
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .components import (
    BatteryParams,
    BatteryState,
    ConverterRating,
    PvArrayConfig,
    SupercapParams,
    SupercapState,
    battery_current_for_power,
    battery_soc_step,
    battery_terminal_voltage,
    pv_array_power,
    pv_mpp,
    pv_voc_bound,
    size_converter,
    supercap_step,
)
from .control import (
    ControlGains,
    ConverterMode,
    FlexLoadConfig,
    FlexMode,
    MpptState,
    PiConfig,
    PiState,
    ScRegulatorConfig,
    flex_actuation,
    mppt_step,
    pi_step,
    sc_regulator_step,
)

log = logging.getLogger(__name__)

# battery powers below this are treated as zero so that sign(P) == sign(dSoC)
POWER_EPS = 1e-6  # W
SOC_SNAP = 1e-9


class ConfigError(ValueError):
    """The world cannot be simulated as configured."""


class SimulationError(RuntimeError):
    """A step produced an invalid state."""

    def __init__(self, message: str, step: int, t: float):
        super().__init__(f"step {step} (t={t!r} s): {message}")
        self.step = step
        self.t = t


class InjectionError(ValueError):
    """An injection named an unknown parameter or an out-of-range value."""


# --- configuration and state ---------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    mode: str = "energy"
    dt: Optional[float] = None  # defaults to 1 s (energy) or 1 ms (transient)
    duration: float = 86400.0
    realtime_pacing: bool = False
    pace_factor: float = 1.0  # simulated seconds per wall-clock second
    seed: int = 0
    v_grid_setpoint: float = 100.0
    droop_constant: float = 0.05  # V per W of unabsorbed residual
    bus_capacitance: float = 0.01558  # F
    cloud_noise: float = 0.0  # relative std of multiplicative irradiance noise

    def __post_init__(self):
        if self.mode not in ("energy", "transient"):
            raise ConfigError(f"mode must be 'energy' or 'transient', got {self.mode!r}")
        if self.dt is None:
            object.__setattr__(self, "dt", 1.0 if self.mode == "energy" else 1e-3)
        if not self.dt > 0:
            raise ConfigError("dt must be > 0")
        if not self.duration >= self.dt:
            raise ConfigError("duration must be >= dt")
        if self.pace_factor <= 0:
            raise ConfigError("pace_factor must be > 0")
        if self.v_grid_setpoint <= 0 or self.bus_capacitance <= 0 or self.droop_constant < 0:
            raise ConfigError("v_grid_setpoint and bus_capacitance must be > 0, droop_constant >= 0")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))


@dataclass
class BusState:
    v_grid: float
    bus_capacitance: float
    net_current: float = 0.0


@dataclass
class BessNode:
    id: int
    params: BatteryParams
    battery: BatteryState
    converter: ConverterRating = ConverterRating()
    mode: ConverterMode = ConverterMode.idle()
    pi: PiState = PiState()
    # transient-mode inductor current, discharging positive
    i_inductor: float = 0.0

    @property
    def soc(self) -> float:
        return self.battery.soc


@dataclass
class SupercapUnit:
    params: SupercapParams = SupercapParams()
    regulator: ScRegulatorConfig = ScRegulatorConfig()
    enabled: bool = False
    state: Optional[SupercapState] = None
    pi: PiState = PiState()

    def __post_init__(self):
        if self.state is None:
            self.state = SupercapState.initial(self.params)


class Profile:
    """Piecewise-linear time series with constant extrapolation."""

    __slots__ = ("times", "values")

    def __init__(self, times: Sequence[float], values: Sequence[float]):
        if len(times) == 0 or len(times) != len(values):
            raise ValueError("profile needs matching, non-empty times and values")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("profile times must be strictly increasing")
        self.times = [float(t) for t in times]
        self.values = [float(v) for v in values]

    @classmethod
    def constant(cls, value: float) -> "Profile":
        return cls([0.0], [value])

    def __call__(self, t: float) -> float:
        times = self.times
        if t <= times[0]:
            return self.values[0]
        if t >= times[-1]:
            return self.values[-1]
        i = bisect.bisect_right(times, t)
        t0, t1 = times[i - 1], times[i]
        v0, v1 = self.values[i - 1], self.values[i]
        if t == t0:
            return v0
        return v0 + (v1 - v0) * (t - t0) / (t1 - t0)

    def __eq__(self, other):
        return isinstance(other, Profile) and self.times == other.times and self.values == other.values


@dataclass(frozen=True)
class InjectionCommand:
    path: str
    value: float
    apply_at: float = 0.0


@dataclass(frozen=True)
class ModeCommand:
    """Live converter-mode change for one node."""

    node_id: int
    mode: ConverterMode
    apply_at: float = 0.0


@dataclass(frozen=True)
class StepRecord:
    t: float
    v_grid: float
    p_pv: float
    p_nonflex: float
    p_flex: float
    p_sc: float
    p_spill: float
    fault: bool
    p_batt: tuple
    soc: tuple
    mode: tuple

    def columns(self) -> list[str]:
        n = len(self.soc)
        cols = ["t", "v_grid", "p_pv", "p_nonflex", "p_flex", "p_sc", "p_spill", "fault"]
        for i in range(n):
            cols += [f"p_batt_{i}", f"soc_{i}", f"mode_{i}"]
        return cols


@dataclass
class World:
    """Everything the stepping loop owns."""

    config: SimConfig
    pv: PvArrayConfig
    nodes: list[BessNode]
    flex: FlexLoadConfig = FlexLoadConfig()
    irradiance: Profile = field(default_factory=lambda: Profile.constant(1000.0))
    temperature: Profile = field(default_factory=lambda: Profile.constant(298.15))  # K
    load: Profile = field(default_factory=lambda: Profile.constant(0.0))  # W
    supercap: SupercapUnit = field(default_factory=SupercapUnit)
    gains: ControlGains = ControlGains()
    t: float = 0.0
    step_index: int = 0
    bus: Optional[BusState] = None
    mppt: Optional[MpptState] = None
    fault: bool = False
    islanding_fault: bool = False  # explicit permission to run without a CV node
    overrides: dict = field(default_factory=dict)
    events: list = field(default_factory=list)
    _rng: Optional[np.random.Generator] = None
    _mpp_key: tuple = ()
    _mpp_val: float = 0.0
    _saturated: bool = False

    def __post_init__(self):
        if not self.nodes:
            raise ConfigError("at least one node is required")
        ids = [n.id for n in self.nodes]
        if ids != list(range(len(ids))):
            raise ConfigError(f"node ids must be 0..n-1 in order, got {ids}")
        if self.bus is None:
            self.bus = BusState(self.config.v_grid_setpoint, self.config.bus_capacitance)
        if self._rng is None:
            self._rng = np.random.default_rng(self.config.seed)

    # -- environment --------------------------------------------------------

    def environment(self, t: float) -> tuple[float, float]:
        """Irradiance (W/m^2) and cell temperature (K) at time ``t``."""
        g = self.overrides.get("env.irradiance")
        if g is None:
            g = self.irradiance(t)
        temp = self.overrides.get("env.temperature")
        if temp is None:
            temp = self.temperature(t)
        return g, temp

    def nonflex_power(self, t: float) -> float:
        i_nflx = self.overrides.get("load.nonflex_current")
        if i_nflx is not None:
            return self.bus.v_grid * i_nflx
        p = self.overrides.get("load.nonflex_power")
        return self.load(t) if p is None else p

    def mpp_power(self, g: float, temp: float) -> float:
        key = (g, temp)
        if key != self._mpp_key:
            self._mpp_key = key
            self._mpp_val = pv_mpp(g, temp, self.pv)[1]
        return self._mpp_val

    def cv_nodes(self) -> list[int]:
        return [n.id for n in self.nodes if n.mode.kind == "CV"]

    def log_event(self, kind: str, detail: str = ""):
        self.events.append((self.t, kind, detail))
        log.info("t=%.3f %s %s", self.t, kind, detail)


# --- runtime parameter injection ------------------------------------------------

STATIC_PATHS = (
    "env.irradiance",
    "env.temperature",
    "load.nonflex_current",
    "load.nonflex_power",
    "flex.gamma",
    "flex.p_max",
    "grid.v_setpoint",
    "sc.enabled",
)


def injection_paths(n_nodes: int) -> list[str]:
    return list(STATIC_PATHS) + [f"node.{i}.soc" for i in range(n_nodes)]


def registered_paths(world: World) -> list[str]:
    return injection_paths(len(world.nodes))


_BOUNDS = {
    "env.irradiance": (0.0, 2000.0),
    "env.temperature": (1e-9, 400.0),
    "load.nonflex_current": (0.0, math.inf),
    "load.nonflex_power": (0.0, math.inf),
    "flex.gamma": (0.0, math.inf),
    "flex.p_max": (0.0, math.inf),
    "grid.v_setpoint": (1e-9, math.inf),
    "sc.enabled": (0.0, 1.0),
    "soc": (0.0, 1.0),
}


def apply_injection(world: World, cmd: InjectionCommand) -> World:
    """Set a runtime-mutable parameter; it takes effect from the next step.

    Raises:
        InjectionError: unknown path (message lists the valid ones) or a
            value outside the parameter's bounds.
    """
    paths = registered_paths(world)
    if cmd.path not in paths:
        raise InjectionError(f"unknown parameter {cmd.path!r}; valid paths: {', '.join(paths)}")
    value = float(cmd.value)
    key = "soc" if cmd.path.startswith("node.") else cmd.path
    lo, hi = _BOUNDS[key]
    if not lo <= value <= hi:
        raise InjectionError(f"{cmd.path}={value!r} outside [{lo}, {hi}]")

    if cmd.path.startswith("node."):
        node = world.nodes[int(cmd.path.split(".")[1])]
        node.battery = replace(node.battery, soc=value)
    elif cmd.path == "flex.gamma":
        if world.flex.mode is FlexMode.FULL and value != 0.0:
            raise InjectionError("flex.gamma must stay 0 in full flexible-load mode")
        world.flex = replace(world.flex, gamma=value)
    elif cmd.path == "flex.p_max":
        world.flex = replace(world.flex, p_max=value)
    elif cmd.path == "grid.v_setpoint":
        world.config = replace(world.config, v_grid_setpoint=value)
        for n in world.nodes:
            if n.mode.kind == "CV":
                n.mode = ConverterMode.cv(value)
        world.supercap.regulator = replace(world.supercap.regulator, v_ref=value)
    elif cmd.path == "sc.enabled":
        world.supercap.enabled = value >= 0.5
    else:
        if cmd.path == "load.nonflex_current":
            world.overrides.pop("load.nonflex_power", None)
        elif cmd.path == "load.nonflex_power":
            world.overrides.pop("load.nonflex_current", None)
        world.overrides[cmd.path] = value
    return world


def apply_mode(world: World, node_id: int, mode: ConverterMode) -> World:
    """Switch one node's converter mode.

    A node taking CV demotes the previous CV holder to idle so that at most
    one node regulates the bus.
    """
    if not 0 <= node_id < len(world.nodes):
        raise InjectionError(f"unknown node {node_id}; nodes are 0..{len(world.nodes) - 1}")
    node = world.nodes[node_id]
    if mode == node.mode:
        return world
    if mode.kind == "CV":
        for other in world.nodes:
            if other.id != node_id and other.mode.kind == "CV":
                other.mode = ConverterMode.idle()
                other.pi = PiState()
        # bumpless hand-over: start from the current the node already carries
        node.pi = PiState(_bus_current_of(world, node))
    elif node.mode.kind == "CV":
        node.pi = PiState()
    node.mode = mode
    return world


def _bus_current_of(world: World, node: BessNode) -> float:
    p_batt = node.battery.current * node.battery.terminal_voltage
    return -p_batt / world.bus.v_grid if world.bus.v_grid > 0 else 0.0


# --- CV designation -------------------------------------------------------------

def select_cv(current_cv: Optional[int], candidates: Iterable[tuple], need: int) -> tuple[Optional[int], bool]:
    """Choose the node that should hold constant-voltage mode.

    Args:
        current_cv: id of the present CV node, or None.
        candidates: (id, soc, soc_min, soc_max) for every online node.
        need: +1 when the CV node must absorb power (charge), -1 when it
            must supply power, 0 when balanced.

    Returns:
        (cv_id, fault). ``fault`` is True when the CV node is exhausted in
        the needed direction and no other node can take over; the
        exhausted node keeps the designation.
    """
    cands = sorted(candidates)
    if not cands:
        return None, True

    def headroom(c):
        _, soc, lo, hi = c
        if need > 0:
            return hi - soc
        if need < 0:
            return soc - lo
        return min(hi - soc, soc - lo)

    by_id = {c[0]: c for c in cands}
    if current_cv in by_id:
        _, soc, lo, hi = by_id[current_cv]
        exhausted = (need > 0 and soc >= hi) or (need < 0 and soc <= lo)
        if not exhausted:
            return current_cv, False
    others = [c for c in cands if c[0] != current_cv and headroom(c) > 0]
    if not others:
        if current_cv in by_id:
            return current_cv, True
        # nobody has headroom; still pick someone so the bus has a regulator
        return max(cands, key=lambda c: (headroom(c), -c[0]))[0], need != 0
    # most headroom wins, lowest id breaks ties
    return max(others, key=lambda c: (headroom(c), -c[0]))[0], False


def designate_cv(world: World, need: int) -> World:
    """Hand CV mode over when the present holder hits its SoC limit.

    Sets ``world.fault`` (islanding) when no node can take the needed
    direction.
    """
    cvs = world.cv_nodes()
    current = cvs[0] if cvs else None
    if current is not None:
        holder = world.nodes[current]
        p = holder.params
        if not ((need > 0 and holder.soc >= p.soc_max) or (need < 0 and holder.soc <= p.soc_min)):
            world.fault = False  # the holder keeps CV, as select_cv would decide
            return world
    candidates = [(n.id, n.soc, n.params.soc_min, n.params.soc_max) for n in world.nodes]
    new_cv, fault = select_cv(current, candidates, need)
    if new_cv is not None and new_cv != current:
        apply_mode(world, new_cv, ConverterMode.cv(world.config.v_grid_setpoint))
        world.log_event("cv_handover", f"{current} -> {new_cv}")
    if fault and not world.fault:
        world.log_event("islanding_fault", f"cv={new_cv} need={need}")
    world.fault = fault
    return world


# --- energy mode ----------------------------------------------------------------

def _power_window(node: BessNode, dt: float) -> tuple[float, float]:
    """Battery-side power range that keeps SoC inside [soc_min, soc_max]
    at the end of a step of length ``dt`` and respects the converter rating."""
    p = node.params
    amp_seconds = p.capacity * 3600.0 / dt
    rating = node.converter.power_rating
    i_hi = min(max(p.soc_max - node.soc, 0.0) * amp_seconds, _rated_current(p, rating))
    i_lo = max(-max(node.soc - p.soc_min, 0.0) * amp_seconds, _rated_current(p, -rating))
    # power is monotone in current between the two rated currents
    return i_lo * battery_terminal_voltage(p, i_lo), i_hi * battery_terminal_voltage(p, i_hi)


@lru_cache(maxsize=64)
def _rated_current(params: BatteryParams, power: float) -> float:
    return battery_current_for_power(params, power)


def _cc_power(node: BessNode, dt: float) -> float:
    """Battery-side power drawn by a CC node after rating and SoC limits."""
    i = node.mode.signed_current
    if i == 0.0:
        return 0.0
    lo, hi = _power_window(node, dt)
    return min(max(i * battery_terminal_voltage(node.params, i), lo), hi)


def _advance_battery(node: BessNode, power: float, dt: float) -> float:
    if abs(power) < POWER_EPS:
        power = 0.0
        if node.battery.current == 0.0:
            return power  # idle and already at rest: nothing changes
    p = node.params
    current = battery_current_for_power(p, power)
    state = battery_soc_step(node.battery, current, dt, p)
    # a step sized to land on a limit misses it by rounding only; land exactly
    # so that SoC >= soc_max comparisons downstream see the node as full
    if power > 0.0 and abs(state.soc - p.soc_max) < SOC_SNAP and node.soc <= p.soc_max:
        state = replace(state, soc=p.soc_max)
    elif power < 0.0 and abs(state.soc - p.soc_min) < SOC_SNAP and node.soc >= p.soc_min:
        state = replace(state, soc=p.soc_min)
    node.battery = state
    return power


def _midstep_handover(world: World, cv: BessNode, rest: float, powers: list, dt: float) -> float:
    """Pass the part of the residual the CV node cannot take to another node.

    Called when the CV node reaches an SoC limit within the step. The node
    that would be chosen once the old holder sits at its limit becomes CV
    now and absorbs ``rest`` (its CC power, if any, is released). Returns
    the extra power absorbed.
    """
    p = cv.params
    need = 1 if rest > 0 else -1
    at_limit = p.soc_max if need > 0 else p.soc_min
    candidates = [(n.id, at_limit if n is cv else n.soc, n.params.soc_min, n.params.soc_max) for n in world.nodes]
    new_id, _ = select_cv(cv.id, candidates, need)
    if new_id is None or new_id == cv.id:
        return 0.0
    node = world.nodes[new_id]
    released = powers[new_id]
    lo, hi = _power_window(node, dt)
    take = min(max(rest + released, lo), hi)
    powers[new_id] = take
    apply_mode(world, new_id, ConverterMode.cv(world.config.v_grid_setpoint))
    world.log_event("cv_handover", f"{cv.id} -> {new_id}")
    return take - released


def step_energy(world: World, dt: Optional[float] = None) -> tuple[World, StepRecord]:
    """Advance the quasi-static balance by one step (in place).

    Returns:
        The same world object, advanced, and the record for the interval
        that started at the pre-step time.
    """
    cfg = world.config
    dt = cfg.dt if dt is None else dt
    t = world.t
    if not world.cv_nodes() and not world.islanding_fault:
        designate_cv(world, 0)
        if not world.cv_nodes():
            raise ConfigError("no node holds CV mode and no islanding fault is flagged")

    g, temp = world.environment(t)
    if cfg.cloud_noise > 0.0:
        g = max(0.0, g * (1.0 + cfg.cloud_noise * world._rng.standard_normal()))
    p_pv = world.mpp_power(g, temp) if g > 0 else 0.0
    p_nonflex = world.nonflex_power(t)
    if not math.isfinite(p_pv + p_nonflex):
        raise SimulationError(f"non-finite input: p_pv={p_pv!r} p_nonflex={p_nonflex!r}", world.step_index, t)
    p_flex = flex_actuation(p_pv, p_nonflex, world.flex)

    def residual():
        p_cc = {n.id: _cc_power(n, dt) for n in world.nodes if n.mode.kind == "CC"}
        return p_pv - p_nonflex - p_flex - math.fsum(p_cc.values()), p_cc

    r, p_cc = residual()
    before = world.cv_nodes()
    designate_cv(world, (r > POWER_EPS) - (r < -POWER_EPS))
    cvs = world.cv_nodes()
    if cvs != before:
        r, p_cc = residual()

    powers = [0.0] * len(world.nodes)
    for node_id, p in p_cc.items():
        powers[node_id] = p
    p_cv = 0.0
    if cvs:
        cv = world.nodes[cvs[0]]
        lo, hi = _power_window(cv, dt)
        p_cv = min(max(r, lo), hi)
        powers[cv.id] = p_cv
        if abs(r - p_cv) >= POWER_EPS:
            p_cv += _midstep_handover(world, cv, r - p_cv, powers, dt)
    excess = r - p_cv
    if abs(excess) < POWER_EPS:
        excess = 0.0
    saturated = excess != 0.0
    if saturated != world._saturated:
        world.log_event("cv_saturated" if saturated else "cv_recovered", f"excess={excess:.3f} W")
        world._saturated = saturated
    v_grid = max(cfg.v_grid_setpoint + cfg.droop_constant * excess, 0.0)

    for node, p in zip(world.nodes, powers):
        powers[node.id] = _advance_battery(node, p, dt)

    world.bus.v_grid = v_grid
    world.bus.net_current = 0.0
    rec = StepRecord(
        t=t, v_grid=v_grid, p_pv=p_pv, p_nonflex=p_nonflex, p_flex=p_flex, p_sc=0.0,
        p_spill=excess, fault=world.fault,
        p_batt=tuple(powers), soc=tuple(n.soc for n in world.nodes),
        mode=tuple(n.mode.label for n in world.nodes),
    )
    _check_finite(world, rec)
    world.t = t + dt
    world.step_index += 1
    return world, rec


def _check_finite(world: World, rec: StepRecord):
    # a sum is finite only if every term is
    total = rec.v_grid + rec.p_pv + rec.p_nonflex + rec.p_flex + rec.p_sc + rec.p_spill + sum(rec.p_batt) + sum(rec.soc)
    if not math.isfinite(total):
        raise SimulationError("non-finite value in step record", world.step_index, world.t)


# --- transient mode -------------------------------------------------------------

MAX_DUTY = 0.95


def init_transient(world: World) -> World:
    """Put controllers at the steady state of the t=0 operating point."""
    g, temp = world.environment(world.t)
    v_mpp = pv_mpp(g, temp, world.pv)[0] if g > 0 else 0.0
    v_max = pv_voc_bound(max(g, 1.0), temp, world.pv)
    world.mppt = MpptState(v_ref=v_mpp, step_size=world.gains.mppt_step, v_max=v_max)
    v = world.bus.v_grid
    p_pv = max(pv_array_power(g, temp, v_mpp, world.pv), 0.0) if g > 0 else 0.0
    p_nonflex = world.nonflex_power(world.t)
    p_flex = flex_actuation(p_pv, p_nonflex, world.flex)
    into_bus = p_pv - p_nonflex - p_flex
    for n in world.nodes:
        if n.mode.kind == "CC":
            n.i_inductor = -n.mode.signed_current
            into_bus -= n.mode.signed_current * battery_terminal_voltage(n.params, n.mode.signed_current)
            n.pi = PiState()
    if not world.cv_nodes():
        designate_cv(world, 0)
    for n in world.nodes:
        if n.mode.kind == "CV":
            n.pi = PiState(-into_bus / v)
    return world


def step_transient(world: World, dt: Optional[float] = None) -> tuple[World, StepRecord]:
    """Integrate the bus capacitor over one small step (in place)."""
    cfg = world.config
    dt = cfg.dt if dt is None else dt
    t = world.t
    if world.bus.bus_capacitance <= 0:
        raise ConfigError("transient mode needs bus_capacitance > 0")
    if world.mppt is None:
        init_transient(world)
    if not world.cv_nodes() and not world.islanding_fault:
        raise ConfigError("no node holds CV mode and no islanding fault is flagged")
    v = world.bus.v_grid
    gains = world.gains

    g, temp = world.environment(t)
    if cfg.cloud_noise > 0.0:
        g = max(0.0, g * (1.0 + cfg.cloud_noise * world._rng.standard_normal()))
    mppt = world.mppt
    p_pv = max(pv_array_power(g, temp, mppt.v_ref, world.pv), 0.0) if g > 0 else 0.0
    period = max(1, int(round(gains.mppt_period / dt)))
    if world.step_index % period == 0:
        world.mppt = mppt_step(mppt, mppt.v_ref, p_pv)
    p_nonflex = world.nonflex_power(t)
    if not math.isfinite(p_pv + p_nonflex):
        raise SimulationError(f"non-finite input: p_pv={p_pv!r} p_nonflex={p_nonflex!r}", world.step_index, t)
    p_flex = flex_actuation(p_pv, p_nonflex, world.flex)
    i_net = (p_pv - p_nonflex - p_flex) / v if v > 0 else 0.0

    powers = [0.0] * len(world.nodes)
    currents = [0.0] * len(world.nodes)
    cvs = world.cv_nodes()
    need = 0
    for n in world.nodes:
        i_max = n.converter.i_out
        if n.mode.kind == "CV":
            pic = PiConfig(gains.cv_kp, gains.cv_ki, -i_max, i_max)
            n.pi, i_bus = pi_step(pic, n.pi, n.mode.setpoint - v, dt)
            p_batt = -i_bus * v
            if (p_batt > 0 and n.soc >= n.params.soc_max) or (p_batt < 0 and n.soc <= n.params.soc_min):
                need = 1 if p_batt > 0 else -1
                i_bus, p_batt = 0.0, 0.0
            currents[n.id] = battery_current_for_power(n.params, p_batt)
            powers[n.id] = p_batt
            i_net += i_bus
        elif n.mode.kind == "CC":
            # averaged synchronous boost: L di/dt = V_B - (1 - d) v
            i_ref = -n.mode.signed_current
            if (i_ref < 0 and n.soc >= n.params.soc_max) or (i_ref > 0 and n.soc <= n.params.soc_min):
                i_ref = 0.0
            v_b = battery_terminal_voltage(n.params, -n.i_inductor)
            d_ff = 1.0 - v_b / v if v > 0 else 0.0
            pic = PiConfig(gains.cc_kp, gains.cc_ki, -1.0, 1.0)
            n.pi, du = pi_step(pic, n.pi, i_ref - n.i_inductor, dt)
            duty = min(max(d_ff + du, 0.0), MAX_DUTY)
            inductance = _inductance(n.converter)
            n.i_inductor += dt * (v_b - (1.0 - duty) * v) / inductance
            n.i_inductor = min(max(n.i_inductor, -i_max), i_max)
            currents[n.id] = -n.i_inductor
            powers[n.id] = -n.i_inductor * battery_terminal_voltage(n.params, -n.i_inductor)
            i_net += (1.0 - duty) * n.i_inductor
    if need and cvs:
        designate_cv(world, need)

    sc = world.supercap
    p_sc = 0.0
    if sc.enabled:
        sc.pi, i_sc = sc_regulator_step(sc.regulator, sc.pi, v, dt)
        if i_sc > 0 and sc.state.stored_voltage <= 0.0:
            i_sc = 0.0
        stored = sc.state.stored_voltage
        i_cell = i_sc * v / stored if stored > 0 else 0.0
        sc.state = supercap_step(sc.state, i_cell, dt, sc.params)
        p_sc = i_sc * v
        i_net += i_sc

    for n, i in zip(world.nodes, currents):
        n.battery = battery_soc_step(n.battery, i, dt, n.params)

    world.bus.net_current = i_net
    world.bus.v_grid = max(v + dt * i_net / world.bus.bus_capacitance, 1e-6)
    rec = StepRecord(
        t=t, v_grid=world.bus.v_grid, p_pv=p_pv, p_nonflex=p_nonflex, p_flex=p_flex, p_sc=p_sc,
        p_spill=0.0, fault=world.fault,
        p_batt=tuple(powers), soc=tuple(n.soc for n in world.nodes),
        mode=tuple(n.mode.label for n in world.nodes),
    )
    _check_finite(world, rec)
    world.t = t + dt
    world.step_index += 1
    return world, rec


@lru_cache(maxsize=None)
def _inductance(rating: ConverterRating) -> float:
    return size_converter(rating).inductance


# --- loop -----------------------------------------------------------------------

StatusHook = Callable[[World], Optional[Iterable]]


class Simulation:
    """Owns a world and steps it.

    Args:
        world: initial world, stepped in place.
        injections: scheduled parameter changes, applied at the first step
            boundary with ``t >= apply_at``.
        controller: called every ``status_interval`` simulated seconds
            after a step; may return mode or injection commands which are
            applied before the next step.
        on_record: called with every StepRecord (e.g. a trace writer).
    """

    def __init__(
        self,
        world: World,
        injections: Sequence = (),
        controller: Optional[StatusHook] = None,
        status_interval: float = 1.0,
        on_record: Optional[Callable[[StepRecord], None]] = None,
    ):
        self.world = world
        self._scheduled = sorted(injections, key=lambda c: c.apply_at)
        self._sched_pos = 0
        self.controller = controller
        self.status_every = max(1, int(round(status_interval / world.config.dt)))
        self.on_record = on_record
        self.inbox: deque = deque()  # append/popleft are atomic
        self._stop = False

    def submit(self, cmd, reply: Optional[Callable[[bool, str], None]] = None):
        """Thread-safe: queue a command for the next step boundary."""
        self.inbox.append((cmd, reply))

    def stop(self):
        self._stop = True

    def _apply(self, cmd):
        if isinstance(cmd, ModeCommand):
            apply_mode(self.world, cmd.node_id, cmd.mode)
        else:
            apply_injection(self.world, cmd)

    def _drain(self):
        world = self.world
        while self._sched_pos < len(self._scheduled) and self._scheduled[self._sched_pos].apply_at <= world.t + 1e-12:
            cmd = self._scheduled[self._sched_pos]
            self._sched_pos += 1
            self._apply(cmd)
            world.log_event("injection", f"{getattr(cmd, 'path', cmd)}")
        inbox = self.inbox
        while inbox:
            cmd, reply = inbox.popleft()
            try:
                self._apply(cmd)
            except (InjectionError, ValueError) as exc:
                if reply:
                    reply(False, str(exc))
            else:
                if reply:
                    reply(True, "")

    def run(self, n_steps: Optional[int] = None) -> list[StepRecord]:
        world = self.world
        cfg = world.config
        step = step_energy if cfg.mode == "energy" else step_transient
        n_steps = cfg.n_steps if n_steps is None else n_steps
        trace = []
        wall0 = time.perf_counter()
        sim0 = world.t
        for k in range(n_steps):
            if self._stop:
                break
            self._drain()
            try:
                _, rec = step(world)
            except SimulationError:
                raise
            except (ConfigError, ArithmeticError) as exc:
                raise SimulationError(f"{exc} (wall {time.perf_counter() - wall0:.3f} s)",
                                      world.step_index, world.t) from exc
            trace.append(rec)
            if self.on_record is not None:
                self.on_record(rec)
            if self.controller is not None and world.step_index % self.status_every == 0:
                for cmd in self.controller(world) or ():
                    self._apply(cmd)
            if cfg.realtime_pacing:
                target = wall0 + (world.t - sim0) / cfg.pace_factor
                delay = target - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
        return trace


def run(world: World, injections: Sequence = (), controller: Optional[StatusHook] = None,
        status_interval: float = 1.0) -> list[StepRecord]:
    """Run a world for its configured duration and return the trace."""
    return Simulation(world, injections, controller, status_interval).run()


def energy_balance_residual(rec: StepRecord) -> float:
    """p_pv - loads - net battery charging - spill; zero up to rounding."""
    return rec.p_pv - rec.p_nonflex - rec.p_flex - math.fsum(rec.p_batt) - rec.p_spill
