"""Scenario files, input profiles, trace files and summary metrics.

Scenario files are INI style. Every key has a default except the two
profile paths; unknown sections or keys are rejected so that typos never
pass silently. See ``SCENARIO_KEYS`` for the full table.
"""

from __future__ import annotations

import configparser
import csv
import io
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .components import (
    STC_IRRADIANCE,
    STC_TEMPERATURE,
    BatteryParams,
    BatteryState,
    ConverterRating,
    PvArrayConfig,
    PvCellParams,
    SupercapParams,
    _calibrate_efficiency,
    battery_terminal_voltage,
    calibrate_array,
)
from .control import ControlGains, ConverterMode, FlexLoadConfig, FlexMode, PiConfig, ScRegulatorConfig
from .engine import (BessNode, InjectionCommand, InjectionError, Profile, SimConfig, StepRecord, SupercapUnit, World,
                     apply_injection, injection_paths)

KELVIN = 273.15


class ProfileError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class ScenarioError(ValueError):
    """A scenario file problem located by ``section.key``."""

    def __init__(self, where: str, message: str):
        super().__init__(f"{where}: {message}")
        self.where = where


# --- profiles -------------------------------------------------------------------

@dataclass(frozen=True)
class LoadProfile:
    times: tuple
    power: tuple

    def at(self, t: float) -> float:
        return self.to_profile()(t)

    def to_profile(self) -> Profile:
        return Profile(self.times, self.power)


@dataclass(frozen=True)
class EnvProfile:
    times: tuple
    irradiance: tuple
    temp_c: tuple

    def at(self, t: float) -> tuple[float, float]:
        """Irradiance (W/m^2) and temperature (deg C) at ``t``."""
        return Profile(self.times, self.irradiance)(t), Profile(self.times, self.temp_c)(t)

    def irradiance_profile(self) -> Profile:
        return Profile(self.times, self.irradiance)

    def temperature_profile_k(self) -> Profile:
        return Profile(self.times, [c + KELVIN for c in self.temp_c])


def _read_columns(path, header: Sequence[str], nonneg: Sequence[int]):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ProfileError(path, 0, f"cannot read: {exc.strerror or exc}") from None
    rows = list(csv.reader(io.StringIO(text)))
    # skip blank and comment lines but keep line numbers
    numbered = [(i + 1, r) for i, r in enumerate(rows) if r and not r[0].lstrip().startswith("#")]
    if not numbered:
        raise ProfileError(path, 1, "empty file")
    line, head = numbered[0]
    if [h.strip() for h in head] != list(header):
        raise ProfileError(path, line, f"expected header {','.join(header)!r}, got {','.join(head)!r}")
    data = numbered[1:]
    if not data:
        raise ProfileError(path, line + 1, "no data rows")
    cols = [[] for _ in header]
    prev_t = None
    for line, row in data:
        if len(row) != len(header):
            raise ProfileError(path, line, f"expected {len(header)} fields, got {len(row)}")
        try:
            vals = [float(x) for x in row]
        except ValueError:
            raise ProfileError(path, line, f"non-numeric field in {row!r}") from None
        if not all(math.isfinite(v) for v in vals):
            raise ProfileError(path, line, "non-finite value")
        if prev_t is not None and vals[0] <= prev_t:
            raise ProfileError(path, line, f"time {vals[0]!r} is not after {prev_t!r}")
        for k in nonneg:
            if vals[k] < 0:
                raise ProfileError(path, line, f"{header[k]} must be >= 0, got {vals[k]!r}")
        prev_t = vals[0]
        for c, v in zip(cols, vals):
            c.append(v)
    return [tuple(c) for c in cols]


def parse_load_csv(path) -> LoadProfile:
    """Read a ``time_s,power_w`` load profile."""
    t, p = _read_columns(path, ("time_s", "power_w"), nonneg=(1,))
    return LoadProfile(t, p)


def parse_env_csv(path) -> EnvProfile:
    """Read a ``time_s,irradiance_wm2,temp_c`` environment profile."""
    t, g, c = _read_columns(path, ("time_s", "irradiance_wm2", "temp_c"), nonneg=(1,))
    return EnvProfile(t, g, c)


def write_load_csv(profile: LoadProfile, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "power_w"])
        for t, p in zip(profile.times, profile.power):
            w.writerow([f"{t:g}", f"{p:.6g}"])


def write_env_csv(profile: EnvProfile, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "irradiance_wm2", "temp_c"])
        for t, g, c in zip(profile.times, profile.irradiance, profile.temp_c):
            w.writerow([f"{t:g}", f"{g:.6g}", f"{c:.6g}"])


def clear_day_env(step: float = 600.0, peak: float = 1000.0, sunrise: float = 6.0, sunset: float = 18.0,
                  t_min: float = 12.0, t_max: float = 30.0) -> EnvProfile:
    """Single-peaked clear-sky day: zero outside [sunrise, sunset], sine
    squared bump peaking at solar noon."""
    t = np.arange(0.0, 86400.0 + step, step)
    hours = t / 3600.0
    x = np.clip((hours - sunrise) / (sunset - sunrise), 0.0, 1.0)
    g = peak * np.sin(np.pi * x) ** 2
    g[(hours <= sunrise) | (hours >= sunset)] = 0.0
    # temperature lags the sun by ~2 h
    temp = t_min + (t_max - t_min) * np.sin(np.pi * np.clip((hours - 6.0) / 16.0, 0, 1)) ** 2
    return EnvProfile(tuple(t), tuple(np.round(g, 3)), tuple(np.round(temp, 3)))


def _daily_shape(hourly: Sequence[float], scale: float) -> LoadProfile:
    h = np.asarray(hourly, dtype=float)
    h = np.append(h, h[0])  # close the day
    t = np.arange(len(h)) * 3600.0
    return LoadProfile(tuple(t), tuple(np.round(h / h.max() * scale, 3)))


# Normalised hourly shapes: a winter weekday with morning and evening
# peaks, and a low-demand weekend day with a flat midday.
_NORMAL_DAY = [0.72, 0.69, 0.67, 0.66, 0.67, 0.72, 0.82, 0.91, 0.95, 0.94, 0.92, 0.90,
               0.88, 0.87, 0.86, 0.87, 0.91, 0.98, 1.00, 0.98, 0.95, 0.90, 0.83, 0.77]
_LOW_NETLOAD_DAY = [0.80, 0.76, 0.73, 0.71, 0.70, 0.71, 0.74, 0.77, 0.79, 0.79, 0.78, 0.77,
                    0.76, 0.75, 0.75, 0.76, 0.79, 0.85, 0.93, 1.00, 0.98, 0.94, 0.89, 0.84]


def load_normal_day(peak: float = 2500.0) -> LoadProfile:
    return _daily_shape(_NORMAL_DAY, peak)


def load_low_netload_day(peak: float = 2000.0) -> LoadProfile:
    return _daily_shape(_LOW_NETLOAD_DAY, peak)


# --- scenario files ---------------------------------------------------------------

AUTO = "auto"

# section -> key -> (type, default, description)
SCENARIO_KEYS = {
    "sim": {
        "mode": (str, "energy", "energy (quasi-static, 1 s) or transient (bus ODE, 1 ms)"),
        "dt": (float, AUTO, "step in seconds; auto = 1 (energy) or 0.001 (transient)"),
        "duration": (float, 86400.0, "simulated seconds"),
        "realtime_pacing": (bool, False, "sleep so simulated time tracks wall-clock time"),
        "pace_factor": (float, 1.0, "simulated seconds per wall-clock second when pacing"),
        "seed": (int, 0, "seed for the irradiance noise generator"),
        "v_grid_setpoint": (float, 100.0, "bus voltage setpoint, V"),
        "droop_constant": (float, 0.05, "V of bus droop per W the CV node cannot absorb"),
        "bus_capacitance": (float, 0.01558, "bus capacitance for transient mode, F"),
        "cloud_noise": (float, 0.0, "relative std of multiplicative irradiance noise"),
    },
    "pv": {
        "series_count": (int, 3, "modules in series per string"),
        "parallel_count": (int, 10, "strings in parallel"),
        "cells_per_module": (int, AUTO, "cells in series per module; auto = calibrated"),
        "rated_power": (float, 5000.0, "array MPP power at STC, W"),
        "rated_voltage": (float, 69.0, "array MPP voltage at STC, V"),
        "area_cell": (float, 0.0243, "cell area, m^2"),
        "efficiency": (float, AUTO, "cell efficiency; auto = calibrated to rated_power"),
        "sat_current": (float, 1e-9, "diode saturation current per cell, A"),
        "ideality": (float, 1.3, "diode ideality factor"),
        "shunt_resistance": (float, 500.0, "cell shunt resistance, ohm"),
        "mppt_step": (float, 0.5, "P&O perturbation, V"),
        "mppt_period": (float, 0.01, "P&O update period in transient mode, s"),
    },
    "nodes": {
        "count": (int, 4, "number of battery nodes"),
        "cv_node": (int, 0, "node holding CV mode at t=0"),
        "initial_soc": ("floats", [0.5], "initial SoC, one value or one per node"),
        "open_circuit_voltage": (float, 69.0, "battery open-circuit voltage, V"),
        "internal_resistance": (float, 0.05, "battery internal resistance, ohm"),
        "capacity": (float, 100.0, "battery capacity, Ah"),
        "soc_min": (float, 0.2, "lowest SoC the fleet may use"),
        "soc_max": (float, 0.9, "highest SoC the fleet may reach"),
        "converter_v_in": (float, 69.0, "converter input voltage, V"),
        "converter_v_out": (float, 100.0, "converter output voltage, V"),
        "converter_i_out": (float, 50.0, "converter output current, A"),
        "switching_freq": (float, 1000.0, "converter switching frequency, Hz"),
        "power_rating": (float, 5000.0, "converter rating, W"),
    },
    "control": {
        "cv_kp": (float, 0.5, "CV voltage loop proportional gain, A/V"),
        "cv_ki": (float, 20.0, "CV voltage loop integral gain, A/(V s)"),
        "cc_kp": (float, 0.02, "CC current loop proportional gain, duty/A"),
        "cc_ki": (float, 5.0, "CC current loop integral gain, duty/(A s)"),
    },
    "supercap": {
        "enabled": (bool, False, "attach the supercapacitor regulator"),
        "capacitance": (float, 100.0, "F"),
        "esr": (float, 0.01, "equivalent series resistance, ohm"),
        "v_init": (float, 48.0, "initial capacitor voltage, V"),
        "deadband": (float, 1.0, "regulator deadband around the setpoint, V"),
        "kp": (float, 10.0, "regulator proportional gain, A/V"),
        "ki": (float, 100.0, "regulator integral gain, A/(V s)"),
        "i_max": (float, 100.0, "regulator current limit, A"),
        "settle_window": (float, 5.0, "time allowed to re-enter the deadband after a disturbance, s"),
    },
    "flex": {
        "mode": (str, "disabled", "disabled, full or partial"),
        "gamma": (float, 0.0, "PV power withheld from flexible loads, W"),
        "p_max": (float, 5000.0, "flexible load rating, W"),
    },
    "profiles": {
        "env": ("path", None, "environment CSV (time_s,irradiance_wm2,temp_c)"),
        "load": ("path", None, "non-flexible load CSV (time_s,power_w)"),
    },
    "interchange": {
        "enabled": (bool, True, "run the orchestrator during the scenario"),
        "v_max": (float, 110.0, "highest voltage a command may imply, V"),
        "i_max": (float, 50.0, "largest deal current, A"),
        "charge_current": (float, AUTO, "deal current; auto = surplus / V_B"),
        "deal_duration": (float, 900.0, "deal length before renewal, s"),
        "min_surplus": (float, 50.0, "surplus needed to open a charging deal, W"),
        "status_interval": (float, 1.0, "simulated seconds between status rounds"),
        "host": (str, "127.0.0.1", "address the node agents bind"),
        "base_port": (int, 44380, "node i listens on base_port + i; 0 picks free ports"),
        "command_port": (int, 44390, "port accepting SET frames from the inject command; 0 picks one"),
    },
}


@dataclass
class InterchangeConfig:
    enabled: bool = True
    v_max: float = 110.0
    i_max: float = 50.0
    charge_current: Optional[float] = None
    deal_duration: float = 900.0
    min_surplus: float = 50.0
    status_interval: float = 1.0
    host: str = "127.0.0.1"
    base_port: int = 44380
    command_port: int = 44390


@dataclass
class ScenarioConfig:
    sim: SimConfig
    pv: PvArrayConfig
    nodes: list  # BessNode initialisers
    cv_node: int
    supercap: SupercapUnit
    settle_window: float
    flex: FlexLoadConfig
    gains: ControlGains
    env: EnvProfile
    load: LoadProfile
    injections: list = field(default_factory=list)
    interchange: InterchangeConfig = field(default_factory=InterchangeConfig)
    source: Optional[str] = None
    env_path: Optional[str] = None
    load_path: Optional[str] = None


def _convert(section: str, key: str, kind, raw: str):
    where = f"{section}.{key}"
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            val = float(raw)
            if not math.isfinite(val):
                raise ValueError(raw)
            return val
        if kind == "floats":
            return [float(x) for x in raw.replace(",", " ").split()]
        return raw
    except ValueError:
        name = kind if isinstance(kind, str) else kind.__name__
        raise ScenarioError(where, f"expected {name}, got {raw!r}") from None


def _collect(cp: configparser.ConfigParser, overrides: dict) -> dict:
    values = {s: {} for s in SCENARIO_KEYS}
    for section in cp.sections():
        if section == "injections":
            continue
        if section not in SCENARIO_KEYS:
            raise ScenarioError(section, f"unknown section; valid: {', '.join(SCENARIO_KEYS)}, injections")
        for key, raw in cp.items(section):
            if key not in SCENARIO_KEYS[section]:
                raise ScenarioError(f"{section}.{key}", "unknown key")
            values[section][key] = raw
    for dotted, raw in overrides.items():
        section, _, key = dotted.partition(".")
        if section not in SCENARIO_KEYS or key not in SCENARIO_KEYS[section]:
            raise ScenarioError(dotted, "unknown override")
        values[section][key] = str(raw)
    out = {}
    for section, keys in SCENARIO_KEYS.items():
        out[section] = {}
        for key, (kind, default, _) in keys.items():
            raw = values[section].get(key)
            if raw is None or raw.strip().lower() == AUTO and default == AUTO:
                out[section][key] = default
            else:
                out[section][key] = _convert(section, key, kind, raw)
    return out


def _parse_injections(cp) -> list:
    cmds = []
    if not cp.has_section("injections"):
        return cmds
    for label, raw in cp.items("injections"):
        parts = raw.split()
        if len(parts) != 3:
            raise ScenarioError(f"injections.{label}", "expected '<time_s> <path> <value>'")
        try:
            t, value = float(parts[0]), float(parts[2])
        except ValueError:
            raise ScenarioError(f"injections.{label}", f"non-numeric time or value in {raw!r}") from None
        cmds.append((label, InjectionCommand(parts[1], value, t)))
    return cmds


def parse_scenario(path, overrides: Optional[dict] = None) -> ScenarioConfig:
    """Load and validate a scenario file.

    ``overrides`` maps ``section.key`` to a raw string value and is applied
    on top of the file.

    Raises:
        ScenarioError: located at ``section.key`` for every rejection.
    """
    path = Path(path)
    if not path.exists() and path.with_suffix(".ini").exists():
        path = path.with_suffix(".ini")
    if not path.is_file():
        raise ScenarioError(str(path), "scenario file not found")
    cp = configparser.ConfigParser(interpolation=None, strict=True, empty_lines_in_values=False)
    cp.optionxform = str
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.DuplicateOptionError as exc:
        raise ScenarioError(f"{exc.section}.{exc.option}", f"duplicate key (line {exc.lineno})") from None
    except configparser.DuplicateSectionError as exc:
        raise ScenarioError(exc.section, f"duplicate section (line {exc.lineno})") from None
    except configparser.Error as exc:
        raise ScenarioError(str(path), str(exc).splitlines()[0]) from None
    v = _collect(cp, overrides or {})
    return _build(v, _parse_injections(cp), path)


def _check(cond: bool, where: str, message: str):
    if not cond:
        raise ScenarioError(where, message)


def _build(v: dict, injections: list, path: Path) -> ScenarioConfig:
    base = path.parent
    sim_v = v["sim"]
    try:
        sim = SimConfig(
            mode=sim_v["mode"], dt=None if sim_v["dt"] == AUTO else sim_v["dt"],
            duration=sim_v["duration"], realtime_pacing=sim_v["realtime_pacing"],
            pace_factor=sim_v["pace_factor"], seed=sim_v["seed"],
            v_grid_setpoint=sim_v["v_grid_setpoint"], droop_constant=sim_v["droop_constant"],
            bus_capacitance=sim_v["bus_capacitance"], cloud_noise=sim_v["cloud_noise"],
        )
    except ValueError as exc:
        raise ScenarioError("sim", str(exc)) from None

    pv_v = v["pv"]
    try:
        cell = PvCellParams(area_cell=pv_v["area_cell"], sat_current=pv_v["sat_current"],
                            ideality=pv_v["ideality"], shunt_resistance=pv_v["shunt_resistance"],
                            efficiency=0.5 if pv_v["efficiency"] == AUTO else pv_v["efficiency"])
    except ValueError as exc:
        raise ScenarioError("pv", str(exc)) from None
    _check(pv_v["series_count"] >= 1, "pv.series_count", "must be >= 1")
    _check(pv_v["parallel_count"] >= 1, "pv.parallel_count", "must be >= 1")
    _check(pv_v["rated_power"] > 0, "pv.rated_power", "must be > 0")
    if pv_v["efficiency"] == AUTO or pv_v["cells_per_module"] == AUTO:
        cal = calibrate_array(pv_v["series_count"], pv_v["parallel_count"], pv_v["rated_power"],
                              pv_v["rated_voltage"], cell)
        cells = cal.cells_per_module if pv_v["cells_per_module"] == AUTO else pv_v["cells_per_module"]
        eff = cal.cell.efficiency if pv_v["efficiency"] == AUTO else pv_v["efficiency"]
        if pv_v["cells_per_module"] != AUTO and pv_v["efficiency"] == AUTO:
            eff = _calibrate_efficiency(replace(cal, cells_per_module=cells), STC_IRRADIANCE,
                                        STC_TEMPERATURE).cell.efficiency
    else:
        cells, eff = pv_v["cells_per_module"], pv_v["efficiency"]
    _check(cells >= 1, "pv.cells_per_module", "must be >= 1")
    try:
        pv = PvArrayConfig(cell=replace(cell, efficiency=eff), series_count=pv_v["series_count"],
                           parallel_count=pv_v["parallel_count"], cells_per_module=cells,
                           rated_power=pv_v["rated_power"], rated_voltage=pv_v["rated_voltage"])
    except ValueError as exc:
        raise ScenarioError("pv", str(exc)) from None
    _check(pv_v["mppt_step"] > 0, "pv.mppt_step", "must be > 0")
    _check(pv_v["mppt_period"] > 0, "pv.mppt_period", "must be > 0")

    nv = v["nodes"]
    count = nv["count"]
    _check(count >= 1, "nodes.count", f"must be >= 1, got {count}")
    _check(0 <= nv["cv_node"] < count, "nodes.cv_node", f"must be in [0, {count})")
    socs = nv["initial_soc"]
    if len(socs) == 1:
        socs = socs * count
    _check(len(socs) == count, "nodes.initial_soc", f"need 1 or {count} values, got {len(socs)}")
    _check(all(0.0 <= s <= 1.0 for s in socs), "nodes.initial_soc", "values must be within [0, 1]")
    try:
        bp = BatteryParams(nv["open_circuit_voltage"], nv["internal_resistance"], nv["capacity"],
                           nv["soc_min"], nv["soc_max"])
    except ValueError as exc:
        raise ScenarioError("nodes", str(exc)) from None
    try:
        conv = ConverterRating(nv["converter_v_in"], nv["converter_v_out"], nv["converter_i_out"],
                               nv["switching_freq"], nv["power_rating"])
    except ValueError as exc:
        raise ScenarioError("nodes.converter_v_out", str(exc)) from None

    cv = v["control"]
    gains = ControlGains(cv["cv_kp"], cv["cv_ki"], cv["cc_kp"], cv["cc_ki"], pv_v["mppt_step"], pv_v["mppt_period"])
    _check(gains.cv_ki >= 0 and gains.cc_ki >= 0, "control", "integral gains must be >= 0")

    sv = v["supercap"]
    try:
        sc = SupercapUnit(
            params=SupercapParams(sv["capacitance"], sv["esr"], sv["v_init"]),
            regulator=ScRegulatorConfig(sim.v_grid_setpoint, sv["deadband"],
                                        PiConfig(sv["kp"], sv["ki"], -sv["i_max"], sv["i_max"]), sv["i_max"]),
            enabled=sv["enabled"],
        )
    except ValueError as exc:
        raise ScenarioError("supercap", str(exc)) from None
    _check(sv["settle_window"] > 0, "supercap.settle_window", "must be > 0")

    fv = v["flex"]
    _check(fv["mode"] in [m.value for m in FlexMode], "flex.mode", "must be one of disabled, full, partial")
    if fv["mode"] == "full" and fv["gamma"] != 0:
        raise ScenarioError("flex.gamma", "full mode forces gamma = 0")
    try:
        flex = FlexLoadConfig(FlexMode(fv["mode"]), fv["gamma"], fv["p_max"])
    except ValueError as exc:
        raise ScenarioError("flex", str(exc)) from None

    prof = v["profiles"]
    for key in ("env", "load"):
        _check(prof[key] is not None, f"profiles.{key}", "profile path is required")
    env_path = base / prof["env"]
    load_path = base / prof["load"]
    try:
        env = parse_env_csv(env_path)
    except ProfileError as exc:
        raise ScenarioError("profiles.env", str(exc)) from None
    try:
        load = parse_load_csv(load_path)
    except ProfileError as exc:
        raise ScenarioError("profiles.load", str(exc)) from None

    iv = v["interchange"]
    _check(iv["i_max"] > 0, "interchange.i_max", "must be > 0")
    _check(iv["v_max"] >= sim.v_grid_setpoint, "interchange.v_max", "must be >= sim.v_grid_setpoint")
    _check(iv["deal_duration"] > 0, "interchange.deal_duration", "must be > 0")
    _check(iv["status_interval"] > 0, "interchange.status_interval", "must be > 0")
    _check(0 <= iv["base_port"] and iv["base_port"] + count <= 65535, "interchange.base_port", "out of range")
    _check(0 <= iv["command_port"] <= 65535, "interchange.command_port", "out of range")
    inter = InterchangeConfig(
        enabled=iv["enabled"], v_max=iv["v_max"], i_max=iv["i_max"],
        charge_current=None if iv["charge_current"] == AUTO else iv["charge_current"],
        deal_duration=iv["deal_duration"], min_surplus=iv["min_surplus"],
        status_interval=iv["status_interval"], host=iv["host"], base_port=iv["base_port"],
        command_port=iv["command_port"],
    )

    valid = injection_paths(count)
    for label, cmd in injections:
        _check(cmd.path in valid, f"injections.{label}", f"unknown path {cmd.path!r}; valid: {', '.join(valid)}")
        _check(cmd.apply_at >= 0, f"injections.{label}", "time must be >= 0")

    nodes = [(i, socs[i]) for i in range(count)]
    cfg = ScenarioConfig(sim=sim, pv=pv, nodes=[dict(id=i, soc=s, params=bp, converter=conv) for i, s in nodes],
                         cv_node=nv["cv_node"], supercap=sc, settle_window=sv["settle_window"], flex=flex,
                         gains=gains, env=env, load=load, injections=[c for _, c in injections], interchange=inter,
                         source=str(path), env_path=str(env_path), load_path=str(load_path))
    # dry run in schedule order so value bounds are reported before the start
    world = build_world(cfg)
    for label, cmd in sorted(injections, key=lambda lc: lc[1].apply_at):
        try:
            apply_injection(world, cmd)
        except InjectionError as exc:
            raise ScenarioError(f"injections.{label}", str(exc)) from None
    return cfg


def build_world(cfg: ScenarioConfig) -> World:
    """Fresh world for a scenario; every call returns an independent copy."""
    nodes = []
    for spec in cfg.nodes:
        bp = spec["params"]
        node = BessNode(spec["id"], bp, BatteryState(spec["soc"], battery_terminal_voltage(bp, 0.0)),
                        spec["converter"])
        if spec["id"] == cfg.cv_node:
            node.mode = ConverterMode.cv(cfg.sim.v_grid_setpoint)
        nodes.append(node)
    sc = cfg.supercap
    return World(
        config=cfg.sim, pv=cfg.pv, nodes=nodes, flex=cfg.flex,
        irradiance=cfg.env.irradiance_profile(), temperature=cfg.env.temperature_profile_k(),
        load=cfg.load.to_profile(),
        supercap=SupercapUnit(sc.params, sc.regulator, sc.enabled),
        gains=cfg.gains,
    )


# --- trace files ------------------------------------------------------------------

def _fmt(x: float) -> str:
    return "%.9g" % x


def trace_rows(trace: Sequence[StepRecord]):
    for r in trace:
        row = [_fmt(r.t), _fmt(r.v_grid), _fmt(r.p_pv), _fmt(r.p_nonflex), _fmt(r.p_flex),
               _fmt(r.p_sc), _fmt(r.p_spill), "1" if r.fault else "0"]
        for p, s, m in zip(r.p_batt, r.soc, r.mode):
            row += [_fmt(p), _fmt(s), m]
        yield row


def write_trace_csv(trace: Sequence[StepRecord], path):
    """Write one header row and one row per step (9 significant digits)."""
    if not trace:
        raise ValueError("refusing to write an empty trace")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace[0].columns())
        w.writerows(trace_rows(trace))


def read_trace_csv(path) -> list[StepRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:8] != ["t", "v_grid", "p_pv", "p_nonflex", "p_flex", "p_sc", "p_spill", "fault"]:
            raise ValueError(f"{path}: not a trace file")
        n = (len(header) - 8) // 3
        out = []
        for row in reader:
            f = [float(x) for x in row[:7]]
            rest = row[8:]
            out.append(StepRecord(
                t=f[0], v_grid=f[1], p_pv=f[2], p_nonflex=f[3], p_flex=f[4], p_sc=f[5], p_spill=f[6],
                fault=row[7] == "1",
                p_batt=tuple(float(rest[3 * i]) for i in range(n)),
                soc=tuple(float(rest[3 * i + 1]) for i in range(n)),
                mode=tuple(rest[3 * i + 2] for i in range(n)),
            ))
    return out


def emit_plot(trace: Sequence[StepRecord], path):
    """Four stacked panels: total load, battery power, flexible load, SoC."""
    if not trace:
        raise ValueError("refusing to plot an empty trace")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = np.array([r.t for r in trace]) / 3600.0
    p_load = np.array([r.p_nonflex + r.p_flex for r in trace])
    p_batt = np.array([r.p_batt for r in trace])
    p_flex = np.array([r.p_flex for r in trace])
    soc = np.array([r.soc for r in trace]) * 100.0

    fig, axes = plt.subplots(4, 1, sharex=True, figsize=(7, 9))
    axes[0].plot(t, p_load / 1e3, color="k", lw=1)
    axes[0].plot(t, np.array([r.p_pv for r in trace]) / 1e3, color="orange", lw=1, label="PV")
    axes[0].set_ylabel("Total load (kW)")
    axes[0].legend(loc="upper right", fontsize=8)
    for i in range(p_batt.shape[1]):
        axes[1].plot(t, p_batt[:, i] / 1e3, lw=1, label=f"BESS {i}")
        axes[3].plot(t, soc[:, i], lw=1, label=f"BESS {i}")
    axes[1].axhline(0, color="grey", lw=0.5)
    axes[1].set_ylabel("BESS power (kW)")
    axes[1].legend(loc="upper right", fontsize=8, ncol=2)
    axes[2].plot(t, p_flex / 1e3, color="tab:green", lw=1)
    axes[2].set_ylabel("Flexible load (kW)")
    axes[3].set_ylabel("SoC (%)")
    axes[3].set_xlabel("Time (h)")
    for ax in axes:
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


# --- summary ---------------------------------------------------------------------

@dataclass(frozen=True)
class SummaryMetrics:
    energy_pv: float  # kWh
    energy_to_loads: float
    energy_to_flex: float
    energy_to_bess: float
    energy_from_bess: float
    energy_spilled: float
    energy_unserved: float
    max_voltage_deviation: float  # V
    pv_utilization: float
    soc_final: tuple

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def report(self) -> str:
        lines = []
        for k, val in self.as_dict().items():
            if k == "soc_final":
                lines.append(f"{k:24s} " + " ".join(f"{s:.4f}" for s in val))
            else:
                unit = "V" if k == "max_voltage_deviation" else "" if k == "pv_utilization" else "kWh"
                lines.append(f"{k:24s} {val:.6f} {unit}".rstrip())
        return "\n".join(lines)


def _integrate(t: np.ndarray, y: np.ndarray, dt_last: float) -> float:
    # each record holds over [t, t + dt); close the last interval
    tt = np.append(t, t[-1] + dt_last)
    yy = np.append(y, y[-1])
    return float(np.sum(0.5 * (yy[1:] + yy[:-1]) * np.diff(tt))) / 3.6e6


def summarize(trace: Sequence[StepRecord], v_setpoint: float = 100.0, dt: Optional[float] = None) -> SummaryMetrics:
    """Energy totals and voltage/utilisation figures for a trace."""
    if not trace:
        raise ValueError("cannot summarize an empty trace")
    t = np.array([r.t for r in trace])
    if dt is None:
        dt = float(t[-1] - t[-2]) if len(t) > 1 else 1.0
    p_pv = np.array([r.p_pv for r in trace])
    p_load = np.array([r.p_nonflex for r in trace])
    p_flex = np.array([r.p_flex for r in trace])
    p_batt = np.array([r.p_batt for r in trace])
    spill = np.array([r.p_spill for r in trace])
    charge = np.clip(p_batt, 0.0, None).sum(axis=1)
    discharge = -np.clip(p_batt, None, 0.0).sum(axis=1)

    # PV serves fixed load first, then flexible load, then charging
    pv_loads = np.minimum(p_pv, p_load)
    pv_flex = np.minimum(p_flex, p_pv - pv_loads)
    pv_bess = np.minimum(charge, p_pv - pv_loads - pv_flex)
    e_pv = _integrate(t, p_pv, dt)
    used = _integrate(t, pv_loads + pv_flex + pv_bess, dt)
    util = min(max(used / e_pv, 0.0), 1.0) if e_pv > 0 else 0.0

    return SummaryMetrics(
        energy_pv=e_pv,
        energy_to_loads=_integrate(t, p_load, dt),
        energy_to_flex=_integrate(t, p_flex, dt),
        energy_to_bess=_integrate(t, charge, dt),
        energy_from_bess=_integrate(t, discharge, dt),
        energy_spilled=_integrate(t, np.clip(spill, 0.0, None), dt),
        energy_unserved=_integrate(t, -np.clip(spill, None, 0.0), dt),
        max_voltage_deviation=float(np.max(np.abs(np.array([r.v_grid for r in trace]) - v_setpoint))),
        pv_utilization=util,
        soc_final=tuple(trace[-1].soc),
    )


def settle_time(trace: Sequence[StepRecord], t_event: float, band: float, v_setpoint: float = 100.0) -> Optional[float]:
    """Seconds after ``t_event`` from which the bus stays within ``band``.

    None if the voltage is still outside the band at the end of the trace.
    """
    last_out = None
    for r in trace:
        if r.t >= t_event and abs(r.v_grid - v_setpoint) > band:
            last_out = r.t
    if last_out is None:
        return 0.0
    if last_out >= trace[-1].t:
        return None
    return last_out - t_event


def default_paths() -> dict:
    """Paths of the shipped scenario directory, if present next to the package."""
    here = Path(__file__).resolve()
    for parent in here.parents:
        cand = parent / "scenarios"
        if cand.is_dir():
            return {p.stem: str(p) for p in sorted(cand.glob("*.ini"))}
    return {}


__all__ = [n for n in dir() if not n.startswith("_") and n not in ("annotations",)]
