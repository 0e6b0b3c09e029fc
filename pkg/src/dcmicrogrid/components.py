"""Electrical models for the microgrid components.

PV cells and arrays, the battery, the supercapacitor and the boost
converter filter sizing. Everything here is a pure function of its
arguments; states are frozen dataclasses.

Sign conventions
----------------
* Battery current and power are positive when the battery is charging.
* Supercapacitor current is positive when it discharges into the bus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

ELEMENTARY_CHARGE = 1.602176634e-19  # C
BOLTZMANN = 1.380649e-23  # J/K
STC_IRRADIANCE = 1000.0  # W/m^2
STC_TEMPERATURE = 298.15  # K

# exp() overflows just above 709.78
_MAX_EXPONENT = 700.0


class DomainError(ValueError):
    """Raised when a model is evaluated outside its numeric domain."""


@dataclass(frozen=True)
class PvCellParams:
    """Single-diode cell without series resistance.

    The photocurrent is ``G * area_cell * efficiency``.
    """

    area_cell: float = 0.0243  # m^2, 156 mm wafer
    efficiency: float = 0.3
    sat_current: float = 1e-9  # A
    ideality: float = 1.3
    shunt_resistance: float = 500.0  # ohm
    elementary_charge: float = ELEMENTARY_CHARGE
    boltzmann: float = BOLTZMANN

    def __post_init__(self):
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError(f"efficiency must be in (0, 1], got {self.efficiency}")
        if self.shunt_resistance <= 0:
            raise ValueError("shunt_resistance must be > 0")
        if self.sat_current <= 0:
            raise ValueError("sat_current must be > 0")
        if self.ideality < 1:
            raise ValueError("ideality must be >= 1")
        if self.area_cell <= 0:
            raise ValueError("area_cell must be > 0")

    def thermal_voltage(self, temperature: float) -> float:
        """n*K*T/q in volts."""
        return self.ideality * self.boltzmann * temperature / self.elementary_charge


@dataclass(frozen=True)
class PvArrayConfig:
    """Series/parallel array of identical cells.

    ``series_count`` and ``parallel_count`` describe the module topology
    (3s10p for the reference array); ``cells_per_module`` is the number of
    cells in series inside one module, so a string holds
    ``series_count * cells_per_module`` cells.
    """

    cell: PvCellParams = PvCellParams()
    series_count: int = 3
    parallel_count: int = 10
    cells_per_module: int = 35
    rated_power: float = 5000.0  # W
    rated_voltage: float = 69.0  # V

    def __post_init__(self):
        if self.series_count < 1 or self.parallel_count < 1 or self.cells_per_module < 1:
            raise ValueError("series_count, parallel_count and cells_per_module must be >= 1")
        if self.rated_power <= 0:
            raise ValueError("rated_power must be > 0")

    @property
    def cells_in_series(self) -> int:
        return self.series_count * self.cells_per_module


@dataclass(frozen=True)
class PvInput:
    irradiance: float  # W/m^2
    temperature: float  # K
    terminal_voltage: float  # V, per cell

    def __post_init__(self):
        if not self.irradiance >= 0:
            raise ValueError(f"irradiance must be >= 0, got {self.irradiance}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0 K, got {self.temperature}")


def pv_cell_current(input: PvInput, params: PvCellParams) -> float:
    """Cell output current from photocurrent, diode and shunt branches.

    The junction voltage is taken equal to the terminal voltage, which
    makes the relation explicit in ``v``.

    Raises:
        DomainError: if the diode exponential overflows at this voltage.
    """
    return _cell_current(input.irradiance, input.temperature, input.terminal_voltage, params)


def _cell_current(g, temperature, v, params: PvCellParams):
    vt = params.thermal_voltage(temperature)
    x = np.divide(v, vt)
    if np.any(x > _MAX_EXPONENT):
        bad = np.max(v)
        raise DomainError(f"diode exponential overflows at cell voltage {bad!r} V")
    photo = g * params.area_cell * params.efficiency
    current = photo - params.sat_current * np.expm1(x) - np.divide(v, params.shunt_resistance)
    if np.ndim(current) == 0:
        return float(current)
    return current


def pv_array_output(g: float, temperature: float, v_array, cfg: PvArrayConfig):
    """Array current and power at a given array voltage.

    ``v_array`` may be a scalar or an array of voltages.

    Returns:
        (current, power) in A and W.
    """
    if np.any(np.asarray(v_array) < 0):
        raise ValueError("v_array must be >= 0")
    if not g >= 0 or not temperature > 0:
        raise ValueError("irradiance must be >= 0 and temperature > 0")
    v_cell = np.divide(v_array, cfg.cells_in_series)
    current = cfg.parallel_count * _cell_current(g, temperature, v_cell, cfg.cell)
    return current, np.multiply(v_array, current)


def pv_array_power(g: float, temperature: float, v_array: float, cfg: PvArrayConfig) -> float:
    """Scalar fast path of :func:`pv_array_output`, power only."""
    cell = cfg.cell
    x = v_array / cfg.cells_in_series / cell.thermal_voltage(temperature)
    if x > _MAX_EXPONENT:
        raise DomainError(f"diode exponential overflows at array voltage {v_array!r} V")
    v_cell = v_array / cfg.cells_in_series
    i_cell = (g * cell.area_cell * cell.efficiency
              - cell.sat_current * math.expm1(x)
              - v_cell / cell.shunt_resistance)
    return v_array * cfg.parallel_count * i_cell


def pv_voc_bound(g: float, temperature: float, cfg: PvArrayConfig) -> float:
    """Upper bound on the array open-circuit voltage (shunt branch ignored)."""
    cell = cfg.cell
    photo = g * cell.area_cell * cell.efficiency
    return cfg.cells_in_series * cell.thermal_voltage(temperature) * math.log1p(photo / cell.sat_current)


def pv_open_circuit_voltage(g: float, temperature: float, cfg: PvArrayConfig) -> float:
    """Array voltage at which the output current is zero."""
    from scipy.optimize import brentq

    hi = pv_voc_bound(g, temperature, cfg)
    if hi == 0.0:
        return 0.0
    return brentq(lambda v: float(pv_array_output(g, temperature, v, cfg)[0]), 0.0, hi, xtol=1e-12)


def pv_mpp(g: float, temperature: float, cfg: PvArrayConfig, tol: float = 1e-9) -> tuple[float, float]:
    """Maximum power point of the array.

    P(v) = v * I(v) is strictly concave for v >= 0, so dP/dv is strictly
    decreasing and has a single root in (0, Voc). The root is found with
    Newton steps safeguarded by bisection, working in per-cell units.

    Returns:
        (v_mpp, p_mpp)
    """
    if g <= 0.0:
        return 0.0, 0.0
    cell = cfg.cell
    ns = cfg.cells_in_series
    vt = cell.thermal_voltage(temperature)
    photo = g * cell.area_cell * cell.efficiency
    i_s, r_sh = cell.sat_current, cell.shunt_resistance
    lo, hi = 0.0, vt * math.log1p(photo / i_s)
    u = 0.9 * hi  # MPP sits close to Voc on the log scale
    tol_cell = tol / ns
    for _ in range(200):
        e = math.exp(u / vt)
        f = photo - i_s * (e - 1.0) - 2.0 * u / r_sh - u * i_s * e / vt
        if f > 0.0:
            lo = u
        else:
            hi = u
        df = -2.0 * i_s * e / vt - 2.0 / r_sh - u * i_s * e / (vt * vt)
        step = f / df
        nxt = u - step
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - u) < tol_cell or hi - lo < tol_cell:
            u = nxt
            break
        u = nxt
    v = u * ns
    return v, pv_array_power(g, temperature, v, cfg)


def _calibrate_efficiency(cfg: PvArrayConfig, g: float, temperature: float) -> PvArrayConfig:
    # photocurrent is monotone in efficiency, so is the MPP power
    lo, hi = 1e-6, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        trial = replace(cfg, cell=replace(cfg.cell, efficiency=mid))
        if pv_mpp(g, temperature, trial)[1] > cfg.rated_power:
            hi = mid
        else:
            lo = mid
    return replace(cfg, cell=replace(cfg.cell, efficiency=0.5 * (lo + hi)))


@lru_cache(maxsize=16)
def calibrate_array(
    series_count: int = 3,
    parallel_count: int = 10,
    rated_power: float = 5000.0,
    rated_voltage: float = 69.0,
    cell: PvCellParams = PvCellParams(),
    irradiance: float = STC_IRRADIANCE,
    temperature: float = STC_TEMPERATURE,
) -> PvArrayConfig:
    """Fit photocurrent and cells-per-module to the array nameplate.

    For each candidate cell count the cell efficiency (the A_cell*eta
    product) is bisected so the MPP power equals ``rated_power``; the count
    whose MPP voltage lands closest to ``rated_voltage`` wins.
    """
    vt = cell.thermal_voltage(temperature)
    # a cell near its MPP sits at roughly 20 thermal voltages
    guess = max(1, round(rated_voltage / (series_count * 20.0 * vt)))
    best = None
    for cpm in range(max(1, guess - 8), guess + 9):
        cfg = PvArrayConfig(cell=cell, series_count=series_count, parallel_count=parallel_count,
                            cells_per_module=cpm, rated_power=rated_power,
                            rated_voltage=rated_voltage)
        try:
            cfg = _calibrate_efficiency(cfg, irradiance, temperature)
        except DomainError:
            continue
        gap = abs(pv_mpp(irradiance, temperature, cfg)[0] - rated_voltage)
        if best is None or gap < best[0]:
            best = (gap, cfg)
    if best is None:
        raise DomainError("no cell count reproduces the array rating")
    return best[1]


# --- battery -----------------------------------------------------------------

@dataclass(frozen=True)
class BatteryParams:
    open_circuit_voltage: float = 69.0  # V
    internal_resistance: float = 0.05  # ohm
    capacity: float = 100.0  # Ah
    soc_min: float = 0.2
    soc_max: float = 0.9

    def __post_init__(self):
        if self.capacity <= 0:
            raise ValueError("capacity must be > 0")
        if self.internal_resistance < 0:
            raise ValueError("internal_resistance must be >= 0")
        if not 0.0 <= self.soc_min < self.soc_max <= 1.0:
            raise ValueError(f"need 0 <= soc_min < soc_max <= 1, got {self.soc_min}, {self.soc_max}")


@dataclass(frozen=True)
class BatteryState:
    soc: float
    terminal_voltage: float
    current: float = 0.0  # A, charging positive

    def __post_init__(self):
        if not 0.0 <= self.soc <= 1.0:
            raise ValueError(f"soc must be in [0, 1], got {self.soc}")


def battery_terminal_voltage(params: BatteryParams, current: float) -> float:
    """E + I*R_i with charging-positive current.

    Same relation as V_B = E - I*R_i written for a discharging-positive
    current.
    """
    return params.open_circuit_voltage + current * params.internal_resistance


def battery_current_for_power(params: BatteryParams, power: float) -> float:
    """Battery current that delivers ``power`` watts at the terminals.

    Solves I*(E + I*R) = P for the root continuous with P/E.
    """
    e, r = params.open_circuit_voltage, params.internal_resistance
    if r == 0.0 or power == 0.0:
        return power / e
    disc = e * e + 4.0 * r * power
    if disc < 0:
        raise DomainError(f"battery cannot deliver {-power!r} W (limit {e * e / (4 * r)!r} W)")
    # numerically stable form of (-E + sqrt(disc)) / (2R)
    return 2.0 * power / (e + math.sqrt(disc))


def battery_soc_step(state: BatteryState, current: float, dt: float, params: BatteryParams) -> BatteryState:
    """Coulomb-count the state of charge over ``dt`` seconds."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    soc = state.soc + current * dt / (params.capacity * 3600.0)
    soc = min(max(soc, 0.0), 1.0)
    return BatteryState(soc=soc, terminal_voltage=battery_terminal_voltage(params, current), current=current)


# --- supercapacitor ----------------------------------------------------------

@dataclass(frozen=True)
class SupercapParams:
    capacitance: float = 100.0  # F
    esr: float = 0.01  # ohm
    v_init: float = 48.0  # V

    def __post_init__(self):
        if self.capacitance <= 0:
            raise ValueError("capacitance must be > 0")
        if self.esr < 0 or self.v_init < 0:
            raise ValueError("esr and v_init must be >= 0")


@dataclass(frozen=True)
class SupercapState:
    stored_voltage: float
    terminal_voltage: float
    current: float = 0.0  # A, discharging positive

    @classmethod
    def initial(cls, params: SupercapParams) -> "SupercapState":
        return cls(params.v_init, params.v_init, 0.0)


def supercap_step(state: SupercapState, current: float, dt: float, params: SupercapParams) -> SupercapState:
    """Forward-Euler step of the capacitor charge plus the ESR drop."""
    if dt <= 0:
        raise ValueError("dt must be > 0")
    stored = max(state.stored_voltage - current * dt / params.capacitance, 0.0)
    return SupercapState(stored, stored - params.esr * current, current)


# --- converter sizing --------------------------------------------------------

@dataclass(frozen=True)
class ConverterRating:
    v_in: float = 69.0
    v_out: float = 100.0
    i_out: float = 50.0
    switching_freq: float = 1000.0
    power_rating: float = 5000.0

    def __post_init__(self):
        if not self.v_out > self.v_in > 0:
            raise ValueError(f"boost converter needs v_out > v_in > 0, got v_in={self.v_in}, v_out={self.v_out}")
        if self.power_rating <= 0 or self.i_out <= 0 or self.switching_freq <= 0:
            raise ValueError("power_rating, i_out and switching_freq must be > 0")


@dataclass(frozen=True)
class ConverterSizing:
    ripple_current: float  # A
    ripple_voltage: float  # V
    inductance: float  # H
    capacitance: float  # F


def size_converter(rating: ConverterRating) -> ConverterSizing:
    """Inductor and output capacitor for 1 % ripple targets.

    The inductance carries a 1.5 design margin.
    """
    v_in, v_out, i_out, f = rating.v_in, rating.v_out, rating.i_out, rating.switching_freq
    if v_out <= v_in:
        raise ValueError("boost sizing requires v_out > v_in")
    d_il = 0.01 * i_out * (v_out / v_in)
    d_vo = 0.01 * v_out
    inductance = v_in * (v_out - v_in) / (d_il * f * v_out) * 1.5
    capacitance = i_out * (1.0 - v_in / v_out) / (f * d_vo)
    return ConverterSizing(d_il, d_vo, inductance, capacitance)
