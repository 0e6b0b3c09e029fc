"""Discrete controllers: PI with integrator clamping, perturb-and-observe
MPPT, the supercapacitor bus regulator, converter modes and the
flexible-load dispatch rules."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Iterable


def _clamp(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


# --- PI ----------------------------------------------------------------------

@dataclass(frozen=True)
class PiConfig:
    kp: float
    ki: float
    u_min: float
    u_max: float

    def __post_init__(self):
        if not self.u_min < self.u_max:
            raise ValueError(f"u_min must be < u_max, got {self.u_min}, {self.u_max}")
        if self.ki < 0:
            raise ValueError("ki must be >= 0")


@dataclass(frozen=True)
class PiState:
    integrator: float = 0.0


def pi_step(cfg: PiConfig, state: PiState, error: float, dt: float) -> tuple[PiState, float]:
    """One PI update with the integrator clamped to the output range.

    Returns:
        The new state and the saturated control output.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if error == 0.0:
        # identity on the state, even when it sits outside the clamp
        return state, _clamp(state.integrator, cfg.u_min, cfg.u_max)
    integ = _clamp(state.integrator + cfg.ki * error * dt, cfg.u_min, cfg.u_max)
    u = _clamp(cfg.kp * error + integ, cfg.u_min, cfg.u_max)
    return PiState(integ), u


# --- MPPT --------------------------------------------------------------------

@dataclass(frozen=True)
class MpptState:
    v_ref: float
    prev_power: float = 0.0
    prev_voltage: float = 0.0
    step_size: float = 0.5
    direction: int = 1
    v_max: float = math.inf  # open-circuit bound on v_ref

    def __post_init__(self):
        if self.v_ref < 0:
            raise ValueError("v_ref must be >= 0")
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.direction not in (1, -1):
            raise ValueError("direction must be +1 or -1")


def mppt_step(state: MpptState, v_meas: float, p_meas: float) -> MpptState:
    """Perturb and observe.

    The perturbation direction flips only when power strictly fell; equal
    power keeps going the same way.
    """
    if v_meas < 0 or p_meas < 0:
        raise ValueError("v_meas and p_meas must be >= 0")
    direction = -state.direction if p_meas < state.prev_power else state.direction
    v_ref = _clamp(state.v_ref + direction * state.step_size, 0.0, state.v_max)
    return replace(state, v_ref=v_ref, prev_power=p_meas, prev_voltage=v_meas, direction=direction)


# --- converter modes ---------------------------------------------------------

class Direction(str, enum.Enum):
    CHARGE = "charge"
    DISCHARGE = "discharge"
    NONE = "none"


@dataclass(frozen=True)
class ConverterMode:
    """CV(v_setpoint), CC(i_setpoint, direction) or Idle."""

    kind: str  # "CV" | "CC" | "IDLE"
    setpoint: float = 0.0
    direction: Direction = Direction.NONE

    def __post_init__(self):
        if self.kind == "CV":
            if not self.setpoint > 0:
                raise ValueError("CV setpoint must be > 0")
            object.__setattr__(self, "direction", Direction.NONE)
        elif self.kind == "CC":
            if self.setpoint < 0:
                raise ValueError("CC setpoint must be >= 0")
            if self.direction is Direction.NONE:
                raise ValueError("CC mode needs a charge or discharge direction")
        elif self.kind == "IDLE":
            object.__setattr__(self, "setpoint", 0.0)
            object.__setattr__(self, "direction", Direction.NONE)
        else:
            raise ValueError(f"unknown converter mode {self.kind!r}")

    @classmethod
    def cv(cls, v_setpoint: float) -> "ConverterMode":
        return cls("CV", v_setpoint)

    @classmethod
    def cc(cls, i_setpoint: float, direction) -> "ConverterMode":
        return cls("CC", i_setpoint, Direction(direction))

    @classmethod
    def idle(cls) -> "ConverterMode":
        return cls("IDLE")

    @property
    def signed_current(self) -> float:
        """CC battery current with the charging-positive convention."""
        if self.kind != "CC":
            return 0.0
        return self.setpoint if self.direction is Direction.CHARGE else -self.setpoint

    @property
    def label(self) -> str:
        if self.kind == "CC":
            return "CC+" if self.direction is Direction.CHARGE else "CC-"
        return self.kind


# --- supercapacitor regulator ------------------------------------------------

@dataclass(frozen=True)
class ScRegulatorConfig:
    v_ref: float = 100.0
    deadband: float = 1.0
    pi: PiConfig = PiConfig(kp=10.0, ki=100.0, u_min=-100.0, u_max=100.0)
    i_max: float = 100.0
    # integrator decay time constant while inside the deadband
    decay_tau: float = 0.05

    def __post_init__(self):
        if self.deadband <= 0:
            raise ValueError("deadband must be > 0")
        if self.i_max <= 0:
            raise ValueError("i_max must be > 0")


def sc_regulator_step(cfg: ScRegulatorConfig, pi_state: PiState, v_grid: float, dt: float) -> tuple[PiState, float]:
    """Bus-side current command for the supercapacitor converter.

    Positive commands inject current into the bus. Inside the deadband
    the command is exactly zero and the integrator bleeds off.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    error = cfg.v_ref - v_grid
    if abs(error) <= cfg.deadband:
        return PiState(pi_state.integrator * math.exp(-dt / cfg.decay_tau)), 0.0
    state, u = pi_step(cfg.pi, pi_state, error, dt)
    return state, _clamp(u, -cfg.i_max, cfg.i_max)


# --- loads -------------------------------------------------------------------

class FlexMode(str, enum.Enum):
    DISABLED = "disabled"
    FULL = "full"
    PARTIAL = "partial"


@dataclass(frozen=True)
class FlexLoadConfig:
    mode: FlexMode = FlexMode.DISABLED
    gamma: float = 0.0  # W withheld from the flexible loads
    p_max: float = 5000.0  # W

    def __post_init__(self):
        object.__setattr__(self, "mode", FlexMode(self.mode))
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.p_max < 0:
            raise ValueError("p_max must be >= 0")
        if self.mode is FlexMode.FULL and self.gamma != 0:
            raise ValueError("full flexible-load mode requires gamma = 0")


def flex_load_power(p_pv: float, cfg: FlexLoadConfig) -> float:
    """Flexible-load demand P_flex = P_pv - gamma, limited to [0, p_max]."""
    if cfg.mode is FlexMode.DISABLED:
        return 0.0
    return _clamp(p_pv - cfg.gamma, 0.0, cfg.p_max)


def nonflex_load_power(v_grid: float, i_nflx: float) -> float:
    return v_grid * i_nflx


def total_power(powers: Iterable[float]) -> float:
    # fsum is exact, so the result does not depend on ordering
    return math.fsum(powers)


def flex_actuation(p_pv: float, p_nonflex: float, cfg: FlexLoadConfig) -> float:
    """Flexible-load setpoint from the PV surplus over fixed demand.

    Only PV power left after the non-flexible loads is offered to the
    flexible loads; ``gamma`` of it is held back for the batteries.
    """
    surplus = max(0.0, p_pv - p_nonflex)
    return flex_load_power(surplus, cfg)


# --- default gains -----------------------------------------------------------

@dataclass(frozen=True)
class ControlGains:
    """Loop gains used by the simulation engine."""

    cv_kp: float = 0.5  # A/V
    cv_ki: float = 20.0  # A/(V s)
    cc_kp: float = 0.02  # per-unit duty per A
    cc_ki: float = 5.0
    mppt_step: float = 0.5  # V
    mppt_period: float = 0.01  # s
