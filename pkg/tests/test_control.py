import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from dcmicrogrid.components import calibrate_array, pv_array_power
from dcmicrogrid.control import (
    ConverterMode,
    Direction,
    FlexLoadConfig,
    FlexMode,
    MpptState,
    PiConfig,
    PiState,
    ScRegulatorConfig,
    flex_actuation,
    flex_load_power,
    mppt_step,
    nonflex_load_power,
    pi_step,
    sc_regulator_step,
    total_power,
)

# --- PI ---------------------------------------------------------------------------


def test_pi_zero_error_keeps_state():
    cfg = PiConfig(1.0, 1.0, -10.0, 10.0)
    state, u = pi_step(cfg, PiState(0.0), 0.0, 0.1)
    assert u == 0.0 and state == PiState(0.0)


@pytest.mark.parametrize("u_max,expected", [(10.0, 6.0), (5.0, 5.0)])
def test_pi_pure_proportional(u_max, expected):
    cfg = PiConfig(kp=2.0, ki=0.0, u_min=-u_max, u_max=u_max)
    _, u = pi_step(cfg, PiState(), 3.0, 0.37)
    assert u == expected


def test_pi_integrator_clamps_at_limit():
    cfg = PiConfig(kp=0.0, ki=1.0, u_min=-0.3, u_max=0.3)
    state = PiState()
    integ = []
    for _ in range(5):
        state, u = pi_step(cfg, state, 1.0, 0.1)
        integ.append(state.integrator)
    assert integ[:2] == pytest.approx([0.1, 0.2], rel=1e-12)
    assert integ[2:] == [0.3, 0.3, 0.3]


def test_pi_recovers_immediately_after_windup():
    # a clamped integrator leaves saturation as soon as the error flips
    cfg = PiConfig(kp=0.0, ki=1.0, u_min=-1.0, u_max=1.0)
    state = PiState()
    for _ in range(1000):
        state, _ = pi_step(cfg, state, 5.0, 0.1)
    state, u = pi_step(cfg, state, -1.0, 0.1)
    assert u == pytest.approx(0.9, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(errors=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50), kp=st.floats(0, 10), ki=st.floats(0, 10))
def test_pi_output_and_integrator_stay_in_range(errors, kp, ki):
    cfg = PiConfig(kp, ki, -2.0, 3.0)
    state = PiState()
    for e in errors:
        state, u = pi_step(cfg, state, e, 0.01)
        assert -2.0 <= u <= 3.0
        assert -2.0 <= state.integrator <= 3.0


def test_pi_config_validation():
    with pytest.raises(ValueError):
        PiConfig(1.0, 1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        PiConfig(1.0, -1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        pi_step(PiConfig(1, 1, 0, 1), PiState(), 1.0, 0.0)


# --- MPPT -------------------------------------------------------------------------

def test_mppt_keeps_direction_when_power_rises():
    s = MpptState(v_ref=50.0, prev_power=100.0, step_size=0.5, direction=1)
    s2 = mppt_step(s, 50.0, 120.0)
    assert s2.direction == 1 and s2.v_ref == 50.5


def test_mppt_reverses_when_power_falls():
    s = MpptState(v_ref=50.0, prev_power=100.0, step_size=0.5, direction=1)
    s2 = mppt_step(s, 50.0, 90.0)
    assert s2.direction == -1 and s2.v_ref == 49.5


def test_mppt_equal_power_keeps_direction():
    s = MpptState(v_ref=50.0, prev_power=100.0, step_size=0.5, direction=-1)
    assert mppt_step(s, 50.0, 100.0).direction == -1


def test_mppt_clamps_to_bounds():
    s = MpptState(v_ref=0.2, prev_power=10.0, step_size=0.5, direction=-1)
    assert mppt_step(s, 0.2, 20.0).v_ref == 0.0
    s = MpptState(v_ref=79.9, prev_power=10.0, step_size=0.5, direction=1, v_max=80.0)
    assert mppt_step(s, 79.9, 20.0).v_ref == 80.0


@pytest.mark.parametrize("v0,g", [(30.0, 1000.0), (75.0, 1000.0), (40.0, 300.0)])
def test_mppt_converges_to_grid_optimum(v0, g):
    cfg = calibrate_array()
    c = cfg.cell
    v_grid, p_grid = oracles.pv_power_grid(
        g, 298.15, cells_in_series=cfg.cells_in_series, parallel=cfg.parallel_count,
        area=c.area_cell, eff=c.efficiency, i_s=c.sat_current, n=c.ideality, r_sh=c.shunt_resistance)
    v_star, _ = oracles.grid_mpp(v_grid, p_grid)
    s = MpptState(v_ref=v0, step_size=0.5)
    for _ in range(500):
        p = max(pv_array_power(g, 298.15, s.v_ref, cfg), 0.0)
        s = mppt_step(s, s.v_ref, p)
    assert abs(s.v_ref - v_star) <= 2 * s.step_size


def test_mppt_validation():
    with pytest.raises(ValueError):
        MpptState(v_ref=-1.0)
    with pytest.raises(ValueError):
        MpptState(v_ref=1.0, direction=0)
    with pytest.raises(ValueError):
        mppt_step(MpptState(v_ref=1.0), 1.0, -5.0)


# --- converter modes ------------------------------------------------------------------

def test_mode_constructors_and_labels():
    assert ConverterMode.cv(100.0).label == "CV"
    assert ConverterMode.cc(10.0, "charge").label == "CC+"
    assert ConverterMode.cc(10.0, Direction.DISCHARGE).label == "CC-"
    assert ConverterMode.idle().label == "IDLE"
    assert ConverterMode.cc(10.0, "charge").signed_current == 10.0
    assert ConverterMode.cc(10.0, "discharge").signed_current == -10.0
    assert ConverterMode.cv(100.0).signed_current == 0.0


@pytest.mark.parametrize("args", [("CV", 0.0), ("CC", 1.0), ("CC", -1.0, Direction.CHARGE), ("XX",)])
def test_mode_validation(args):
    with pytest.raises(ValueError):
        ConverterMode(*args)


# --- supercap regulator -----------------------------------------------------------------

@pytest.mark.parametrize("v", [100.0, 100.5, 99.0, 101.0])
def test_regulator_inside_deadband_is_silent(v):
    _, i = sc_regulator_step(ScRegulatorConfig(), PiState(3.0), v, 1e-3)
    assert i == 0.0


def test_regulator_bleeds_integrator_in_deadband():
    cfg = ScRegulatorConfig(decay_tau=0.05)
    state, _ = sc_regulator_step(cfg, PiState(10.0), 100.0, 0.05)
    assert state.integrator == pytest.approx(10.0 * np.exp(-1.0), rel=1e-12)


def test_regulator_saturates_on_deep_sag():
    cfg = ScRegulatorConfig(pi=PiConfig(kp=100.0, ki=0.0, u_min=-100.0, u_max=100.0), i_max=100.0)
    _, i = sc_regulator_step(cfg, PiState(), 95.0, 1e-3)
    assert i == 100.0
    _, i = sc_regulator_step(cfg, PiState(), 105.0, 1e-3)
    assert i == -100.0


def test_regulator_output_limited_by_i_max():
    cfg = ScRegulatorConfig(pi=PiConfig(kp=100.0, ki=0.0, u_min=-1000.0, u_max=1000.0), i_max=40.0)
    _, i = sc_regulator_step(cfg, PiState(), 90.0, 1e-3)
    assert i == 40.0


# --- loads ---------------------------------------------------------------------------

@pytest.mark.parametrize("p_pv", [0.0, 3000.0, 1e6])
def test_flex_disabled_is_zero(p_pv):
    assert flex_load_power(p_pv, FlexLoadConfig(FlexMode.DISABLED, 0.0)) == 0.0


@pytest.mark.parametrize("p_pv,gamma,p_max,expected", [
    (3000.0, 1000.0, 5000.0, 2000.0),
    (500.0, 1000.0, 5000.0, 0.0),
    (9000.0, 1000.0, 5000.0, 5000.0),
])
def test_flex_partial(p_pv, gamma, p_max, expected):
    assert flex_load_power(p_pv, FlexLoadConfig("partial", gamma, p_max)) == expected


def test_flex_full_forces_gamma_zero():
    with pytest.raises(ValueError):
        FlexLoadConfig("full", 500.0)
    assert FlexLoadConfig("full", 0.0).mode is FlexMode.FULL


@pytest.mark.parametrize("v,i,expected", [(100.0, 10.0, 1000.0), (100.0, 0.0, 0.0), (100.0, 37.5, 3750.0)])
def test_nonflex_load(v, i, expected):
    assert nonflex_load_power(v, i) == expected


def test_total_power():
    assert total_power([]) == 0
    assert total_power([1000.0, 2000.0]) == 3000.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), max_size=12))
def test_total_power_is_order_independent(values):
    ref = total_power(values)
    for perm in itertools.islice(itertools.permutations(values), 20):
        assert total_power(perm) == ref


@pytest.mark.parametrize("p_pv,p_nonflex,cfg,expected", [
    (4000.0, 2500.0, FlexLoadConfig("full", 0.0), 1500.0),
    (2000.0, 2500.0, FlexLoadConfig("full", 0.0), 0.0),
    (4000.0, 2500.0, FlexLoadConfig("partial", 500.0), 1000.0),
    (4000.0, 2500.0, FlexLoadConfig("disabled"), 0.0),
])
def test_flex_actuation(p_pv, p_nonflex, cfg, expected):
    assert flex_actuation(p_pv, p_nonflex, cfg) == expected


@settings(max_examples=200, deadline=None)
@given(p_pv=st.floats(0, 1e4), p_nonflex=st.floats(0, 1e4), gamma=st.floats(0, 5e3), p_max=st.floats(0, 1e4))
def test_flex_actuation_never_exceeds_surplus(p_pv, p_nonflex, gamma, p_max):
    p = flex_actuation(p_pv, p_nonflex, FlexLoadConfig("partial", gamma, p_max))
    assert 0.0 <= p <= max(p_pv - p_nonflex, 0.0) + 1e-9
    assert p <= p_max
