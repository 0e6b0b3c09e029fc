import math
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

import oracles
from dcmicrogrid.components import (
    BatteryParams,
    BatteryState,
    ConverterRating,
    DomainError,
    PvArrayConfig,
    PvCellParams,
    PvInput,
    SupercapParams,
    SupercapState,
    battery_current_for_power,
    battery_soc_step,
    battery_terminal_voltage,
    calibrate_array,
    pv_array_output,
    pv_array_power,
    pv_cell_current,
    pv_mpp,
    pv_open_circuit_voltage,
    size_converter,
    supercap_step,
)


@pytest.fixture(scope="module")
def array():
    return calibrate_array()


# --- PV ------------------------------------------------------------------------

def test_cell_current_dark_short_circuit_is_zero():
    assert pv_cell_current(PvInput(0.0, 298.15, 0.0), PvCellParams()) == 0.0


def test_cell_short_circuit_current_equals_photocurrent():
    # G * area * eta = 1000 * 0.032 * 0.25 = 8 A
    cell = PvCellParams(area_cell=0.032, efficiency=0.25)
    assert pv_cell_current(PvInput(1000.0, 298.15, 0.0), cell) == pytest.approx(8.0, rel=1e-12)


def test_cell_open_circuit_root_matches_bisection():
    cell = PvCellParams()
    temp = 298.15
    vt = cell.ideality * oracles.K * temp / oracles.Q
    photo = 1000.0 * cell.area_cell * cell.efficiency

    def i_oracle(v):
        return photo - cell.sat_current * math.expm1(v / vt) - v / cell.shunt_resistance

    v_oc = oracles.bisect_root(i_oracle, 0.0, 2.0)
    assert pv_cell_current(PvInput(1000.0, temp, v_oc), cell) == pytest.approx(0.0, abs=1e-9)
    cfg = PvArrayConfig(cell=cell, series_count=1, parallel_count=1, cells_per_module=1)
    assert pv_open_circuit_voltage(1000.0, temp, cfg) == pytest.approx(v_oc, rel=1e-9)


def test_cell_current_overflow_is_domain_error():
    with pytest.raises(DomainError):
        pv_cell_current(PvInput(1000.0, 298.15, 100.0), PvCellParams())


@pytest.mark.parametrize("kwargs", [dict(efficiency=0), dict(efficiency=1.5), dict(shunt_resistance=0),
                                    dict(sat_current=0), dict(ideality=0.5), dict(area_cell=-1)])
def test_cell_params_rejected(kwargs):
    with pytest.raises(ValueError):
        PvCellParams(**kwargs)


def test_pv_input_rejects_negative_irradiance_and_zero_temperature():
    with pytest.raises(ValueError):
        PvInput(-1.0, 298.15, 0.0)
    with pytest.raises(ValueError):
        PvInput(1000.0, 0.0, 0.0)


def test_array_zero_voltage_gives_zero_power(array):
    _, p = pv_array_output(1000.0, 298.15, 0.0, array)
    assert p == 0.0


def test_array_current_monotone_in_irradiance(array):
    v = 50.0  # below the MPP voltage
    i_500, _ = pv_array_output(500.0, 298.15, v, array)
    i_1000, _ = pv_array_output(1000.0, 298.15, v, array)
    assert i_500 < i_1000


def test_array_vectorised_matches_scalar(array):
    v = np.linspace(0.0, 80.0, 17)
    _, p = pv_array_output(800.0, 310.0, v, array)
    for vk, pk in zip(v, p):
        assert pv_array_power(800.0, 310.0, float(vk), array) == pytest.approx(pk, rel=1e-12, abs=1e-12)


def test_array_rejects_negative_voltage(array):
    with pytest.raises(ValueError):
        pv_array_output(1000.0, 298.15, -1.0, array)


def test_calibrated_array_hits_nameplate(array):
    v, p = pv_mpp(1000.0, 298.15, array)
    assert p == pytest.approx(5000.0, rel=1e-6)
    assert v == pytest.approx(69.0, rel=0.01)
    assert array.series_count == 3 and array.parallel_count == 10


@pytest.mark.parametrize("g,temp", [(1000.0, 298.15), (400.0, 298.15), (800.0, 320.0), (50.0, 280.0)])
def test_mpp_matches_dense_grid(array, g, temp):
    c = array.cell
    v_grid, p_grid = oracles.pv_power_grid(
        g, temp, cells_in_series=array.cells_in_series, parallel=array.parallel_count,
        area=c.area_cell, eff=c.efficiency, i_s=c.sat_current, n=c.ideality, r_sh=c.shunt_resistance)
    v_o, p_o = oracles.grid_mpp(v_grid, p_grid)
    v, p = pv_mpp(g, temp, array)
    assert p >= p_o - 1e-9 * p_o  # never worse than the grid
    assert p == pytest.approx(p_o, rel=1e-8)
    assert v == pytest.approx(v_o, abs=2 * (v_grid[1] - v_grid[0]))


def test_mpp_dark_is_zero(array):
    assert pv_mpp(0.0, 298.15, array) == (0.0, 0.0)


@settings(max_examples=60, deadline=None)
@given(g=st.floats(10.0, 1500.0), temp=st.floats(250.0, 350.0))
def test_mpp_is_a_local_maximum(g, temp):
    cfg = calibrate_array()
    v, p = pv_mpp(g, temp, cfg)
    for dv in (-0.05, 0.05):
        assert pv_array_power(g, temp, v + dv, cfg) <= p + 1e-9


# --- battery -------------------------------------------------------------------

@pytest.mark.parametrize("current,expected", [(0.0, 100.0), (10.0, 101.0), (-10.0, 99.0)])
def test_terminal_voltage(current, expected):
    params = BatteryParams(open_circuit_voltage=100.0, internal_resistance=0.1)
    assert battery_terminal_voltage(params, current) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("soc,current,dt,expected", [
    (0.5, 10.0, 3600.0, 1.0),
    (0.5, 0.0, 123.0, 0.5),
    (0.5, -5.0, 1800.0, 0.25),
    (0.95, 10.0, 3600.0, 1.0),  # clamped
    (0.05, -10.0, 3600.0, 0.0),  # clamped
])
def test_soc_step_vectors(soc, current, dt, expected):
    params = BatteryParams(capacity=10.0, soc_min=0.0, soc_max=1.0)
    state = BatteryState(soc, battery_terminal_voltage(params, 0.0))
    out = battery_soc_step(state, current, dt, params)
    assert out.soc == pytest.approx(float(oracles.coulomb_count(Fraction(soc), current, dt, 10)), abs=1e-15)
    assert out.terminal_voltage == battery_terminal_voltage(params, current)
    assert out.current == current


@settings(max_examples=200, deadline=None)
@given(soc=st.floats(0.3, 0.7), current=st.floats(-50.0, 50.0),
       splits=st.lists(st.floats(0.01, 100.0), min_size=1, max_size=20))
def test_coulomb_counting_is_additive(soc, current, splits):
    params = BatteryParams(capacity=100.0)
    state = BatteryState(soc, params.open_circuit_voltage)
    for dt in splits:
        state = battery_soc_step(state, current, dt, params)
    whole = battery_soc_step(BatteryState(soc, params.open_circuit_voltage), current, sum(splits), params)
    assert state.soc == pytest.approx(whole.soc, abs=64 * len(splits) * np.finfo(float).eps)


@settings(max_examples=200, deadline=None)
@given(soc=st.floats(0.0, 1.0), current=st.floats(-1e4, 1e4), dt=st.floats(1e-3, 1e5))
def test_soc_stays_in_unit_interval(soc, current, dt):
    params = BatteryParams()
    out = battery_soc_step(BatteryState(soc, 69.0), current, dt, params)
    assert 0.0 <= out.soc <= 1.0


@settings(max_examples=200, deadline=None)
@given(power=st.floats(-20000.0, 20000.0, allow_subnormal=False), r=st.sampled_from([0.0, 0.01, 0.05, 0.2]))
def test_current_for_power_inverts_terminal_power(power, r):
    params = BatteryParams(internal_resistance=r)
    assume(r == 0.0 or power > -0.9 * 69.0**2 / (4 * r))  # beyond that no current delivers it
    i = battery_current_for_power(params, power)
    assert i * battery_terminal_voltage(params, i) == pytest.approx(power, rel=1e-9, abs=1e-9)
    assert i == pytest.approx(oracles.battery_current_closed_form(69.0, r, power), rel=1e-9, abs=1e-12)
    assert np.sign(i) == np.sign(power)


def test_current_for_power_beyond_limit():
    params = BatteryParams(open_circuit_voltage=10.0, internal_resistance=1.0)
    with pytest.raises(DomainError):
        battery_current_for_power(params, -30.0)  # more than E^2 / 4R = 25 W


@pytest.mark.parametrize("kwargs", [dict(capacity=0), dict(internal_resistance=-0.1),
                                    dict(soc_min=0.5, soc_max=0.5), dict(soc_max=1.1)])
def test_battery_params_rejected(kwargs):
    with pytest.raises(ValueError):
        BatteryParams(**kwargs)


def test_battery_state_rejects_soc_outside_unit_interval():
    with pytest.raises(ValueError):
        BatteryState(1.2, 69.0)


def test_soc_step_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        battery_soc_step(BatteryState(0.5, 69.0), 1.0, 0.0, BatteryParams())


# --- supercapacitor --------------------------------------------------------------

def test_supercap_zero_current_is_identity():
    params = SupercapParams(capacitance=100.0, esr=0.01, v_init=50.0)
    s = supercap_step(SupercapState.initial(params), 0.0, 1.0, params)
    assert s.stored_voltage == 50.0 and s.terminal_voltage == 50.0


def test_supercap_discharge_step():
    params = SupercapParams(capacitance=100.0, esr=0.01, v_init=50.0)
    s = supercap_step(SupercapState.initial(params), 100.0, 1.0, params)
    assert s.stored_voltage == pytest.approx(49.0, rel=1e-15)
    assert s.terminal_voltage == pytest.approx(48.0, rel=1e-15)


def test_supercap_cannot_go_negative():
    params = SupercapParams(capacitance=1.0, v_init=1.0)
    s = supercap_step(SupercapState.initial(params), 100.0, 1.0, params)
    assert s.stored_voltage == 0.0


# --- converter sizing ------------------------------------------------------------

def test_sizing_matches_exact_rational_oracle():
    s = size_converter(ConverterRating(69.0, 100.0, 50.0, 1000.0))
    d_il, d_vo, ind, cap = oracles.sizing_exact(69, 100, 50, 1000)
    assert s.ripple_current == pytest.approx(float(d_il), rel=1e-12)
    assert s.ripple_voltage == pytest.approx(float(d_vo), rel=1e-12)
    assert s.inductance == pytest.approx(float(ind), rel=1e-12)
    assert s.capacitance == pytest.approx(float(cap), rel=1e-12)


def test_sizing_frequency_scaling():
    base = size_converter(ConverterRating(switching_freq=1000.0))
    double = size_converter(ConverterRating(switching_freq=2000.0))
    assert double.inductance == pytest.approx(base.inductance / 2, rel=1e-15)
    assert double.capacitance == pytest.approx(base.capacitance / 2, rel=1e-15)
    assert double.ripple_current == base.ripple_current
    assert double.ripple_voltage == base.ripple_voltage


@settings(max_examples=100, deadline=None)
@given(v_in=st.floats(5.0, 500.0), ratio=st.floats(1.01, 5.0), i_out=st.floats(0.1, 500.0),
       f=st.floats(100.0, 1e6))
def test_sizing_agrees_with_oracle_everywhere(v_in, ratio, i_out, f):
    v_out = v_in * ratio
    s = size_converter(ConverterRating(v_in, v_out, i_out, f))
    ref = [float(x) for x in oracles.sizing_exact(v_in, v_out, i_out, f)]
    got = [s.ripple_current, s.ripple_voltage, s.inductance, s.capacitance]
    for g, r in zip(got, ref):
        assert g == pytest.approx(r, rel=1e-12)


@pytest.mark.parametrize("v_in,v_out", [(100.0, 90.0), (100.0, 100.0), (0.0, 100.0)])
def test_sizing_rejects_non_boost(v_in, v_out):
    with pytest.raises(ValueError):
        ConverterRating(v_in, v_out)


def test_calibration_is_cached_and_reusable():
    assert calibrate_array() is calibrate_array()
    other = calibrate_array(rated_power=4000.0)
    assert pv_mpp(1000.0, 298.15, other)[1] == pytest.approx(4000.0, rel=1e-6)
    assert replace(other, rated_power=4000.0) == other
