"""
PV array curves and maximum power point tracking
================================================

The 3s10p array is calibrated so its maximum power point sits at 5 kW near
69 V under standard test conditions. We draw the P-V curves for a few
irradiance levels, then let the perturb-and-observe tracker find the peak
from a cold start.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from dcmicrogrid.components import calibrate_array, pv_array_power, pv_mpp, pv_open_circuit_voltage
from dcmicrogrid.control import MpptState, mppt_step

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

array = calibrate_array()
print(f"cells per module {array.cells_per_module}, cell efficiency {array.cell.efficiency:.4f}")

T = 298.15
fig, (ax_pv, ax_track) = plt.subplots(1, 2, figsize=(11, 4))
for g in (200.0, 400.0, 600.0, 800.0, 1000.0):
    voc = pv_open_circuit_voltage(g, T, array)
    v = np.linspace(0.0, voc, 400)
    p = [pv_array_power(g, T, x, array) for x in v]
    v_mpp, p_mpp = pv_mpp(g, T, array)
    ax_pv.plot(v, p, label=f"{g:.0f} W/m$^2$")
    ax_pv.plot(v_mpp, p_mpp, "k.")
    print(f"G={g:6.0f}  Voc={voc:6.2f} V  MPP {p_mpp:7.1f} W at {v_mpp:5.2f} V")
ax_pv.set_xlabel("array voltage [V]")
ax_pv.set_ylabel("power [W]")
ax_pv.legend()

# P&O from 40 V with a 0.5 V perturbation; a cloud halves irradiance halfway
state = MpptState(v_ref=40.0, step_size=0.5, v_max=pv_open_circuit_voltage(1000.0, T, array))
trace = []
for k in range(400):
    g = 1000.0 if k < 200 else 500.0
    p = pv_array_power(g, T, state.v_ref, array)
    trace.append((state.v_ref, p))
    state = mppt_step(state, state.v_ref, p)
v_hist, p_hist = np.array(trace).T
ax_track.plot(v_hist, label="tracker voltage")
ax_track.axhline(pv_mpp(1000.0, T, array)[0], ls="--", c="k", lw=0.8)
ax_track.axhline(pv_mpp(500.0, T, array)[0], ls=":", c="k", lw=0.8)
ax_track.set_xlabel("iteration")
ax_track.set_ylabel("voltage reference [V]")
ax_track.legend()
fig.tight_layout()
fig.savefig(OUT / "pv_tracking.svg")
print(f"tracker ends at {v_hist[-1]:.2f} V, {p_hist[-1]:.1f} W")
