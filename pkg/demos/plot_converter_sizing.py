"""
Sizing the node boost converter
===============================

Each battery node talks to the 100 V bus through a boost converter. The
inductor and output capacitor follow from the operating point and a 1%
ripple target; this script prints the reference design and shows how
both components shrink with switching frequency.
"""

import numpy as np

from dcmicrogrid.components import ConverterRating, size_converter

# reference node: 69 V battery, 100 V bus, 50 A output, 1 kHz switching
ref = size_converter(ConverterRating(69.0, 100.0, 50.0, 1000.0))
print(f"inductor ripple  {ref.ripple_current:.6f} A")
print(f"output ripple    {ref.ripple_voltage:.6f} V")
print(f"inductance       {ref.inductance * 1e3:.3f} mH")
print(f"capacitance      {ref.capacitance * 1e3:.3f} mF")

# L and C are both inversely proportional to the switching frequency
freqs = np.array([500.0, 1000.0, 2000.0, 5000.0, 20000.0])
print("\n   f [Hz]     L [mH]     C [mF]")
for f in freqs:
    s = size_converter(ConverterRating(69.0, 100.0, 50.0, f))
    print(f"{f:9.0f} {s.inductance * 1e3:10.4f} {s.capacitance * 1e3:10.4f}")

# a deeper battery discharge means a larger boost ratio and a longer duty
print("\n  V_in [V]   duty    L [mH]")
for v_in in (60.0, 65.0, 69.0, 75.0, 80.0):
    s = size_converter(ConverterRating(v_in, 100.0, 50.0, 1000.0))
    print(f"{v_in:9.1f} {1 - v_in / 100:6.2f} {s.inductance * 1e3:9.4f}")
