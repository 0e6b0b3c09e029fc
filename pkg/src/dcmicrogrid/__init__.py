"""Deterministic DC microgrid simulator with PV, battery and supercapacitor
models, converter control, flexible-load dispatch and a TCP battery
power-interchange protocol."""

__version__ = "0.1.0"
