"""
Where the midday surplus goes
=============================

The same clear day and household load are run three times: flexible loads
off (the battery fleet takes every surplus watt, one charging node at a
time), fully on (the flexible loads take it all), and partially on (a
reserve of gamma watts keeps flowing to the batteries). Each run writes
its trace, a four-panel plot, and a line in the comparison table.
"""

from pathlib import Path

from dcmicrogrid.runner import run_scenario
from dcmicrogrid.scenario import parse_scenario

HERE = Path(__file__).parent
OUT = HERE / "out"
OUT.mkdir(exist_ok=True)

rows = []
for name in ("flex_disabled", "flex_full", "flex_partial"):
    cfg = parse_scenario(HERE.parent / "scenarios" / f"{name}.ini")
    res = run_scenario(cfg, trace_path=OUT / f"{name}.csv", plot_path=OUT / f"{name}.svg")
    s = res.summary
    deals = sum(1 for e in res.orchestrator.ledger if e.deal.state == "settled")
    rows.append((name, s.energy_pv, s.energy_to_flex, s.energy_to_bess, s.energy_from_bess, deals))

print(f"{'scenario':16s} {'PV':>7s} {'flex':>7s} {'to BESS':>8s} {'from BESS':>9s} {'deals':>6s}   [kWh]")
for name, pv, flex, to_b, from_b, deals in rows:
    print(f"{name:16s} {pv:7.2f} {flex:7.2f} {to_b:8.2f} {from_b:9.2f} {deals:6d}")
