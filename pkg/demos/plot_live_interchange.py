"""
Driving the fleet over TCP
==========================

The simulation runs paced to the wall clock (200x real time here) with
one node agent per battery on ports 44380-44383. An external orchestrator
connects to all four, reads their STAT frames and answers with MODE
commands, while a separate client changes the irradiance through the
command port, the same thing ``dcmicrogrid inject`` does.
"""

import threading
import time
from pathlib import Path

from dcmicrogrid.interchange.agent import OrchestratorClient, send_set
from dcmicrogrid.runner import make_orchestrator, run_scenario
from dcmicrogrid.scenario import parse_scenario

SCENARIO = Path(__file__).parent.parent / "scenarios" / "flex_disabled.ini"
cfg = parse_scenario(SCENARIO, {"sim.realtime_pacing": "true", "sim.pace_factor": "200",
                                "nodes.initial_soc": "0.5"})

ready = threading.Event()
box = {}


def started(sim, hub):
    box["sim"], box["hub"] = sim, hub
    ready.set()


runner = threading.Thread(target=lambda: box.update(result=run_scenario(
    cfg, orchestrate=False, agents=True, on_started=started)), daemon=True)
runner.start()
ready.wait(10)
hub = box["hub"]
print(f"agents on {hub.ports}, command port {hub.command_port}")

# night time in the profile: make it sunny so there is something to place
print("inject:", send_set(hub.host, hub.command_port, "env.irradiance", 1000.0))

orch = make_orchestrator(cfg)
with OrchestratorClient(orch, hub.host, hub.ports) as client:
    client.run(120)
print(f"{client.rounds} rounds, {len(client.acks)} MODE acks, {len(client.errors)} errors")
for e in orch.ledger:
    if e.deal.state in ("active", "settled"):
        d = e.deal
        print(f"  t={e.t:5.0f}  deal {d.deal_id}: {d.from_node} -> {d.to_node} at {d.current:.1f} A, {d.state}")

box["sim"].stop()
runner.join(10)
last = box["result"].trace[-1]
print("final modes", last.mode, "SoC", [round(s, 4) for s in last.soc])
time.sleep(0.1)
