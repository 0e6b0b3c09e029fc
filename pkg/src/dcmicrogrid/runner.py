"""Run a parsed scenario end to end: world, orchestrator, agents, outputs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from .engine import ModeCommand, Simulation, StepRecord, World
from .interchange.agent import AgentHub
from .interchange.bridge import fleet_status, to_converter_mode
from .interchange.orchestrator import Orchestrator, OrchestratorPolicy
from .scenario import ScenarioConfig, SummaryMetrics, build_world, emit_plot, summarize, write_trace_csv

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    trace: list
    summary: Optional[SummaryMetrics]
    world: World
    orchestrator: Optional[Orchestrator] = None
    interrupted: bool = False
    agent_counters: dict = field(default_factory=dict)


def make_orchestrator(cfg: ScenarioConfig) -> Orchestrator:
    bp = cfg.nodes[0]["params"]
    ic = cfg.interchange
    return Orchestrator(OrchestratorPolicy(
        soc_min=bp.soc_min * 100.0, soc_max=bp.soc_max * 100.0, v_max=ic.v_max, i_max=ic.i_max,
        charge_current_default=ic.charge_current, v_setpoint=cfg.sim.v_grid_setpoint,
        deal_duration=ic.deal_duration, min_surplus=ic.min_surplus,
    ))


def orchestrator_hook(orch: Orchestrator) -> Callable[[World], list]:
    """Controller callback that runs one orchestration round per status tick
    and returns the mode changes it implies."""

    last = [(), ()]  # command tuple and its converter modes; tuples repeat while nothing changes

    def hook(world: World):
        res = orch.step(fleet_status(world), world.t)
        if res.commands is not last[0]:
            last[:] = [res.commands, [to_converter_mode(m) for m in res.commands]]
        cmds = []
        for msg, mode in zip(*last):
            current = world.nodes[msg.node_id].mode
            if current is not mode and current != mode:
                cmds.append(ModeCommand(msg.node_id, mode))
        # the new CV node first, so the old one is demoted before it is reassigned
        cmds.sort(key=lambda c: c.mode.kind != "CV")
        return cmds

    return hook


def run_scenario(
    cfg: ScenarioConfig,
    *,
    orchestrate: Optional[bool] = None,
    agents: bool = False,
    realtime: Optional[bool] = None,
    trace_path=None,
    plot_path=None,
    on_started: Optional[Callable[[Simulation, Optional[AgentHub]], None]] = None,
) -> RunResult:
    """Simulate a scenario for its configured duration.

    Args:
        orchestrate: run the in-process orchestrator (default: the
            scenario's ``interchange.enabled``).
        agents: also expose the TCP node agents and the command port.
        realtime: override the scenario's pacing flag.
        trace_path / plot_path: optional CSV and SVG outputs.
        on_started: called once listeners are up, before the first step.

    A KeyboardInterrupt stops the run; the partial trace is still written
    and summarised and ``interrupted`` is set.
    """
    if realtime is not None and realtime != cfg.sim.realtime_pacing:
        from dataclasses import replace
        cfg = replace(cfg, sim=replace(cfg.sim, realtime_pacing=realtime))
    world = build_world(cfg)
    if orchestrate is None:
        orchestrate = cfg.interchange.enabled
    orch = make_orchestrator(cfg) if orchestrate else None
    hook = orchestrator_hook(orch) if orch else None

    trace: list[StepRecord] = []
    sim = Simulation(world, cfg.injections, None, cfg.interchange.status_interval, on_record=trace.append)
    hub = None
    if agents:
        ic = cfg.interchange
        hub = AgentHub(sim.submit, len(world.nodes), ic.host, ic.base_port, ic.command_port).start()

    def controller(w: World):
        if hub is not None:
            hub.publish(fleet_status(w))
        return hook(w) if hook else ()

    if hook or hub:
        sim.controller = controller

    interrupted = False
    try:
        if on_started is not None:
            on_started(sim, hub)
        sim.run()
    except KeyboardInterrupt:
        interrupted = True
        log.warning("interrupted at t=%.3f s", world.t)
    finally:
        counters = dict(hub.counters) if hub else {}
        if hub is not None:
            hub.close()

    if orch is not None:
        world.events.extend(orch.events)
    summary = summarize(trace, cfg.sim.v_grid_setpoint, cfg.sim.dt) if trace else None
    if trace and trace_path is not None:
        write_trace_csv(trace, trace_path)
    if trace and plot_path is not None:
        emit_plot(trace, plot_path)
    return RunResult(trace, summary, world, orch, interrupted, counters)
