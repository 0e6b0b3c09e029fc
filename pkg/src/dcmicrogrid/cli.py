"""Command-line entry point: ``dcmicrogrid {size,run,serve,inject,summarize}``.

Exit codes: 0 success, 1 runtime or configuration error, 2 usage error,
3 connection error, 130 interrupted.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .components import ConverterRating, size_converter
from .engine import SimulationError
from .interchange.agent import AgentStartError, COMMAND_PORT, send_set
from .interchange.protocol import ErrMsg, FrameError
from .runner import run_scenario
from .scenario import ProfileError, ScenarioError, parse_scenario, read_trace_csv, summarize

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CONNECT, EXIT_INTERRUPTED = 0, 1, 2, 3, 130

_DEFAULT_RATING = ConverterRating()


def _parse_override(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or "." not in key:
        raise argparse.ArgumentTypeError(f"expected section.key=value, got {text!r}")
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcmicrogrid", description="DC microgrid simulator with battery interchange.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeat for debug)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{size,run,serve,inject,summarize}")

    p = sub.add_parser("size", help="size the boost converter inductor and capacitor")
    p.add_argument("--v-in", type=float, default=None, help=f"input voltage, V (default {_DEFAULT_RATING.v_in:g})")
    p.add_argument("--v-out", type=float, default=None, help=f"output voltage, V (default {_DEFAULT_RATING.v_out:g})")
    p.add_argument("--i-out", type=float, default=None, help=f"output current, A (default {_DEFAULT_RATING.i_out:g})")
    p.add_argument("--f", type=float, default=None, help=f"switching frequency, Hz (default {_DEFAULT_RATING.switching_freq:g})")

    def scenario_args(p, serve=False):
        p.add_argument("scenario", help="scenario file (.ini suffix optional)")
        p.add_argument("overrides", nargs="*", type=_parse_override, metavar="section.key=value",
                       help="patch scenario values before the start")
        p.add_argument("--mode", choices=("energy", "transient"), help="override sim.mode (dt follows the mode)")
        p.add_argument("--pace-factor", type=float, help="simulated seconds per wall-clock second when pacing")
        p.add_argument("--command-port", type=int, help="port for inject clients (default from the scenario)")
        if serve:
            p.add_argument("--no-realtime", action="store_true", help="run as fast as possible")
        else:
            p.add_argument("--out", default="out", help="output directory (default: out)")
            p.add_argument("--plot", action="store_true", help="also write a four-panel SVG plot")
            p.add_argument("--interchange", action="store_true",
                           help="start the TCP node agents and the command port alongside the run")
            p.add_argument("--realtime", action="store_true", help="pace simulated time to the wall clock")
            p.add_argument("--no-orchestrator", action="store_true", help="do not run the in-process orchestrator")

    scenario_args(sub.add_parser("run", help="run a scenario and write trace and summary"))
    scenario_args(sub.add_parser("serve", help="run a scenario with node agents only, for external orchestrators"),
                  serve=True)

    p = sub.add_parser("inject", help="set a parameter in a live run")
    p.add_argument("path", help="parameter path, e.g. env.irradiance")
    p.add_argument("value", type=float)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=COMMAND_PORT, help=f"command port (default {COMMAND_PORT})")
    p.add_argument("--timeout", type=float, default=5.0, help="seconds to wait for the reply")

    p = sub.add_parser("summarize", help="print summary metrics of a trace CSV")
    p.add_argument("trace")
    p.add_argument("--v-setpoint", type=float, default=100.0, help="bus setpoint for the voltage deviation, V")
    return parser


# --- subcommands ---------------------------------------------------------------------

def cmd_size(args, parser, out) -> int:
    flags = (args.v_in, args.v_out, args.i_out, args.f)
    d = _DEFAULT_RATING
    v_in = d.v_in if args.v_in is None else args.v_in
    v_out = d.v_out if args.v_out is None else args.v_out
    i_out = d.i_out if args.i_out is None else args.i_out
    f = d.switching_freq if args.f is None else args.f
    try:
        s = size_converter(ConverterRating(v_in, v_out, i_out, f))
    except ValueError as exc:
        parser.error(str(exc))
    if all(x is None for x in flags):
        print(f"defaults: --v-in {v_in:g} --v-out {v_out:g} --i-out {i_out:g} --f {f:g}", file=out)
    print(f"inductor ripple current  dI_L = {s.ripple_current:.6g} A", file=out)
    print(f"output ripple voltage    dV_o = {s.ripple_voltage:.6g} V", file=out)
    print(f"inductance               L    = {s.inductance:.6g} H", file=out)
    print(f"capacitance              C    = {s.capacitance:.6g} F", file=out)
    return EXIT_OK


def _load(args):
    overrides = dict(args.overrides)
    if args.mode:
        overrides["sim.mode"] = args.mode
    if args.pace_factor is not None:
        overrides["sim.pace_factor"] = str(args.pace_factor)
    if args.command_port is not None:
        overrides["interchange.command_port"] = str(args.command_port)
    return parse_scenario(args.scenario, overrides)


def _report_started(out):
    def started(sim, hub):
        if hub is not None:
            ports = ", ".join(str(p) for p in hub.ports)
            print(f"node agents on {hub.host}: {ports}; command port {hub.command_port}", file=out, flush=True)
    return started


def cmd_run(args, parser, out) -> int:
    cfg = _load(args)
    name = Path(cfg.source).stem
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / f"{name}.csv"
    res = run_scenario(
        cfg,
        orchestrate=False if args.no_orchestrator else None,
        agents=args.interchange,
        realtime=True if args.realtime else None,
        trace_path=trace_path,
        plot_path=out_dir / f"{name}.svg" if args.plot else None,
        on_started=_report_started(out),
    )
    if res.summary is None:
        print("no steps were simulated", file=sys.stderr)
        return EXIT_INTERRUPTED if res.interrupted else EXIT_ERROR
    report = res.summary.report()
    (out_dir / f"{name}.summary.txt").write_text(report + "\n")
    if res.orchestrator is not None:
        with open(out_dir / f"{name}.ledger.csv", "w") as fh:
            fh.write("t,deal_id,from_node,to_node,current,duration,state,reason,transferred_ah\n")
            for e in res.orchestrator.ledger:
                d = e.deal
                ah = "" if e.transferred_ah is None else f"{e.transferred_ah:.9g}"
                fh.write(f"{e.t:.9g},{d.deal_id},{d.from_node},{d.to_node},{d.current:.9g},"
                         f"{d.duration:.9g},{d.state},{e.reason},{ah}\n")
    if res.interrupted:
        print("interrupted: partial summary", file=out)
    print(report, file=out)
    print(f"trace: {trace_path}", file=out)
    return EXIT_INTERRUPTED if res.interrupted else EXIT_OK


def cmd_serve(args, parser, out) -> int:
    cfg = _load(args)
    res = run_scenario(cfg, orchestrate=False, agents=True, realtime=not args.no_realtime,
                       on_started=_report_started(out))
    if res.summary is not None:
        print(res.summary.report(), file=out)
    return EXIT_INTERRUPTED if res.interrupted else EXIT_OK


def cmd_inject(args, parser, out) -> int:
    try:
        reply = send_set(args.host, args.port, args.path, args.value, args.timeout)
    except ValueError as exc:
        parser.error(str(exc))
    except OSError as exc:
        print(f"cannot reach {args.host}:{args.port}: {exc}", file=sys.stderr)
        return EXIT_CONNECT
    if isinstance(reply, ErrMsg):
        print(f"ERR {reply.code}: {reply.detail}", file=sys.stderr)
        return EXIT_ERROR
    print(f"ACK {reply.ref_kind} {reply.ref_id}", file=out)
    return EXIT_OK


def cmd_summarize(args, parser, out) -> int:
    trace = read_trace_csv(args.trace)
    print(summarize(trace, args.v_setpoint).report(), file=out)
    return EXIT_OK


COMMANDS = {"size": cmd_size, "run": cmd_run, "serve": cmd_serve, "inject": cmd_inject, "summarize": cmd_summarize}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    # overrides may follow options, which plain parse_args refuses
    args, extra = parser.parse_known_args(argv)
    if extra:
        if args.command not in ("run", "serve") or any(x.startswith("-") or "=" not in x for x in extra):
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        try:
            args.overrides += [_parse_override(x) for x in extra]
        except argparse.ArgumentTypeError as exc:
            parser.error(str(exc))
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, parser, out)
    except (ScenarioError, ProfileError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
    except AgentStartError as exc:
        print(f"startup error: {exc}", file=sys.stderr)
    except SimulationError as exc:
        print(f"simulation failed: {exc}", file=sys.stderr)
    except (OSError, ValueError, FrameError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    except KeyboardInterrupt:
        return EXIT_INTERRUPTED
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
