import threading
import time
from contextlib import contextmanager
from pathlib import Path

import pytest

from dcmicrogrid.runner import run_scenario
from dcmicrogrid.scenario import parse_scenario

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"
DATA = Path(__file__).resolve().parent / "data"
SHIPPED = sorted(p.stem for p in SCENARIOS.glob("*.ini"))


class _RunCache:
    """Each shipped scenario is simulated once per session."""

    def __init__(self):
        self._runs = {}

    def __call__(self, name, **overrides):
        key = (name, tuple(sorted(overrides.items())))
        if key not in self._runs:
            cfg = parse_scenario(SCENARIOS / f"{name}.ini", overrides)
            t0 = time.perf_counter()
            res = run_scenario(cfg)
            self._runs[key] = (cfg, res, time.perf_counter() - t0)
        return self._runs[key]


@pytest.fixture(scope="session")
def shipped():
    return _RunCache()


@contextmanager
def live_run(cfg, timeout=10.0, **kwargs):
    """Run a scenario in a background thread.

    Yields a dict with ``sim`` and ``hub`` once listeners are up; the
    result lands in ``["result"]`` after the block exits.
    """
    box = {}
    ready = threading.Event()

    def started(sim, hub):
        box["sim"], box["hub"] = sim, hub
        ready.set()

    def target():
        try:
            box["result"] = run_scenario(cfg, on_started=started, **kwargs)
        except BaseException as exc:  # surfaced to the test below
            box["error"] = exc
            ready.set()

    th = threading.Thread(target=target, daemon=True)
    th.start()
    if not ready.wait(timeout):
        raise TimeoutError("scenario did not start")
    if "error" in box:
        raise box["error"]
    try:
        yield box
    finally:
        box["sim"].stop()
        th.join(timeout)
    if "error" in box:
        raise box["error"]
