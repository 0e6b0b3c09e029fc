"""Fleet-level power interchange decisions.

Each call looks at one round of node status reports and decides

* which node holds constant-voltage (bus regulating) mode,
* which node is the designated charging node while the fleet sees a PV
  surplus, rotating round-robin whenever the charger fills up,
* the deal (counterparty, current, duration) that backs the charge.

The surplus is read off the statuses themselves: with lossless converters
the summed battery power of the fleet equals PV generation minus load.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional, Sequence

from ..engine import select_cv
from .ledger import DealLedger
from .protocol import DealMsg, ModeCmdMsg, NodeStatusMsg

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OrchestratorPolicy:
    soc_min: float = 20.0  # %
    soc_max: float = 90.0  # %
    v_max: float = 110.0  # V
    i_max: float = 50.0  # A
    cursor: int = 0  # rotation position among node ids
    charge_current_default: Optional[float] = None  # None: size from surplus
    v_setpoint: float = 100.0
    deal_duration: float = 900.0  # s
    min_surplus: float = 50.0  # W needed before a charging deal opens

    def __post_init__(self):
        if not self.soc_min < self.soc_max:
            raise ValueError("soc_min must be < soc_max")
        if self.cursor < 0:
            raise ValueError("cursor must be >= 0")
        if self.v_setpoint > self.v_max:
            raise ValueError("v_setpoint exceeds v_max")
        if self.i_max <= 0 or self.deal_duration <= 0:
            raise ValueError("i_max and deal_duration must be > 0")


@dataclass(frozen=True)
class OrchestrationResult:
    commands: tuple  # ModeCmdMsg, one per online node
    new_deals: tuple  # DealMsg opened by this call
    policy: OrchestratorPolicy
    ledger: DealLedger
    events: tuple  # (kind, detail)
    fault: bool = False


def _sign(x: float, eps: float = 1e-6) -> int:
    return (x > eps) - (x < -eps)


def orchestrate_step(statuses: Sequence[NodeStatusMsg], policy: OrchestratorPolicy,
                     ledger: DealLedger, now: float = 0.0) -> OrchestrationResult:
    """Decide modes and deals for one status round.

    Pure in its inputs: the same statuses, policy and ledger always give
    the same commands.
    """
    events = []
    by_id = {s.node_id: s for s in statuses}
    ids = sorted(by_id)
    if not ids:
        return OrchestrationResult((), (), policy, ledger, (("starvation", "no nodes online"),), True)
    n = len(ids)
    cursor = policy.cursor % n
    lo, hi = policy.soc_min, policy.soc_max

    surplus = math.fsum(s.voltage * s.current for s in statuses)
    cvs = [i for i in ids if by_id[i].mode == "CV"]
    cv = cvs[0] if cvs else None
    need = _sign(by_id[cv].current) if cv is not None else _sign(surplus)
    candidates = [(i, by_id[i].soc / 100.0, lo / 100.0, hi / 100.0) for i in ids]
    new_cv, fault = select_cv(cv, candidates, need)
    if new_cv != cv:
        events.append(("cv_handover", f"{cv} -> {new_cv}"))
    if fault:
        events.append(("islanding_fault", f"cv={new_cv}"))

    active = ledger.active_deals()
    deal = active[0] if active else None
    new_deals = []

    def close(d, reason):
        nonlocal ledger
        elapsed = now - ledger.activated_at(d.deal_id)
        ledger = ledger.transition(d.deal_id, "settled", now, reason, d.current * elapsed / 3600.0)
        events.append(("deal_settled", f"{d.deal_id} {reason}"))

    # anything beyond the first active deal is stale
    for extra in active[1:]:
        ledger = ledger.transition(extra.deal_id, "aborted", now, "duplicate")

    if deal is not None:
        charger = by_id.get(deal.to_node)
        if charger is None:
            ledger = ledger.transition(deal.deal_id, "aborted", now, "node offline")
            deal = None
        elif deal.to_node == new_cv:
            close(deal, "cv_handover")
            deal = None
        elif charger.soc >= hi:
            close(deal, "soc_max")
            cursor = (ids.index(deal.to_node) + 1) % n
            deal = None
        elif surplus <= 0.0:
            close(deal, "no_surplus")
            cursor = ids.index(deal.to_node)
            deal = None
        elif now - ledger.activated_at(deal.deal_id) >= deal.duration:
            close(deal, "expired")
            cursor = ids.index(deal.to_node)
            deal = None

    if deal is None and surplus > policy.min_surplus:
        chosen = None
        for k in range(n):
            node_id = ids[(cursor + k) % n]
            s = by_id[node_id]
            if node_id != new_cv and s.soc < hi and s.voltage < policy.v_max:
                chosen = node_id
                cursor = (cursor + k) % n
                break
        if chosen is None:
            events.append(("starvation", f"no node can absorb {surplus:.1f} W"))
        else:
            v = by_id[chosen].voltage
            amps = policy.charge_current_default
            if amps is None:
                amps = surplus / v if v > 0 else 0.0
            amps = min(amps, policy.i_max)
            if amps > 0 and new_cv is not None:
                deal = DealMsg(ledger.next_id, new_cv, chosen, amps, policy.deal_duration)
                ledger = ledger.propose(deal, now)
                ledger = ledger.transition(deal.deal_id, "accepted", now)
                ledger = ledger.transition(deal.deal_id, "active", now)
                deal = ledger.deal(deal.deal_id)
                new_deals.append(deal)
                events.append(("deal_opened", f"{deal.deal_id} {new_cv}->{chosen} {amps:.3f} A"))

    if deal is not None:
        commands = _commands(tuple(ids), new_cv, deal.to_node, deal.current, min(policy.v_setpoint, policy.v_max))
    else:
        commands = _commands(tuple(ids), new_cv, None, 0.0, min(policy.v_setpoint, policy.v_max))
    for kind, detail in events:
        log.debug("t=%s %s %s", now, kind, detail)
    if cursor != policy.cursor:
        policy = replace(policy, cursor=cursor)
    return OrchestrationResult(commands, tuple(new_deals), policy,
                               ledger, tuple(events), fault)


@lru_cache(maxsize=256)
def _commands(ids: tuple, cv: Optional[int], charger: Optional[int], amps: float, v_set: float) -> tuple:
    out = []
    for i in ids:
        if i == cv:
            out.append(ModeCmdMsg(i, "CV", v_set))
        elif i == charger:
            out.append(ModeCmdMsg(i, "CC", amps, "charge"))
        else:
            out.append(ModeCmdMsg(i, "IDLE"))
    return tuple(out)


class Orchestrator:
    """Stateful wrapper that threads policy and ledger between calls."""

    def __init__(self, policy: OrchestratorPolicy = OrchestratorPolicy(), ledger: Optional[DealLedger] = None):
        self.policy = policy
        self.ledger = ledger if ledger is not None else DealLedger()
        self.events: list = []
        self.last_commands: tuple = ()
        self._ongoing: set = set()

    def step(self, statuses: Sequence[NodeStatusMsg], now: float) -> OrchestrationResult:
        res = orchestrate_step(statuses, self.policy, self.ledger, now)
        self.policy = res.policy
        self.ledger = res.ledger
        for kind, detail in res.events:
            # starvation and faults repeat every round while they last; log the onset only
            if kind in ("starvation", "islanding_fault"):
                if kind in self._ongoing:
                    continue
            self.events.append((now, kind, detail))
        self._ongoing = {k for k, _ in res.events if k in ("starvation", "islanding_fault")}
        self.last_commands = res.commands
        return res
