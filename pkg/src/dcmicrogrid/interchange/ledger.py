"""Append-only log of deal state transitions."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from .protocol import DealMsg

# legal successor states; settled and aborted are terminal
TRANSITIONS = {
    None: ("proposed",),
    "proposed": ("accepted", "aborted"),
    "accepted": ("active", "aborted"),
    "active": ("settled", "aborted"),
    "settled": (),
    "aborted": (),
}


class InvalidTransition(ValueError):
    pass


@dataclass(frozen=True)
class LedgerEntry:
    t: float
    deal: DealMsg  # snapshot carrying the new state
    reason: str = ""
    transferred_ah: Optional[float] = None


class DealLedger:
    """Immutable sequence of :class:`LedgerEntry`.

    Every mutating method returns a new ledger; the current state of each
    deal is kept alongside so lookups stay O(1).
    """

    __slots__ = ("entries", "_deals", "_active_at", "_active")

    def __init__(self, entries: tuple = ()):
        self.entries: tuple = ()
        self._deals: dict = {}
        self._active_at: dict = {}
        self._active: frozenset = frozenset()
        for e in entries:
            self._check(e)
            self._absorb(e)
            self.entries += (e,)

    def _check(self, entry: LedgerEntry):
        deal = entry.deal
        prev = self._deals.get(deal.deal_id)
        if prev is None and self._deals and deal.deal_id <= max(self._deals):
            raise InvalidTransition(f"deal id {deal.deal_id} is not greater than earlier ids")
        if self.entries and entry.t < self.entries[-1].t:
            raise InvalidTransition("ledger timestamps must not go backwards")
        prev_state = prev.state if prev else None
        if deal.state not in TRANSITIONS[prev_state]:
            raise InvalidTransition(f"deal {deal.deal_id}: {prev_state} -> {deal.state} is not allowed")
        if prev is not None and replace(prev, state=deal.state) != deal:
            raise InvalidTransition(f"deal {deal.deal_id}: terms changed on transition")

    def _absorb(self, entry: LedgerEntry):
        deal_id = entry.deal.deal_id
        self._deals[deal_id] = entry.deal
        if entry.deal.state == "active":
            self._active_at[deal_id] = entry.t
            self._active = self._active | {deal_id}
        elif deal_id in self._active:
            self._active = self._active - {deal_id}

    def append(self, entry: LedgerEntry) -> "DealLedger":
        self._check(entry)
        new = DealLedger.__new__(DealLedger)
        new.entries = self.entries + (entry,)
        new._deals = dict(self._deals)
        new._active_at = dict(self._active_at)
        new._active = self._active
        new._absorb(entry)
        return new

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def deal(self, deal_id: int) -> DealMsg:
        return self._deals[deal_id]

    def deals(self) -> dict:
        """Current state of every deal, keyed by id."""
        return dict(self._deals)

    def active_deals(self) -> list[DealMsg]:
        return [self._deals[i] for i in sorted(self._active)]

    def activated_at(self, deal_id: int) -> float:
        return self._active_at[deal_id]

    @property
    def next_id(self) -> int:
        return max(self._deals) + 1 if self._deals else 1

    def propose(self, deal: DealMsg, t: float) -> "DealLedger":
        return self.append(LedgerEntry(t, replace(deal, state="proposed")))

    def transition(self, deal_id: int, state: str, t: float, reason: str = "",
                   transferred_ah: Optional[float] = None) -> "DealLedger":
        if deal_id not in self._deals:
            raise InvalidTransition(f"unknown deal {deal_id}")
        return self.append(LedgerEntry(t, replace(self._deals[deal_id], state=state), reason, transferred_ah))


def settle_deal(ledger: DealLedger, deal_id: int, measured_ah: float, t: Optional[float] = None,
                reason: str = "") -> DealLedger:
    """Close an active deal, recording the charge actually moved.

    Raises:
        InvalidTransition: the deal is unknown or not active.
    """
    if deal_id not in ledger.deals():
        raise InvalidTransition(f"unknown deal {deal_id}")
    state = ledger.deal(deal_id).state
    if state != "active":
        raise InvalidTransition(f"deal {deal_id} is {state}, only active deals settle")
    if t is None:
        t = ledger.entries[-1].t
    return ledger.transition(deal_id, "settled", t, reason, measured_ah)


def replay(entries) -> dict:
    """Rebuild final deal states from a transition log."""
    return DealLedger(tuple(entries)).deals()
