"""Decentralised battery power interchange: wire protocol, deal ledger,
orchestrator and the TCP node agents."""

from .ledger import DealLedger, InvalidTransition, LedgerEntry, replay, settle_deal
from .orchestrator import OrchestrationResult, Orchestrator, OrchestratorPolicy, orchestrate_step
from .protocol import (
    MAX_LINE,
    AckMsg,
    DealMsg,
    ErrMsg,
    FrameError,
    ModeCmdMsg,
    NodeStatusMsg,
    SetMsg,
    decode_frame,
    encode_frame,
)

__all__ = [
    "MAX_LINE", "AckMsg", "DealMsg", "ErrMsg", "FrameError", "ModeCmdMsg", "NodeStatusMsg", "SetMsg",
    "decode_frame", "encode_frame", "DealLedger", "InvalidTransition", "LedgerEntry", "replay",
    "settle_deal", "OrchestrationResult", "Orchestrator", "OrchestratorPolicy", "orchestrate_step",
]
