"""Conversions between engine state and interchange messages."""

from __future__ import annotations

from ..control import ConverterMode
from ..engine import BessNode, ModeCommand, World
from .protocol import ModeCmdMsg, NodeStatusMsg


def node_status(node: BessNode) -> NodeStatusMsg:
    mode = node.mode.kind
    return NodeStatusMsg(node.id, node.soc * 100.0, node.battery.terminal_voltage, node.battery.current, mode)


def fleet_status(world: World) -> list[NodeStatusMsg]:
    return [node_status(n) for n in world.nodes]


def to_converter_mode(msg: ModeCmdMsg) -> ConverterMode:
    if msg.mode == "CV":
        return ConverterMode.cv(float(msg.setpoint))
    if msg.mode == "CC":
        return ConverterMode.cc(float(msg.setpoint), msg.direction)
    return ConverterMode.idle()


def to_mode_command(msg: ModeCmdMsg) -> ModeCommand:
    return ModeCommand(msg.node_id, to_converter_mode(msg))


def to_mode_msg(node_id: int, mode: ConverterMode) -> ModeCmdMsg:
    if mode.kind == "CV":
        return ModeCmdMsg(node_id, "CV", mode.setpoint)
    if mode.kind == "CC":
        return ModeCmdMsg(node_id, "CC", mode.setpoint, mode.direction.value)
    return ModeCmdMsg(node_id, "IDLE")
