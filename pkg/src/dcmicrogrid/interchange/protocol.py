"""Line-oriented ASCII frames exchanged between node agents and the
orchestrator.

One message per line, comma separated, kind first::

    STAT,<id>,<soc>,<v>,<i>,<mode>
    DEAL,<deal_id>,<from>,<to>,<amps>,<dur>,<state>
    MODE,<id>,<CV|CC|IDLE>,<setpoint>,<dir>
    SET,<path>,<value>
    ACK,<ref_kind>,<ref_id>
    ERR,<code>,<detail>

Numbers are written in canonical form: integers without sign or leading
zeros noise, floats as Python's shortest round-trip repr. The decoder only
accepts canonical numbers, so ``encode(decode(line)) == line`` for every
line that decodes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

MAX_LINE = 256  # bytes, newline included

_INT = re.compile(r"-?(0|[1-9][0-9]*)\Z")
_PATH = re.compile(r"[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z0-9_]+)*\Z")
_TOKEN = re.compile(r"[A-Za-z0-9_.:\-]+\Z")

MODES = ("CV", "CC", "IDLE")
DIRECTIONS = ("charge", "discharge", "none")
DEAL_STATES = ("proposed", "accepted", "active", "settled", "aborted")


class FrameError(ValueError):
    """A line could not be framed or decoded.

    ``offset`` is the byte offset of the offending field within the line.
    ``framing`` marks transport-level problems (size, encoding, missing
    terminator) as opposed to bad message content.
    """

    def __init__(self, message: str, offset: int = 0, framing: bool = False):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
        self.framing = framing


@dataclass(frozen=True)
class NodeStatusMsg:
    node_id: int
    soc: float  # percent
    voltage: float
    current: float  # A, charging positive
    mode: str

    def __post_init__(self):
        if self.node_id < 0:
            raise ValueError("node_id must be >= 0")
        if not 0.0 <= self.soc <= 100.0:
            raise ValueError(f"soc must be within [0, 100] %, got {self.soc}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class DealMsg:
    deal_id: int
    from_node: int
    to_node: int
    current: float
    duration: float
    state: str = "proposed"

    def __post_init__(self):
        if self.deal_id < 0 or self.from_node < 0 or self.to_node < 0:
            raise ValueError("ids must be >= 0")
        if self.from_node == self.to_node:
            raise ValueError("a deal needs two different nodes")
        if not self.current > 0 or not self.duration > 0:
            raise ValueError("deal current and duration must be > 0")
        if self.state not in DEAL_STATES:
            raise ValueError(f"unknown deal state {self.state!r}")


@dataclass(frozen=True)
class ModeCmdMsg:
    node_id: int
    mode: str
    setpoint: float = 0
    direction: str = "none"

    def __post_init__(self):
        if self.node_id < 0:
            raise ValueError("node_id must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.mode == "CV" and not (self.setpoint > 0 and self.direction == "none"):
            raise ValueError("CV needs a positive setpoint and direction 'none'")
        if self.mode == "CC" and not (self.setpoint >= 0 and self.direction != "none"):
            raise ValueError("CC needs a non-negative setpoint and a direction")
        if self.mode == "IDLE" and not (self.setpoint == 0 and self.direction == "none"):
            raise ValueError("IDLE takes setpoint 0 and direction 'none'")


@dataclass(frozen=True)
class SetMsg:
    path: str
    value: float

    def __post_init__(self):
        if not _PATH.match(self.path):
            raise ValueError(f"bad parameter path {self.path!r}")


@dataclass(frozen=True)
class AckMsg:
    ref_kind: str
    ref_id: str

    def __post_init__(self):
        if not (_TOKEN.match(self.ref_kind) and _TOKEN.match(self.ref_id)):
            raise ValueError("ACK fields must be plain tokens")


@dataclass(frozen=True)
class ErrMsg:
    code: str
    detail: str = ""

    def __post_init__(self):
        if not _TOKEN.match(self.code):
            raise ValueError("ERR code must be a plain token")
        if "\n" in self.detail or "\r" in self.detail or not self.detail.isascii():
            raise ValueError("ERR detail must be single-line ASCII")


Message = Union[NodeStatusMsg, DealMsg, ModeCmdMsg, SetMsg, AckMsg, ErrMsg]


def _num(x) -> str:
    if isinstance(x, bool):
        raise TypeError("booleans are not numbers on the wire")
    if isinstance(x, int):
        return str(x)
    return repr(float(x))


def encode_frame(msg: Message) -> str:
    """Serialize a message to one newline-terminated line."""
    if isinstance(msg, NodeStatusMsg):
        fields = ["STAT", str(msg.node_id), _num(msg.soc), _num(msg.voltage), _num(msg.current), msg.mode]
    elif isinstance(msg, DealMsg):
        fields = ["DEAL", str(msg.deal_id), str(msg.from_node), str(msg.to_node),
                  _num(msg.current), _num(msg.duration), msg.state]
    elif isinstance(msg, ModeCmdMsg):
        fields = ["MODE", str(msg.node_id), msg.mode, _num(msg.setpoint), msg.direction]
    elif isinstance(msg, SetMsg):
        fields = ["SET", msg.path, _num(msg.value)]
    elif isinstance(msg, AckMsg):
        fields = ["ACK", msg.ref_kind, msg.ref_id]
    elif isinstance(msg, ErrMsg):
        fields = ["ERR", msg.code, msg.detail]
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    line = ",".join(fields) + "\n"
    if len(line) > MAX_LINE:
        raise FrameError(f"encoded frame is {len(line)} bytes, limit {MAX_LINE}", MAX_LINE, framing=True)
    return line


# field kinds: i = int, n = number, w = word (checked by the message type)
_LAYOUT = {
    "STAT": ("i", "n", "n", "n", "w"),
    "DEAL": ("i", "i", "i", "n", "n", "w"),
    "MODE": ("i", "w", "n", "w"),
    "SET": ("w", "n"),
    "ACK": ("w", "w"),
    "ERR": ("w", "*"),
}


def _parse_number(tok: str, kind: str, offset: int):
    if _INT.match(tok):
        if tok == "-0":
            raise FrameError(f"non-canonical number {tok!r}", offset)
        return int(tok)
    if kind == "i":
        raise FrameError(f"expected an integer, got {tok!r}", offset)
    try:
        val = float(tok)
    except ValueError:
        raise FrameError(f"non-numeric field {tok!r}", offset) from None
    if repr(val) != tok:
        raise FrameError(f"non-canonical number {tok!r}", offset)
    if val != val or val in (float("inf"), float("-inf")):
        raise FrameError(f"non-finite number {tok!r}", offset)
    return val


def decode_frame(line) -> Message:
    """Parse one newline-terminated frame.

    Accepts ``str`` or ``bytes``.

    Raises:
        FrameError: framing problems (oversize, non-ASCII, missing newline)
            or malformed content; ``offset`` locates the bad field.
    """
    if isinstance(line, (bytes, bytearray)):
        raw = bytes(line)
        if len(raw) > MAX_LINE:
            raise FrameError(f"frame is {len(raw)} bytes, limit {MAX_LINE}", MAX_LINE, framing=True)
        try:
            line = raw.decode("ascii")
        except UnicodeDecodeError as exc:
            raise FrameError("non-ASCII byte in frame", exc.start, framing=True) from None
    if len(line) > MAX_LINE:
        raise FrameError(f"frame is {len(line)} bytes, limit {MAX_LINE}", MAX_LINE, framing=True)
    if not line.isascii():
        bad = next(i for i, c in enumerate(line) if ord(c) > 127)
        raise FrameError("non-ASCII character in frame", bad, framing=True)
    if not line.endswith("\n"):
        raise FrameError("frame is not newline-terminated", len(line), framing=True)
    body = line[:-1]
    if "\n" in body or "\r" in body:
        bad = min(i for i in (body.find("\n"), body.find("\r")) if i >= 0)
        raise FrameError("embedded line break", bad, framing=True)

    kind, sep, rest = body.partition(",")
    layout = _LAYOUT.get(kind)
    if layout is None:
        raise FrameError(f"unknown frame kind {kind!r}", 0)
    if layout[-1] == "*":
        toks = rest.split(",", len(layout) - 1) if sep else []
    else:
        toks = rest.split(",") if sep else []

    values = []
    offset = len(kind) + 1
    for i, tok in enumerate(toks):
        if i >= len(layout):
            raise FrameError(f"{kind} takes {len(layout)} fields, got {len(toks)}", offset)
        kind_i = layout[i]
        if kind_i in "in":
            values.append(_parse_number(tok, kind_i, offset))
        else:
            if kind_i == "w" and not tok:
                raise FrameError("empty field", offset)
            values.append(tok)
        offset += len(tok) + 1
    if len(values) != len(layout):
        raise FrameError(f"{kind} takes {len(layout)} fields, got {len(values)}", len(body))

    cls = {"STAT": NodeStatusMsg, "DEAL": DealMsg, "MODE": ModeCmdMsg,
           "SET": SetMsg, "ACK": AckMsg, "ERR": ErrMsg}[kind]
    try:
        return cls(*values)
    except (TypeError, ValueError) as exc:
        raise FrameError(f"invalid {kind} frame: {exc}", len(kind) + 1) from None
