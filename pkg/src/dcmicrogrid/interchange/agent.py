"""TCP node agents and the matching orchestrator client.

The grid side is the server: node ``i`` listens on ``base_port + i`` and
accepts a single orchestrator connection at a time. Agents run on an
asyncio loop in a background thread and never touch the world directly.
Status snapshots arrive through :meth:`AgentHub.publish` and inbound
commands leave through a ``submit(cmd, reply)`` callable, normally
:meth:`Simulation.submit`, which applies them at the next step boundary and
then calls ``reply(ok, detail)``.

An optional command port accepts SET (and MODE) frames from any number of
short-lived clients; this is what ``dcmicrogrid inject`` talks to.
"""

from __future__ import annotations

import asyncio
import logging
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from ..engine import InjectionCommand
from .bridge import to_mode_command
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

log = logging.getLogger(__name__)

BASE_PORT = 44380
COMMAND_PORT = 44390
MAX_FRAMING_ERRORS = 10
_MAX_PENDING_OUT = 1 << 16  # bytes buffered per client before STAT frames are dropped

Submit = Callable[[object, Optional[Callable[[bool, str], None]]], None]


class AgentStartError(OSError):
    """A listener could not be bound; ``port`` names the culprit."""

    def __init__(self, port: int, reason: str):
        super().__init__(f"cannot listen on port {port}: {reason}")
        self.port = port


def _err_line(code: str, detail: str) -> bytes:
    detail = detail.replace("\n", " ").replace("\r", " ")
    detail = detail.encode("ascii", "backslashreplace").decode("ascii")
    room = MAX_LINE - len("ERR,,\n") - len(code)
    return encode_frame(ErrMsg(code, detail[:room])).encode("ascii")


@dataclass
class _Conn:
    writer: asyncio.StreamWriter
    framing_errors: int = 0
    closed: bool = False

    def send(self, data: bytes, droppable: bool = False):
        if self.closed or self.writer.is_closing():
            return
        if droppable and self.writer.transport.get_write_buffer_size() > _MAX_PENDING_OUT:
            return
        self.writer.write(data)


@dataclass
class _NodeSlot:
    node_id: int
    port: int
    conn: Optional[_Conn] = None
    server: Optional[asyncio.AbstractServer] = None
    deals: dict = field(default_factory=dict)
    stat_frames: int = 0


class AgentHub:
    """All node agents of one simulation plus the optional command port.

    Args:
        submit: ``submit(cmd, reply)``; commands are
            :class:`~dcmicrogrid.engine.ModeCommand` or
            :class:`~dcmicrogrid.engine.InjectionCommand`.
        n_nodes: number of agents, node ids ``0..n_nodes-1``.
        host: bind address.
        base_port: node ``i`` listens on ``base_port + i``; 0 picks free
            ports (see :attr:`ports`).
        command_port: port for ``inject`` clients; None disables it.
        max_framing_errors: a connection exceeding this many framing
            errors is closed.
    """

    def __init__(self, submit: Submit, n_nodes: int, host: str = "127.0.0.1", base_port: int = BASE_PORT,
                 command_port: Optional[int] = None, max_framing_errors: int = MAX_FRAMING_ERRORS):
        self.submit = submit
        self.host = host
        self.max_framing_errors = max_framing_errors
        self.slots = [_NodeSlot(i, base_port + i if base_port else 0) for i in range(n_nodes)]
        self.command_port = command_port
        self._command_server = None
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._thread: Optional[threading.Thread] = None
        self.counters = {"frames_in": 0, "frame_errors": 0, "closed_noisy": 0, "busy_refused": 0}

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "AgentHub":
        """Bind every listener; raises :class:`AgentStartError` on collision."""
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, name="agent-hub", daemon=True)
        self._thread.start()
        fut = asyncio.run_coroutine_threadsafe(self._bind_all(), self._loop)
        try:
            fut.result()
        except BaseException:
            self._stop_loop()
            raise
        return self

    async def _bind_all(self):
        servers = []

        async def bind(handler, port):
            try:
                srv = await asyncio.start_server(handler, self.host, port, limit=MAX_LINE * 4)
            except OSError as exc:
                for s in servers:
                    s.close()
                raise AgentStartError(port, exc.strerror or str(exc)) from None
            servers.append(srv)
            return srv

        for slot in self.slots:
            slot.server = await bind(lambda r, w, s=slot: self._serve_node(s, r, w), slot.port)
            slot.port = slot.server.sockets[0].getsockname()[1]
        if self.command_port is not None:
            self._command_server = await bind(self._serve_command, self.command_port)
            self.command_port = self._command_server.sockets[0].getsockname()[1]

    @property
    def ports(self) -> list[int]:
        return [s.port for s in self.slots]

    def close(self):
        if self._loop is None:
            return
        fut = asyncio.run_coroutine_threadsafe(self._close_all(), self._loop)
        try:
            fut.result(timeout=5)
        finally:
            self._stop_loop()

    async def _close_all(self):
        servers = [s.server for s in self.slots if s.server] + ([self._command_server] if self._command_server else [])
        for srv in servers:
            srv.close()
        for slot in self.slots:
            if slot.conn is not None:
                slot.conn.closed = True
                slot.conn.writer.close()
        for srv in servers:
            await srv.wait_closed()

    def _stop_loop(self):
        loop, self._loop = self._loop, None
        loop.call_soon_threadsafe(loop.stop)
        self._thread.join(timeout=5)
        loop.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    # -- outbound -------------------------------------------------------------

    def publish(self, statuses: Sequence[NodeStatusMsg]):
        """Thread-safe: stream one STAT frame to each connected orchestrator."""
        if self._loop is None:
            return
        frames = [(s.node_id, encode_frame(s).encode("ascii")) for s in statuses]
        self._loop.call_soon_threadsafe(self._broadcast, frames)

    def _broadcast(self, frames):
        for node_id, data in frames:
            if 0 <= node_id < len(self.slots):
                slot = self.slots[node_id]
                if slot.conn is not None:
                    slot.conn.send(data, droppable=True)
                    slot.stat_frames += 1

    def _reply_later(self, conn: _Conn, ack: bytes):
        loop = self._loop

        def reply(ok: bool, detail: str):
            data = ack if ok else _err_line("rejected", detail)
            if loop is not None and not loop.is_closed():
                loop.call_soon_threadsafe(conn.send, data)

        return reply

    # -- inbound ----------------------------------------------------------------

    async def _serve_node(self, slot: _NodeSlot, reader, writer):
        conn = _Conn(writer)
        if slot.conn is not None:
            self.counters["busy_refused"] += 1
            writer.write(_err_line("busy", f"node {slot.node_id} already has an orchestrator"))
            await self._shutdown(conn)
            return
        slot.conn = conn
        log.info("node %d: orchestrator connected", slot.node_id)
        try:
            await self._read_frames(conn, reader, lambda msg: self._node_frame(slot, conn, msg))
        finally:
            slot.conn = None
            await self._shutdown(conn)
            log.info("node %d: orchestrator disconnected, holding last mode", slot.node_id)

    async def _serve_command(self, reader, writer):
        conn = _Conn(writer)
        try:
            await self._read_frames(conn, reader, lambda msg: self._command_frame(conn, msg))
        finally:
            await self._shutdown(conn)

    async def _shutdown(self, conn: _Conn):
        conn.closed = True
        try:
            await conn.writer.drain()
        except (ConnectionError, OSError):
            pass
        conn.writer.close()
        try:
            await conn.writer.wait_closed()
        except (ConnectionError, OSError):
            pass

    async def _read_frames(self, conn: _Conn, reader: asyncio.StreamReader, handle):
        buf = bytearray()
        discarding = False  # inside an oversize line, waiting for its newline
        while not conn.closed:
            try:
                chunk = await reader.read(4096)
            except (ConnectionError, OSError):
                return
            if not chunk:
                return
            buf += chunk
            while True:
                nl = buf.find(b"\n")
                if nl < 0:
                    if len(buf) > MAX_LINE and not discarding:
                        discarding = True
                        if not self._framing_error(conn, FrameError(
                                f"line exceeds {MAX_LINE} bytes", MAX_LINE, framing=True)):
                            return
                    if discarding:
                        buf.clear()
                    break
                line = bytes(buf[:nl + 1])
                del buf[:nl + 1]
                if discarding:
                    discarding = False
                    continue
                if line.strip() == b"":
                    continue  # keep-alive / stray terminator: silently dropped
                self.counters["frames_in"] += 1
                try:
                    msg = decode_frame(line)
                except FrameError as exc:
                    if exc.framing:
                        if not self._framing_error(conn, exc):
                            return
                    else:
                        self.counters["frame_errors"] += 1
                        conn.send(_err_line("decode", str(exc)))
                    continue
                handle(msg)
            try:
                await conn.writer.drain()
            except (ConnectionError, OSError):
                return

    def _framing_error(self, conn: _Conn, exc: FrameError) -> bool:
        """Report a framing error; False once the connection must close."""
        self.counters["frame_errors"] += 1
        conn.framing_errors += 1
        if conn.framing_errors > self.max_framing_errors:
            self.counters["closed_noisy"] += 1
            conn.send(_err_line("closing", f"more than {self.max_framing_errors} framing errors"))
            return False
        conn.send(_err_line("frame", str(exc)))
        return True

    def _submit(self, conn: _Conn, cmd, ack: AckMsg):
        try:
            self.submit(cmd, self._reply_later(conn, encode_frame(ack).encode("ascii")))
        except Exception as exc:  # a broken sink must not kill the agent
            conn.send(_err_line("unavailable", str(exc)))

    def _node_frame(self, slot: _NodeSlot, conn: _Conn, msg):
        if isinstance(msg, ModeCmdMsg):
            if msg.node_id != slot.node_id:
                conn.send(_err_line("wrong_node", f"this port serves node {slot.node_id}, got {msg.node_id}"))
                return
            self._submit(conn, to_mode_command(msg), AckMsg("MODE", str(msg.node_id)))
        elif isinstance(msg, SetMsg):
            self._submit(conn, InjectionCommand(msg.path, msg.value), AckMsg("SET", msg.path))
        elif isinstance(msg, DealMsg):
            # deals are bookkept by the orchestrator; the node only records them
            slot.deals[msg.deal_id] = msg
            conn.send(encode_frame(AckMsg("DEAL", str(msg.deal_id))).encode("ascii"))
        elif isinstance(msg, (AckMsg, ErrMsg)):
            pass
        else:
            conn.send(_err_line("unexpected", f"{type(msg).__name__} is not accepted by a node agent"))

    def _command_frame(self, conn: _Conn, msg):
        if isinstance(msg, SetMsg):
            self._submit(conn, InjectionCommand(msg.path, msg.value), AckMsg("SET", msg.path))
        elif isinstance(msg, ModeCmdMsg):
            self._submit(conn, to_mode_command(msg), AckMsg("MODE", str(msg.node_id)))
        elif not isinstance(msg, (AckMsg, ErrMsg)):
            conn.send(_err_line("unexpected", "command port accepts SET and MODE only"))


# --- client side -------------------------------------------------------------------

class LineSocket:
    """Blocking newline-framed socket used by clients and tests."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.settimeout(timeout)
        self._buf = bytearray()

    def send(self, msg_or_line):
        data = msg_or_line if isinstance(msg_or_line, (bytes, bytearray)) else (
            msg_or_line if isinstance(msg_or_line, str) else encode_frame(msg_or_line))
        self.sock.sendall(data.encode("ascii") if isinstance(data, str) else bytes(data))

    def readline(self) -> Optional[bytes]:
        """Next raw line, or None once the peer has closed."""
        while b"\n" not in self._buf:
            chunk = self.sock.recv(4096)
            if not chunk:
                return None
            self._buf += chunk
        nl = self._buf.index(b"\n")
        line = bytes(self._buf[:nl + 1])
        del self._buf[:nl + 1]
        return line

    def read_msg(self):
        line = self.readline()
        return None if line is None else decode_frame(line)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def send_set(host: str, port: int, path: str, value: float, timeout: float = 5.0):
    """Send one SET frame and wait for the reply (an AckMsg or ErrMsg).

    Raises:
        OSError: the connection could not be made or broke.
    """
    with LineSocket(host, port, timeout) as s:
        s.send(SetMsg(path, value))
        while True:
            msg = s.read_msg()
            if msg is None:
                raise ConnectionError("server closed the connection without replying")
            if isinstance(msg, (AckMsg, ErrMsg)):
                return msg


class OrchestratorClient:
    """Sequential orchestrator that drives node agents over TCP.

    Each round reads the next STAT frame from every node, runs the
    orchestrator and sends a MODE frame to each node whose command changed.
    Deal timing uses the round count times ``status_interval`` as the clock.
    """

    def __init__(self, orchestrator, host: str = "127.0.0.1", ports: Sequence[int] = (), status_interval: float = 1.0,
                 timeout: float = 10.0):
        self.orchestrator = orchestrator
        self.host = host
        self.ports = list(ports)
        self.status_interval = status_interval
        self.timeout = timeout
        self.socks: list[LineSocket] = []
        self.sent: dict = {}
        self.acks: list = []
        self.errors: list = []
        self.rounds = 0

    def connect(self, retries: int = 50, delay: float = 0.1):
        for port in self.ports:
            for attempt in range(retries):
                try:
                    self.socks.append(LineSocket(self.host, port, self.timeout))
                    break
                except OSError:
                    if attempt == retries - 1:
                        raise
                    time.sleep(delay)
        return self

    def _next_status(self, s: LineSocket) -> Optional[NodeStatusMsg]:
        while True:
            msg = s.read_msg()
            if msg is None:
                return None
            if isinstance(msg, NodeStatusMsg):
                return msg
            (self.acks if isinstance(msg, AckMsg) else self.errors).append(msg)

    def round(self):
        statuses = []
        for s in self.socks:
            st = self._next_status(s)
            if st is None:
                return None
            statuses.append(st)
        now = self.rounds * self.status_interval
        self.rounds += 1
        res = self.orchestrator.step(statuses, now)
        for cmd in res.commands:
            if self.sent.get(cmd.node_id) != cmd:
                self.socks[cmd.node_id].send(cmd)
                self.sent[cmd.node_id] = cmd
        return res

    def run(self, rounds: int):
        for _ in range(rounds):
            if self.round() is None:
                break
        return self

    def close(self):
        for s in self.socks:
            s.close()
        self.socks = []

    def __enter__(self):
        return self.connect()

    def __exit__(self, *exc):
        self.close()
