"""Framed wire protocol: the one way in and out of a realm server.

Frames are JSON objects with a "type" field, carried over either a raw TCP
stream (4-byte big-endian length prefix per frame) or a WebSocket (one frame
per websocket message). Both transports speak identical payloads:

    HELLO  {world, address, auth-token}     client -> server, then ack back
    SEND   {mbox}                           client -> server
    DELIVER{mbox, serial-in-journal}        server -> client
    TAIL   {agent, from-offset, user-view}  client -> server (subscription)
    ERROR  {code, detail}                   server -> client
    FORCE-RELEASE {agent, admin-token}      operator escape hatch

The mbox field always holds the byte-exact canonical serialization.
"""
from __future__ import annotations

import asyncio
import json
import logging
import socket
import struct

from .errors import AgentpostError, UnknownAgent
from .memory import involves_system
from .message import parse_mbox, serialize_mbox
from .realm import RealmServer

log = logging.getLogger(__name__)

MAX_FRAME = 32 * 1024 * 1024


def encode_frame(obj: dict) -> bytes:
    payload = json.dumps(obj, separators=(",", ":")).encode("utf-8")
    return struct.pack(">I", len(payload)) + payload


class Session:
    """One connected client; transport-agnostic."""

    def __init__(self, server: "WireServer", conn_id: str, send):
        self.server = server
        self.conn_id = conn_id
        self.send = send  # coroutine taking a dict
        self.address: str | None = None
        self.hooks: list = []  # (kind, key, fn) for cleanup

    async def handle_frame(self, frame: dict) -> None:
        ftype = frame.get("type")
        try:
            if ftype == "HELLO":
                await self._hello(frame)
            elif ftype == "SEND":
                await self._send_msg(frame)
            elif ftype == "TAIL":
                await self._tail(frame)
            elif ftype == "FORCE-RELEASE":
                await self._force_release(frame)
            else:
                await self.error("BadFrame", f"unknown frame type {ftype!r}")
        except AgentpostError as exc:
            await self.error(type(exc).__name__, str(exc))
        except Exception as exc:
            log.exception("frame handling failed")
            await self.error("Internal", str(exc))

    async def error(self, code: str, detail: str) -> None:
        await self.send({"type": "ERROR", "code": code, "detail": detail})

    async def _hello(self, frame: dict) -> None:
        realm = self.server.realm
        addr = realm.hello(self.conn_id, frame.get("world", ""),
                           frame.get("address", ""), frame.get("auth-token", ""))
        self.address = addr.text
        loop = asyncio.get_running_loop()

        def deliver(msg, offset, _loop=loop):
            frame = {"type": "DELIVER",
                     "mbox": serialize_mbox([msg]).decode("utf-8"),
                     "serial-in-journal": offset}
            _loop.call_soon_threadsafe(
                lambda: asyncio.ensure_future(self.send(frame)))

        realm.add_delivery_hook(addr.text, deliver)
        self.hooks.append(("delivery", addr.text, deliver))
        await self.send({"type": "HELLO", "world": realm.world.id,
                         "address": addr.text, "realm": realm.id})

    async def _send_msg(self, frame: dict) -> None:
        msgs = parse_mbox(frame["mbox"])
        if len(msgs) != 1:
            await self.error("BadFrame", "SEND carries exactly one message")
            return
        self.server.realm.ingest(self.conn_id, msgs[0])

    async def _tail(self, frame: dict) -> None:
        realm = self.server.realm
        agent = frame["agent"]
        start = int(frame.get("from-offset", 0))
        user_view = bool(frame.get("user-view", False))
        mem = realm.memories.get(agent)
        if mem is None:
            from . import memory as memstore
            if not memstore.agent_exists(realm.storage_root, realm.world.id, agent):
                raise UnknownAgent(agent)
            mem = realm.ensure_agent(agent)
        loop = asyncio.get_running_loop()

        async def emit(msg, offset):
            if user_view and involves_system(msg):
                return
            await self.send({"type": "DELIVER",
                             "mbox": serialize_mbox([msg]).decode("utf-8"),
                             "serial-in-journal": offset})

        for i, entry in enumerate(mem.journal.entries[start:], start):
            await emit(entry, i)

        def hook(msg, offset, _loop=loop):
            _loop.call_soon_threadsafe(
                lambda: asyncio.ensure_future(emit(msg, offset)))

        realm.add_tail_hook(agent, hook)
        self.hooks.append(("tail", agent, hook))

    async def _force_release(self, frame: dict) -> None:
        realm = self.server.realm
        if not realm.admin_token or frame.get("admin-token") != realm.admin_token:
            await self.error("NotAuthorized", "bad admin token")
            return
        realm.locks.force_release(frame["agent"])
        realm.memories.pop(frame["agent"], None)
        await self.send({"type": "HELLO", "world": realm.world.id,
                         "address": frame["agent"], "realm": realm.id})

    def close(self) -> None:
        realm = self.server.realm
        for kind, key, fn in self.hooks:
            if kind == "delivery":
                realm.remove_delivery_hook(key, fn)
            else:
                realm.remove_tail_hook(key, fn)
        realm.goodbye(self.conn_id)


class WireServer:
    """Serves one realm over TCP and (optionally) WebSocket."""

    def __init__(self, realm: RealmServer, host: str = "127.0.0.1",
                 tcp_port: int = 0, ws_port: int | None = None):
        self.realm = realm
        self.host = host
        self.tcp_port = tcp_port
        self.ws_port = ws_port
        self._conn_seq = 0
        self._tcp_server = None
        self._ws_server = None

    async def start(self) -> None:
        self._tcp_server = await asyncio.start_server(
            self._tcp_conn, self.host, self.tcp_port)
        self.tcp_port = self._tcp_server.sockets[0].getsockname()[1]
        if self.ws_port is not None:
            import websockets
            self._ws_server = await websockets.serve(
                self._ws_conn, self.host, self.ws_port, max_size=MAX_FRAME)
            self.ws_port = next(iter(self._ws_server.sockets)).getsockname()[1]
        log.info("listening on tcp %s:%d ws port %s",
                 self.host, self.tcp_port, self.ws_port)

    async def stop(self) -> None:
        if self._tcp_server:
            self._tcp_server.close()
            await self._tcp_server.wait_closed()
        if self._ws_server:
            self._ws_server.close()
            await self._ws_server.wait_closed()
        self.realm.shutdown()

    def _next_conn(self) -> str:
        self._conn_seq += 1
        return f"conn-{self._conn_seq}"

    async def _tcp_conn(self, reader, writer) -> None:
        lock = asyncio.Lock()

        async def send(obj):
            async with lock:
                writer.write(encode_frame(obj))
                await writer.drain()

        session = Session(self, self._next_conn(), send)
        try:
            while True:
                header = await reader.readexactly(4)
                (length,) = struct.unpack(">I", header)
                if length > MAX_FRAME:
                    await session.error("BadFrame", "frame too large")
                    break
                payload = await reader.readexactly(length)
                await session.handle_frame(json.loads(payload))
        except (asyncio.IncompleteReadError, ConnectionResetError):
            pass
        finally:
            session.close()
            writer.close()

    async def _ws_conn(self, ws) -> None:
        async def send(obj):
            await ws.send(json.dumps(obj, separators=(",", ":")))

        session = Session(self, self._next_conn(), send)
        try:
            async for raw in ws:
                await session.handle_frame(json.loads(raw))
        except Exception:
            pass
        finally:
            session.close()


# ---------------------------------------------------------------------------
# blocking client (CLI side)

class WireClient:
    """Minimal blocking TCP client speaking the framed protocol."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)

    def send_frame(self, obj: dict) -> None:
        self.sock.sendall(encode_frame(obj))

    def recv_frame(self, timeout: float | None = None) -> dict | None:
        if timeout is not None:
            self.sock.settimeout(timeout)
        try:
            header = self._read_exact(4)
        except socket.timeout:
            return None
        (length,) = struct.unpack(">I", header)
        return json.loads(self._read_exact(length))

    def _read_exact(self, n: int) -> bytes:
        buf = b""
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                raise ConnectionError("connection closed")
            buf += chunk
        return buf

    def hello(self, world: str, address: str, token: str = "") -> dict:
        self.send_frame({"type": "HELLO", "world": world, "address": address,
                         "auth-token": token})
        reply = self.recv_frame()
        if reply is None or reply.get("type") == "ERROR":
            raise ConnectionError(f"HELLO rejected: {reply}")
        return reply

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass
