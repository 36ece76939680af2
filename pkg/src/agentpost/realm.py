"""The realm server: message broker and agent driver.

Single logical event loop over an inbox queue. Routes messages to agents,
robots, the system address and connected client sessions; materializes
agents on demand (fresh or cloned); drives the render -> infer -> emit loop
against the model gateway; coordinates ownership with the lock service.
"""
from __future__ import annotations

import enum
import logging
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path

from . import memory as memstore
from .address import SYSTEM_ADDRESS, Address, Kind, World, clone_parent, parse_address, same_world
from .errors import (
    AgentpostError,
    BackendRejection,
    BackendTimeout,
    LockUnavailable,
    NotAnMsr,
    OutputUnparseable,
    PersistFailure,
    RangeInvalid,
    RangeOutOfBounds,
    SpoofedSender,
    StaleEpoch,
    UnknownBackend,
    WorldViolation,
)
from .gateway import CompletionRequest, ModelGateway
from .locks import Granted, LockService, MustWait
from .memory import AgentMemory, ContextRender
from .message import Message, get_extended, parse_mbox

log = logging.getLogger(__name__)

DEFAULT_MAX_HOPS = 8


class Target(enum.Enum):
    TO_AGENT = "agent"
    TO_SYSTEM = "system"
    TO_ROBOT = "robot"
    TO_CLIENT_SESSION = "client"
    DEAD_LETTER = "dead_letter"


@dataclass
class RoutingDecision:
    target: Target
    recipient: str
    endpoint: object = None


class RealmServer:
    def __init__(self, realm_id: str, world: World, gateway: ModelGateway,
                 locks: LockService, storage_root: Path | str,
                 auth_token: str = "", admin_token: str = "",
                 max_hops: int = DEFAULT_MAX_HOPS, clock=None):
        self.id = realm_id
        self.world = world
        self.gateway = gateway
        self.locks = locks
        self.storage_root = Path(storage_root)
        self.auth_token = auth_token
        self.admin_token = admin_token
        self.max_hops = max_hops
        self.clock = clock or time.time

        self.memories: dict[str, AgentMemory] = {}
        self.lease_epochs: dict[str, int] = {}
        self.last_renders: dict[str, ContextRender] = {}
        self.inbox: deque[tuple[Message, int]] = deque()
        self._arrival_seq = 0
        self.sessions: dict[str, str] = {}  # connection id -> address text
        self.pending_msgs: dict[str, deque[tuple[Message, int]]] = {}
        self.deliveries: dict[str, list[tuple[Message, int | None]]] = {}
        self.delivery_hooks: dict[str, list] = {}  # addr -> [callable(msg, offset)]
        self.tail_hooks: dict[str, list] = {}  # agent -> [callable(msg, offset)]
        self._tail_notified: dict[str, int] = {}
        self._transfer_requests: deque[tuple[str, str]] = deque()
        self.peers: dict[str, "RealmServer"] = {}

        locks.register_realm(realm_id, self._on_release_requested)

    # -- sessions -------------------------------------------------------

    def hello(self, conn_id: str, world_id: str, address_text: str, token: str) -> Address:
        if self.auth_token and token != self.auth_token:
            raise SpoofedSender("bad auth token")
        if world_id != self.world.id:
            raise WorldViolation(
                f"this realm serves world {self.world.id!r}, not {world_id!r}")
        addr = parse_address(address_text, self.world)
        self.sessions[conn_id] = addr.text
        self.world.address_registry.add(addr.text)
        return addr

    def goodbye(self, conn_id: str) -> None:
        self.sessions.pop(conn_id, None)

    def connected_addresses(self) -> set[str]:
        return {a.lower() for a in self.sessions.values()}

    # -- ingest & routing -----------------------------------------------

    def ingest(self, conn_id: str, msg: Message) -> None:
        session_addr = self.sessions.get(conn_id)
        if session_addr is None:
            raise SpoofedSender(f"unknown connection {conn_id!r}")
        sender = parse_address(session_addr, self.world)
        if not sender.same_text(msg.from_addr):
            raise SpoofedSender(
                f"session owns {session_addr!r}, message From {msg.from_addr!r}")
        for to in msg.to_addrs:
            recipient = parse_address(to, self.world)
            if not same_world(sender, recipient):
                raise WorldViolation(f"{to!r} is outside world {self.world.id!r}")
        msg.set_header("X-Realm", self.id)
        self._arrival_seq += 1
        self.inbox.append((msg, self._arrival_seq))
        self.process()

    def enqueue_internal(self, msg: Message) -> None:
        """Entry point for peer realms and robots; already trusted."""
        msg.set_header("X-Realm", self.id)
        self._arrival_seq += 1
        self.inbox.append((msg, self._arrival_seq))

    def process(self) -> None:
        """Drain the inbox (and any pending lock transfers)."""
        self.service_transfers()
        self._drain_granted_pending()
        while self.inbox:
            msg, _seq = self.inbox.popleft()
            self.dispatch(msg, depth=0)
            self.service_transfers()
            self._drain_granted_pending()

    def _drain_granted_pending(self) -> None:
        for agent_text in list(self.pending_msgs):
            current = self.locks.owner_of(agent_text)
            if current is None or current[0] == self.id:
                pending = self.pending_msgs.pop(agent_text, deque())
                for msg, depth in pending:
                    self._deliver_to_agent(agent_text, msg, depth)

    def route(self, msg: Message) -> list[RoutingDecision]:
        decisions = []
        connected = self.connected_addresses()
        for to in msg.to_addrs:
            addr = parse_address(to, self.world)
            if addr.kind == Kind.SYSTEM:
                decisions.append(RoutingDecision(Target.TO_SYSTEM, to))
            elif addr.kind == Kind.AGENT:
                decisions.append(RoutingDecision(Target.TO_AGENT, addr.text))
            elif addr.kind == Kind.ROBOT:
                decisions.append(RoutingDecision(
                    Target.TO_ROBOT, addr.text, self.world.robot_endpoint(addr.text)))
            elif addr.text.lower() in connected:
                decisions.append(RoutingDecision(Target.TO_CLIENT_SESSION, addr.text))
            else:
                decisions.append(RoutingDecision(Target.DEAD_LETTER, addr.text))
        return decisions

    def dispatch(self, msg: Message, depth: int) -> None:
        for decision in self.route(msg):
            if decision.target == Target.TO_AGENT:
                self._deliver_to_agent(decision.recipient, msg, depth)
            elif decision.target == Target.TO_SYSTEM:
                self._system_from_outside(msg)
            elif decision.target == Target.TO_ROBOT:
                self._deliver_to_robot(decision, msg, depth)
            elif decision.target == Target.TO_CLIENT_SESSION:
                self._deliver_to_client(decision.recipient, msg, offset=None)
            else:
                self._bounce(msg, decision.recipient)

    # -- agents ---------------------------------------------------------

    def ensure_agent(self, addr_text: str, trigger: Message | None = None) -> AgentMemory:
        addr = parse_address(addr_text, self.world)
        mem = self.memories.get(addr.text)
        if mem is not None:
            return mem
        grant = self.locks.acquire(addr.text, self.id)
        if isinstance(grant, MustWait):
            raise LockUnavailable(
                f"{addr.text} is held by {grant.current_owner}")
        self.lease_epochs[addr.text] = grant.lease_epoch
        if memstore.agent_exists(self.storage_root, self.world.id, addr.text):
            mem, report = memstore.load(addr.text, self.world, self.storage_root)
            if report.corrupt:
                log.warning("agent %s loaded with corrupt tail: %s", addr.text, report.detail)
        else:
            mem = self._materialize(addr, trigger)
        self.memories[addr.text] = mem
        self._tail_notified[addr.text] = len(mem.journal.entries)
        self.world.address_registry.add(addr.text)
        return mem

    def _materialize(self, addr: Address, trigger: Message | None) -> AgentMemory:
        source = None
        if trigger is not None:
            clone_from = trigger.get_header("X-Clone-From")
            if clone_from:
                source = self._source_cells(clone_from.strip())
        if source is None:
            parent = clone_parent(addr) if addr.kind == Kind.AGENT else None
            if parent is not None:
                source = self._source_cells(parent.text)
        mem = AgentMemory(addr)
        if source is not None:
            cells = [c.copy() for c in source]
            mem.journal.entries = cells
            mem.context.cells = list(cells)
            mem.context.mutations = len(cells)
            log.info("cloned %s with %d cells", addr.text, len(cells))
        return mem

    def _source_cells(self, source_text: str) -> list[Message] | None:
        src = self.memories.get(source_text)
        if src is not None:
            return src.context.cells
        if memstore.agent_exists(self.storage_root, self.world.id, source_text):
            loaded, _ = memstore.load(source_text, self.world, self.storage_root)
            return loaded.context.cells
        return None

    def _deliver_to_agent(self, addr_text: str, msg: Message, depth: int) -> None:
        if depth >= self.max_hops:
            log.warning("hop limit reached delivering to %s; dead-lettering", addr_text)
            self._bounce(msg, addr_text, reason="hop limit exceeded")
            return
        try:
            mem = self.ensure_agent(addr_text, trigger=msg)
        except LockUnavailable:
            self.pending_msgs.setdefault(addr_text, deque()).append((msg, depth))
            return
        self.agent_step(mem, msg, depth)

    def agent_step(self, mem: AgentMemory, incoming: Message, depth: int = 0) -> None:
        self._append(mem, incoming)
        hint = None
        try:
            hint = get_extended(incoming).x_hint_model
        except AgentpostError:
            pass
        self._complete_step(mem, hint, depth)

    def _complete_step(self, mem: AgentMemory, hint: str | None, depth: int) -> None:
        agent_text = mem.agent.text
        try:
            backend = self.gateway.select_backend(hint)
        except UnknownBackend as exc:
            self._system_notice(mem, "Unknown Model",
                                f"No such model backend: {exc}.\n")
            return
        render = mem.render()
        self.last_renders[agent_text] = render
        req = CompletionRequest(render.to_mbox().decode("utf-8"), backend, agent_text)
        try:
            result = self.gateway.complete(req)
        except BackendTimeout as exc:
            self._system_notice(mem, "Backend Timeout", f"{exc}\n")
            return
        except (BackendRejection, AgentpostError) as exc:
            self._system_notice(mem, "Backend Error", f"{exc}\n")
            return

        try:
            outputs = split_output(result.raw_output)
        except OutputUnparseable as exc:
            self._system_notice(mem, "Output Error",
                                f"Your last output was not valid MBox text: {exc}\n"
                                f"Please emit well-formed messages.\n")
            # one retry against the amended context
            render = mem.render()
            self.last_renders[agent_text] = render
            req = CompletionRequest(render.to_mbox().decode("utf-8"), backend, agent_text)
            try:
                result = self.gateway.complete(req)
                outputs = split_output(result.raw_output)
            except (OutputUnparseable, BackendRejection, BackendTimeout) as exc2:
                self._system_notice(mem, "Output Error",
                                    f"Retry failed: {exc2}\n")
                return

        for out in outputs:
            out.set_header("From", mem.agent.text)  # identity integrity
            out.envelope_from = mem.agent.text
            out.envelope_date = self._now()
            out.set_header("X-Total-Tokens", str(result.total_tokens))
            if any(a.lower() == SYSTEM_ADDRESS for a in out.to_addrs):
                self.handle_system(mem, out, depth)
            else:
                stored = self._append(mem, out)
                offset = len(mem.journal.entries) - 1
                self._emit(mem, stored, offset, depth)

    def _emit(self, mem: AgentMemory, stored: Message, offset: int, depth: int) -> None:
        for decision in self.route(stored):
            if decision.target == Target.TO_AGENT and decision.recipient == mem.agent.text:
                continue  # no self-delivery
            if decision.target == Target.TO_AGENT:
                self._deliver_to_agent(decision.recipient, stored, depth + 1)
            elif decision.target == Target.TO_ROBOT:
                self._deliver_to_robot(decision, stored, depth)
            elif decision.target == Target.TO_CLIENT_SESSION:
                self._deliver_to_client(decision.recipient, stored, offset)
            elif decision.target == Target.DEAD_LETTER:
                self._bounce(stored, decision.recipient)

    def handle_system(self, mem: AgentMemory, msg: Message, depth: int = 0) -> None:
        agent_text = mem.agent.text
        render = self.last_renders.get(agent_text)
        if render is None:
            render = mem.render()
            self.last_renders[agent_text] = render
        try:
            cmd = mem.parse_msr(msg, render)
            mem.apply_msr(cmd)
        except NotAnMsr:
            self._append(mem, msg)
            self._system_notice(
                mem, "Unrecognized Command",
                "Supported commands: MSR (memory segment rewrite).\n"
                'Address system@localdomain with subject "MSR <start>-<end>".\n')
            return
        except (RangeInvalid, RangeOutOfBounds, StaleEpoch) as exc:
            self._append(mem, msg)
            # subject deliberately differs from the confirmation form so the
            # journal replay does not mistake the attempt for an applied rewrite
            self._system_notice(mem, "MSR Error",
                                f"{type(exc).__name__}: {exc}\n"
                                "Re-render and re-issue the rewrite.\n")
            return
        self._flush_tails(mem)
        if depth < self.max_hops:
            # the confirmation acts as a normal step input: let the agent react
            self._complete_step(mem, None, depth + 1)

    def _system_from_outside(self, msg: Message) -> None:
        reply = self._system_message(
            msg.from_addr, "Unrecognized Command",
            "Supported commands: MSR (memory segment rewrite), available to agents.\n")
        self._deliver_to_client(msg.from_addr, reply, offset=None)

    # -- robots ---------------------------------------------------------

    def _deliver_to_robot(self, decision: RoutingDecision, msg: Message, depth: int) -> None:
        robot = decision.endpoint
        if robot is None:
            self._bounce(msg, decision.recipient, reason="robot not registered")
            return
        try:
            replies = robot.handle(msg)
        except Exception as exc:
            log.exception("robot %s failed", decision.recipient)
            self._bounce(msg, decision.recipient, reason=f"robot failure: {exc}")
            return
        for reply in replies:
            reply.envelope_date = reply.envelope_date or self._now()
            self.dispatch(reply, depth + 1)

    # -- delivery sinks -------------------------------------------------

    def _deliver_to_client(self, addr_text: str, msg: Message, offset: int | None) -> None:
        key = addr_text.lower()
        self.deliveries.setdefault(key, []).append((msg, offset))
        for hook in self.delivery_hooks.get(key, []):
            hook(msg, offset)

    def add_delivery_hook(self, addr_text: str, hook) -> None:
        self.delivery_hooks.setdefault(addr_text.lower(), []).append(hook)

    def remove_delivery_hook(self, addr_text: str, hook) -> None:
        hooks = self.delivery_hooks.get(addr_text.lower(), [])
        if hook in hooks:
            hooks.remove(hook)

    def add_tail_hook(self, agent_text: str, hook) -> None:
        self.tail_hooks.setdefault(agent_text, []).append(hook)

    def remove_tail_hook(self, agent_text: str, hook) -> None:
        hooks = self.tail_hooks.get(agent_text, [])
        if hook in hooks:
            hooks.remove(hook)

    def _bounce(self, msg: Message, recipient: str, reason: str = "no such recipient") -> None:
        sender = msg.from_addr
        if not sender:
            return
        notice = self._system_message(
            sender, f"Undeliverable: {msg.subject}".rstrip(),
            f"Your message to {recipient} could not be delivered: {reason}.\n")
        addr = parse_address(sender, self.world)
        if addr.kind == Kind.AGENT and addr.text in self.memories:
            self._append(self.memories[addr.text], notice)
        else:
            self._deliver_to_client(sender, notice, offset=None)

    # -- system notices --------------------------------------------------

    def _system_message(self, to_text: str, subject: str, body: str) -> Message:
        return Message(
            envelope_from=SYSTEM_ADDRESS,
            envelope_date=self._now(),
            headers=[("From", SYSTEM_ADDRESS), ("To", to_text), ("Subject", subject)],
            body=body)

    def _system_notice(self, mem: AgentMemory, subject: str, body: str) -> None:
        self._append(mem, self._system_message(mem.agent.text, subject, body))

    def _append(self, mem: AgentMemory, msg: Message) -> Message:
        stored = mem.append(msg)
        self._flush_tails(mem)
        return stored

    def _flush_tails(self, mem: AgentMemory) -> None:
        agent_text = mem.agent.text
        notified = self._tail_notified.get(agent_text, 0)
        entries = mem.journal.entries
        if len(entries) > notified:
            hooks = self.tail_hooks.get(agent_text, [])
            for i in range(notified, len(entries)):
                for hook in hooks:
                    hook(entries[i], i)
            self._tail_notified[agent_text] = len(entries)

    # -- lock handoff ----------------------------------------------------

    def _on_release_requested(self, agent: str, waiter: str) -> None:
        self._transfer_requests.append((agent, waiter))

    def service_transfers(self) -> None:
        while self._transfer_requests:
            agent, waiter = self._transfer_requests.popleft()
            if agent in self.memories:
                self.transfer_context(agent, waiter)

    def transfer_context(self, agent_text: str, to_realm: str) -> None:
        mem = self.memories.get(agent_text)
        if mem is None:
            return
        epoch = self.lease_epochs.get(agent_text, 0)
        try:
            memstore.persist(mem, self.storage_root, lease_epoch=epoch)
        except Exception as exc:
            raise PersistFailure(f"cannot persist {agent_text}: {exc}") from exc
        self.locks.release(agent_text, self.id, context_persisted=True)
        del self.memories[agent_text]
        self.lease_epochs.pop(agent_text, None)
        self.last_renders.pop(agent_text, None)
        peer = self.peers.get(to_realm)
        pending = self.pending_msgs.pop(agent_text, deque())
        if peer is not None:
            for queued, _depth in pending:
                peer.enqueue_internal(queued)
        log.info("transferred %s to %s (%d queued messages forwarded)",
                 agent_text, to_realm, len(pending))

    def on_lock_granted(self, agent_text: str) -> None:
        """Process messages queued while the agent was owned elsewhere."""
        epoch = self.locks.wait_for_grant(agent_text, self.id, timeout=0)
        if epoch is not None:
            self.lease_epochs[agent_text] = epoch
        pending = self.pending_msgs.pop(agent_text, deque())
        for msg, depth in pending:
            self._deliver_to_agent(agent_text, msg, depth)

    # -- maintenance -----------------------------------------------------

    def persist_all(self) -> None:
        for agent_text, mem in self.memories.items():
            memstore.persist(mem, self.storage_root,
                             lease_epoch=self.lease_epochs.get(agent_text, 0))

    def shutdown(self) -> None:
        self.persist_all()
        for agent_text in list(self.memories):
            try:
                self.locks.release(agent_text, self.id, context_persisted=True)
            except AgentpostError:
                pass
        self.memories.clear()

    def _now(self) -> str:
        return time.asctime(time.localtime(self.clock()))


def split_output(raw: str) -> list[Message]:
    """Split a model's raw output into messages.

    Accepts real mbox text (envelope lines) or bare header blocks as models
    tend to produce; a single bare block is the common case.
    """
    text = raw.strip("\n")
    if not text.strip():
        raise OutputUnparseable("empty output")
    try:
        if text.startswith("From "):
            msgs = parse_mbox(text)
        else:
            msgs = parse_mbox("From - \n" + text)
    except Exception as exc:
        raise OutputUnparseable(str(exc)) from exc
    for msg in msgs:
        if not msg.headers:
            raise OutputUnparseable("message without headers")
    return msgs
