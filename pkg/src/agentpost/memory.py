"""Agent memory: append-only journal plus the rewrite-folded context.

The journal is the replayable source of truth. The context is what gets
rendered (with X-Serial numbering) for inference; segment rewrites replace a
serial range with the rewrite message itself. Replaying the journal must
always reconstruct the live context.
"""
from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .address import SYSTEM_ADDRESS, Address, World, parse_address
from .errors import (
    AgentMismatch,
    CorruptSegment,
    FencedWrite,
    NotAnMsr,
    RangeInvalid,
    RangeOutOfBounds,
    StaleEpoch,
)
from .message import Message, parse_mbox, serialize_mbox

log = logging.getLogger(__name__)

MSR_SUBJECT_RE = re.compile(r"^\s*MSR:?\s+(\d+)-(\d+)\s*$")
CONFIRMATION_BODY = "Memory segment rewriting applied.\n"


@dataclass
class Journal:
    agent: Address
    entries: list[Message] = field(default_factory=list)
    persisted_offset: int = 0


@dataclass
class Context:
    agent: Address
    cells: list[Message] = field(default_factory=list)
    epoch: int = 0  # render counter
    mutations: int = 0
    rendered_mutations: int = -1  # mutation count at last render


@dataclass
class ContextRender:
    epoch: int
    numbered: list[tuple[int, Message]]

    def to_mbox(self) -> bytes:
        return serialize_mbox([m for _, m in self.numbered])

    def __len__(self) -> int:
        return len(self.numbered)


@dataclass
class MsrCommand:
    lo: int
    hi: int  # inclusive
    payload: Message
    epoch: int


def involves_system(msg: Message) -> bool:
    if msg.from_addr.lower() == SYSTEM_ADDRESS:
        return True
    return any(a.lower() == SYSTEM_ADDRESS for a in msg.to_addrs)


def msr_range(msg: Message) -> tuple[int, int] | None:
    """The (lo, hi) of an MSR-shaped message, else None."""
    if not any(a.lower() == SYSTEM_ADDRESS for a in msg.to_addrs):
        return None
    m = MSR_SUBJECT_RE.match(msg.subject)
    if not m:
        return None
    return int(m.group(1)), int(m.group(2))


def addresses_agent(msg: Message, agent: Address) -> bool:
    if agent.same_text(msg.from_addr):
        return True
    return any(agent.same_text(a) for a in msg.to_addrs)


class AgentMemory:
    """One agent's journal and context, mutated single-writer."""

    def __init__(self, agent: Address):
        self.agent = agent
        self.journal = Journal(agent)
        self.context = Context(agent)

    # -- mutations ------------------------------------------------------

    def append(self, msg: Message) -> Message:
        """Append to journal and context. Returns the stored (stamped) copy."""
        if not addresses_agent(msg, self.agent):
            raise AgentMismatch(
                f"{self.agent} is neither sender nor recipient of {msg.from_addr!r} -> {msg.to_addrs}")
        stored = msg.copy()
        stored.set_header("X-Serial", str(len(self.context.cells)))
        self.journal.entries.append(stored)
        self.context.cells.append(stored)
        self.context.mutations += 1
        return stored

    def render(self) -> ContextRender:
        ctx = self.context
        ctx.epoch += 1
        ctx.rendered_mutations = ctx.mutations
        numbered = []
        for i, cell in enumerate(ctx.cells):
            copy = cell.copy()
            copy.set_header("X-Serial", str(i))
            numbered.append((i, copy))
        return ContextRender(ctx.epoch, numbered)

    def parse_msr(self, msg: Message, latest_render: ContextRender) -> MsrCommand:
        rng = msr_range(msg)
        if rng is None:
            raise NotAnMsr(f"subject {msg.subject!r} is not an MSR command")
        lo, hi = rng
        if lo > hi:
            raise RangeInvalid(f"MSR {lo}-{hi}: range start exceeds end")
        if hi >= len(latest_render):
            raise RangeOutOfBounds(
                f"MSR {lo}-{hi}: context has only {len(latest_render)} cells")
        return MsrCommand(lo, hi, msg, latest_render.epoch)

    def apply_msr(self, cmd: MsrCommand) -> Message:
        """Apply a segment rewrite; returns the confirmation message."""
        ctx = self.context
        if cmd.epoch != ctx.epoch or ctx.mutations != ctx.rendered_mutations:
            raise StaleEpoch(
                f"MSR refers to render epoch {cmd.epoch}, context is at {ctx.epoch}"
                f" with changes since the last render")
        stored = cmd.payload.copy()
        stored.set_header("X-Serial", str(cmd.lo))
        self.journal.entries.append(stored)
        ctx.cells[cmd.lo:cmd.hi + 1] = [stored]
        ctx.mutations += 1
        confirmation = _confirmation_message(self.agent, cmd.lo, cmd.hi)
        return self.append(confirmation)

    # -- views ----------------------------------------------------------

    def user_view(self) -> list[Message]:
        """Journal with all system traffic (memory manipulation) filtered out."""
        return [m for m in self.journal.entries if not involves_system(m)]

    def verify_replay(self) -> tuple[list[Message], dict]:
        """Replay the journal and compare against the live context."""
        cells = replay_entries(self.journal.entries)
        report = {"consistent": True, "replayed": len(cells),
                  "live": len(self.context.cells), "first_divergence": None}
        live = self.context.cells
        for i in range(max(len(cells), len(live))):
            a = serialize_mbox([cells[i]]) if i < len(cells) else None
            b = serialize_mbox([live[i]]) if i < len(live) else None
            if a != b:
                report["consistent"] = False
                report["first_divergence"] = i
                break
        return cells, report


def _confirmation_message(agent: Address, lo: int, hi: int) -> Message:
    body = CONFIRMATION_BODY
    return Message(
        envelope_from=SYSTEM_ADDRESS,
        envelope_date="Thu Jan  1 00:00:00 1970",
        headers=[("From", SYSTEM_ADDRESS),
                 ("To", agent.text),
                 ("Subject", f"Re: MSR {lo}-{hi}")],
        body=body)


def _is_confirmation_for(msg: Message, lo: int, hi: int) -> bool:
    return (msg.from_addr.lower() == SYSTEM_ADDRESS
            and msg.subject.strip() == f"Re: MSR {lo}-{hi}")


def replay_entries(entries: list[Message]) -> list[Message]:
    """Fold journal entries into context cells.

    An entry counts as an applied rewrite only when it is MSR-shaped, in
    range, and immediately followed by its confirmation; anything else
    (including rejected MSR attempts) replays as a plain append.
    """
    cells: list[Message] = []
    for i, entry in enumerate(entries):
        rng = msr_range(entry)
        if rng is not None:
            lo, hi = rng
            applied = (lo <= hi and hi < len(cells)
                       and i + 1 < len(entries)
                       and _is_confirmation_for(entries[i + 1], lo, hi))
            if applied:
                cells[lo:hi + 1] = [entry]
                continue
        cells.append(entry)
    return cells


# ---------------------------------------------------------------------------
# persistence: one mbox segment per agent plus a json sidecar

@dataclass
class LoadReport:
    recovered: int = 0
    corrupt: bool = False
    detail: str = ""


def _segment_paths(root: Path, world_id: str, agent_text: str) -> tuple[Path, Path]:
    d = Path(root) / world_id
    return d / f"{agent_text}.mbox", d / f"{agent_text}.json"


def agent_exists(root: Path, world_id: str, agent_text: str) -> bool:
    return _segment_paths(root, world_id, agent_text)[0].exists()


def persist(mem: AgentMemory, root: Path, lease_epoch: int = 0, fsync: bool = False) -> int:
    """Append unpersisted journal entries to the agent's segment file.

    Writes carrying a lease epoch older than the last recorded one are
    rejected (fencing), which protects handoffs between realm servers.
    """
    seg, side = _segment_paths(root, mem.agent.world.id, mem.agent.text)
    seg.parent.mkdir(parents=True, exist_ok=True)
    meta = {"persisted_offset": 0, "lease_epoch": 0}
    if side.exists():
        meta.update(json.loads(side.read_text()))
    if lease_epoch < meta["lease_epoch"]:
        raise FencedWrite(
            f"write with lease epoch {lease_epoch} < recorded {meta['lease_epoch']}")
    journal = mem.journal
    new = journal.entries[journal.persisted_offset:]
    if new:
        with open(seg, "ab") as f:
            for entry in new:
                if f.tell() > 0:
                    f.write(b"\n")
                f.write(serialize_mbox([entry]))
            f.flush()
            if fsync:
                os.fsync(f.fileno())
    else:
        seg.touch()
    journal.persisted_offset = len(journal.entries)
    meta["persisted_offset"] = journal.persisted_offset
    meta["lease_epoch"] = lease_epoch
    side.write_text(json.dumps(meta))
    return journal.persisted_offset


def load(agent_text: str, world: World, root: Path) -> tuple[AgentMemory, LoadReport]:
    """Rebuild (journal, context) from the segment file; context via replay.

    On a corrupt tail the last valid messages are kept and the report says so.
    """
    agent = parse_address(agent_text, world)
    seg, _ = _segment_paths(root, world.id, agent.text)
    mem = AgentMemory(agent)
    report = LoadReport()
    if not seg.exists():
        return mem, report
    text = seg.read_bytes().decode("utf-8", errors="replace")
    entries, report = _parse_segment(text)
    mem.journal.entries = entries
    mem.journal.persisted_offset = len(entries)
    mem.context.cells = replay_entries(entries)
    mem.context.mutations = len(entries)
    return mem, report


def _parse_segment(text: str) -> tuple[list[Message], LoadReport]:
    report = LoadReport()
    text = text.replace("\r\n", "\n")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    starts = [i for i, l in enumerate(lines)
              if l.startswith("From ") and (i == 0 or lines[i - 1] == "")]
    entries: list[Message] = []
    for k, start in enumerate(starts):
        end = starts[k + 1] if k + 1 < len(starts) else len(lines)
        chunk_lines = lines[start:end]
        if k + 1 < len(starts) and chunk_lines and chunk_lines[-1] == "":
            chunk_lines.pop()  # the separator blank line is not body
        chunk = "\n".join(chunk_lines) + "\n"
        try:
            entries.extend(parse_mbox(chunk))
        except Exception as exc:  # keep the valid prefix
            report.corrupt = True
            report.detail = str(exc)
            log.warning("corrupt segment tail after %d messages: %s", len(entries), exc)
            break
    report.recovered = len(entries)
    return entries, report
