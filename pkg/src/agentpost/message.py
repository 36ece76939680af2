"""MBox message parsing and serialization.

One Message is an envelope line, an ordered header list and a body (plain
text or multipart/mixed). Canonical form uses LF line endings and mboxrd
quoting for body lines starting with "From ", so serialize/parse round-trip
byte-for-byte.
"""
from __future__ import annotations

import base64
import re
import secrets
from dataclasses import dataclass, field, replace

from .errors import (
    BoundaryExhaustion,
    InvalidHeaderValue,
    MalformedEnvelope,
    MessageTooLarge,
    UnterminatedMultipart,
)

MAX_MESSAGE_SIZE = 16 * 1024 * 1024  # per message, configurable via parse_mbox

_HEADER_RE = re.compile(r"^([!-9;-~]+):[ ]?(.*)$")  # token w/o colon or space
_QUOTED_FROM_RE = re.compile(r"^(>+)From ")
_QUOTABLE_FROM_RE = re.compile(r"^(>*)From ")

SEVEN_BIT = "7bit"
BASE64 = "base64"


@dataclass
class MimePart:
    headers: list[tuple[str, str]]
    content: bytes
    transfer_encoding: str = SEVEN_BIT  # SEVEN_BIT or BASE64

    def get_header(self, name: str) -> str | None:
        return _get(self.headers, name)


@dataclass
class Multipart:
    boundary: str
    parts: list[MimePart]


@dataclass
class Message:
    envelope_from: str
    envelope_date: str  # verbatim text, e.g. "Fri Feb 14 14:30:00 2025"
    headers: list[tuple[str, str]] = field(default_factory=list)
    body: str | Multipart = ""
    # Whether a blank line separated headers from body in the source.
    # Hand-written files sometimes omit it; we preserve either way.
    blank_after_headers: bool = True

    def get_header(self, name: str) -> str | None:
        return _get(self.headers, name)

    def get_all(self, name: str) -> list[str]:
        low = name.lower()
        return [v for n, v in self.headers if n.lower() == low]

    def set_header(self, name: str, value: str) -> None:
        """Replace the first occurrence (case-insensitive) or append."""
        _check_header_name(name)
        low = name.lower()
        for i, (n, _) in enumerate(self.headers):
            if n.lower() == low:
                self.headers[i] = (n, value)
                return
        self.headers.append((name, value))

    def del_header(self, name: str) -> None:
        low = name.lower()
        self.headers = [(n, v) for n, v in self.headers if n.lower() != low]

    @property
    def from_addr(self) -> str:
        return (self.get_header("From") or "").strip()

    @property
    def to_addrs(self) -> list[str]:
        out = []
        for v in self.get_all("To"):
            out.extend(a.strip() for a in v.split(",") if a.strip())
        return out

    @property
    def subject(self) -> str:
        return self.get_header("Subject") or ""

    def body_text(self) -> str:
        """Plain text of the body; for multipart, text of 7bit text parts."""
        if isinstance(self.body, str):
            return self.body
        chunks = []
        for part in self.body.parts:
            ct = (part.get_header("Content-Type") or "text/plain").lower()
            if ct.startswith("text/") and part.transfer_encoding == SEVEN_BIT:
                chunks.append(part.content.decode("utf-8", errors="replace"))
        return "".join(chunks)

    def copy(self) -> "Message":
        body = self.body
        if isinstance(body, Multipart):
            body = Multipart(body.boundary,
                             [replace(p, headers=list(p.headers)) for p in body.parts])
        return Message(self.envelope_from, self.envelope_date,
                       list(self.headers), body, self.blank_after_headers)


@dataclass
class ExtendedHeaders:
    """Validated view over the platform's X-headers."""
    x_serial: int | None = None
    x_total_tokens: int | None = None
    x_hint_model: str | None = None
    x_realm: str | None = None


def _get(headers: list[tuple[str, str]], name: str) -> str | None:
    low = name.lower()
    for n, v in headers:
        if n.lower() == low:
            return v
    return None


def _check_header_name(name: str) -> None:
    if not name or not _HEADER_RE.match(name + ":"):
        raise InvalidHeaderValue(f"bad header name: {name!r}")


def get_extended(msg: Message) -> ExtendedHeaders:
    ext = ExtendedHeaders()
    for attr, header in (("x_serial", "X-Serial"),
                         ("x_total_tokens", "X-Total-Tokens")):
        raw = msg.get_header(header)
        if raw is not None:
            raw = raw.strip()
            if not raw.isdigit():
                raise InvalidHeaderValue(f"{header}: {raw!r} is not a non-negative integer")
            setattr(ext, attr, int(raw))
    hint = msg.get_header("X-Hint-Model")
    if hint is not None:
        ext.x_hint_model = hint.strip()
    realm = msg.get_header("X-Realm")
    if realm is not None:
        ext.x_realm = realm.strip()
    return ext


# ---------------------------------------------------------------------------
# parsing

def parse_mbox(data: bytes | str, max_message_size: int = MAX_MESSAGE_SIZE) -> list[Message]:
    """Parse an mbox stream into messages, in file order.

    Envelope lines ("From " at start-of-file or after a blank line) are
    consumed as separators. Body lines quoted as ">From " have one ">"
    stripped (mboxrd).
    """
    if isinstance(data, bytes):
        text = data.decode("utf-8")
    else:
        text = data
    text = text.replace("\r\n", "\n")
    if not text.strip():
        return []

    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()  # trailing newline

    # leading blank lines are tolerated
    first = 0
    while first < len(lines) and lines[first] == "":
        first += 1
    if first >= len(lines) or not lines[first].startswith("From "):
        raise MalformedEnvelope("first non-blank line is not an envelope line")
    # an envelope line is "From " at start-of-stream or after a blank line
    starts = [i for i in range(first, len(lines))
              if lines[i].startswith("From ") and (i == first or lines[i - 1] == "")]

    messages = []
    for k, start in enumerate(starts):
        end = starts[k + 1] if k + 1 < len(starts) else len(lines)
        block = lines[start:end]
        # the blank separator line before the next envelope is not body
        if k + 1 < len(starts) and block and block[-1] == "":
            block.pop()
        if sum(len(l) + 1 for l in block) > max_message_size:
            raise MessageTooLarge(f"message {k} exceeds {max_message_size} bytes")
        messages.append(_parse_message_block(block))
    return messages


def _parse_message_block(block: list[str]) -> Message:
    envelope = block[0]
    rest = envelope[5:]  # after "From "
    if " " in rest:
        env_from, env_date = rest.split(" ", 1)
    else:
        env_from, env_date = rest, ""

    headers: list[tuple[str, str]] = []
    i = 1
    blank_after = True
    while i < len(block):
        line = block[i]
        if line == "":
            i += 1
            break
        m = _HEADER_RE.match(line)
        if not m:
            blank_after = False
            break
        name, value = m.group(1), m.group(2)
        # simple continuation lines
        j = i + 1
        while j < len(block) and block[j][:1] in (" ", "\t"):
            value += "\n" + block[j]
            j += 1
        headers.append((name, value))
        i = j
    else:
        # headers ran to end of block: empty body, no separator seen
        blank_after = False

    body_lines = [_unquote_from(l) for l in block[i:]]
    body_text = "\n".join(body_lines) + "\n" if body_lines else ""

    msg = Message(env_from, env_date, headers, body_text, blank_after)
    ctype = msg.get_header("Content-Type") or ""
    boundary = _boundary_of(ctype)
    if ctype.lower().startswith("multipart/") and boundary:
        msg.body = _parse_multipart(body_text, boundary)
    return msg


def _unquote_from(line: str) -> str:
    if _QUOTED_FROM_RE.match(line):
        return line[1:]
    return line


def _quote_from(line: str) -> str:
    if _QUOTABLE_FROM_RE.match(line):
        return ">" + line
    return line


def _boundary_of(content_type: str) -> str | None:
    m = re.search(r'boundary="([^"]+)"', content_type)
    if m:
        return m.group(1)
    m = re.search(r"boundary=([^;\s]+)", content_type)
    return m.group(1) if m else None


def _parse_multipart(body_text: str, boundary: str) -> Multipart:
    open_marker = "--" + boundary
    close_marker = "--" + boundary + "--"
    lines = body_text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    parts: list[MimePart] = []
    i = 0
    # skip preamble
    while i < len(lines) and lines[i] != open_marker:
        if lines[i] == close_marker:
            return Multipart(boundary, parts)
        i += 1
    if i >= len(lines):
        raise UnterminatedMultipart(f"no opening boundary {open_marker!r}")
    while i < len(lines) and lines[i] == open_marker:
        i += 1
        headers: list[tuple[str, str]] = []
        while i < len(lines) and lines[i] != "":
            m = _HEADER_RE.match(lines[i])
            if not m:
                break
            value = m.group(2)
            j = i + 1
            while j < len(lines) and lines[j][:1] in (" ", "\t"):
                value += "\n" + lines[j]
                j += 1
            headers.append((m.group(1), value))
            i = j
        if i < len(lines) and lines[i] == "":
            i += 1
        content_lines = []
        while i < len(lines) and lines[i] not in (open_marker, close_marker):
            content_lines.append(lines[i])
            i += 1
        if i >= len(lines):
            raise UnterminatedMultipart(f"closing boundary {close_marker!r} absent")
        encoding = SEVEN_BIT
        enc_header = _get(headers, "Content-Transfer-Encoding")
        if enc_header and enc_header.strip().lower() == "base64":
            encoding = BASE64
        if encoding == BASE64:
            content = base64.b64decode("".join(content_lines))
        else:
            content = ("\n".join(content_lines) + "\n" if content_lines else "").encode("utf-8")
        parts.append(MimePart(headers, content, encoding))
        if lines[i] == close_marker:
            return Multipart(boundary, parts)
    raise UnterminatedMultipart(f"closing boundary {close_marker!r} absent")


# ---------------------------------------------------------------------------
# serialization

def serialize_mbox(messages: list[Message]) -> bytes:
    blocks = [_serialize_message_lines(m) for m in messages]
    all_lines: list[str] = []
    for k, block in enumerate(blocks):
        if k:
            all_lines.append("")  # exactly one blank line between messages
        all_lines.extend(block)
    return ("\n".join(all_lines) + "\n").encode("utf-8") if all_lines else b""


def serialize_message(msg: Message) -> bytes:
    """Canonical single-message serialization (with envelope line)."""
    return serialize_mbox([msg])


def _serialize_message_lines(msg: Message) -> list[str]:
    lines = [f"From {msg.envelope_from} {msg.envelope_date}".rstrip()]
    for name, value in msg.headers:
        _check_header_name(name)
        lines.append(f"{name}: {value}" if value else f"{name}:")
    body = _render_body(msg)
    body_lines = body.split("\n")
    if body_lines and body_lines[-1] == "":
        body_lines.pop()
    sep = msg.blank_after_headers
    if body_lines and not sep and _HEADER_RE.match(body_lines[0]):
        sep = True  # first body line would be eaten as a header; keep separator
    if sep and (body_lines or msg.blank_after_headers):
        lines.append("")
    lines.extend(_quote_from(l) for l in body_lines)
    return lines


def _render_body(msg: Message) -> str:
    if isinstance(msg.body, str):
        return msg.body
    mp = msg.body
    out: list[str] = []
    for part in mp.parts:
        out.append("--" + mp.boundary)
        for name, value in part.headers:
            out.append(f"{name}: {value}" if value else f"{name}:")
        out.append("")
        if part.transfer_encoding == BASE64:
            encoded = base64.b64encode(part.content).decode("ascii")
            out.extend(encoded[i:i + 76] for i in range(0, len(encoded), 76))
        else:
            text = part.content.decode("utf-8")
            part_lines = text.split("\n")
            if part_lines and part_lines[-1] == "":
                part_lines.pop()
            out.extend(part_lines)
    out.append("--" + mp.boundary + "--")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# builders

def build_attachment_message(from_addr: str, to_addr: str, subject: str,
                             body_text: str,
                             attachments: list[tuple[str, str, bytes]],
                             envelope_date: str = "",
                             max_tries: int = 16) -> Message:
    """Build a multipart/mixed message: one text part, one part per attachment."""
    assert attachments, "attachments must be non-empty"
    parts = [MimePart([("Content-Type", 'text/plain; charset="utf-8"')],
                      body_text.encode("utf-8"), SEVEN_BIT)]
    payloads = [body_text]
    for filename, media_type, content in attachments:
        parts.append(MimePart(
            [("Content-Type", media_type),
             ("Content-Transfer-Encoding", "base64"),
             ("Content-Disposition", f'attachment; filename="{filename}"')],
            content, BASE64))
        payloads.append(base64.b64encode(content).decode("ascii"))

    boundary = None
    for _ in range(max_tries):
        candidate = "=-" + secrets.token_hex(12)
        if all(candidate not in p for p in payloads):
            boundary = candidate
            break
    if boundary is None:
        raise BoundaryExhaustion("could not find a non-colliding boundary")

    msg = Message(from_addr, envelope_date or "Thu Jan  1 00:00:00 1970")
    msg.headers = [
        ("From", from_addr),
        ("To", to_addr),
        ("Subject", subject),
        ("Content-Type", f'multipart/mixed; boundary="{boundary}"'),
    ]
    msg.body = Multipart(boundary, parts)
    return msg


def build_message(from_addr: str, to_addr: str, subject: str, body: str,
                  envelope_date: str = "", extra_headers: list[tuple[str, str]] | None = None) -> Message:
    """Build a canonical plain-text message."""
    if body and not body.endswith("\n"):
        body += "\n"
    headers = [("From", from_addr), ("To", to_addr), ("Subject", subject)]
    if extra_headers:
        headers.extend(extra_headers)
    return Message(from_addr, envelope_date or "Thu Jan  1 00:00:00 1970",
                   headers, body)
