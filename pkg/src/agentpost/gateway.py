"""Uniform interface over inference backends.

Ships a deterministic scripted backend so the whole platform runs offline.
Token usage is backend-reported when available, otherwise estimated as
ceil(bytes/4) over prompt + completion (documented heuristic).
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

import yaml

from .address import SYSTEM_ADDRESS
from .errors import BackendRejection, BackendTimeout, DuplicateBackend, UnknownBackend
from .message import Message, parse_mbox

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BackendId:
    provider: str
    model: str

    def __str__(self) -> str:
        return f"{self.provider}.{self.model}"

    @classmethod
    def parse(cls, text: str) -> "BackendId":
        provider, _, model = text.partition(".")
        if not provider or not model:
            raise UnknownBackend(f"backend id must be provider.model: {text!r}")
        return cls(provider, model)


@dataclass
class CompletionRequest:
    rendered: str  # mbox text of the numbered context
    backend: BackendId
    agent_address: str
    max_tokens: int = 4096
    timeout: float = 60.0


@dataclass
class CompletionResult:
    raw_output: str  # expected to be one or more mbox messages
    total_tokens: int


def estimate_tokens(*texts: str) -> int:
    """Byte/4 heuristic, applied per text and summed."""
    return sum(-(-len(t.encode("utf-8")) // 4) for t in texts)


# ---------------------------------------------------------------------------
# scripted backend

@dataclass
class ScriptRule:
    """First matching rule wins; predicates apply to the last non-system message.

    last_regex additionally tests the very last context message (whatever the
    sender), which lets a script react to system confirmations.
    """
    from_addr: str | None = None
    to_addr: str | None = None
    subject_regex: str | None = None
    body_regex: str | None = None
    last_regex: str | None = None
    respond_headers: dict[str, str] = field(default_factory=dict)
    respond_body: str = ""

    def matches(self, msg: Message, last: Message | None = None) -> bool:
        if self.from_addr and msg.from_addr.lower() != self.from_addr.lower():
            return False
        if self.to_addr and self.to_addr.lower() not in [a.lower() for a in msg.to_addrs]:
            return False
        if self.subject_regex and not re.search(self.subject_regex, msg.subject):
            return False
        if self.body_regex and not re.search(self.body_regex, msg.body_text(), re.S):
            return False
        if self.last_regex:
            if last is None:
                return False
            from .message import serialize_mbox
            if not re.search(self.last_regex, serialize_mbox([last]).decode("utf-8"), re.S):
                return False
        return True

    def render_reply(self) -> str:
        lines = [f"{k}: {v}" for k, v in self.respond_headers.items()]
        body = self.respond_body
        if body and not body.endswith("\n"):
            body += "\n"
        return "\n".join(lines) + "\n\n" + body


class ScriptedBackend:
    """Deterministic rule-driven stand-in for a language model."""

    def __init__(self, rules: list[ScriptRule]):
        self.rules = rules

    @classmethod
    def from_file(cls, path) -> "ScriptedBackend":
        with open(path) as f:
            raw = yaml.safe_load(f) or []
        return cls([_rule_from_dict(d) for d in raw])

    def complete(self, req: CompletionRequest) -> CompletionResult:
        try:
            msgs = parse_mbox(req.rendered)
        except Exception as exc:
            raise BackendRejection(f"scripted backend: bad render: {exc}") from exc
        target = _last_non_system_of(msgs)
        if target is None:
            raise BackendRejection("scripted backend: empty context")
        last = msgs[-1] if msgs else None
        for rule in self.rules:
            if rule.matches(target, last):
                out = rule.render_reply()
                return CompletionResult(out, estimate_tokens(req.rendered, out))
        raise BackendRejection(
            f"scripted backend: no rule matches message from {target.from_addr!r} "
            f"subject {target.subject!r}")


def _rule_from_dict(d: dict) -> ScriptRule:
    match = d.get("match", {})
    respond = d.get("respond", {})
    return ScriptRule(
        from_addr=match.get("from"),
        to_addr=match.get("to"),
        subject_regex=match.get("subject_regex"),
        body_regex=match.get("body_regex"),
        last_regex=match.get("last_regex"),
        respond_headers=dict(respond.get("headers", {})),
        respond_body=respond.get("body", ""))


def _last_non_system_of(msgs: list[Message]) -> Message | None:
    for msg in reversed(msgs):
        sys_from = msg.from_addr.lower() == SYSTEM_ADDRESS
        sys_to = any(a.lower() == SYSTEM_ADDRESS for a in msg.to_addrs)
        if not (sys_from or sys_to):
            return msg
    return None


# ---------------------------------------------------------------------------
# HTTP chat backend

class HttpChatBackend:
    """Adapter for OpenAI-style chat completion endpoints.

    Accepted lazily at registration; connectivity problems surface from
    complete() as BackendRejection/BackendTimeout.
    """

    def __init__(self, url: str, model: str, api_key: str = "", extra_headers=None):
        self.url = url
        self.model = model
        self.api_key = api_key
        self.extra_headers = extra_headers or {}

    def complete(self, req: CompletionRequest) -> CompletionResult:
        import httpx
        turns = _to_chat_turns(req.rendered, req.agent_address)
        headers = dict(self.extra_headers)
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {"model": self.model, "messages": turns,
                   "max_tokens": req.max_tokens}
        try:
            resp = httpx.post(self.url, json=payload, headers=headers,
                              timeout=req.timeout)
        except httpx.TimeoutException as exc:
            raise BackendTimeout(str(exc)) from exc
        except httpx.HTTPError as exc:
            raise BackendRejection(str(exc)) from exc
        if resp.status_code != 200:
            raise BackendRejection(f"HTTP {resp.status_code}: {resp.text[:500]}")
        data = resp.json()
        out = data["choices"][0]["message"]["content"]
        usage = data.get("usage", {})
        tokens = usage.get("total_tokens")
        if tokens is None:
            tokens = estimate_tokens(req.rendered, out)
        return CompletionResult(out, tokens)


def _to_chat_turns(rendered: str, agent_address: str) -> list[dict]:
    """Agent-authored messages become assistant turns, everything else user.

    The full header block is kept inside the turn text so the model still
    sees X-Serial and friends.
    """
    from .message import serialize_mbox
    turns = []
    for msg in parse_mbox(rendered):
        role = "assistant" if msg.from_addr.lower() == agent_address.lower() else "user"
        turns.append({"role": role,
                      "content": serialize_mbox([msg]).decode("utf-8")})
    return turns


# ---------------------------------------------------------------------------
# registry

class ModelGateway:
    def __init__(self, default: BackendId | None = None):
        self._backends: dict[str, object] = {}
        self.default = default

    def register_backend(self, backend_id: BackendId, backend) -> None:
        key = str(backend_id)
        if key in self._backends:
            raise DuplicateBackend(key)
        self._backends[key] = backend
        if self.default is None:
            self.default = backend_id

    def select_backend(self, hint: str | None) -> BackendId:
        if hint:
            if hint not in self._backends:
                raise UnknownBackend(hint)
            return BackendId.parse(hint)
        if self.default is None or str(self.default) not in self._backends:
            raise UnknownBackend("no default backend registered")
        return self.default

    def complete(self, req: CompletionRequest) -> CompletionResult:
        backend = self._backends.get(str(req.backend))
        if backend is None:
            raise UnknownBackend(str(req.backend))
        result = backend.complete(req)
        if result.total_tokens is None or result.total_tokens < 0:
            result.total_tokens = estimate_tokens(req.rendered, result.raw_output)
        return result
