"""The reference robot: runs shell commands from JSON messages.

Commands arrive as Content-Type application/json with exactly three fields
(prompt, command, confirm); stdout and stderr come back as attachments.
Sandboxing here means a confined working directory, an environment
whitelist, a wall-clock timeout and output caps. It is NOT a security
boundary against a hostile model -- do not point it at anything you care
about without an external sandbox.
"""
from __future__ import annotations

import json
import logging
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

from .errors import SchemaViolation, SpawnFailure, WrongContentType
from .message import Message, build_attachment_message

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
DEFAULT_STREAM_CAP = 1024 * 1024  # per stream
DEFAULT_ENV_KEEP = ("PATH", "HOME", "LANG", "TERM")
SCHEMA_FIELDS = {"prompt": str, "command": str, "confirm": bool}
AFFIRMATIVE = ("yes", "approve", "approved")


@dataclass
class ShellCommand:
    prompt: str
    command: str
    confirm: bool


@dataclass
class ExecutionResult:
    exit_code: int
    stdout: bytes
    stderr: bytes
    duration_ms: int
    stdout_truncated: bool = False
    stderr_truncated: bool = False
    timed_out: bool = False


@dataclass
class SandboxConfig:
    root: Path
    timeout: float = DEFAULT_TIMEOUT
    stream_cap: int = DEFAULT_STREAM_CAP
    env_keep: tuple = DEFAULT_ENV_KEEP
    shell: str = "/bin/sh"


def parse_command(msg: Message) -> ShellCommand:
    ctype = (msg.get_header("Content-Type") or "").split(";")[0].strip().lower()
    if ctype != "application/json":
        raise WrongContentType(
            f"shell robot only processes Content-Type application/json, got {ctype or 'none'!r}")
    try:
        data = json.loads(msg.body_text())
    except (json.JSONDecodeError, ValueError) as exc:
        raise SchemaViolation(f"body is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise SchemaViolation("body must be a JSON object")
    problems = []
    for name, typ in SCHEMA_FIELDS.items():
        if name not in data:
            problems.append(f"missing field {name!r}")
        elif not isinstance(data[name], typ):
            problems.append(f"field {name!r} must be {typ.__name__}")
    for name in data:
        if name not in SCHEMA_FIELDS:
            problems.append(f"unexpected field {name!r}")
    if not problems and not data.get("command"):
        problems.append("field 'command' must be non-empty")
    if problems:
        raise SchemaViolation("; ".join(problems))
    return ShellCommand(data["prompt"], data["command"], data["confirm"])


def execute(cmd: ShellCommand, sandbox: SandboxConfig) -> ExecutionResult:
    import os
    env = {k: os.environ[k] for k in sandbox.env_keep if k in os.environ}
    sandbox.root.mkdir(parents=True, exist_ok=True)
    start = time.monotonic()
    try:
        proc = subprocess.run(
            [sandbox.shell, "-c", cmd.command],
            cwd=sandbox.root, env=env,
            capture_output=True, timeout=sandbox.timeout)
        stdout, stderr = proc.stdout, proc.stderr
        exit_code = proc.returncode
        timed_out = False
    except subprocess.TimeoutExpired as exc:
        stdout = exc.stdout or b""
        stderr = exc.stderr or b""
        exit_code = -9
        timed_out = True
    except OSError as exc:
        raise SpawnFailure(str(exc)) from exc
    duration = int((time.monotonic() - start) * 1000)
    cap = sandbox.stream_cap
    return ExecutionResult(
        exit_code=exit_code,
        stdout=stdout[:cap], stderr=stderr[:cap],
        duration_ms=duration,
        stdout_truncated=len(stdout) > cap,
        stderr_truncated=len(stderr) > cap,
        timed_out=timed_out)


def reply(robot_address: str, original: Message, result: ExecutionResult) -> Message:
    notes = []
    if result.timed_out:
        notes.append("The command was killed after exceeding the timeout.")
    if result.stdout_truncated:
        notes.append("stdout was truncated at the output cap.")
    if result.stderr_truncated:
        notes.append("stderr was truncated at the output cap.")
    summary = (f"Command finished with exit code {result.exit_code} "
               f"in {result.duration_ms} ms.\n")
    if notes:
        summary += "".join(n + "\n" for n in notes)
    return build_attachment_message(
        from_addr=robot_address,
        to_addr=original.from_addr,
        subject=f"Re: {original.subject}".rstrip(),
        body_text=summary,
        attachments=[("stdout.txt", "text/plain", result.stdout),
                     ("stderr.txt", "text/plain", result.stderr)])


@dataclass
class PendingConfirmation:
    cmd: ShellCommand
    original: Message
    deadline: float


class ShellRobot:
    """Executes commands serially; one reply per schema-valid command."""

    def __init__(self, address: str, sandbox: SandboxConfig,
                 confirm_address: str | None = None,
                 confirm_timeout: float = 600.0, clock=None):
        self.address = address
        self.sandbox = sandbox
        self.confirm_address = confirm_address
        self.confirm_timeout = confirm_timeout
        self.clock = clock or time.monotonic
        self.pending: list[PendingConfirmation] = []
        self.audit_log: list[ShellCommand] = []  # completed executions
        self.attempts: list[ShellCommand] = []  # every spawn, timed out or not

    def handle(self, msg: Message) -> list[Message]:
        if self.confirm_address and msg.from_addr.lower() == self.confirm_address.lower():
            return self._handle_confirmation_reply(msg)
        try:
            cmd = parse_command(msg)
        except (WrongContentType, SchemaViolation) as exc:
            return [self._error_reply(msg, exc)]
        if cmd.confirm:
            return self._start_confirm_flow(cmd, msg)
        return [self._run(cmd, msg)]

    def expire_pending(self) -> list[Message]:
        """Deny confirmations past their deadline; returns denial notices."""
        now = self.clock()
        out = []
        still = []
        for p in self.pending:
            if now >= p.deadline:
                out.append(self._denial(p, "confirmation timed out"))
            else:
                still.append(p)
        self.pending = still
        return out

    # -- internal -------------------------------------------------------

    def _run(self, cmd: ShellCommand, original: Message) -> Message:
        self.attempts.append(cmd)
        result = execute(cmd, self.sandbox)
        if not result.timed_out:  # a killed command is not a completed execution
            self.audit_log.append(cmd)
        log.info("ran %r -> exit %d in %dms", cmd.command, result.exit_code,
                 result.duration_ms)
        return reply(self.address, original, result)

    def _start_confirm_flow(self, cmd: ShellCommand, original: Message) -> list[Message]:
        if not self.confirm_address:
            return [self._error_reply(
                original,
                SchemaViolation("confirm requested but no confirmation address configured"))]
        self.pending.append(PendingConfirmation(
            cmd, original, self.clock() + self.confirm_timeout))
        request = Message(
            envelope_from=self.address,
            envelope_date="",
            headers=[("From", self.address),
                     ("To", self.confirm_address),
                     ("Subject", "Confirm command execution")],
            body=(f"{cmd.prompt}\n\n"
                  f"Command: {cmd.command}\n\n"
                  f'Reply "yes" to approve, anything else to deny.\n'))
        return [request]

    def _handle_confirmation_reply(self, msg: Message) -> list[Message]:
        if not self.pending:
            return []
        p = self.pending.pop(0)  # FIFO: oldest pending confirmation
        import re
        words = set(re.findall(r"[a-z]+", (msg.subject + "\n" + msg.body_text()).lower()))
        if words & set(AFFIRMATIVE):
            return [self._run(p.cmd, p.original)]
        return [self._denial(p, "the confirmation was denied")]

    def _denial(self, p: PendingConfirmation, reason: str) -> Message:
        return Message(
            envelope_from=self.address,
            envelope_date="",
            headers=[("From", self.address),
                     ("To", p.original.from_addr),
                     ("Subject", f"Re: {p.original.subject}".rstrip())],
            body=f"Command not executed: {reason}.\nCommand was: {p.cmd.command}\n")

    def _error_reply(self, original: Message, exc: Exception) -> Message:
        schema = json.dumps(
            {"prompt": "The prompt to display to the user",
             "command": "echo Hello, world!",
             "confirm": False}, indent=2)
        return Message(
            envelope_from=self.address,
            envelope_date="",
            headers=[("From", self.address),
                     ("To", original.from_addr),
                     ("Subject", f"Re: {original.subject}".rstrip())],
            body=(f"Error: {exc}\n\n"
                  f"This robot only accepts application/json bodies with this schema:\n"
                  f"{schema}\n"))
