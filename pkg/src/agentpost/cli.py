"""Operator command line: serve a realm, send mail, tail journals, verify.

Every subcommand speaks the same wire protocol as any other client; the only
privileged operation is force-release, gated on the admin token. Deterministic
exit codes and a --json mode keep everything scriptable.
"""
from __future__ import annotations

import asyncio
import errno
import json
import logging
import signal
import sys
from pathlib import Path

import click
import yaml

from . import memory as memstore
from .address import World, parse_address
from .gateway import BackendId, HttpChatBackend, ModelGateway, ScriptedBackend
from .locks import LockService
from .message import build_message, serialize_mbox
from .realm import RealmServer
from .shellbot import SandboxConfig, ShellRobot
from .wire import WireClient, WireServer

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _server_addr(server: str | None) -> tuple[str, int]:
    if not server:
        raise click.UsageError("no server given (flag --server or AGENTPOST_SERVER)")
    host, _, port = server.rpartition(":")
    return host or "127.0.0.1", int(port)


def _connect(server, world, address, token) -> WireClient:
    host, port = _server_addr(server)
    try:
        client = WireClient(host, port)
    except OSError as exc:
        raise click.ClickException(f"cannot connect to {host}:{port}: {exc}")
    client.hello(world, address, token)
    return client


def _print_frame(frame: dict, as_json: bool) -> None:
    if as_json:
        click.echo(json.dumps(frame, separators=(",", ":")))
    elif frame.get("type") == "DELIVER":
        click.echo(frame["mbox"], nl=False)
        click.echo("")
    else:
        click.echo(f"{frame.get('type')}: {frame}")


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def main(verbose: int) -> None:
    """Agent messaging platform over email semantics."""
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# serve

@main.command()
@click.option("--world", default="w1", show_default=True)
@click.option("--realm", "realm_id", default="r1", show_default=True)
@click.option("--listen", default="127.0.0.1:7100", show_default=True,
              help="TCP host:port for the framed protocol.")
@click.option("--ws-port", type=int, default=None,
              help="Also listen for WebSocket clients on this port.")
@click.option("--storage-root", type=click.Path(path_type=Path), required=True)
@click.option("--rules", "rules_path", type=click.Path(exists=True, path_type=Path),
              default=None, help="YAML rules for the scripted backend.")
@click.option("--backend", "backend_id", default="test.scripted", show_default=True,
              help="Default backend id (provider.model).")
@click.option("--http-backend", default=None,
              help="URL of an OpenAI-style chat endpoint for the default backend.")
@click.option("--shell-robot", "shell_address", default=None,
              help="Register a shell robot at this address.")
@click.option("--sandbox", type=click.Path(path_type=Path), default=None,
              help="Working directory root for the shell robot.")
@click.option("--auth-token", envvar="AGENTPOST_TOKEN", default="")
@click.option("--admin-token", envvar="AGENTPOST_ADMIN_TOKEN", default="")
def serve(world, realm_id, listen, ws_port, storage_root, rules_path, backend_id,
          http_backend, shell_address, sandbox, auth_token, admin_token):
    """Run a realm server until SIGTERM/SIGINT; persists all contexts on exit."""
    host, port = _server_addr(listen)
    try:
        storage_root.mkdir(parents=True, exist_ok=True)
        probe = storage_root / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise click.ClickException(f"storage root not writable: {exc}")

    gateway = ModelGateway()
    bid = BackendId.parse(backend_id)
    if http_backend:
        gateway.register_backend(bid, HttpChatBackend(http_backend, bid.model))
    elif rules_path:
        gateway.register_backend(bid, ScriptedBackend.from_file(rules_path))
    else:
        gateway.register_backend(bid, ScriptedBackend([]))

    w = World(world)
    realm = RealmServer(realm_id, w, gateway, LockService(), storage_root,
                        auth_token=auth_token, admin_token=admin_token)
    if shell_address:
        robot_sandbox = sandbox or storage_root / "sandbox"
        w.register_robot(shell_address,
                         ShellRobot(shell_address, SandboxConfig(root=Path(robot_sandbox))))

    server = WireServer(realm, host, port, ws_port)

    async def run():
        try:
            await server.start()
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise click.ClickException(f"port {port} already in use")
            raise
        click.echo(f"listening on {host}:{server.tcp_port}"
                   + (f" (ws {server.ws_port})" if ws_port is not None else ""))
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGTERM, signal.SIGINT):
            loop.add_signal_handler(sig, stop.set)
        await stop.wait()
        await server.stop()

    asyncio.run(run())


# ---------------------------------------------------------------------------
# client commands

server_opt = click.option("--server", envvar="AGENTPOST_SERVER",
                          default="127.0.0.1:7100", show_default=True)
world_opt = click.option("--world", default="w1", show_default=True)
token_opt = click.option("--token", envvar="AGENTPOST_TOKEN", default="")
json_opt = click.option("--json", "as_json", is_flag=True,
                        help="Emit frames as JSON lines.")


@main.command()
@click.option("--to", "to_addr", required=True)
@click.option("--from", "from_", required=True)
@click.option("--subject", default="")
@click.option("--body", default=None, help="Message body; stdin when omitted.")
@click.option("--hint", default=None, help="Model backend hint (provider.model).")
@click.option("--no-wait", is_flag=True, help="Do not wait for replies.")
@click.option("--wait", "wait_seconds", default=2.0, show_default=True,
              help="Quiescence window when waiting for replies.")
@server_opt
@world_opt
@token_opt
@json_opt
def send(to_addr, from_, subject, body, hint, no_wait, wait_seconds,
         server, world, token, as_json):
    """Send one message and print replies until quiescence."""
    if body is None:
        body = sys.stdin.read()
    extra = [("X-Hint-Model", hint)] if hint else None
    msg = build_message(from_, to_addr, subject, body, extra_headers=extra)
    client = _connect(server, world, from_, token)
    client.send_frame({"type": "SEND",
                       "mbox": serialize_mbox([msg]).decode("utf-8")})
    exit_code = EXIT_OK
    if not no_wait:
        while True:
            frame = client.recv_frame(timeout=wait_seconds)
            if frame is None:
                break
            if frame.get("type") == "ERROR":
                _print_frame(frame, as_json)
                exit_code = EXIT_FAILURE
                break
            _print_frame(frame, as_json)
    client.close()
    sys.exit(exit_code)


@main.command()
@click.argument("agent")
@click.option("--from-offset", default=0, show_default=True)
@click.option("--user-view", is_flag=True,
              help="Hide system traffic (memory operations).")
@click.option("--follow", is_flag=True, help="Keep streaming new entries.")
@click.option("--client-address", default="operator@localdomain", show_default=True)
@server_opt
@world_opt
@token_opt
@json_opt
def tail(agent, from_offset, user_view, follow, client_address,
         server, world, token, as_json):
    """Print an agent's journal as mbox text."""
    client = _connect(server, world, client_address, token)
    client.send_frame({"type": "TAIL", "agent": agent,
                       "from-offset": from_offset, "user-view": user_view})
    idle = None if follow else 1.0
    try:
        while True:
            frame = client.recv_frame(timeout=idle)
            if frame is None:
                break
            if frame.get("type") == "ERROR":
                _print_frame(frame, as_json)
                sys.exit(EXIT_FAILURE)
            _print_frame(frame, as_json)
    except KeyboardInterrupt:
        pass
    finally:
        client.close()
    sys.exit(EXIT_OK)


@main.command("replay-verify")
@click.argument("agent")
@click.option("--storage-root", type=click.Path(exists=True, path_type=Path),
              required=True)
@world_opt
@json_opt
def replay_verify(agent, storage_root, world, as_json):
    """Replay the persisted journal and compare against the context. Exit 0/1."""
    w = World(world)
    if not memstore.agent_exists(storage_root, world, agent):
        raise click.ClickException(f"no persisted journal for {agent}")
    mem, report = memstore.load(agent, w, storage_root)
    _, verdict = mem.verify_replay()
    verdict["agent"] = agent
    verdict["load_corrupt_tail"] = report.corrupt
    healthy = verdict["consistent"] and not report.corrupt
    if as_json:
        click.echo(json.dumps(verdict, separators=(",", ":")))
    elif not verdict["consistent"]:
        click.echo(f"{agent}: DIVERGED at cell {verdict['first_divergence']}")
    elif report.corrupt:
        click.echo(f"{agent}: corrupt journal tail "
                   f"({report.recovered} entries recovered): {report.detail}")
    else:
        click.echo(f"{agent}: consistent "
                   f"({verdict['replayed']} replayed cells, "
                   f"{verdict['live']} live context cells)")
    sys.exit(EXIT_OK if healthy else EXIT_FAILURE)


@main.command("export")
@click.argument("agent")
@click.option("--storage-root", type=click.Path(exists=True, path_type=Path),
              required=True)
@world_opt
@click.option("--user-view", is_flag=True)
def export(agent, storage_root, world, user_view):
    """Write an agent's persisted journal to stdout as mbox."""
    w = World(world)
    if not memstore.agent_exists(storage_root, world, agent):
        raise click.ClickException(f"no persisted journal for {agent}")
    mem, _ = memstore.load(agent, w, storage_root)
    entries = mem.user_view() if user_view else mem.journal.entries
    sys.stdout.buffer.write(serialize_mbox(entries))


@main.command("force-release")
@click.argument("agent")
@click.option("--admin-token", envvar="AGENTPOST_ADMIN_TOKEN", required=True)
@click.option("--client-address", default="operator@localdomain", show_default=True)
@server_opt
@world_opt
@token_opt
def force_release(agent, admin_token, client_address, server, world, token):
    """Break an agent's lock. Operator escape hatch; use when a realm died."""
    client = _connect(server, world, client_address, token)
    client.send_frame({"type": "FORCE-RELEASE", "agent": agent,
                       "admin-token": admin_token})
    frame = client.recv_frame(timeout=5)
    client.close()
    if frame is None or frame.get("type") == "ERROR":
        click.echo(f"force-release failed: {frame}", err=True)
        sys.exit(EXIT_FAILURE)
    click.echo(f"released {agent}")


if __name__ == "__main__":
    main()
