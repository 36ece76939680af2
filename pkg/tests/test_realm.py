import hashlib
import json

import pytest

from agentpost.address import World
from agentpost.errors import SpoofedSender, WorldViolation
from agentpost.gateway import ScriptRule
from agentpost.locks import LockService
from agentpost.memory import replay_entries
from agentpost.message import Multipart, build_message, get_extended, serialize_mbox
from agentpost.realm import RealmServer, Target, split_output

from conftest import AGENT, SHELL, SYSTEM, USER, build_platform


def journal_hash(mem):
    h = hashlib.sha256()
    for e in mem.journal.entries:
        h.update(serialize_mbox([e]))
    return h.hexdigest()


def connect(realm, addr, conn="c1"):
    realm.hello(conn, realm.world.id, addr, token="")
    return conn


# --- sessions and ingest ---

def test_hello_wrong_world(platform):
    with pytest.raises(WorldViolation):
        platform.hello("c1", "w2", USER, token="")


def test_hello_bad_token(tmp_path):
    realm = build_platform(tmp_path)
    realm.auth_token = "secret"
    with pytest.raises(SpoofedSender):
        realm.hello("c1", "w1", USER, token="wrong")


def test_ingest_stamps_realm_header(platform):
    conn = connect(platform, USER)
    msg = build_message(USER, AGENT, "", "You are the middleman AI, ...\n")
    platform.ingest(conn, msg)
    mem = platform.memories[AGENT]
    assert get_extended(mem.journal.entries[0]).x_realm == "r1"


def test_ingest_spoofed_sender(platform):
    conn = connect(platform, USER)
    with pytest.raises(SpoofedSender):
        platform.ingest(conn, build_message("other@localdomain", AGENT, "s", "x\n"))


def test_ingest_unknown_connection(platform):
    with pytest.raises(SpoofedSender):
        platform.ingest("nope", build_message(USER, AGENT, "s", "x\n"))


# --- routing ---

def test_route_kinds(platform):
    connect(platform, USER)
    msg = build_message(AGENT, f"{SHELL}, {SYSTEM}, {USER}, ghost@localdomain", "s", "x\n")
    decisions = {d.recipient: d.target for d in platform.route(msg)}
    assert decisions[SHELL] == Target.TO_ROBOT
    assert decisions[SYSTEM] == Target.TO_SYSTEM
    assert decisions[USER] == Target.TO_CLIENT_SESSION
    assert decisions["ghost@localdomain"] == Target.DEAD_LETTER


def test_route_agent(platform):
    msg = build_message(USER, AGENT, "s", "x\n")
    (decision,) = platform.route(msg)
    assert decision.target == Target.TO_AGENT


def test_dead_letter_bounces_to_sender(platform):
    conn = connect(platform, USER)
    platform.ingest(conn, build_message(USER, "ghost@localdomain", "hello", "x\n"))
    ((notice, _),) = platform.deliveries[USER]
    assert notice.from_addr == SYSTEM
    assert "could not be delivered" in notice.body_text()
    assert "Undeliverable: hello" == notice.subject


# --- agent lifecycle ---

def test_agent_auto_created(platform):
    conn = connect(platform, USER)
    platform.ingest(conn, build_message(USER, AGENT, "", "You are the middleman AI, x\n"))
    mem = platform.memories[AGENT]
    assert len(mem.journal.entries) == 2  # setup + scripted reply
    assert mem.journal.entries[1].from_addr == AGENT


def test_fresh_agent_without_parent_is_empty(platform):
    mem = platform.ensure_agent("ai_31@agents.localdomain")
    assert mem.journal.entries == []


def test_shell_session_transcript(platform):
    conn = connect(platform, USER)
    platform.ingest(conn, build_message(
        USER, AGENT, "",
        "You are the middleman AI, which sits between the user and the bash\n"
        "command line of a recent Ubuntu system.\n"))
    platform.ingest(conn, build_message(
        USER, AGENT, "", "Run a command to figure out my storage hardware.\n"))
    mem = platform.memories[AGENT]
    cells = mem.context.cells
    assert len(cells) == 6
    # cell 3: the agent's JSON command to the shell robot
    to_shell = cells[3]
    assert to_shell.to_addrs == [SHELL]
    assert get_extended(to_shell).x_serial == 3
    assert json.loads(to_shell.body_text())["command"] == "lsblk"
    # cell 4: the robot reply with attachments
    assert isinstance(cells[4].body, Multipart)
    # cell 5: the final summary to the user
    final = cells[5]
    assert final.subject == "Storage Hardware Details"
    assert get_extended(final).x_serial == 5
    # the user saw both agent messages
    delivered = [m for m, _ in platform.deliveries[USER]]
    assert [m.subject for m in delivered] == [
        "RE: Command Execution Setup", "Storage Hardware Details"]
    assert get_extended(final).x_total_tokens > 0


def test_agent_outputs_carry_total_tokens(platform):
    conn = connect(platform, USER)
    platform.ingest(conn, build_message(USER, AGENT, "", "middleman AI\n"))
    reply = platform.memories[AGENT].journal.entries[1]
    assert get_extended(reply).x_total_tokens > 0


def test_from_forced_on_agent_output(tmp_path):
    rules = [ScriptRule(body_regex="hi",
                        respond_headers={"From": "forged@localdomain", "To": USER,
                                         "Subject": "s"},
                        respond_body="out\n")]
    realm = build_platform(tmp_path, rules=rules)
    conn = connect(realm, USER)
    realm.ingest(conn, build_message(USER, AGENT, "", "hi\n"))
    reply = realm.memories[AGENT].journal.entries[1]
    assert reply.from_addr == AGENT


def test_backend_error_leaves_context_with_notice(tmp_path):
    realm = build_platform(tmp_path, rules=[])  # nothing ever matches
    conn = connect(realm, USER)
    realm.ingest(conn, build_message(USER, AGENT, "s", "hello\n"))
    mem = realm.memories[AGENT]
    assert len(mem.journal.entries) == 2
    assert mem.journal.entries[1].from_addr == SYSTEM
    _, report = mem.verify_replay()
    assert report["consistent"]


def test_unparseable_output_retry_then_quiescent(tmp_path):
    class GarbageBackend:
        calls = 0

        def complete(self, req):
            from agentpost.gateway import CompletionResult
            GarbageBackend.calls += 1
            return CompletionResult("", 1)  # empty output: unparseable

    realm = build_platform(tmp_path, rules=[])
    realm.gateway._backends["test.scripted"] = GarbageBackend()
    conn = connect(realm, USER)
    realm.ingest(conn, build_message(USER, AGENT, "", "go\n"))
    mem = realm.memories[AGENT]
    notices = [e for e in mem.journal.entries if e.subject == "Output Error"]
    assert len(notices) == 2  # first failure + failed retry
    assert GarbageBackend.calls == 2  # exactly one retry
    assert USER not in realm.deliveries


# --- system command handling (MSR) ---

def msr_rules():
    return [
        ScriptRule(last_regex=r"Re: MSR",
                   respond_headers={"To": USER, "Subject": "MSR Confirmation Received"},
                   respond_body="The rewrite was applied.\n"),
        ScriptRule(body_regex="identify a wasteful memory range",
                   respond_headers={"To": SYSTEM, "Subject": "MSR 1-2"},
                   respond_body="Removing the padding messages.\n"),
        ScriptRule(body_regex="padding",
                   respond_headers={"To": USER, "Subject": "ack"},
                   respond_body="Noted.\n"),
    ]


def test_msr_flow_end_to_end(tmp_path):
    realm = build_platform(tmp_path, rules=msr_rules())
    conn = connect(realm, USER)
    realm.ingest(conn, build_message(USER, AGENT, "", "padding one\n"))
    realm.ingest(conn, build_message(USER, AGENT, "", "padding two\n"))
    mem = realm.memories[AGENT]
    assert len(mem.context.cells) == 4
    realm.ingest(conn, build_message(
        USER, AGENT, "", "Now identify a wasteful memory range to remove.\n"))
    # context: 5 cells before MSR; [1,2] replaced by the payload, then the
    # confirmation and the agent's report appended
    cells = mem.context.cells
    assert len(cells) == 6
    bodies = [c.body if isinstance(c.body, str) else "" for c in cells]
    assert "Removing the padding messages.\n" in bodies[1]
    assert cells[4].subject == "Re: MSR 1-2"
    assert "Memory segment rewriting applied." in cells[4].body
    report = mem.journal.entries[-1]
    assert report.subject == "MSR Confirmation Received"
    _, rep = mem.verify_replay()
    assert rep["consistent"]
    # user view hides the MSR exchange
    view_subjects = [m.subject for m in mem.user_view()]
    assert "MSR 1-2" not in view_subjects
    assert "Re: MSR 1-2" not in view_subjects
    assert "MSR Confirmation Received" in view_subjects


def test_invalid_msr_gets_error_reply(tmp_path):
    rules = [ScriptRule(body_regex="rewrite",
                        respond_headers={"To": SYSTEM, "Subject": "MSR 5-3"},
                        respond_body="bad range\n")]
    realm = build_platform(tmp_path, rules=rules)
    conn = connect(realm, USER)
    realm.ingest(conn, build_message(USER, AGENT, "", "please rewrite\n"))
    mem = realm.memories[AGENT]
    errors = [e for e in mem.journal.entries if e.subject == "MSR Error"]
    assert len(errors) == 1
    assert "RangeInvalid" in errors[0].body
    _, rep = mem.verify_replay()
    assert rep["consistent"]


def test_non_msr_system_message_gets_help(tmp_path):
    rules = [ScriptRule(body_regex="ask the system",
                        respond_headers={"To": SYSTEM, "Subject": "what can you do"},
                        respond_body="?\n")]
    realm = build_platform(tmp_path, rules=rules)
    conn = connect(realm, USER)
    realm.ingest(conn, build_message(USER, AGENT, "", "ask the system\n"))
    mem = realm.memories[AGENT]
    helps = [e for e in mem.journal.entries if "Supported commands" in e.body_text()]
    assert len(helps) == 1


# --- cloning ---

def seed_parent(realm, conn, n=5):
    rules_hit = build_message(USER, "sina@agents.localdomain", "", "padding zero\n")
    realm.ingest(conn, rules_hit)
    for i in range(1, n // 2 + 1):
        realm.ingest(conn, build_message(
            USER, "sina@agents.localdomain", "", f"padding {i}\n"))
    return realm.memories["sina@agents.localdomain"]


def test_clone_from_dotted_address(tmp_path):
    realm = build_platform(tmp_path, rules=msr_rules())
    conn = connect(realm, USER)
    parent = seed_parent(realm, conn)
    parent_cells = [serialize_mbox([c]) for c in parent.context.cells]
    parent_hash_before = journal_hash(parent)
    realm.ingest(conn, build_message(
        USER, "ibn.sina@agents.localdomain", "", "padding hello clone\n"))
    clone = realm.memories["ibn.sina@agents.localdomain"]
    # initial cells equal the parent's context cell-for-cell
    n = len(parent_cells)
    assert [serialize_mbox([c]) for c in clone.journal.entries[:n]] == parent_cells
    # divergence: messages to the clone leave the parent untouched
    for i in range(3):
        realm.ingest(conn, build_message(
            USER, "ibn.sina@agents.localdomain", "", f"padding diverge {i}\n"))
    assert journal_hash(parent) == parent_hash_before
    _, rep = clone.verify_replay()
    assert rep["consistent"]


def test_clone_via_header(tmp_path):
    realm = build_platform(tmp_path, rules=msr_rules())
    conn = connect(realm, USER)
    parent = seed_parent(realm, conn)
    msg = build_message(USER, "fresh_one@agents.localdomain", "", "padding hi\n",
                        extra_headers=[("X-Clone-From", "sina@agents.localdomain")])
    realm.ingest(conn, msg)
    clone = realm.memories["fresh_one@agents.localdomain"]
    assert len(clone.journal.entries) > 2
    assert ([serialize_mbox([c]) for c in clone.journal.entries[:len(parent.context.cells)]]
            == [serialize_mbox([c]) for c in parent.context.cells])


def test_clone_without_existing_parent_is_fresh(tmp_path):
    realm = build_platform(tmp_path, rules=msr_rules())
    conn = connect(realm, USER)
    realm.ingest(conn, build_message(
        USER, "no.parent_here@agents.localdomain", "", "padding hi\n"))
    clone = realm.memories["no.parent_here@agents.localdomain"]
    assert len(clone.journal.entries) == 2  # just the message and the reply


# --- agent-to-agent and hop limits ---

def test_agent_to_agent_fanout(tmp_path):
    rules = [
        ScriptRule(body_regex="delegate",
                   respond_headers={"To": "ai_b@agents.localdomain", "Subject": "task"},
                   respond_body="please handle this\n"),
        ScriptRule(body_regex="please handle",
                   respond_headers={"To": USER, "Subject": "done"},
                   respond_body="handled\n"),
    ]
    realm = build_platform(tmp_path, rules=rules)
    conn = connect(realm, USER)
    realm.ingest(conn, build_message(USER, "ai_a@agents.localdomain", "", "delegate\n"))
    b = realm.memories["ai_b@agents.localdomain"]
    assert len(b.journal.entries) == 2
    delivered = [m.subject for m, _ in realm.deliveries[USER]]
    assert "done" in delivered


def test_hop_limit_stops_ping_pong(tmp_path):
    rules = [
        ScriptRule(body_regex="ping",
                   respond_headers={"To": "ai_b@agents.localdomain", "Subject": "s"},
                   respond_body="pong\n"),
        ScriptRule(body_regex="pong",
                   respond_headers={"To": "ai_a@agents.localdomain", "Subject": "s"},
                   respond_body="ping\n"),
    ]
    realm = build_platform(tmp_path, rules=rules)
    realm.max_hops = 6
    conn = connect(realm, USER)
    realm.ingest(conn, build_message(USER, "ai_a@agents.localdomain", "", "ping\n"))
    total = (len(realm.memories["ai_a@agents.localdomain"].journal.entries)
             + len(realm.memories["ai_b@agents.localdomain"].journal.entries))
    assert total < 40  # bounded, not a runaway loop


# --- handoff between realms ---

def test_context_handoff(tmp_path):
    world = World("w1")
    locks = LockService()
    r1 = build_platform(tmp_path, realm_id="r1", world=world, locks=locks,
                        rules=msr_rules())
    r2 = build_platform(tmp_path, realm_id="r2", world=world, locks=locks,
                        rules=msr_rules(), with_robot=False)
    r1.peers["r2"] = r2
    r2.peers["r1"] = r1
    c1 = connect(r1, USER, "c1")
    c2 = connect(r2, USER, "c2")
    for i in range(5):
        r1.ingest(c1, build_message(USER, AGENT, "", f"padding {i}\n"))
    entries_before = len(r1.memories[AGENT].journal.entries)
    # r2 receives a message for the agent r1 owns
    r2.ingest(c2, build_message(USER, AGENT, "", "padding after handoff\n"))
    assert AGENT in r2.pending_msgs
    r1.process()  # services the transfer request
    assert AGENT not in r1.memories
    r2.process()
    mem = r2.memories[AGENT]
    assert len(mem.journal.entries) == entries_before + 2
    _, rep = mem.verify_replay()
    assert rep["consistent"]
    assert locks.owner_of(AGENT)[0] == "r2"


def test_split_output_multiple_messages():
    raw = ("From - \n"
           "From: a@agents.localdomain\nTo: u@d\nSubject: one\n\nfirst\n"
           "\n"
           "From - \n"
           "From: a@agents.localdomain\nTo: u@d\nSubject: two\n\nsecond\n")
    msgs = split_output(raw)
    assert [m.subject for m in msgs] == ["one", "two"]


def test_split_output_bare_block():
    msgs = split_output("To: u@d\nSubject: s\n\nbody\n")
    assert len(msgs) == 1
    assert msgs[0].body == "body\n"
