import random

import pytest

from agentpost.address import World, parse_address
from agentpost.errors import (
    AgentMismatch,
    FencedWrite,
    NotAnMsr,
    RangeInvalid,
    RangeOutOfBounds,
    StaleEpoch,
)
from agentpost.memory import (
    AgentMemory,
    CONFIRMATION_BODY,
    agent_exists,
    load,
    persist,
    replay_entries,
)
from agentpost.message import build_message, get_extended, parse_mbox, serialize_mbox

AGENT = "ai_30@agents.localdomain"
USER = "user1@localdomain"
SYSTEM = "system@localdomain"


@pytest.fixture
def world():
    return World("w1")


@pytest.fixture
def mem(world):
    return AgentMemory(parse_address(AGENT, world))


def user_msg(body, subject="s"):
    return build_message(USER, AGENT, subject, body)


def agent_msg(body, to=USER, subject="s"):
    return build_message(AGENT, to, subject, body)


def msr_msg(lo, hi, colon=False):
    subject = f"MSR{':' if colon else ''} {lo}-{hi}"
    return build_message(AGENT, SYSTEM, subject, "removing stale content\n")


def do_msr(mem, lo, hi, colon=False):
    render = mem.render()
    cmd = mem.parse_msr(msr_msg(lo, hi, colon), render)
    return mem.apply_msr(cmd)


def test_first_append(mem):
    mem.append(user_msg("hello\n"))
    assert len(mem.journal.entries) == 1
    assert len(mem.context.cells) == 1


def test_append_rejects_unrelated_message(mem):
    other = build_message(USER, "someone@elsewhere", "s", "hi\n")
    with pytest.raises(AgentMismatch):
        mem.append(other)


def test_append_stamps_serial(mem):
    for i in range(4):
        stored = mem.append(user_msg(f"m{i}\n"))
        assert get_extended(stored).x_serial == i


def test_context_tracks_journal_without_msr(mem):
    for i in range(100):
        mem.append(user_msg(f"m{i}\n"))
    assert len(mem.context.cells) == len(mem.journal.entries) == 100


def test_render_numbers_zero_based(mem):
    for i in range(6):
        mem.append(user_msg(f"m{i}\n"))
    render = mem.render()
    assert [n for n, _ in render.numbered] == list(range(6))
    for n, msg in render.numbered:
        assert get_extended(msg).x_serial == n


def test_render_empty_still_increments_epoch(mem):
    e0 = mem.context.epoch
    render = mem.render()
    assert len(render) == 0
    assert render.epoch == e0 + 1


def test_render_determinism(mem):
    for i in range(5):
        mem.append(user_msg(f"m{i}\n"))
    a = mem.render()
    b = mem.render()
    assert a.to_mbox() == b.to_mbox()


def test_parse_msr_both_subject_forms(mem):
    for i in range(40):
        mem.append(user_msg(f"m{i}\n"))
    render = mem.render()
    for colon in (False, True):
        cmd = mem.parse_msr(msr_msg(29, 35, colon), render)
        assert (cmd.lo, cmd.hi) == (29, 35)


def test_parse_msr_errors(mem):
    mem.append(user_msg("m\n"))
    render = mem.render()
    with pytest.raises(NotAnMsr):
        mem.parse_msr(build_message(AGENT, SYSTEM, "hello", "x\n"), render)
    with pytest.raises(RangeInvalid):
        mem.parse_msr(msr_msg(5, 3), render)
    with pytest.raises(RangeOutOfBounds):
        mem.parse_msr(msr_msg(0, 1), render)


def test_msr_single_cell(mem):
    mem.append(user_msg("only\n"))
    render = mem.render()
    cmd = mem.parse_msr(msr_msg(0, 0), render)
    assert (cmd.lo, cmd.hi) == (0, 0)


def test_apply_msr_arithmetic(mem):
    for i in range(42):
        mem.append(user_msg(f"m{i}\n"))
    journal_before = len(mem.journal.entries)
    do_msr(mem, 29, 35)
    # 7 cells replaced by 1, then the confirmation appended
    assert len(mem.context.cells) == 42 - 6 + 1
    assert len(mem.journal.entries) == journal_before + 2
    conf = mem.journal.entries[-1]
    assert conf.subject == "Re: MSR 29-35"
    assert conf.body == CONFIRMATION_BODY


def test_apply_msr_stale_epoch(mem):
    for i in range(5):
        mem.append(user_msg(f"m{i}\n"))
    render = mem.render()
    cmd = mem.parse_msr(msr_msg(1, 2), render)
    mem.append(user_msg("intervening\n"))
    with pytest.raises(StaleEpoch):
        mem.apply_msr(cmd)


def test_render_after_msr_splices(mem):
    for i in range(6):
        mem.append(user_msg(f"m{i}\n"))
    oracle = [f"m{i}\n" for i in range(6)]
    do_msr(mem, 2, 4)
    oracle[2:5] = ["removing stale content\n"]
    oracle.append(CONFIRMATION_BODY)
    render = mem.render()
    assert [m.body for _, m in render.numbered] == oracle
    assert get_extended(render.numbered[2][1]).x_serial == 2


def test_msr_of_msr_payload(mem):
    for i in range(5):
        mem.append(user_msg(f"m{i}\n"))
    do_msr(mem, 1, 3)  # cells: m0, MSR, m4, conf
    do_msr(mem, 1, 1)  # rewrite the payload cell itself
    _, report = mem.verify_replay()
    assert report["consistent"]


def test_journal_monotonic_under_msr(mem):
    for i in range(10):
        mem.append(user_msg(f"m{i}\n"))
    before = [serialize_mbox([e]) for e in mem.journal.entries]
    do_msr(mem, 0, 5)
    after = [serialize_mbox([e]) for e in mem.journal.entries[:10]]
    assert after == before


def test_verify_replay_simple(mem):
    for i in range(8):
        mem.append(user_msg(f"m{i}\n"))
    do_msr(mem, 2, 5)
    cells, report = mem.verify_replay()
    assert report["consistent"]
    assert len(cells) == len(mem.context.cells)


def test_verify_replay_empty(mem):
    cells, report = mem.verify_replay()
    assert cells == []
    assert report["consistent"]


def test_verify_replay_detects_divergence(mem):
    for i in range(3):
        mem.append(user_msg(f"m{i}\n"))
    mem.context.cells[1] = user_msg("tampered\n")
    _, report = mem.verify_replay()
    assert not report["consistent"]
    assert report["first_divergence"] == 1


def test_replay_fuzz_500_interleavings(mem, world):
    rng = random.Random(1234)
    for round_no in range(500):
        mem = AgentMemory(parse_address(AGENT, world))
        # independent splice oracle over body texts
        oracle = []
        for step in range(rng.randrange(1, 12)):
            n = len(mem.context.cells)
            if n >= 2 and rng.random() < 0.4:
                lo = rng.randrange(n)
                hi = rng.randrange(lo, n)
                do_msr(mem, lo, hi)
                oracle[lo:hi + 1] = ["removing stale content\n"]
                oracle.append(CONFIRMATION_BODY)
            else:
                body = f"r{round_no}s{step}\n"
                mem.append(user_msg(body))
                oracle.append(body)
        assert [c.body for c in mem.context.cells] == oracle
        _, report = mem.verify_replay()
        assert report["consistent"], f"round {round_no}: {report}"


def test_rejected_msr_replays_as_append(mem):
    for i in range(5):
        mem.append(user_msg(f"m{i}\n"))
    # a stale or rejected attempt is journaled as a plain message with an
    # error notice, never a confirmation; replay must append it
    mem.append(msr_msg(1, 2))
    mem.append(build_message(SYSTEM, AGENT, "MSR Error", "stale\n"))
    _, report = mem.verify_replay()
    assert report["consistent"]


def test_user_view_hides_system_traffic(mem):
    mem.append(user_msg("hello\n"))
    mem.append(agent_msg("reply\n"))
    do_msr(mem, 0, 0)
    view = mem.user_view()
    assert all(SYSTEM not in (m.from_addr, *m.to_addrs) for m in view)
    assert len(view) == 2


def test_user_view_no_system_traffic_is_identity(mem):
    mem.append(user_msg("a\n"))
    mem.append(agent_msg("b\n"))
    assert mem.user_view() == mem.journal.entries


def test_user_view_idempotent_subsequence(mem):
    for i in range(4):
        mem.append(user_msg(f"m{i}\n"))
    do_msr(mem, 0, 1)
    view = mem.user_view()
    # order-preserving subsequence of the journal
    it = iter(mem.journal.entries)
    assert all(any(v is e for e in it) for v in view)


# --- persistence ---

def test_persist_load_round_trip(tmp_path, world, mem):
    for i in range(10):
        mem.append(user_msg(f"m{i}\n"))
    persist(mem, tmp_path)
    assert agent_exists(tmp_path, "w1", AGENT)
    loaded, report = load(AGENT, world, tmp_path)
    assert not report.corrupt
    assert len(loaded.journal.entries) == 10
    assert ([serialize_mbox([e]) for e in loaded.journal.entries]
            == [serialize_mbox([e]) for e in mem.journal.entries])
    _, rep = loaded.verify_replay()
    assert rep["consistent"]


def test_persist_is_incremental(tmp_path, world, mem):
    mem.append(user_msg("a\n"))
    persist(mem, tmp_path)
    mem.append(user_msg("b\n"))
    do_msr(mem, 0, 1)
    persist(mem, tmp_path)
    loaded, _ = load(AGENT, world, tmp_path)
    assert len(loaded.journal.entries) == 4
    assert [c.body for c in loaded.context.cells] == [c.body for c in mem.context.cells]


def test_segment_is_valid_mbox(tmp_path, mem):
    for i in range(5):
        mem.append(user_msg(f"m{i}\n"))
    persist(mem, tmp_path)
    seg = tmp_path / "w1" / f"{AGENT}.mbox"
    assert len(parse_mbox(seg.read_bytes())) == 5


def test_truncated_segment_recovers_prefix(tmp_path, world, mem):
    for i in range(6):
        mem.append(user_msg(f"m{i}\n"))
    persist(mem, tmp_path)
    seg = tmp_path / "w1" / f"{AGENT}.mbox"
    raw = seg.read_bytes()
    # cut inside the last message's header block
    cut = raw.rfind(b"Subject:")
    seg.write_bytes(raw[:cut] + b"Content-Type: multipart/mixed; boundary=\"B\"\n\n--B\n")
    loaded, report = load(AGENT, world, tmp_path)
    assert report.corrupt
    assert report.recovered == 5
    assert len(loaded.journal.entries) == 5


def test_fencing_rejects_stale_epoch(tmp_path, mem):
    mem.append(user_msg("a\n"))
    persist(mem, tmp_path, lease_epoch=3)
    mem.append(user_msg("b\n"))
    with pytest.raises(FencedWrite):
        persist(mem, tmp_path, lease_epoch=2)
    persist(mem, tmp_path, lease_epoch=3)


def test_replay_entries_pure_function(mem):
    for i in range(7):
        mem.append(user_msg(f"m{i}\n"))
    do_msr(mem, 1, 4)
    cells = replay_entries(mem.journal.entries)
    assert [serialize_mbox([c]) for c in cells] == \
        [serialize_mbox([c]) for c in mem.context.cells]
