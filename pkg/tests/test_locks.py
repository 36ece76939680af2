import threading

import pytest

from agentpost.errors import NotOwner, UnknownRealm, UnpersistedRelease
from agentpost.locks import Granted, LockService, MustWait, check_history

AGENT = "ai_30@agents.localdomain"


@pytest.fixture
def locks():
    svc = LockService()
    for r in ("r1", "r2", "r3"):
        svc.register_realm(r)
    return svc


def test_first_acquisition(locks):
    grant = locks.acquire(AGENT, "r1")
    assert isinstance(grant, Granted)
    assert grant.lease_epoch == 1


def test_unknown_realm(locks):
    with pytest.raises(UnknownRealm):
        locks.acquire(AGENT, "nope")


def test_reentrant_same_epoch(locks):
    first = locks.acquire(AGENT, "r1")
    again = locks.acquire(AGENT, "r1")
    assert isinstance(again, Granted)
    assert again.lease_epoch == first.lease_epoch


def test_contention_must_wait_and_owner_notified(locks):
    notified = []
    svc = LockService()
    svc.register_realm("r1", on_release_requested=lambda a, w: notified.append((a, w)))
    svc.register_realm("r2")
    svc.acquire(AGENT, "r1")
    result = svc.acquire(AGENT, "r2")
    assert isinstance(result, MustWait)
    assert result.current_owner == "r1"
    assert notified == [(AGENT, "r2")]


def test_release_grants_next_waiter_with_bumped_epoch(locks):
    locks.acquire(AGENT, "r1")
    locks.acquire(AGENT, "r2")
    locks.release(AGENT, "r1", context_persisted=True)
    assert locks.owner_of(AGENT) == ("r2", 2)


def test_release_requires_persistence_attestation(locks):
    locks.acquire(AGENT, "r1")
    with pytest.raises(UnpersistedRelease):
        locks.release(AGENT, "r1", context_persisted=False)
    assert locks.owner_of(AGENT) == ("r1", 1)


def test_release_by_non_owner(locks):
    locks.acquire(AGENT, "r1")
    with pytest.raises(NotOwner):
        locks.release(AGENT, "r2", context_persisted=True)


def test_owner_of_unowned(locks):
    assert locks.owner_of(AGENT) is None


def test_full_handoff_sequence(locks):
    locks.acquire(AGENT, "r1")
    locks.acquire(AGENT, "r2")
    locks.release(AGENT, "r1", context_persisted=True)
    owner, epoch = locks.owner_of(AGENT)
    assert (owner, epoch) == ("r2", 2)
    assert not check_history(locks.history)


def test_force_release_bumps_epoch(locks):
    locks.acquire(AGENT, "r1")
    locks.acquire(AGENT, "r2")
    locks.force_release(AGENT)
    assert locks.owner_of(AGENT) == ("r2", 2)


def test_racing_acquirers_single_grant(locks):
    results = []
    barrier = threading.Barrier(16)

    def racer(realm):
        barrier.wait()
        results.append((realm, locks.acquire(AGENT, realm)))

    svc = LockService()
    realms = [f"r{i}" for i in range(16)]
    for r in realms:
        svc.register_realm(r)
    locks = svc
    threads = [threading.Thread(target=racer, args=(r,)) for r in realms]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    granted = [r for r, g in results if isinstance(g, Granted)]
    waiting = [r for r, g in results if isinstance(g, MustWait)]
    assert len(granted) == 1
    assert len(waiting) == 15


def test_interleaved_storm_history_linearizes():
    svc = LockService()
    realms = [f"r{i}" for i in range(8)]
    for r in realms:
        svc.register_realm(r)
    agents = [f"a{i}@agents.localdomain" for i in range(4)]

    def worker(realm):
        for round_no in range(50):
            agent = agents[(round_no + hash(realm)) % len(agents)]
            grant = svc.acquire(agent, realm)
            if isinstance(grant, MustWait):
                epoch = svc.wait_for_grant(agent, realm, timeout=10)
                if epoch is None:
                    current = svc.owner_of(agent)
                    if current is not None and current[0] == realm:
                        svc.release(agent, realm, context_persisted=True)
                    continue
            svc.release(agent, realm, context_persisted=True)

    threads = [threading.Thread(target=worker, args=(r,)) for r in realms]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert check_history(svc.history) == []


def test_wait_for_grant_times_out(locks):
    locks.acquire(AGENT, "r1")
    locks.acquire(AGENT, "r2")
    assert locks.wait_for_grant(AGENT, "r2", timeout=0.05) is None
