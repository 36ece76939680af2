"""Context lock service: at most one realm server owns an agent at a time.

One strongly consistent authority per world. Leases carry a fencing epoch
that strictly increases across ownership changes; storage rejects writes
bearing stale epochs. No lease timeout: a crashed owner needs an operator
force-release (silent expiry risks split-brain with unpersisted contexts).
"""
from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass

from .errors import NotOwner, UnknownRealm, UnpersistedRelease


@dataclass
class Granted:
    lease_epoch: int


@dataclass
class MustWait:
    current_owner: str


class LockService:
    def __init__(self):
        self._mu = threading.Lock()
        self._entries: dict[str, tuple[str, int]] = {}  # agent -> (owner, epoch)
        self._epochs: dict[str, int] = {}  # agent -> last issued epoch
        self._pending: dict[str, deque[str]] = {}
        self._realms: set[str] = set()
        self._grant_events: dict[tuple[str, str], threading.Event] = {}
        self._release_requested: dict[str, object] = {}  # realm -> callback(agent, waiter)
        self._seq = 0
        self.history: list[tuple] = []  # (seq, op, agent, realm, epoch)

    def register_realm(self, realm: str, on_release_requested=None) -> None:
        with self._mu:
            self._realms.add(realm)
            if on_release_requested is not None:
                self._release_requested[realm] = on_release_requested

    def acquire(self, agent: str, realm: str):
        notify = None
        with self._mu:
            if realm not in self._realms:
                raise UnknownRealm(realm)
            current = self._entries.get(agent)
            if current is None:
                epoch = self._epochs.get(agent, 0) + 1
                self._grant_locked(agent, realm, epoch)
                return Granted(epoch)
            owner, epoch = current
            if owner == realm:
                return Granted(epoch)  # reentrant
            queue = self._pending.setdefault(agent, deque())
            if realm not in queue:
                queue.append(realm)
                self._grant_events[(agent, realm)] = threading.Event()
            notify = self._release_requested.get(owner)
            result = MustWait(owner)
        if notify is not None:
            notify(agent, realm)
        return result

    def release(self, agent: str, realm: str, context_persisted: bool) -> None:
        with self._mu:
            current = self._entries.get(agent)
            if current is None or current[0] != realm:
                raise NotOwner(f"{realm} does not own {agent}")
            if not context_persisted:
                raise UnpersistedRelease(
                    f"{realm} must attest context write-back before releasing {agent}")
            self._record("release", agent, realm, current[1])
            del self._entries[agent]
            self._grant_next_locked(agent)

    def force_release(self, agent: str) -> None:
        """Operator override for a crashed owner; bumps the epoch."""
        with self._mu:
            current = self._entries.pop(agent, None)
            if current is not None:
                self._record("force_release", agent, current[0], current[1])
            self._grant_next_locked(agent)

    def owner_of(self, agent: str) -> tuple[str, int] | None:
        with self._mu:
            return self._entries.get(agent)

    def wait_for_grant(self, agent: str, realm: str, timeout: float = 30.0) -> int | None:
        """Block until a queued acquire is granted; returns the lease epoch."""
        with self._mu:
            current = self._entries.get(agent)
            if current is not None and current[0] == realm:
                return current[1]
            event = self._grant_events.get((agent, realm))
        if event is None or not event.wait(timeout):
            return None
        with self._mu:
            current = self._entries.get(agent)
            if current is not None and current[0] == realm:
                return current[1]
        return None

    # -- internal -------------------------------------------------------

    def _grant_locked(self, agent: str, realm: str, epoch: int) -> None:
        self._entries[agent] = (realm, epoch)
        self._epochs[agent] = epoch
        self._record("grant", agent, realm, epoch)
        event = self._grant_events.pop((agent, realm), None)
        if event is not None:
            event.set()

    def _grant_next_locked(self, agent: str) -> None:
        queue = self._pending.get(agent)
        while queue:
            nxt = queue.popleft()
            if nxt in self._realms:
                self._grant_locked(agent, nxt, self._epochs.get(agent, 0) + 1)
                return
        self._pending.pop(agent, None)

    def _record(self, op: str, agent: str, realm: str, epoch: int) -> None:
        self._seq += 1
        self.history.append((self._seq, op, agent, realm, epoch))


def check_history(history: list[tuple]) -> list[str]:
    """Linearizability check over a recorded grant/release history.

    Returns violations; empty means every agent's ownership intervals are
    disjoint and epochs strictly increase.
    """
    violations = []
    held: dict[str, tuple[str, int]] = {}
    last_epoch: dict[str, int] = {}
    for seq, op, agent, realm, epoch in sorted(history):
        if op == "grant":
            if agent in held:
                violations.append(
                    f"seq {seq}: grant to {realm} while {held[agent][0]} holds {agent}")
            if epoch <= last_epoch.get(agent, 0):
                violations.append(
                    f"seq {seq}: epoch {epoch} not increasing for {agent}")
            held[agent] = (realm, epoch)
            last_epoch[agent] = epoch
        elif op in ("release", "force_release"):
            if agent not in held or held[agent][0] != realm:
                violations.append(f"seq {seq}: release by non-owner {realm} of {agent}")
            held.pop(agent, None)
    return violations
