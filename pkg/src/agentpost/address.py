"""Actor addresses, worlds and clone parentage.

Agents live under agents.localdomain; system@localdomain is reserved.
Robots are ordinary addresses registered in the world's robot registry.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .errors import MalformedAddress

AGENT_DOMAIN = "agents.localdomain"
SYSTEM_ADDRESS = "system@localdomain"


class Kind(enum.Enum):
    USER = "user"
    AGENT = "agent"
    SYSTEM = "system"
    ROBOT = "robot"


@dataclass
class World:
    id: str
    address_registry: set[str] = field(default_factory=set)
    robot_registry: dict[str, object] = field(default_factory=dict)  # text -> endpoint

    def register_robot(self, address_text: str, endpoint: object) -> None:
        self.robot_registry[address_text.lower()] = endpoint
        self.address_registry.add(address_text)

    def robot_endpoint(self, address_text: str):
        return self.robot_registry.get(address_text.lower())


@dataclass(frozen=True)
class Address:
    local: str
    domain: str
    world: World
    kind: Kind

    def __str__(self) -> str:
        return f"{self.local}@{self.domain}"

    @property
    def text(self) -> str:
        return str(self)

    def same_text(self, other_text: str) -> bool:
        """Local part case-sensitive, domain case-insensitive."""
        try:
            local, domain = _split(other_text)
        except MalformedAddress:
            return False
        return self.local == local and self.domain.lower() == domain.lower()


def _split(text: str) -> tuple[str, str]:
    if text.count("@") != 1:
        raise MalformedAddress(f"address must contain exactly one '@': {text!r}")
    local, domain = text.split("@")
    if not local or not domain:
        raise MalformedAddress(f"empty local or domain part: {text!r}")
    return local, domain


def parse_address(text: str, world: World) -> Address:
    local, domain = _split(text.strip())
    full = f"{local}@{domain}".lower()
    if full == SYSTEM_ADDRESS:
        kind = Kind.SYSTEM
    elif domain.lower() == AGENT_DOMAIN:
        kind = Kind.AGENT
    elif world.robot_endpoint(f"{local}@{domain}") is not None:
        kind = Kind.ROBOT
    else:
        kind = Kind.USER
    return Address(local, domain, world, kind)


def clone_parent(addr: Address) -> Address | None:
    """Strip the leftmost dotted label: ibn.sina -> sina. One level only."""
    assert addr.kind == Kind.AGENT
    if "." not in addr.local:
        return None
    _, rest = addr.local.split(".", 1)
    if not rest:
        return None
    return parse_address(f"{rest}@{addr.domain}", addr.world)


def same_world(a: Address, b: Address) -> bool:
    return a.world.id == b.world.id
