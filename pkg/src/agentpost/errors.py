"""Exception hierarchy shared across the platform."""


class AgentpostError(Exception):
    """Base class for all platform errors."""


# --- message format ---

class MalformedEnvelope(AgentpostError):
    pass


class UnterminatedMultipart(AgentpostError):
    pass


class BoundaryExhaustion(AgentpostError):
    pass


class InvalidHeaderValue(AgentpostError):
    pass


class MessageTooLarge(AgentpostError):
    pass


# --- addresses / worlds ---

class MalformedAddress(AgentpostError):
    pass


class WorldViolation(AgentpostError):
    pass


# --- memory store ---

class AgentMismatch(AgentpostError):
    pass


class NotAnMsr(AgentpostError):
    pass


class RangeInvalid(AgentpostError):
    pass


class RangeOutOfBounds(AgentpostError):
    pass


class StaleEpoch(AgentpostError):
    pass


class ReplayDivergence(AgentpostError):
    def __init__(self, index, detail=""):
        super().__init__(f"replay diverges at cell {index}: {detail}")
        self.index = index


class CorruptSegment(AgentpostError):
    def __init__(self, recovered, detail=""):
        super().__init__(f"segment corrupt after {recovered} messages: {detail}")
        self.recovered = recovered


# --- model gateway ---

class UnknownBackend(AgentpostError):
    pass


class DuplicateBackend(AgentpostError):
    pass


class BackendTimeout(AgentpostError):
    pass


class BackendRejection(AgentpostError):
    pass


class OutputUnparseable(AgentpostError):
    pass


# --- lock service ---

class UnknownRealm(AgentpostError):
    pass


class NotOwner(AgentpostError):
    pass


class UnpersistedRelease(AgentpostError):
    pass


class FencedWrite(AgentpostError):
    """A context/journal write carried a stale lease epoch."""


# --- realm server ---

class SpoofedSender(AgentpostError):
    pass


class LockUnavailable(AgentpostError):
    pass


class PersistFailure(AgentpostError):
    pass


# --- shell robot ---

class WrongContentType(AgentpostError):
    pass


class SchemaViolation(AgentpostError):
    pass


class SpawnFailure(AgentpostError):
    pass


class ConfirmationTimeout(AgentpostError):
    pass


# --- cli / client ---

class UnknownAgent(AgentpostError):
    pass
