"""agentpost: a self-hostable agent messaging platform.

Every actor (user, agent, robot, system) is an email address. Agent memory
is an append-only journal of mbox messages folded into a serially numbered
context that agents rewrite through the memory segment rewrite primitive.
"""

__version__ = "0.1.0"
