import pytest

from agentpost.address import World
from agentpost.gateway import BackendId, ModelGateway, ScriptRule, ScriptedBackend
from agentpost.locks import LockService
from agentpost.realm import RealmServer
from agentpost.shellbot import SandboxConfig, ShellRobot

USER = "user1@localdomain"
AGENT = "ai_30@agents.localdomain"
SHELL = "shell@localdomain"
SYSTEM = "system@localdomain"


def shell_session_rules():
    """Script reproducing the storage-hardware shell session."""
    return [
        ScriptRule(
            from_addr=SHELL,
            respond_headers={"To": USER, "Subject": "Storage Hardware Details"},
            respond_body=("The command to check your storage hardware was "
                          "successfully executed. See the attached output.\n")),
        ScriptRule(
            body_regex="storage hardware",
            respond_headers={"To": SHELL, "Subject": "",
                             "Content-Type": "application/json"},
            respond_body=('{\n  "prompt": "This command will display your storage '
                          'hardware details.",\n  "command": "lsblk",\n'
                          '  "confirm": false\n}')),
        ScriptRule(
            body_regex="middleman AI",
            respond_headers={"To": USER, "Subject": "RE: Command Execution Setup"},
            respond_body=("I am set up to relay commands to the shell and interpret "
                          "the responses. Please send me the commands you would like "
                          "to execute, and I will handle the rest!\n")),
    ]


def build_platform(tmp_path, rules=None, realm_id="r1", world=None, locks=None,
                   with_robot=True):
    world = world or World("w1")
    locks = locks or LockService()
    gateway = ModelGateway()
    gateway.register_backend(BackendId("test", "scripted"),
                             ScriptedBackend(rules if rules is not None
                                             else shell_session_rules()))
    realm = RealmServer(realm_id, world, gateway, locks, tmp_path / "storage")
    if with_robot:
        robot = ShellRobot(SHELL, SandboxConfig(root=tmp_path / "sandbox", timeout=10.0))
        world.register_robot(SHELL, robot)
    return realm


@pytest.fixture
def platform(tmp_path):
    return build_platform(tmp_path)
