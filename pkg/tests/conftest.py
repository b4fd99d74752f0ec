import pytest

from toolgrid.config import NodeConfig
from toolgrid.node import Node, link_nodes
from toolgrid.uplink import RelayServer


@pytest.fixture
def make_node(tmp_path):
    """Factory for isolated nodes sharing one temp tree; stops them at teardown."""
    created = []
    counter = [0]

    def factory(name=None, **kwargs):
        counter[0] += 1
        label = name or f"node{counter[0]}"
        node = Node(NodeConfig(tmp_path / f"grid-{label}", display_name=label, **kwargs))
        created.append(node)
        return node

    yield factory
    for node in created:
        node.stop()


@pytest.fixture
def node(make_node):
    return make_node("solo")


@pytest.fixture
def lan_pair(make_node):
    a = make_node("alpha")
    b = make_node("beta")
    link_nodes(a, b)
    return a, b


@pytest.fixture
def make_relay():
    servers = []

    def factory(tokens):
        server = RelayServer(tokens)
        port = server.start("127.0.0.1", 0)
        servers.append(server)
        return server, port

    yield factory
    for server in servers:
        server.stop()
