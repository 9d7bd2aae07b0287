import pytest
import socket


@pytest.fixture(autouse=True)
def block_network(monkeypatch):
    """Any attempt to open a connection fails the test."""

    def connect(*args, **kwargs):
        raise RuntimeError("network access is disabled during tests")

    monkeypatch.setattr(socket.socket, "connect", connect)
    monkeypatch.setattr(socket.socket, "connect_ex", connect)
