import numpy as np
import pytest

from earlyids.pcap import PROTO_TCP, PROTO_UDP, build_frame, write_pcap


def conversation(t0, client, server, cport, sport, proto, count, gap=0.5, payload=b"x" * 20):
    """Alternating request/response frames between two endpoints."""
    frames = []
    for i in range(count):
        if i % 2 == 0:
            frames.append((t0 + i * gap, build_frame(client, server, cport, sport, proto, payload)))
        else:
            frames.append((t0 + i * gap, build_frame(server, client, sport, cport, proto, payload)))
    return frames


def fixture_frames():
    """12 packets: an HTTP exchange (7) interleaved with an MQTT exchange (5)."""
    http = conversation(100.0, "10.0.0.1", "10.0.0.2", 40000, 80, PROTO_TCP, 7, gap=0.5)
    mqtt = conversation(100.2, "10.0.0.3", "10.0.0.4", 50000, 1883, PROTO_UDP, 5, gap=0.7)
    return sorted(http + mqtt, key=lambda f: f[0])


@pytest.fixture
def fixture_pcap(tmp_path):
    path = tmp_path / "fixture.pcap"
    write_pcap(path, fixture_frames())
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
