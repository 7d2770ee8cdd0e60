import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from earlyids.dataset import PreparedSample
from earlyids.errors import DataError, FormatError
from earlyids.flows import (
    FilterConfig, Flow, FlowKey, FlowTable, assemble_flows, calibrate_baseline, filter_packet,
    flow_key, next_level, packet_bytes, preprocess_flow,
)
from earlyids.pcap import (
    PROTO_TCP, PROTO_UDP, LINKTYPE_ETHERNET, RawPacket, build_frame, parse_frame, read_pcap,
    write_pcap,
)

from conftest import fixture_frames


def tcp(t, src, dst, sport, dport, payload=b"", seq=0):
    return parse_frame(build_frame(src, dst, sport, dport, PROTO_TCP, payload), t, seq=seq)


# --- pcap -----------------------------------------------------------------

def _pcap_bytes(magic, records, endian="<"):
    out = struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET)
    for sec, frac, data in records:
        out += struct.pack(endian + "IIII", sec, frac, len(data), len(data)) + data
    return out


def test_read_pcap_microsecond(tmp_path):
    path = tmp_path / "a.pcap"
    path.write_bytes(_pcap_bytes(0xA1B2C3D4, [(1, 500000, build_frame("1.1.1.1", "2.2.2.2", 1, 2))]))
    pkts = list(read_pcap(path))
    assert len(pkts) == 1
    assert pkts[0].capture_time == 1.5


def test_read_pcap_nanosecond_and_big_endian(tmp_path):
    path = tmp_path / "ns.pcap"
    path.write_bytes(_pcap_bytes(0xA1B23C4D, [(7, 500000000, b"\x00" * 20)], endian=">"))
    (pkt,) = list(read_pcap(path))
    assert pkt.capture_time == 7.5
    assert not pkt.is_ip


def test_read_pcap_empty_and_bad_magic(tmp_path):
    empty = tmp_path / "empty.pcap"
    empty.write_bytes(_pcap_bytes(0xA1B2C3D4, []))
    assert list(read_pcap(empty)) == []
    bad = tmp_path / "bad.pcap"
    bad.write_bytes(b"\x0a\x0d\x0d\x0a" + b"\x00" * 40)
    with pytest.raises(FormatError):
        list(read_pcap(bad))


def test_truncated_record_stops_with_count(tmp_path):
    from earlyids.pcap import PcapStats
    raw = _pcap_bytes(0xA1B2C3D4, [(1, 0, b"a" * 30), (2, 0, b"b" * 30)])
    path = tmp_path / "t.pcap"
    path.write_bytes(raw[:-10])
    stats = PcapStats()
    assert len(list(read_pcap(path, stats))) == 1
    assert stats.truncated == 1


def test_write_read_roundtrip(tmp_path):
    path = tmp_path / "rt.pcap"
    frames = fixture_frames()
    write_pcap(path, frames)
    pkts = list(read_pcap(path))
    assert [p.link_bytes for p in pkts] == [f for _, f in frames]
    assert np.allclose([p.capture_time for p in pkts], [t for t, _ in frames], atol=1e-6)


def test_parse_frame_fields():
    p = tcp(0.0, "10.0.0.1", "10.0.0.2", 1234, 80)
    assert (p.src_ip, p.dst_ip, p.src_port, p.dst_port, p.protocol) == ("10.0.0.1", "10.0.0.2", 1234, 80, 6)
    assert parse_frame(b"\x01\x02", 0.0).src_ip is None


# --- flow table -----------------------------------------------------------

def test_first_packet_opens_flow_and_reply_joins():
    table = FlowTable()
    assert table.ingest(tcp(0.0, "10.0.0.1", "10.0.0.2", 1234, 80)) == []
    assert len(table.active_flows) == 1
    (flow,) = table.active_flows.values()
    assert flow.key.level == 0 and flow.n == 1
    table.ingest(tcp(0.1, "10.0.0.2", "10.0.0.1", 80, 1234))
    assert len(table.active_flows) == 1 and flow.n == 2


def test_flow_capped_at_N_and_overflow_opens_new():
    table = FlowTable(N=30)
    done = []
    for i in range(31):
        done += table.ingest(tcp(i * 0.01, "10.0.0.1", "10.0.0.2", 1234, 80))
    assert len(done) == 1 and done[0].n == 30
    (rest,) = table.active_flows.values()
    assert rest.n == 1 and rest.packets[0].capture_time == pytest.approx(0.30)


def test_idle_timeout_emits_flow():
    table = FlowTable(idle_timeout=64.0)
    table.ingest(tcp(0.0, "10.0.0.1", "10.0.0.2", 1, 80))
    assert table.ingest(tcp(10.0, "10.0.0.3", "10.0.0.2", 1, 80)) == []
    done = table.ingest(tcp(70.0, "10.0.0.3", "10.0.0.2", 1, 80))
    assert [f.packets[0].src_ip for f in done] == ["10.0.0.1"]


def test_non_ip_counted_and_skipped():
    table = FlowTable()
    assert table.ingest(parse_frame(b"\x00" * 60, 0.0)) == []
    assert table.skipped == 1 and not table.active_flows


@given(st.lists(st.tuples(st.integers(1, 254), st.integers(1, 254), st.integers(0, 65535),
                          st.integers(0, 65535), st.sampled_from([6, 17])), min_size=1, max_size=20))
def test_direction_normalization(pkts):
    for a, b, sp, dp, proto in pkts:
        fwd = RawPacket(0.0, b"", f"10.0.0.{a}", f"10.0.1.{b}", sp, dp, proto, 14)
        rev = RawPacket(0.0, b"", f"10.0.1.{b}", f"10.0.0.{a}", dp, sp, proto, 14)
        assert flow_key(fwd, 0) == flow_key(rev, 0)
        assert flow_key(fwd, 1) == flow_key(rev, 1)


def test_flowkey_arity_checked():
    with pytest.raises(ValueError):
        FlowKey(1, ("a", "b"))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.floats(0, 5)), min_size=1, max_size=120),
       st.integers(2, 30), st.sampled_from([0.5, 64.0]))
def test_replay_loses_no_packets(spec, N, idle):
    t, pkts = 0.0, []
    for i, (a, b, dt) in enumerate(spec):
        t += dt
        pkts.append(tcp(t, f"10.0.0.{a}", f"10.0.0.{b + 10}", 1000 + a, 80, seq=i))
    table = FlowTable(N=N, idle_timeout=idle, baseline_active=0.4, check_interval=3.0)
    flows = list(assemble_flows(pkts, table))
    out = sorted((p for f in flows for p in f.packets), key=lambda p: (p.capture_time, p.seq))
    assert [p.seq for p in out] == [p.seq for p in pkts]
    assert all(1 <= f.n <= N for f in flows)


# --- escalation -----------------------------------------------------------

def test_next_level_rules():
    assert next_level(0, 4, 50) == 0
    assert next_level(0, 251, 250) == 1
    assert next_level(1, 251, 250) == 2
    assert next_level(2, 999, 250) == 2
    assert next_level(2, 30, 250) == 1
    assert next_level(0, 1, 250) == 0


@given(st.lists(st.tuples(st.integers(0, 100), st.integers(0, 100)), min_size=1, max_size=50),
       st.integers(1, 60))
def test_escalation_monotone_in_load(pairs, thr):
    la = lb = 0
    for x, y in pairs:
        a, b = max(x, y), min(x, y)
        la, lb = next_level(la, a, thr), next_level(lb, b, thr)
        assert la >= lb


def _ten_flow_table():
    """10 level-0 flows: hosts .1 and .2 each talk to .9 on 5 different ports."""
    table = FlowTable(baseline_active=1.0, check_interval=1e9)  # threshold 5
    pkts = []
    for i in range(10):
        src = "10.0.0.1" if i % 2 == 0 else "10.0.0.2"
        pkts.append(tcp(float(i), src, "10.0.0.9", 2000 + i, 80, seq=i))
    for p in pkts:
        table.ingest(p)
    return table, pkts


def test_escalation_merges_like_brute_force():
    table, pkts = _ten_flow_table()
    assert len(table.active_flows) == 10
    table.maybe_escalate()
    assert table.current_level == 1
    expected = {}
    for p in pkts:
        expected.setdefault(flow_key(p, 1), []).append(p.seq)
    got = {k: [p.seq for p in f.packets] for k, f in table.active_flows.items()}
    assert got == expected
    assert all(k.level == 1 for k in table.active_flows)


def test_escalation_to_level2_and_back():
    table, _ = _ten_flow_table()
    table.baseline_active = 0.2  # threshold 1
    table.maybe_escalate()
    table.maybe_escalate()
    assert table.current_level == 2
    assert len(table.active_flows) == 1
    table.baseline_active = 10.0
    emitted = table.maybe_escalate()
    assert table.current_level == 1
    assert sum(f.n for f in emitted) == 10 and not table.active_flows
    table.maybe_escalate()
    assert table.current_level == 0


def test_calibrate_baseline():
    pkts = [tcp(float(i), "10.0.0.1", "10.0.0.2", 1000 + i % 3, 80) for i in range(60)]
    assert calibrate_baseline(pkts, check_interval=10.0) == pytest.approx(3.0)


# --- filtering ------------------------------------------------------------

def test_filter_rules():
    http = tcp(0.0, "192.168.1.7", "10.0.0.2", 4321, 80)
    assert filter_packet(http, FilterConfig.parse(["tcp:80"]))
    assert not filter_packet(http, FilterConfig.parse(["udp:1883"]))
    assert filter_packet(http, FilterConfig.parse([], ["192.168.1.0/24"]))
    assert not filter_packet(http, FilterConfig.parse(["tcp"], ["dst=192.168.1.0/24"]))
    assert filter_packet(http, FilterConfig())
    assert not filter_packet(parse_frame(b"\x00" * 60, 0.0), FilterConfig())


# --- preprocessing --------------------------------------------------------

def test_address_bytes_removed_and_scaled():
    pkt = tcp(0.0, "10.0.0.1", "10.0.0.2", 1234, 80, payload=b"\xff" * 10)
    row = packet_bytes(pkt, 448)
    ip = pkt.ip_bytes()
    assert bytes(row[:12]) == ip[:12]
    assert bytes(row[12:12 + len(ip) - 20]) == ip[20:]
    assert not np.any(row[len(ip) - 8:])


def test_single_packet_flow_truncated_to_d():
    pkt = RawPacket(5.0, b"\x00" * 14 + bytes(range(256)) * 2, "1.1.1.1", "2.2.2.2", 1, 2, 6, 14)
    s = preprocess_flow(Flow(flow_key(pkt, 0), [pkt]), d=448, N=30, label=0)
    F = s.F
    assert F.shape == (30, 448)
    expected = np.frombuffer((bytes(range(256)) * 2)[:12] + (bytes(range(256)) * 2)[20:20 + 436], np.uint8)
    assert np.array_equal(F[0], expected / 255.0)
    assert not F[1:].any()
    assert not s.T.any()
    assert s.mask.tolist() == [1.0] + [0.0] * 29


def test_timestamps_relative():
    pkts = [tcp(t, "10.0.0.1", "10.0.0.2", 1, 80) for t in (100.0, 100.5, 102.0)]
    s = preprocess_flow(Flow(flow_key(pkts[0], 0), pkts))
    assert s.T[:3].tolist() == [0.0, 0.5, 2.0]


def test_byte_scaling_endpoints():
    pkt = RawPacket(0.0, b"\x00" * 14 + b"\xff" * 30 + b"\x00" * 10, "1.1.1.1", "2.2.2.2", 1, 2, 6, 14)
    F = preprocess_flow(Flow(flow_key(pkt, 0), [pkt]), d=40).F
    assert F[0, 0] == 1.0 and F[0, 39] == 0.0


def test_empty_flow_rejected():
    with pytest.raises(DataError):
        preprocess_flow(Flow(FlowKey(2, ("1.1.1.1", 6)), []))


def _check_prepared(s: PreparedSample, n_expected: int):
    F, T, mask = s.F, s.T, s.mask
    n = s.n
    assert 1 <= n <= s.N and n == n_expected
    assert F.min() >= 0.0 and F.max() <= 1.0
    assert T[0] == 0.0
    assert np.all(np.diff(T[:n]) >= 0)
    assert np.array_equal(mask, (np.arange(s.N) < n).astype(float))
    assert not F[n:].any() and not T[n:].any()


@settings(max_examples=500, deadline=None)
@given(st.integers(1, 30), st.integers(8, 64),
       st.lists(st.floats(0.0, 1e4, allow_nan=False), min_size=30, max_size=30),
       st.lists(st.binary(min_size=0, max_size=80), min_size=30, max_size=30))
def test_prepared_sample_invariants(n, d, times, payloads):
    pkts = [RawPacket(times[i], b"\x00" * 14 + payloads[i], "1.1.1.1", "2.2.2.2", 1, 2, 6, 14)
            for i in range(n)]
    s = preprocess_flow(Flow(flow_key(pkts[0], 0), pkts), d=d, N=30, label=0)
    _check_prepared(s, n)
