"""Flow identification with adaptive aggregation, packet filtering and preprocessing."""

from __future__ import annotations

import ipaddress
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from .dataset import PreparedSample, UNLABELED
from .errors import ConfigError, DataError
from .pcap import PROTO_ICMP, PROTO_TCP, PROTO_UDP, RawPacket

log = logging.getLogger(__name__)

MAX_LEVEL = 2
IP_ADDR_OFFSET = 12
IP_ADDR_LEN = 8


@dataclass(frozen=True)
class FlowKey:
    level: int
    tuple: tuple

    def __post_init__(self):
        arity = {0: 5, 1: 3, 2: 2}.get(self.level)
        if arity is None or len(self.tuple) != arity:
            raise ValueError(f"level {self.level} key needs a {arity}-tuple, got {self.tuple!r}")


def _ip_sort_key(ip: str, port) -> tuple:
    return (int(ipaddress.IPv4Address(ip)), -1 if port is None else port)


def flow_key(pkt: RawPacket, level: int) -> FlowKey:
    """Aggregation key for ``pkt``. Levels 0 and 1 are direction-normalized."""
    if level == 0:
        a = (pkt.src_ip, pkt.src_port)
        b = (pkt.dst_ip, pkt.dst_port)
        if _ip_sort_key(*b) < _ip_sort_key(*a):
            a, b = b, a
        return FlowKey(0, (a[0], b[0], a[1], b[1], pkt.protocol))
    if level == 1:
        a, b = sorted((pkt.src_ip, pkt.dst_ip), key=lambda ip: int(ipaddress.IPv4Address(ip)))
        return FlowKey(1, (a, b, pkt.protocol))
    if level == 2:
        return FlowKey(2, (pkt.dst_ip, pkt.protocol))
    raise ValueError(f"aggregation level {level} not in 0..{MAX_LEVEL}")


@dataclass
class Flow:
    key: FlowKey
    packets: list[RawPacket]
    label: Optional[str] = None

    @property
    def n(self) -> int:
        return len(self.packets)

    @property
    def last_time(self) -> float:
        return self.packets[-1].capture_time


def next_level(level: int, active: int, threshold: float) -> int:
    """Aggregation level after one periodic check."""
    if active > threshold:
        return min(level + 1, MAX_LEVEL)
    if active < threshold:
        return max(level - 1, 0)
    return level


class FlowTable:
    """Single-writer table of active flows.

    ``ingest`` returns the flows completed by that packet (capped at ``N``
    packets or idle for longer than ``idle_timeout``). ``maybe_escalate`` is
    driven by capture time every ``check_interval`` seconds.
    """

    def __init__(self, N: int = 30, idle_timeout: float = 64.0, baseline_active: float = 100.0,
                 check_interval: float = 10.0, label: Optional[str] = None):
        if baseline_active <= 0:
            raise ConfigError("baseline_active must be positive")
        self.N = N
        self.idle_timeout = idle_timeout
        self.baseline_active = baseline_active
        self.check_interval = check_interval
        self.label = label
        self.current_level = 0
        self.active_flows: OrderedDict[FlowKey, Flow] = OrderedDict()
        self.skipped = 0
        self.level_history: list[int] = []
        self._next_check: Optional[float] = None

    @property
    def escalation_threshold(self) -> float:
        return 5.0 * self.baseline_active

    def ingest(self, pkt: RawPacket) -> list[Flow]:
        if not pkt.is_ip:
            self.skipped += 1
            return []
        now = pkt.capture_time
        done = self._expire(now)
        if self._next_check is None:
            self._next_check = now + self.check_interval
        while now >= self._next_check:
            done.extend(self.maybe_escalate())
            self._next_check += self.check_interval

        key = flow_key(pkt, self.current_level)
        flow = self.active_flows.get(key)
        if flow is None:
            flow = Flow(key, [pkt], self.label)
            self.active_flows[key] = flow
        else:
            flow.packets.append(pkt)
            self.active_flows.move_to_end(key)
        if flow.n >= self.N:
            done.append(self.active_flows.pop(key))
        return done

    def _expire(self, now: float) -> list[Flow]:
        out = []
        while self.active_flows:
            key, flow = next(iter(self.active_flows.items()))
            if now - flow.last_time <= self.idle_timeout:
                break
            out.append(self.active_flows.pop(key))
        return out

    def maybe_escalate(self) -> list[Flow]:
        """Run one periodic aggregation check.

        Escalation merges existing flows under the coarser key. De-escalation
        never splits: flows held under the coarser key are emitted as complete
        and new packets open flows under the finer key.
        """
        level = next_level(self.current_level, len(self.active_flows), self.escalation_threshold)
        emitted: list[Flow] = []
        if level > self.current_level:
            emitted = self._merge(level)
        elif level < self.current_level:
            emitted = list(self.active_flows.values())
            self.active_flows.clear()
        self.current_level = level
        self.level_history.append(level)
        return emitted

    def _merge(self, level: int) -> list[Flow]:
        groups: dict[FlowKey, list[RawPacket]] = {}
        for flow in self.active_flows.values():
            groups.setdefault(flow_key(flow.packets[0], level), []).extend(flow.packets)
        merged: list[Flow] = []
        for key, pkts in groups.items():
            pkts.sort(key=lambda p: (p.capture_time, p.seq))
            merged.append(Flow(key, pkts, self.label))
        merged.sort(key=lambda f: f.last_time)
        self.active_flows = OrderedDict()
        emitted = []
        for flow in merged:
            # a merge can overshoot the cap; keep the head as one complete flow
            while flow.n > self.N:
                head = Flow(flow.key, flow.packets[: self.N], flow.label)
                flow.packets = flow.packets[self.N:]
                emitted.append(head)
            if flow.n == self.N:
                emitted.append(flow)
            else:
                self.active_flows[flow.key] = flow
        return emitted

    def flush(self) -> list[Flow]:
        out = list(self.active_flows.values())
        self.active_flows.clear()
        return out


def assemble_flows(packets: Iterable[RawPacket], table: FlowTable) -> Iterator[Flow]:
    for pkt in packets:
        yield from table.ingest(pkt)
    yield from table.flush()


def calibrate_baseline(packets: Iterable[RawPacket], idle_timeout: float = 64.0,
                       check_interval: float = 10.0, N: int = 30) -> float:
    """Average active-flow count at each check over a benign capture (level 0 only)."""
    table = FlowTable(N=N, idle_timeout=idle_timeout, baseline_active=float("inf"),
                      check_interval=check_interval)
    samples = []
    next_check = None
    for pkt in packets:
        if not pkt.is_ip:
            continue
        if next_check is None:
            next_check = pkt.capture_time + check_interval
        while pkt.capture_time >= next_check:
            table._expire(next_check)
            samples.append(len(table.active_flows))
            next_check += check_interval
        table.ingest(pkt)
    if not samples:
        samples.append(len(table.active_flows))
    return max(float(np.mean(samples)), 1.0)


# ---------------------------------------------------------------------------
# filtering

PROTO_NAMES = {"tcp": PROTO_TCP, "udp": PROTO_UDP, "icmp": PROTO_ICMP}


@dataclass(frozen=True)
class ProtocolRule:
    protocol: Optional[int] = None
    port: Optional[int] = None

    @classmethod
    def parse(cls, text: str) -> "ProtocolRule":
        """``tcp``, ``tcp:80``, ``17:1883`` or ``any``."""
        name, _, port = text.strip().lower().partition(":")
        if name in ("any", "*", ""):
            proto = None
        elif name in PROTO_NAMES:
            proto = PROTO_NAMES[name]
        elif name.isdigit():
            proto = int(name)
        else:
            raise ConfigError(f"unknown protocol in rule {text!r}")
        try:
            return cls(proto, int(port) if port else None)
        except ValueError as exc:
            raise ConfigError(f"bad port in rule {text!r}") from exc

    def matches(self, pkt: RawPacket) -> bool:
        if self.protocol is not None and pkt.protocol != self.protocol:
            return False
        return self.port is None or self.port in (pkt.src_port, pkt.dst_port)


@dataclass(frozen=True)
class EndpointRule:
    network: ipaddress.IPv4Network
    side: str = "any"   # "src", "dst" or "any"

    @classmethod
    def parse(cls, text: str) -> "EndpointRule":
        """``192.168.1.0/24``, ``src=10.0.0.0/8``, ``dst=10.0.0.5``."""
        side, sep, net = text.partition("=")
        if not sep:
            side, net = "any", text
        if side not in ("src", "dst", "any"):
            raise ConfigError(f"bad endpoint side in {text!r}")
        try:
            return cls(ipaddress.IPv4Network(net.strip(), strict=False), side)
        except ValueError as exc:
            raise ConfigError(f"bad network in {text!r}") from exc

    def matches(self, pkt: RawPacket) -> bool:
        src = ipaddress.IPv4Address(pkt.src_ip) in self.network
        dst = ipaddress.IPv4Address(pkt.dst_ip) in self.network
        return {"src": src, "dst": dst, "any": src or dst}[self.side]


@dataclass
class FilterConfig:
    """An empty protocol list admits every IPv4 packet."""

    protocols: list[ProtocolRule] = field(default_factory=list)
    endpoints: list[EndpointRule] = field(default_factory=list)

    @classmethod
    def parse(cls, protocols: Iterable[str] = (), endpoints: Iterable[str] = ()) -> "FilterConfig":
        return cls([ProtocolRule.parse(p) for p in protocols], [EndpointRule.parse(e) for e in endpoints])


def filter_packet(pkt: RawPacket, rules: FilterConfig) -> bool:
    if not pkt.is_ip:
        return False
    if rules.protocols and not any(r.matches(pkt) for r in rules.protocols):
        return False
    return all(r.matches(pkt) for r in rules.endpoints)


# ---------------------------------------------------------------------------
# preprocessing

def packet_bytes(pkt: RawPacket, d: int) -> np.ndarray:
    """IP-layer bytes with both addresses deleted, truncated or zero-padded to ``d``."""
    ip = pkt.ip_bytes()
    if len(ip) >= IP_ADDR_OFFSET + IP_ADDR_LEN:
        ip = ip[:IP_ADDR_OFFSET] + ip[IP_ADDR_OFFSET + IP_ADDR_LEN:]
    row = np.zeros(d, dtype=np.uint8)
    raw = np.frombuffer(ip[:d], dtype=np.uint8)
    row[: len(raw)] = raw
    return row


def preprocess_flow(flow: Flow, d: int = 448, N: int = 30, label: int = UNLABELED,
                    origin: int = -1) -> PreparedSample:
    if not flow.packets:
        raise DataError("cannot preprocess an empty flow")
    # capture files are occasionally out of order by a few microseconds
    pkts = sorted(flow.packets[:N], key=lambda p: (p.capture_time, p.seq))
    packets = np.stack([packet_bytes(p, d) for p in pkts])
    times = np.array([p.capture_time for p in pkts], dtype=np.float64)
    times = times - times[0]
    return PreparedSample(packets, times, label, N, origin)
