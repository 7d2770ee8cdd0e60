"""Classic libpcap reading/writing and minimal Ethernet/IPv4/TCP/UDP parsing."""

from __future__ import annotations

import ipaddress
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, Optional

from .errors import FormatError

log = logging.getLogger(__name__)

MAGIC_USEC = 0xA1B2C3D4
MAGIC_NSEC = 0xA1B23C4D

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101

ETH_HEADER_LEN = 14
ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_VLAN = 0x8100

PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17


@dataclass(frozen=True)
class RawPacket:
    """One captured frame plus whatever header fields could be parsed from it.

    ``l3_offset`` is the byte offset of the IPv4 header inside ``link_bytes``
    (``None`` for non-IP frames).
    """

    capture_time: float
    link_bytes: bytes
    src_ip: Optional[str] = None
    dst_ip: Optional[str] = None
    src_port: Optional[int] = None
    dst_port: Optional[int] = None
    protocol: Optional[int] = None
    l3_offset: Optional[int] = None
    seq: int = field(default=0, compare=False)

    @property
    def is_ip(self) -> bool:
        return self.src_ip is not None

    def ip_bytes(self) -> bytes:
        """Frame bytes with the link-layer header removed."""
        if self.l3_offset is None:
            return b""
        return self.link_bytes[self.l3_offset:]


def parse_frame(data: bytes, capture_time: float, linktype: int = LINKTYPE_ETHERNET,
                seq: int = 0) -> RawPacket:
    """Parse link, network and transport headers as far as they go.

    Never raises on malformed input; fields that could not be parsed stay None.
    """
    offset = None
    if linktype == LINKTYPE_ETHERNET:
        if len(data) >= ETH_HEADER_LEN:
            ethertype = struct.unpack_from("!H", data, 12)[0]
            off = ETH_HEADER_LEN
            if ethertype == ETHERTYPE_VLAN and len(data) >= off + 4:
                ethertype = struct.unpack_from("!H", data, off + 2)[0]
                off += 4
            if ethertype == ETHERTYPE_IPV4:
                offset = off
    elif linktype == LINKTYPE_RAW:
        offset = 0

    if offset is None or len(data) < offset + 20 or data[offset] >> 4 != 4:
        return RawPacket(capture_time, bytes(data), seq=seq)

    ihl = (data[offset] & 0x0F) * 4
    if ihl < 20 or len(data) < offset + ihl:
        return RawPacket(capture_time, bytes(data), seq=seq)
    proto = data[offset + 9]
    src = str(ipaddress.IPv4Address(data[offset + 12:offset + 16]))
    dst = str(ipaddress.IPv4Address(data[offset + 16:offset + 20]))
    sport = dport = None
    l4 = offset + ihl
    if proto in (PROTO_TCP, PROTO_UDP) and len(data) >= l4 + 4:
        sport, dport = struct.unpack_from("!HH", data, l4)
    return RawPacket(capture_time, bytes(data), src, dst, sport, dport, proto, offset, seq=seq)


@dataclass
class PcapStats:
    records: int = 0
    truncated: int = 0
    linktype: int = LINKTYPE_ETHERNET


def _read_exact(fh: BinaryIO, size: int) -> bytes:
    return fh.read(size)


def iter_pcap(fh: BinaryIO, stats: Optional[PcapStats] = None) -> Iterator[RawPacket]:
    stats = stats if stats is not None else PcapStats()
    header = _read_exact(fh, 24)
    if len(header) < 4:
        raise FormatError("file too short for a pcap global header")
    for endian in ("<", ">"):
        magic = struct.unpack(endian + "I", header[:4])[0]
        if magic in (MAGIC_USEC, MAGIC_NSEC):
            break
    else:
        raise FormatError(f"unsupported capture format (magic {header[:4].hex()})")
    if len(header) < 24:
        raise FormatError("truncated pcap global header")
    frac_div = 1e9 if magic == MAGIC_NSEC else 1e6
    stats.linktype = struct.unpack(endian + "I", header[20:24])[0] & 0x0FFFFFFF
    rec = struct.Struct(endian + "IIII")
    seq = 0
    while True:
        raw = _read_exact(fh, 16)
        if not raw:
            return
        if len(raw) < 16:
            stats.truncated += 1
            log.warning("truncated record header after %d records", stats.records)
            return
        ts_sec, ts_frac, incl_len, _orig_len = rec.unpack(raw)
        data = _read_exact(fh, incl_len)
        if len(data) < incl_len:
            stats.truncated += 1
            log.warning("truncated record body after %d records", stats.records)
            return
        stats.records += 1
        yield parse_frame(data, ts_sec + ts_frac / frac_div, stats.linktype, seq=seq)
        seq += 1


def read_pcap(path, stats: Optional[PcapStats] = None) -> Iterator[RawPacket]:
    """Yield packets from a classic pcap file in file order."""
    path = Path(path)
    try:
        fh = path.open("rb")
    except OSError as exc:
        raise FormatError(f"cannot open {path}: {exc}") from exc
    with fh:
        yield from iter_pcap(fh, stats)


def write_pcap(path, frames, linktype: int = LINKTYPE_ETHERNET, nanosecond: bool = False) -> None:
    """Write ``(capture_time, frame_bytes)`` pairs as a little-endian classic pcap."""
    magic = MAGIC_NSEC if nanosecond else MAGIC_USEC
    scale = 1_000_000_000 if nanosecond else 1_000_000
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<IHHiIII", magic, 2, 4, 0, 0, 65535, linktype))
        for ts, data in frames:
            ticks = round(ts * scale)
            sec, frac = divmod(ticks, scale)
            fh.write(struct.pack("<IIII", sec, frac, len(data), len(data)))
            fh.write(data)


def _checksum(header: bytes) -> int:
    if len(header) % 2:
        header += b"\x00"
    total = sum(struct.unpack(f"!{len(header) // 2}H", header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def build_frame(src_ip: str, dst_ip: str, src_port: int = 0, dst_port: int = 0,
                protocol: int = PROTO_TCP, payload: bytes = b"", ttl: int = 64) -> bytes:
    """Ethernet + IPv4 + TCP/UDP frame, good enough for fixtures."""
    if protocol == PROTO_TCP:
        l4 = struct.pack("!HHIIBBHHH", src_port, dst_port, 0, 0, 5 << 4, 0x18, 65535, 0, 0)
    elif protocol == PROTO_UDP:
        l4 = struct.pack("!HHHH", src_port, dst_port, 8 + len(payload), 0)
    else:
        l4 = b""
    total = 20 + len(l4) + len(payload)
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, total, 0, 0, ttl, protocol, 0,
                     ipaddress.IPv4Address(src_ip).packed, ipaddress.IPv4Address(dst_ip).packed)
    ip = ip[:10] + struct.pack("!H", _checksum(ip)) + ip[12:]
    eth = b"\x02\x00\x00\x00\x00\x01" + b"\x02\x00\x00\x00\x00\x02" + struct.pack("!H", ETHERTYPE_IPV4)
    return eth + ip + l4 + payload
