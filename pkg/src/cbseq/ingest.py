"""Packet capture reading, bidirectional flow assembly and flow JSONL I/O."""

from __future__ import annotations

import heapq
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .core import (
    FiveTuple,
    FlowKey,
    FlowRecord,
    PacketRecord,
    Proto,
    canonicalize,
    flow_from_dict,
    flow_to_dict,
    sort_flows,
)

log = logging.getLogger(__name__)

PCAP_MAGIC_USEC = 0xA1B2C3D4
PCAP_MAGIC_NSEC = 0xA1B23C4D
LINKTYPE_ETHERNET = 1
ETH_IPV4 = 0x0800
ETH_IPV6 = 0x86DD

DEFAULT_IDLE_TIMEOUT = 120.0
DEFAULT_REORDER_TOLERANCE = 1.0


class PcapFormatError(ValueError):
    pass


class FlowFormatError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def split_timestamp(ts: float) -> tuple[int, int]:
    """Seconds/microseconds as stored in a classic pcap record header."""
    usec_total = int(round(ts * 1_000_000))
    return divmod(usec_total, 1_000_000)


def join_timestamp(sec: int, frac: int, nano: bool = False) -> float:
    return sec + frac / (1e9 if nano else 1e6)


def quantize_timestamp(ts: float) -> float:
    """Round a timestamp to what survives a pcap write/read cycle."""
    return join_timestamp(*split_timestamp(ts))


class PcapReader:
    """Iterate the TCP/UDP packets of a classic libpcap Ethernet capture.

    Frames that are not IPv4/IPv6 carrying TCP or UDP are skipped and counted
    in ``skipped``. A truncated trailing record stops iteration with a warning.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.skipped = 0
        self.packets = 0
        self.truncated = False

    def __iter__(self) -> Iterator[PacketRecord]:
        with open(self.path, "rb") as fh:
            header = fh.read(24)
            if len(header) < 24:
                raise PcapFormatError(f"{self.path}: truncated global header")
            magic_le = struct.unpack("<I", header[:4])[0]
            if magic_le in (PCAP_MAGIC_USEC, PCAP_MAGIC_NSEC):
                endian = "<"
            else:
                magic_be = struct.unpack(">I", header[:4])[0]
                if magic_be not in (PCAP_MAGIC_USEC, PCAP_MAGIC_NSEC):
                    raise PcapFormatError(f"{self.path}: bad magic 0x{magic_le:08x}")
                endian = ">"
            magic = struct.unpack(endian + "I", header[:4])[0]
            nano = magic == PCAP_MAGIC_NSEC
            _vmaj, _vmin, _tz, _sig, _snap, linktype = struct.unpack(endian + "HHiIII", header[4:])
            if linktype != LINKTYPE_ETHERNET:
                raise PcapFormatError(f"{self.path}: unsupported link type {linktype}")
            rec = struct.Struct(endian + "IIII")
            while True:
                rh = fh.read(16)
                if not rh:
                    break
                if len(rh) < 16:
                    self._truncate()
                    break
                sec, frac, incl_len, _orig = rec.unpack(rh)
                data = fh.read(incl_len)
                if len(data) < incl_len:
                    self._truncate()
                    break
                pkt = parse_ethernet(data, join_timestamp(sec, frac, nano))
                if pkt is None:
                    self.skipped += 1
                    continue
                self.packets += 1
                yield pkt

    def _truncate(self):
        self.truncated = True
        log.warning("%s: truncated packet record, keeping %d prior packets",
                    self.path, self.packets)


def read_pcap(path) -> PcapReader:
    return PcapReader(path)


def parse_ethernet(frame: bytes, ts: float) -> PacketRecord | None:
    if len(frame) < 14:
        return None
    ethertype = struct.unpack("!H", frame[12:14])[0]
    ip = frame[14:]
    if ethertype == ETH_IPV4:
        return _parse_ipv4(ip, ts)
    if ethertype == ETH_IPV6:
        return _parse_ipv6(ip, ts)
    return None


def _parse_ipv4(ip: bytes, ts: float) -> PacketRecord | None:
    if len(ip) < 20 or ip[0] >> 4 != 4:
        return None
    ihl = (ip[0] & 0x0F) * 4
    total_len = struct.unpack("!H", ip[2:4])[0]
    frag = struct.unpack("!H", ip[6:8])[0] & 0x1FFF
    proto = ip[9]
    if frag or proto not in (Proto.TCP, Proto.UDP) or len(ip) < ihl + 8:
        return None
    src = ".".join(str(b) for b in ip[12:16])
    dst = ".".join(str(b) for b in ip[16:20])
    return _parse_l4(ip[ihl:], proto, src, dst, total_len - ihl, ts)


def _parse_ipv6(ip: bytes, ts: float) -> PacketRecord | None:
    if len(ip) < 48 or ip[0] >> 4 != 6:
        return None
    payload_len = struct.unpack("!H", ip[4:6])[0]
    proto = ip[6]
    if proto not in (Proto.TCP, Proto.UDP):
        return None
    import ipaddress

    src = str(ipaddress.IPv6Address(ip[8:24]))
    dst = str(ipaddress.IPv6Address(ip[24:40]))
    return _parse_l4(ip[40:], proto, src, dst, payload_len, ts)


def _parse_l4(seg: bytes, proto: int, src: str, dst: str, l4_len: int, ts: float):
    sport, dport = struct.unpack("!HH", seg[:4])
    if proto == Proto.TCP:
        if len(seg) < 13:
            return None
        hdr = (seg[12] >> 4) * 4
    else:
        hdr = 8
    payload = max(l4_len - hdr, 0)
    return PacketRecord(FiveTuple(src, sport, dst, dport, Proto(proto)), ts, payload)


def build_frame(pkt: PacketRecord) -> tuple[bytes, int]:
    """Headers-only Ethernet/IPv4 frame for ``pkt`` and its on-wire length.

    Payload bytes are not materialized; the IP total-length field carries
    the payload size, so captures are written with ``incl_len < orig_len``.
    """
    t = pkt.tuple
    if t.proto == Proto.TCP:
        l4 = struct.pack("!HHIIBBHHH", t.src_port, t.dst_port, 0, 0, 5 << 4, 0x18, 65535, 0, 0)
    else:
        l4 = struct.pack("!HHHH", t.src_port, t.dst_port, min(8 + pkt.payload_len, 65535), 0)
    total = 20 + len(l4) + pkt.payload_len
    if total > 65535:
        raise ValueError(f"payload of {pkt.payload_len} bytes does not fit one IPv4 packet")
    src = bytes(int(x) for x in t.src_ip.split("."))
    dst = bytes(int(x) for x in t.dst_ip.split("."))
    iph = struct.pack("!BBHHHBBH4s4s", 0x45, 0, total, 0, 0, 64, int(t.proto), 0, src, dst)
    eth = b"\x02\x00\x00\x00\x00\x02" + b"\x02\x00\x00\x00\x00\x01" + struct.pack("!H", ETH_IPV4)
    frame = eth + iph + l4
    return frame, 14 + total


def write_pcap(packets: Iterable[PacketRecord], path, snaplen: int = 65535) -> int:
    """Write packets to a little-endian microsecond pcap; returns the count."""
    n = 0
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IHHiIII", PCAP_MAGIC_USEC, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET))
        for pkt in packets:
            frame, wire_len = build_frame(pkt)
            sec, usec = split_timestamp(pkt.timestamp)
            fh.write(struct.pack("<IIII", sec, usec, len(frame), wire_len))
            fh.write(frame)
            n += 1
    return n


@dataclass
class _FlowAcc:
    tuple: FiveTuple
    start: float
    last: float
    order: int
    client_pkts: int = 0
    server_pkts: int = 0
    client_bytes: int = 0
    server_bytes: int = 0

    def add(self, pkt: PacketRecord):
        if pkt.tuple == self.tuple:
            self.client_pkts += 1
            self.client_bytes += pkt.payload_len
        else:
            self.server_pkts += 1
            self.server_bytes += pkt.payload_len
        self.last = pkt.timestamp

    def close(self) -> FlowRecord:
        return FlowRecord(self.tuple, self.start, self.last, self.client_pkts,
                          self.server_pkts, self.client_bytes, self.server_bytes)


@dataclass
class FlowTable:
    """In-progress flows keyed by canonical 5-tuple, closed on idle timeout."""

    idle_timeout: float = DEFAULT_IDLE_TIMEOUT
    active: dict[FlowKey, _FlowAcc] = field(default_factory=dict)
    finished: list[tuple[int, FlowRecord]] = field(default_factory=list)
    accepted: int = 0
    _opened: int = 0

    def add(self, pkt: PacketRecord):
        key = canonicalize(pkt.tuple)
        acc = self.active.get(key)
        if acc is not None and pkt.timestamp - acc.last > self.idle_timeout:
            self.finished.append((acc.order, acc.close()))
            acc = None
        if acc is None:
            acc = _FlowAcc(pkt.tuple, pkt.timestamp, pkt.timestamp, self._opened)
            self._opened += 1
            self.active[key] = acc
        acc.add(pkt)
        self.accepted += 1

    def flush(self) -> list[FlowRecord]:
        for acc in self.active.values():
            self.finished.append((acc.order, acc.close()))
        self.active.clear()
        self.finished.sort(key=lambda item: item[0])
        return sort_flows(f for _, f in self.finished)


class FlowAssembler:
    """Assemble a packet stream into flows.

    Packets may arrive up to ``reorder_tolerance`` seconds late; anything
    older than that relative to the newest packet seen is rejected and
    counted in ``rejected``.
    """

    def __init__(self, idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
                 reorder_tolerance: float = DEFAULT_REORDER_TOLERANCE):
        if idle_timeout <= 0:
            raise ValueError("idle_timeout must be positive")
        self.table = FlowTable(idle_timeout)
        self.reorder_tolerance = reorder_tolerance
        self.rejected = 0
        self._heap: list[tuple[float, int, PacketRecord]] = []
        self._seq = 0
        self._newest = float("-inf")

    def push(self, pkt: PacketRecord):
        if pkt.timestamp < self._newest - self.reorder_tolerance:
            self.rejected += 1
            return
        self._newest = max(self._newest, pkt.timestamp)
        heapq.heappush(self._heap, (pkt.timestamp, self._seq, pkt))
        self._seq += 1
        horizon = self._newest - self.reorder_tolerance
        while self._heap and self._heap[0][0] <= horizon:
            self.table.add(heapq.heappop(self._heap)[2])

    def finish(self) -> list[FlowRecord]:
        while self._heap:
            self.table.add(heapq.heappop(self._heap)[2])
        if self.rejected:
            log.warning("rejected %d out-of-order packets", self.rejected)
        return self.table.flush()

    @property
    def accepted(self) -> int:
        return self.table.accepted


def assemble_flows(packets: Iterable[PacketRecord], idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
                   reorder_tolerance: float = DEFAULT_REORDER_TOLERANCE) -> list[FlowRecord]:
    asm = FlowAssembler(idle_timeout, reorder_tolerance)
    for pkt in packets:
        asm.push(pkt)
    return asm.finish()


def dumps_flow(flow: FlowRecord) -> str:
    return json.dumps(flow_to_dict(flow), separators=(",", ":"))


def write_flow_jsonl(flows: Iterable[FlowRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for flow in flows:
            fh.write(dumps_flow(flow) + "\n")


def read_flow_jsonl(path, errors: list[FlowFormatError] | None = None) -> list[FlowRecord]:
    """Read canonical flow records.

    A malformed line raises :class:`FlowFormatError` unless an ``errors``
    list is supplied, in which case the line is skipped and the error
    (carrying its line number) appended to the list.
    """
    flows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                flows.append(flow_from_dict(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                err = FlowFormatError(lineno, str(exc).strip("'\""))
                if errors is None:
                    raise err from exc
                log.warning("%s: %s", path, err)
                errors.append(err)
    return flows
