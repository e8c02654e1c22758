"""Traffic data model shared by every pipeline stage.

Three granularities: packets, bidirectional flows (keyed by an unordered
5-tuple) and channels (all flows between one unordered IP pair).
"""

from __future__ import annotations

import enum
import ipaddress
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple


class Proto(enum.IntEnum):
    TCP = 6
    UDP = 17

    @classmethod
    def parse(cls, value) -> "Proto":
        if isinstance(value, Proto):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown protocol {value!r}") from None
        return cls(int(value))


class Label(str, enum.Enum):
    BENIGN = "benign"
    MALWARE = "malware"
    UNLABELED = "unlabeled"

    @classmethod
    def parse(cls, value) -> "Label | None":
        if value is None or isinstance(value, Label):
            return value
        return cls(str(value).lower())


def _norm_ip(ip) -> str:
    return str(ipaddress.ip_address(ip))


def _ip_sort_key(ip: str) -> tuple[int, bytes]:
    addr = ipaddress.ip_address(ip)
    return addr.version, addr.packed


@dataclass(frozen=True)
class FiveTuple:
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    proto: Proto

    def __post_init__(self):
        object.__setattr__(self, "src_ip", _norm_ip(self.src_ip))
        object.__setattr__(self, "dst_ip", _norm_ip(self.dst_ip))
        object.__setattr__(self, "proto", Proto.parse(self.proto))
        for port in (self.src_port, self.dst_port):
            if not isinstance(port, int) or not 0 <= port <= 65535:
                raise ValueError(f"port out of range: {port!r}")

    def reversed(self) -> "FiveTuple":
        return FiveTuple(self.dst_ip, self.dst_port, self.src_ip, self.src_port, self.proto)

    def __str__(self):
        return f"{self.src_ip}:{self.src_port} -> {self.dst_ip}:{self.dst_port} ({self.proto.name})"


class FlowKey(NamedTuple):
    """Direction-free flow identity; endpoint ``a`` sorts before ``b``."""

    proto: Proto
    a_ip: str
    a_port: int
    b_ip: str
    b_port: int

    def as_tuple(self) -> FiveTuple:
        return FiveTuple(self.a_ip, self.a_port, self.b_ip, self.b_port, self.proto)


def canonicalize(tup: FiveTuple | FlowKey) -> FlowKey:
    """Map a 5-tuple and its reversed twin to the same key."""
    if isinstance(tup, FlowKey):
        tup = tup.as_tuple()
    a = (_ip_sort_key(tup.src_ip), tup.src_port)
    b = (_ip_sort_key(tup.dst_ip), tup.dst_port)
    if b < a:
        return FlowKey(tup.proto, tup.dst_ip, tup.dst_port, tup.src_ip, tup.src_port)
    return FlowKey(tup.proto, tup.src_ip, tup.src_port, tup.dst_ip, tup.dst_port)


def ip_pair(ip1: str, ip2: str) -> tuple[str, str]:
    """Unordered IP pair in canonical order (the channel key)."""
    ip1, ip2 = _norm_ip(ip1), _norm_ip(ip2)
    if _ip_sort_key(ip2) < _ip_sort_key(ip1):
        return ip2, ip1
    return ip1, ip2


@dataclass(frozen=True)
class PacketRecord:
    tuple: FiveTuple
    timestamp: float
    payload_len: int

    def __post_init__(self):
        if not math.isfinite(self.timestamp) or self.timestamp < 0:
            raise ValueError(f"bad timestamp {self.timestamp!r}")
        if self.payload_len < 0:
            raise ValueError("negative payload length")


@dataclass(frozen=True)
class FlowRecord:
    """A bidirectional flow oriented initiator (client) -> responder."""

    tuple: FiveTuple
    start_time: float
    end_time: float
    client_pkts: int
    server_pkts: int
    client_bytes: int
    server_bytes: int
    label: Label | None = None
    family: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "label", Label.parse(self.label))
        if not (math.isfinite(self.start_time) and math.isfinite(self.end_time)):
            raise ValueError("non-finite flow timestamps")
        if self.end_time < self.start_time:
            raise ValueError("flow ends before it starts")
        counts = (self.client_pkts, self.server_pkts, self.client_bytes, self.server_bytes)
        if min(counts) < 0:
            raise ValueError("negative flow counter")
        if self.client_pkts + self.server_pkts < 1:
            raise ValueError("flow without packets")

    @property
    def key(self) -> FlowKey:
        return canonicalize(self.tuple)

    @property
    def ip_pair(self) -> tuple[str, str]:
        return ip_pair(self.tuple.src_ip, self.tuple.dst_ip)


def _flow_order(flow: FlowRecord):
    t = flow.tuple
    return (flow.start_time, flow.end_time, _ip_sort_key(t.src_ip), t.src_port,
            _ip_sort_key(t.dst_ip), t.dst_port, int(t.proto))


def sort_flows(flows: Iterable[FlowRecord]) -> list[FlowRecord]:
    """Total, deterministic time order for flows."""
    return sorted(flows, key=_flow_order)


def merge_labels(labels: Iterable[Label | None]) -> Label:
    """Malware if any member is malware, benign if all are benign, else unlabeled."""
    labels = list(labels)
    if any(lab is Label.MALWARE for lab in labels):
        return Label.MALWARE
    if labels and all(lab is Label.BENIGN for lab in labels):
        return Label.BENIGN
    return Label.UNLABELED


@dataclass(frozen=True)
class Channel:
    """All flows of one unordered IP pair inside one day window."""

    ip_pair: tuple[str, str]
    flows: tuple[FlowRecord, ...]
    window: int = 0
    flow_index: tuple[int, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.flows:
            raise ValueError("a channel needs at least one flow")
        pair = ip_pair(*self.ip_pair)
        object.__setattr__(self, "ip_pair", pair)
        if any(f.ip_pair != pair for f in self.flows):
            raise ValueError("flow does not belong to this IP pair")
        if self.flow_index is not None:
            order = sorted(range(len(self.flows)), key=lambda i: _flow_order(self.flows[i]))
            object.__setattr__(self, "flows", tuple(self.flows[i] for i in order))
            object.__setattr__(self, "flow_index", tuple(self.flow_index[i] for i in order))
        else:
            object.__setattr__(self, "flows", tuple(sort_flows(self.flows)))

    @property
    def start_time(self) -> float:
        return self.flows[0].start_time

    @property
    def label(self) -> Label:
        return merge_labels(f.label for f in self.flows)

    @property
    def family(self) -> str | None:
        fams = sorted({f.family for f in self.flows if f.family})
        return "+".join(fams) if fams else None

    @property
    def channel_id(self) -> str:
        return f"w{self.window}/{self.ip_pair[0]}-{self.ip_pair[1]}"

    def with_flow(self, flow: FlowRecord) -> "Channel":
        return Channel(self.ip_pair, self.flows + (flow,), self.window)


# Canonical flow-record interchange format (one JSON object per line).
FLOW_FIELDS = ("src_ip", "src_port", "dst_ip", "dst_port", "proto", "start_time",
               "end_time", "client_pkts", "server_pkts", "client_bytes", "server_bytes")


def flow_to_dict(flow: FlowRecord) -> dict:
    t = flow.tuple
    d = {
        "src_ip": t.src_ip, "src_port": t.src_port,
        "dst_ip": t.dst_ip, "dst_port": t.dst_port,
        "proto": t.proto.name,
        "start_time": float(flow.start_time), "end_time": float(flow.end_time),
        "client_pkts": flow.client_pkts, "server_pkts": flow.server_pkts,
        "client_bytes": flow.client_bytes, "server_bytes": flow.server_bytes,
    }
    if flow.label is not None and flow.label is not Label.UNLABELED:
        d["label"] = flow.label.value
    if flow.family:
        d["family"] = flow.family
    return d


def flow_from_dict(d: dict) -> FlowRecord:
    missing = [k for k in FLOW_FIELDS if k not in d]
    if missing:
        raise KeyError(f"missing field(s): {', '.join(missing)}")
    tup = FiveTuple(d["src_ip"], int(d["src_port"]), d["dst_ip"], int(d["dst_port"]),
                    Proto.parse(d["proto"]))
    return FlowRecord(
        tup, float(d["start_time"]), float(d["end_time"]),
        int(d["client_pkts"]), int(d["server_pkts"]),
        int(d["client_bytes"]), int(d["server_bytes"]),
        label=d.get("label"), family=d.get("family"),
    )
