"""Deterministic synthetic labeled traffic.

Three scenario kinds:

* ``single_node_persistent``: an infected host talks to one server over and
  over (beaconing, brute forcing); one channel with many near-identical flows.
* ``multi_node_transient``: an infected host touches many victims with a few
  flows each; many channels with near-identical abstract features.
* ``benign_background``: heterogeneous client activity with heavy-tailed
  sizes, mixed services and irregular timing.

All randomness comes from one Philox stream per scenario.
"""

from __future__ import annotations

import ipaddress
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable

import numpy as np

from .core import FiveTuple, FlowRecord, Label, PacketRecord, Proto, ip_pair, sort_flows
from .ingest import DEFAULT_IDLE_TIMEOUT, quantize_timestamp, write_pcap

KINDS = ("single_node_persistent", "multi_node_transient", "benign_background")
BASE_TIME = 1_700_006_400.0  # a UTC midnight
MSS = 1460
MAX_PAYLOAD = 65495
BENIGN_PORTS = (443, 443, 443, 80, 80, 53, 8080, 993, 123, 22, 3389, 5223)


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    family: str = ""
    n_hosts: int = 1
    n_peers: int = 1
    flows_per_channel: int = 1
    period: float = 60.0
    jitter: float = 0.0
    flow_gap: float = 5.0
    client_pkts: float = 4
    server_pkts: float = 3
    pkt_spread: int = 0
    bytes_up: float = 300
    bytes_down: float = 1200
    bytes_jitter: float = 0.0
    byte_sigma: float = 1.5
    flow_duration: float = 1.0
    sport_strategy: str = "ephemeral"
    sport_low: int = 32768
    sport_high: int = 65535
    dst_ports: tuple[int, ...] = (443,)
    proto: str = "TCP"
    start: float = BASE_TIME
    duration: float = 86400.0
    start_spread: float = 0.0
    client_net: str | None = None
    server_net: str | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dst_ports", tuple(int(p) for p in self.dst_ports))
        validate_spec(self)

    @property
    def label(self) -> Label:
        return Label.BENIGN if self.kind == "benign_background" else Label.MALWARE

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario field(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def validate_spec(spec: ScenarioSpec) -> None:
    if spec.kind not in KINDS:
        raise ValueError(f"unknown scenario kind {spec.kind!r}")
    if min(spec.n_hosts, spec.n_peers, spec.flows_per_channel) < 1:
        raise ValueError("host, peer and flow counts must be >= 1")
    if spec.period <= 0 or spec.flow_gap <= 0 or spec.duration <= 0:
        raise ValueError("periods and durations must be positive")
    if not 0 <= spec.jitter < spec.period:
        raise ValueError("jitter must satisfy 0 <= jitter < period")
    if spec.client_pkts < 1 or spec.server_pkts < 0 or spec.pkt_spread < 0:
        raise ValueError("invalid packet-count parameters")
    if spec.pkt_spread >= spec.client_pkts:
        raise ValueError("pkt_spread must be smaller than client_pkts")
    if spec.bytes_up < 0 or spec.bytes_down < 0 or not 0 <= spec.bytes_jitter < 1:
        raise ValueError("invalid byte-size parameters")
    if spec.byte_sigma < 0 or spec.flow_duration < 0 or spec.start_spread < 0:
        raise ValueError("invalid distribution parameters")
    if spec.sport_strategy not in ("fixed", "sequential", "ephemeral"):
        raise ValueError(f"unknown port strategy {spec.sport_strategy!r}")
    if not 0 < spec.sport_low <= spec.sport_high < 65536:
        raise ValueError("source port range must satisfy 0 < sport_low <= sport_high < 65536")
    if not spec.dst_ports or not all(0 < p < 65536 for p in spec.dst_ports):
        raise ValueError("dst_ports must be non-empty valid ports")
    Proto.parse(spec.proto)


def _host(net: str, i: int) -> str:
    n = ipaddress.ip_network(net)
    if i + 1 >= n.num_addresses - 1:
        raise ValueError(f"network {net} too small for host {i}")
    return str(n.network_address + 1 + i)


def _nets(spec: ScenarioSpec, index: int) -> tuple[str, str]:
    client = spec.client_net or f"10.{index % 256}.0.0/16"
    server = spec.server_net or f"172.{16 + index % 16}.{(index // 16) % 256}.0/24"
    if spec.server_net is None and spec.kind == "benign_background":
        server = f"100.{64 + index % 64}.0.0/16"
    return client, server


class _Ports:
    """Source-port allocator over the inclusive range [low, high]."""

    def __init__(self, strategy: str, rng, low: int = 32768, high: int = 65535):
        self.strategy = strategy
        self.rng = rng
        self.low, self.span = low, high - low + 1
        self.next = low + int(rng.integers(0, self.span))

    def take(self) -> int:
        if self.strategy == "fixed":
            return self.next
        if self.strategy == "sequential":
            port = self.next
            self.next = self.low + (self.next - self.low + 1) % self.span
            return port
        return self.low + int(self.rng.integers(0, self.span))


def _attack_flow(spec, rng, tup, t, proto) -> FlowRecord:
    spread = spec.pkt_spread
    cp = int(round(spec.client_pkts)) + (int(rng.integers(-spread, spread + 1)) if spread else 0)
    sp = int(round(spec.server_pkts)) + (int(rng.integers(-spread, spread + 1)) if spread and spec.server_pkts > spread else 0)
    bj = spec.bytes_jitter
    up = int(round(spec.bytes_up * (1 + (rng.uniform(-bj, bj) if bj else 0))))
    down = int(round(spec.bytes_down * (1 + (rng.uniform(-bj, bj) if bj else 0)))) if sp else 0
    start = quantize_timestamp(t)
    end = quantize_timestamp(t + spec.flow_duration)
    return FlowRecord(tup, start, end, cp, sp, up, down, spec.label, spec.family or None)


def _benign_flow(spec, rng, tup, t) -> FlowRecord:
    up = int(rng.lognormal(math.log(max(spec.bytes_up, 1)), spec.byte_sigma))
    down = int(rng.lognormal(math.log(max(spec.bytes_down, 1)), spec.byte_sigma))
    sp = 1 + math.ceil(down / MSS)
    cp = 1 + math.ceil(up / MSS) + int(rng.integers(0, sp // 2 + 1))
    dur = float(rng.lognormal(math.log(max(spec.flow_duration, 1e-3)), 1.0))
    start = quantize_timestamp(t)
    return FlowRecord(tup, start, quantize_timestamp(t + dur), cp, sp, up, down,
                      Label.BENIGN, spec.family or None)


def _generate_flows(spec: ScenarioSpec, index: int) -> list[FlowRecord]:
    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    client_net, server_net = _nets(spec, index)
    proto = Proto.parse(spec.proto)
    flows = []
    if spec.kind == "single_node_persistent":
        for h in range(spec.n_hosts):
            client = _host(client_net, h)
            for p in range(spec.n_peers):
                server = _host(server_net, h * spec.n_peers + p)
                ports = _Ports(spec.sport_strategy, rng, spec.sport_low, spec.sport_high)
                dport = spec.dst_ports[p % len(spec.dst_ports)]
                t0 = spec.start + (rng.uniform(0, spec.start_spread) if spec.start_spread else 0)
                for i in range(spec.flows_per_channel):
                    t = t0 + i * spec.period
                    if i and spec.jitter:
                        t += rng.uniform(-spec.jitter, spec.jitter)
                    tup = FiveTuple(client, ports.take(), server, dport, proto)
                    flows.append(_attack_flow(spec, rng, tup, t, proto))
    elif spec.kind == "multi_node_transient":
        for h in range(spec.n_hosts):
            client = _host(client_net, h)
            ports = _Ports(spec.sport_strategy, rng, spec.sport_low, spec.sport_high)
            t_host = spec.start + (rng.uniform(0, spec.start_spread) if spec.start_spread else 0)
            for v in range(spec.n_peers):
                victim = _host(server_net, h * spec.n_peers + v)
                dport = spec.dst_ports[v % len(spec.dst_ports)]
                t_v = t_host + v * spec.period
                if v and spec.jitter:
                    t_v += rng.uniform(-spec.jitter, spec.jitter)
                for i in range(spec.flows_per_channel):
                    tup = FiveTuple(client, ports.take(), victim, dport, proto)
                    flows.append(_attack_flow(spec, rng, tup, t_v + i * spec.flow_gap, proto))
    else:
        n_servers = ipaddress.ip_network(server_net).num_addresses - 2
        for h in range(spec.n_hosts):
            client = _host(client_net, h)
            n_peers = int(rng.integers(1, spec.n_peers + 1))
            peers = rng.choice(n_servers, size=min(n_peers, n_servers), replace=False)
            for peer in sorted(int(x) for x in peers):
                server = _host(server_net, peer)
                n_flows = min(int(rng.zipf(1.8)), spec.flows_per_channel)
                t = spec.start + rng.uniform(0, spec.duration)
                main_port = int(rng.choice(spec.dst_ports))
                end = spec.start + spec.duration
                for _ in range(n_flows):
                    if t >= end:
                        break
                    dport = main_port if rng.random() < 0.8 else int(rng.choice(spec.dst_ports))
                    tup = FiveTuple(client, int(rng.integers(32768, 65536)), server, dport, proto)
                    flows.append(_benign_flow(spec, rng, tup, t))
                    t += float(rng.exponential(spec.period))
    return flows


def _channel_truth(flows: list[FlowRecord], window: float = 86400.0) -> list[dict]:
    groups: dict[tuple, list[FlowRecord]] = defaultdict(list)
    for f in flows:
        groups[(f.ip_pair, int(math.floor(f.start_time / window)))].append(f)
    out = []
    for (pair, day), members in sorted(groups.items(), key=lambda kv: (min(f.start_time for f in kv[1]), kv[0])):
        members.sort(key=lambda f: f.start_time)
        up = sum(f.client_bytes for f in members)
        down = sum(f.server_bytes for f in members)
        out.append({
            "ip_a": pair[0], "ip_b": pair[1], "day": day,
            "label": members[0].label.value, "family": members[0].family,
            "n_flows": len(members),
            "start_time": members[0].start_time,
            "features": {
                "duration": max(f.end_time for f in members) - members[0].start_time,
                "flow_count": len(members),
                "total_bytes": up + down, "uplink_bytes": up, "downlink_bytes": down,
            },
            "pn": [f.client_pkts for f in members],
            "start_times": [f.start_time for f in members],
            "src_ports": [f.tuple.src_port for f in members],
            "dst_ports": [f.tuple.dst_port for f in members],
        })
    return out


def metadata(flows: list[FlowRecord], specs: Iterable[ScenarioSpec] = ()) -> dict:
    flows = sort_flows(flows)
    per_day_flows: dict[int, int] = defaultdict(int)
    per_day_pairs: dict[int, set] = defaultdict(set)
    for f in flows:
        d = int(math.floor(f.start_time / 86400.0))
        per_day_flows[d] += 1
        per_day_pairs[d].add(f.ip_pair)
    return {
        "scenarios": [asdict(s) for s in specs],
        "n_flows": len(flows),
        "n_packets": sum(f.client_pkts + f.server_pkts for f in flows),
        "per_day_flow_counts": {str(k): v for k, v in sorted(per_day_flows.items())},
        "per_day_ip_pairs": {str(k): len(v) for k, v in sorted(per_day_pairs.items())},
        "flow_packet_counts": [[f.client_pkts, f.server_pkts] for f in flows],
        "channels": _channel_truth(flows),
    }


def generate(spec: ScenarioSpec, index: int = 0) -> tuple[list[FlowRecord], dict]:
    """Flows (time ordered) and ground-truth metadata for one scenario."""
    flows = sort_flows(_generate_flows(spec, index))
    return flows, metadata(flows, [spec])


def generate_corpus(specs: Iterable[ScenarioSpec]) -> tuple[list[FlowRecord], dict]:
    """Several scenarios on disjoint address ranges, merged into one corpus."""
    specs = list(specs)
    flows = []
    for i, spec in enumerate(specs):
        flows.extend(_generate_flows(spec, i))
    flows = sort_flows(flows)
    return flows, metadata(flows, specs)


def flow_packets(flow: FlowRecord) -> list[PacketRecord]:
    """Packets realizing one flow; the client sends first and last times match."""
    cp, sp = flow.client_pkts, flow.server_pkts
    if sp == 0 and flow.server_bytes:
        raise ValueError("server bytes without server packets")
    if cp == 0 and flow.client_bytes:
        raise ValueError("client bytes without client packets")
    n = cp + sp
    dirs = []
    c_left, s_left = cp, sp
    for k in range(n):
        client_turn = (k == 0 and c_left) or s_left == 0 or (c_left and k % 2 == 0)
        if client_turn:
            dirs.append(True)
            c_left -= 1
        else:
            dirs.append(False)
            s_left -= 1
    sizes = {True: _split(flow.client_bytes, cp), False: _split(flow.server_bytes, sp)}
    rev = flow.tuple.reversed()
    pkts = []
    taken = {True: 0, False: 0}
    for k, is_client in enumerate(dirs):
        if k == 0:
            t = flow.start_time
        elif k == n - 1:
            t = flow.end_time
        else:
            t = quantize_timestamp(flow.start_time + (flow.end_time - flow.start_time) * k / (n - 1))
        size = sizes[is_client][taken[is_client]]
        taken[is_client] += 1
        if size > MAX_PAYLOAD:
            raise ValueError(f"flow needs {size}-byte packets; raise its packet count")
        pkts.append(PacketRecord(flow.tuple if is_client else rev, t, size))
    return pkts


def _split(total: int, parts: int) -> list[int]:
    if parts == 0:
        return []
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def check_recoverable(flows: Iterable[FlowRecord], idle_timeout: float = DEFAULT_IDLE_TIMEOUT) -> None:
    """Raise if flow assembly could not recover ``flows`` from their packets."""
    by_key: dict = defaultdict(list)
    for f in flows:
        n = f.client_pkts + f.server_pkts
        if n > 1 and (f.end_time - f.start_time) / (n - 1) > idle_timeout:
            raise ValueError(f"flow {f.tuple} has packet gaps beyond the idle timeout")
        by_key[f.key].append(f)
    for key, group in by_key.items():
        group.sort(key=lambda f: f.start_time)
        for a, b in zip(group, group[1:]):
            if b.start_time - a.end_time <= idle_timeout:
                raise ValueError(f"flows on {a.tuple} would merge at ingest")
            if b.tuple != a.tuple:
                raise ValueError(f"flows on {key} change initiator within one key")


def corpus_packets(flows: Iterable[FlowRecord], max_packets: int = 5_000_000) -> list[PacketRecord]:
    flows = list(flows)
    total = sum(f.client_pkts + f.server_pkts for f in flows)
    if total > max_packets:
        raise ValueError(f"{total} packets exceeds the cap of {max_packets}")
    tagged = []
    for fi, f in enumerate(flows):
        for k, p in enumerate(flow_packets(f)):
            tagged.append((p.timestamp, fi, k, p))
    tagged.sort(key=lambda x: x[:3])
    return [x[3] for x in tagged]


def generate_pcap(flows: Iterable[FlowRecord], path, idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
                  max_packets: int = 5_000_000) -> int:
    """Write a capture whose assembly reproduces ``flows``; returns packet count."""
    flows = list(flows)
    check_recoverable(flows, idle_timeout)
    return write_pcap(corpus_packets(flows, max_packets), path)


def token_entropy(tokens) -> float:
    _, counts = np.unique(np.asarray(tokens), return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


# Reference workloads: benign background plus four attack families.

def family_specs(seed: int = 0, start: float = BASE_TIME, days: int = 1) -> dict[str, list[ScenarioSpec]]:
    out: dict[str, list[ScenarioSpec]] = defaultdict(list)
    for d in range(days):
        t0 = start + d * 86400.0
        s = seed * 1000 + d * 10
        out["benign"].append(ScenarioSpec(
            "benign_background", "benign", n_hosts=60, n_peers=12, flows_per_channel=40,
            period=240.0, bytes_up=900, bytes_down=24000, byte_sigma=1.6, flow_duration=8.0,
            dst_ports=BENIGN_PORTS, start=t0, duration=86000.0, seed=s + 1))
        out["beacon"].append(ScenarioSpec(
            "single_node_persistent", "beacon", n_hosts=12, n_peers=1, flows_per_channel=24,
            period=300.0, jitter=10.0, client_pkts=6, server_pkts=5, pkt_spread=1,
            bytes_up=420, bytes_down=1650, bytes_jitter=0.05, flow_duration=1.5,
            sport_strategy="sequential", dst_ports=(443,), start=t0 + 1800,
            start_spread=70000.0, seed=s + 2))
        out["bruteforce"].append(ScenarioSpec(
            "single_node_persistent", "bruteforce", n_hosts=10, n_peers=1, flows_per_channel=60,
            period=6.0, jitter=1.0, client_pkts=12, server_pkts=10, pkt_spread=1,
            bytes_up=1100, bytes_down=1900, bytes_jitter=0.05, flow_duration=2.5,
            sport_strategy="sequential", dst_ports=(22,), start=t0 + 3600,
            start_spread=70000.0, seed=s + 3))
        out["worm"].append(ScenarioSpec(
            "multi_node_transient", "worm", n_hosts=6, n_peers=30, flows_per_channel=2,
            period=8.0, flow_gap=3.0, client_pkts=28, server_pkts=9, bytes_up=36000,
            bytes_down=700, flow_duration=4.0, sport_strategy="sequential", dst_ports=(25,),
            start=t0 + 600, start_spread=70000.0, seed=s + 4))
        out["scan"].append(ScenarioSpec(
            "multi_node_transient", "scan", n_hosts=6, n_peers=30, flows_per_channel=1,
            period=0.5, flow_gap=1.0, client_pkts=2, server_pkts=1, bytes_up=0,
            bytes_down=0, flow_duration=0.2, sport_strategy="sequential", dst_ports=(445,),
            start=t0 + 900, start_spread=70000.0, seed=s + 5))
    return out


def reference_corpus(seed: int = 0, families: Iterable[str] | None = None,
                     days: int = 1) -> tuple[list[FlowRecord], dict]:
    specs = family_specs(seed, days=days)
    names = list(families) if families is not None else list(specs)
    chosen = [spec for name in names for spec in specs[name]]
    return generate_corpus(chosen)


def with_seed(spec: ScenarioSpec, seed: int) -> ScenarioSpec:
    return replace(spec, seed=seed)
