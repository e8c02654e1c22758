"""Day windowing, channel aggregation and the channel abstract features."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .core import Channel, FlowRecord, flow_from_dict, flow_to_dict, ip_pair

DAY = 86400.0


@dataclass(frozen=True)
class ChannelAbstractFeatures:
    duration: float
    flow_count: int
    total_bytes: int
    uplink_bytes: int
    downlink_bytes: int

    def as_vector(self) -> np.ndarray:
        return np.array([self.duration, self.flow_count, self.total_bytes,
                         self.uplink_bytes, self.downlink_bytes], dtype=float)


def window_index(t: float, window: float = DAY) -> int:
    return int(math.floor(t / window))


def window_split(flows: Iterable[FlowRecord], window: float = DAY) -> list[tuple[int, list[FlowRecord]]]:
    """Group flows by epoch-aligned window of their start time."""
    if window <= 0:
        raise ValueError("window must be positive")
    groups: dict[int, list[FlowRecord]] = defaultdict(list)
    for flow in flows:
        groups[window_index(flow.start_time, window)].append(flow)
    return [(idx, groups[idx]) for idx in sorted(groups)]


def aggregate_channels(flows: Iterable[FlowRecord], window: int = 0,
                       flow_index: Iterable[int] | None = None) -> list[Channel]:
    """One channel per unordered IP pair, ordered by channel start time.

    ``flow_index`` optionally carries each flow's position in the source
    file so channels can reference their flows.
    """
    flows = list(flows)
    indices = list(flow_index) if flow_index is not None else None
    by_pair: dict[tuple[str, str], list[int]] = defaultdict(list)
    for i, flow in enumerate(flows):
        by_pair[flow.ip_pair].append(i)
    channels = []
    for pair, members in by_pair.items():
        channels.append(Channel(
            pair, tuple(flows[i] for i in members), window,
            tuple(indices[i] for i in members) if indices is not None else None,
        ))
    channels.sort(key=lambda c: (c.start_time, c.ip_pair))
    return channels


def abstract_features(channel: Channel) -> ChannelAbstractFeatures:
    flows = channel.flows
    up = sum(f.client_bytes for f in flows)
    down = sum(f.server_bytes for f in flows)
    start = min(f.start_time for f in flows)
    end = max(f.end_time for f in flows)
    return ChannelAbstractFeatures(end - start, len(flows), up + down, up, down)


def build_channels(flows: Iterable[FlowRecord], window: float = DAY) -> list[Channel]:
    """Window and aggregate a whole flow list; flow indices refer to input order."""
    flows = list(flows)
    groups: dict[int, list[int]] = defaultdict(list)
    for i, flow in enumerate(flows):
        groups[window_index(flow.start_time, window)].append(i)
    channels = []
    for idx in sorted(groups):
        members = groups[idx]
        channels.extend(aggregate_channels((flows[i] for i in members), idx, members))
    return channels


def channel_to_dict(channel: Channel) -> dict:
    return {
        "channel_id": channel.channel_id,
        "window": channel.window,
        "ip_a": channel.ip_pair[0],
        "ip_b": channel.ip_pair[1],
        "start_time": channel.start_time,
        "label": channel.label.value,
        "features": asdict(abstract_features(channel)),
        "flow_index": list(channel.flow_index) if channel.flow_index is not None else None,
        "flows": [flow_to_dict(f) for f in channel.flows],
    }


def channel_from_dict(d: dict) -> Channel:
    flows = tuple(flow_from_dict(f) for f in d["flows"])
    idx = d.get("flow_index")
    return Channel(ip_pair(d["ip_a"], d["ip_b"]), flows, int(d.get("window", 0)),
                   tuple(idx) if idx is not None else None)


def write_channels_jsonl(channels: Iterable[Channel], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ch in channels:
            fh.write(json.dumps(channel_to_dict(ch), separators=(",", ":")) + "\n")


def read_channels_jsonl(path) -> list[Channel]:
    with open(path, encoding="utf-8") as fh:
        return [channel_from_dict(json.loads(line)) for line in fh if line.strip()]

