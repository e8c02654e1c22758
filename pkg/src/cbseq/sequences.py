"""Per-channel PN/IAT/SP/DP token sequences and per-cluster behavior sequences."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable

from .clustering import ChannelCluster
from .core import Channel, Label

SEQUENCE_TYPES = ("pn", "iat", "sp", "dp")
PN_CAP = 1_000_000
IAT_CAP = 86_400


def quantize_iat(seconds: float) -> int:
    """Round half up to whole seconds, clamped to [0, IAT_CAP]."""
    return int(min(max(math.floor(seconds + 0.5), 0), IAT_CAP))


@dataclass(frozen=True)
class ChannelSequence:
    pn: tuple[int, ...]
    iat: tuple[int, ...]
    sp: tuple[int, ...]
    dp: tuple[int, ...]

    def __len__(self):
        return len(self.pn)


def channel_sequence(channel: Channel) -> ChannelSequence:
    flows = channel.flows
    pn = tuple(min(f.client_pkts, PN_CAP) for f in flows)
    iat = (0,) + tuple(quantize_iat(b.start_time - a.start_time) for a, b in zip(flows, flows[1:]))
    sp = tuple(f.tuple.src_port for f in flows)
    dp = tuple(f.tuple.dst_port for f in flows)
    return ChannelSequence(pn, iat, sp, dp)


@dataclass(frozen=True)
class BehaviorSequence:
    """Index-aligned token lists of one cluster; index i is one flow."""

    cluster_id: int
    pn: tuple[int, ...]
    iat: tuple[int, ...]
    sp: tuple[int, ...]
    dp: tuple[int, ...]
    label: Label = Label.UNLABELED
    channel_ids: tuple[str, ...] = ()
    families: tuple[str, ...] = ()
    time_slice: int = 0
    channel_lengths: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self):
        n = len(self.pn)
        if not (len(self.iat) == len(self.sp) == len(self.dp) == n):
            raise ValueError("behavior sequence token lists differ in length")
        if any(tok < 0 for seq in (self.pn, self.iat, self.sp, self.dp) for tok in seq):
            raise ValueError("negative token")
        object.__setattr__(self, "label", Label.parse(self.label))

    def __len__(self):
        return len(self.pn)

    def tokens(self, seq_type: str) -> tuple[int, ...]:
        return getattr(self, seq_type)

    @property
    def y(self) -> int | None:
        return {Label.MALWARE: 1, Label.BENIGN: 0}.get(self.label)


def behavior_sequence(cluster: ChannelCluster) -> BehaviorSequence:
    if not cluster.members:
        raise ValueError("empty cluster")
    members = sorted(cluster.members, key=lambda ch: (ch.start_time, ch.ip_pair))
    parts = [channel_sequence(ch) for ch in members]
    cat = {t: tuple(tok for p in parts for tok in getattr(p, t)) for t in SEQUENCE_TYPES}
    return BehaviorSequence(
        cluster.cluster_id, cat["pn"], cat["iat"], cat["sp"], cat["dp"],
        label=cluster.label,
        channel_ids=tuple(ch.channel_id for ch in members),
        families=cluster.families,
        time_slice=cluster.time_slice,
        channel_lengths=tuple(len(p) for p in parts),
    )


def behavior_sequences(clusters: Iterable[ChannelCluster]) -> list[BehaviorSequence]:
    return [behavior_sequence(c) for c in clusters]


def behseq_to_dict(seq: BehaviorSequence) -> dict:
    return {
        "cluster_id": seq.cluster_id,
        "label": seq.label.value,
        "pn": list(seq.pn), "iat": list(seq.iat), "sp": list(seq.sp), "dp": list(seq.dp),
        "channel_ids": list(seq.channel_ids),
        "channel_lengths": list(seq.channel_lengths),
        "families": list(seq.families),
        "time_slice": seq.time_slice,
    }


def behseq_from_dict(d: dict) -> BehaviorSequence:
    return BehaviorSequence(
        int(d["cluster_id"]),
        tuple(int(x) for x in d["pn"]), tuple(int(x) for x in d["iat"]),
        tuple(int(x) for x in d["sp"]), tuple(int(x) for x in d["dp"]),
        label=d.get("label", "unlabeled"),
        channel_ids=tuple(d.get("channel_ids", ())),
        families=tuple(d.get("families", ())),
        time_slice=int(d.get("time_slice", 0)),
        channel_lengths=tuple(d.get("channel_lengths", ())),
    )


def write_behseq_jsonl(seqs: Iterable[BehaviorSequence], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in seqs:
            fh.write(json.dumps(behseq_to_dict(s), separators=(",", ":")) + "\n")


def read_behseq_jsonl(path) -> list[BehaviorSequence]:
    with open(path, encoding="utf-8") as fh:
        return [behseq_from_dict(json.loads(line)) for line in fh if line.strip()]
