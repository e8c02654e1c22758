import json
import socket
import struct

import pytest
from hypothesis import given, settings, strategies as st

from cbseq.core import FiveTuple, PacketRecord, flow_to_dict
from cbseq.ingest import (FlowAssembler, FlowFormatError, PcapFormatError, assemble_flows,
                          quantize_timestamp, read_flow_jsonl, read_pcap, write_flow_jsonl,
                          write_pcap)
from cbseq.synthgen import corpus_packets, generate_pcap


def tcp_frame(src, sport, dst, dport, payload=b"", proto=6):
    """Hand-packed Ethernet/IPv4/TCP-or-UDP frame carrying a real payload."""
    if proto == 6:
        l4 = struct.pack("!HHIIBBHHH", sport, dport, 1, 0, 5 << 4, 0x18, 1024, 0, 0)
    else:
        l4 = struct.pack("!HHHH", sport, dport, 8 + len(payload), 0)
    total = 20 + len(l4) + len(payload)
    ip = struct.pack("!BBHHHBBH4s4s", 0x45, 0, total, 1, 0, 64, proto, 0,
                     socket.inet_aton(src), socket.inet_aton(dst))
    return b"\xaa" * 6 + b"\xbb" * 6 + b"\x08\x00" + ip + l4 + payload


ARP = b"\xff" * 6 + b"\xbb" * 6 + b"\x08\x06" + b"\x00" * 28


def pcap_bytes(records, endian="<", nano=False, linktype=1):
    magic = 0xA1B23C4D if nano else 0xA1B2C3D4
    out = struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, 65535, linktype)
    for ts, frame in records:
        sec = int(ts)
        frac = round((ts - sec) * (1e9 if nano else 1e6))
        out += struct.pack(endian + "IIII", sec, frac, len(frame), len(frame)) + frame
    return out


def three_packet_capture():
    return [(1.0, tcp_frame("10.0.0.1", 5000, "10.0.0.2", 80, b"hello")),
            (1.5, tcp_frame("10.0.0.2", 80, "10.0.0.1", 5000, b"world!")),
            (2.0, tcp_frame("10.0.0.1", 5000, "10.0.0.2", 80))]


def test_three_tcp_packets(tmp_path):
    p = tmp_path / "a.pcap"
    p.write_bytes(pcap_bytes(three_packet_capture()))
    pkts = list(read_pcap(p))
    assert len(pkts) == 3
    assert [pk.payload_len for pk in pkts] == [5, 6, 0]
    assert pkts[1].tuple == pkts[0].tuple.reversed()
    assert [pk.timestamp for pk in pkts] == [1.0, 1.5, 2.0]


@pytest.mark.parametrize("endian,nano", [(">", False), ("<", True), (">", True)])
def test_byte_orders_and_nanoseconds(tmp_path, endian, nano):
    p = tmp_path / "b.pcap"
    p.write_bytes(pcap_bytes(three_packet_capture(), endian, nano))
    assert [pk.payload_len for pk in read_pcap(p)] == [5, 6, 0]


def test_arp_skipped_and_counted(tmp_path):
    recs = three_packet_capture()
    recs.insert(1, (1.2, ARP))
    p = tmp_path / "c.pcap"
    p.write_bytes(pcap_bytes(recs))
    reader = read_pcap(p)
    assert len(list(reader)) == 3
    assert reader.skipped == 1


def test_udp_payload(tmp_path):
    p = tmp_path / "u.pcap"
    p.write_bytes(pcap_bytes([(3.0, tcp_frame("10.0.0.1", 53, "10.0.0.9", 53, b"x" * 30, 17))]))
    (pkt,) = read_pcap(p)
    assert pkt.payload_len == 30 and pkt.tuple.proto.name == "UDP"


def test_bad_global_header(tmp_path):
    p = tmp_path / "bad.pcap"
    p.write_bytes(b"\x00" * 24)
    with pytest.raises(PcapFormatError):
        list(read_pcap(p))
    p.write_bytes(b"\xd4\xc3")
    with pytest.raises(PcapFormatError):
        list(read_pcap(p))


def test_unsupported_link_type(tmp_path):
    p = tmp_path / "l.pcap"
    p.write_bytes(pcap_bytes(three_packet_capture(), linktype=101))
    with pytest.raises(PcapFormatError, match="link type"):
        list(read_pcap(p))


def test_truncated_record_keeps_prior_packets(tmp_path):
    p = tmp_path / "t.pcap"
    p.write_bytes(pcap_bytes(three_packet_capture())[:-10])
    reader = read_pcap(p)
    assert len(list(reader)) == 2
    assert reader.truncated


def pkt(t, src="10.0.0.1", sport=4000, dst="10.0.0.2", dport=443, n=10):
    return PacketRecord(FiveTuple(src, sport, dst, dport, "TCP"), t, n)


def test_five_packets_one_flow():
    packets = [pkt(0.0), pkt(0.2, "10.0.0.2", 443, "10.0.0.1", 4000), pkt(0.4), pkt(0.6), pkt(0.9)]
    (flow,) = assemble_flows(packets)
    assert flow.client_pkts + flow.server_pkts == 5
    assert (flow.client_pkts, flow.server_pkts) == (4, 1)
    assert flow.tuple.src_ip == "10.0.0.1"
    assert (flow.start_time, flow.end_time) == (0.0, 0.9)


def test_idle_timeout_splits():
    flows = assemble_flows([pkt(0.0), pkt(300.0)], idle_timeout=120)
    assert len(flows) == 2
    assert len(assemble_flows([pkt(0.0), pkt(120.0)], idle_timeout=120)) == 1


def test_orientation_follows_first_packet():
    (flow,) = assemble_flows([pkt(0.0, "10.0.0.2", 443, "10.0.0.1", 4000, n=7), pkt(0.1, n=3)])
    assert flow.tuple.src_ip == "10.0.0.2"
    assert (flow.client_bytes, flow.server_bytes) == (7, 3)


def test_reorder_buffer():
    asm = FlowAssembler(reorder_tolerance=1.0)
    for t in (10.0, 9.5, 12.0, 10.5, 5.0):
        asm.push(pkt(t))
    flows = asm.finish()
    assert asm.rejected == 2
    assert asm.accepted == 3
    assert flows[0].start_time == 9.5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1000), st.integers(0, 3), st.booleans()), max_size=60))
def test_packet_conservation(events):
    events.sort()
    packets = []
    for t, host, reply in events:
        a, b = f"10.0.0.{host + 1}", "10.0.1.1"
        packets.append(pkt(t, b, 80, a, 5000) if reply else pkt(t, a, 5000, b, 80))
    asm = FlowAssembler()
    for p in packets:
        asm.push(p)
    flows = asm.finish()
    assert asm.rejected == 0
    assert sum(f.client_pkts + f.server_pkts for f in flows) == len(packets)


def test_synthetic_capture_round_trip(tmp_path, ref_day):
    flows, _ = ref_day
    packets = corpus_packets(flows[:600])[:10_000]
    p = tmp_path / "r.pcap"
    write_pcap(packets, p)
    back = list(read_pcap(p))
    expected = [PacketRecord(q.tuple, quantize_timestamp(q.timestamp), q.payload_len) for q in packets]
    assert back == expected


def test_assembled_counts_match_generator(tmp_path, ref_day):
    flows, meta = ref_day
    flows = flows[:800]
    p = tmp_path / "g.pcap"
    generate_pcap(flows, p)
    got = assemble_flows(read_pcap(p))
    assert [(f.client_pkts, f.server_pkts) for f in got] == [(f.client_pkts, f.server_pkts) for f in flows]
    assert [(f.client_bytes, f.server_bytes) for f in got] == [(f.client_bytes, f.server_bytes) for f in flows]
    assert [f.tuple for f in got] == [f.tuple for f in flows]


def test_assembly_deterministic(tmp_path, ref_day):
    flows = ref_day[0][:200]
    p = tmp_path / "d.pcap"
    generate_pcap(flows, p)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_flow_jsonl(assemble_flows(read_pcap(p)), a)
    write_flow_jsonl(assemble_flows(read_pcap(p)), b)
    assert a.read_bytes() == b.read_bytes()


def test_jsonl_empty_and_single(tmp_path, flow_factory):
    p = tmp_path / "f.jsonl"
    p.write_text("")
    assert read_flow_jsonl(p) == []
    f = flow_factory(label="benign")
    p.write_text(json.dumps(flow_to_dict(f)) + "\n")
    assert read_flow_jsonl(p) == [f]


def test_jsonl_round_trip_on_corpus(tmp_path, ref_day):
    flows = ref_day[0]
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_flow_jsonl(flows, a)
    back = read_flow_jsonl(a)
    assert back == flows
    write_flow_jsonl(back, b)
    assert a.read_bytes() == b.read_bytes()


def test_jsonl_missing_field_reports_line(tmp_path, flow_factory):
    good = json.dumps(flow_to_dict(flow_factory()))
    bad = json.loads(good)
    del bad["client_pkts"]
    p = tmp_path / "m.jsonl"
    p.write_text(good + "\n" + json.dumps(bad) + "\n" + good + "\n")
    with pytest.raises(FlowFormatError) as err:
        read_flow_jsonl(p)
    assert err.value.lineno == 2 and "client_pkts" in str(err.value)
    errors = []
    assert len(read_flow_jsonl(p, errors=errors)) == 2
    assert [e.lineno for e in errors] == [2]
