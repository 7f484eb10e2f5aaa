"""Real-clock transport: wall-time agreement with virtual predictions, TCP."""

import threading

import pytest

from edgeframe import bench
from edgeframe import navigation as nav
from edgeframe import platform_core as pc
from edgeframe.netem import DEFAULT_PROFILES, NetProfile
from edgeframe.transport import (
    PlatformTcpServer,
    RealLinkPair,
    TcpClient,
)
from edgeframe.wire import MsgType, pack_hello


def test_real_pair_delivery_lag_close_to_prediction():
    # cloud-ish delay: generous slack for scheduler noise relative to 40 ms
    profile = NetProfile("t", 40.0, 0.0, 25e6)
    received = []
    done = threading.Event()
    pair = RealLinkPair(profile, seed=0)
    pair.on_right = lambda raw: (received.append(pair.now_ms()),
                                 len(received) >= 10 and done.set())
    sent, predicted = [], []
    for _ in range(10):
        raw = bytes(1000)
        sent.append(pair.now_ms())
        predicted.append(pair.send_left(raw))
    assert done.wait(timeout=10.0)
    pair.close()
    lags = [r - s for r, s in zip(received, sent)]
    virtual = [p - s for p, s in zip(predicted, sent)]
    mean_lag = sum(lags) / len(lags)
    mean_virtual = sum(virtual) / len(virtual)
    assert mean_lag >= mean_virtual - 0.5  # never early beyond clock noise
    assert mean_lag <= mean_virtual * 1.25


def test_real_latency_bench_within_25_percent_of_virtual():
    for name in ("edge", "cloud"):
        profile = DEFAULT_PROFILES[name]
        zero_jitter = NetProfile(name, profile.one_way_delay_ms, 0.0,
                                 profile.bandwidth_bytes_per_s)
        real = bench.bench_latency(zero_jitter, n_probes=10,
                                   payload_bytes=100_000, clock="real")
        prediction = bench.predicted_rtt_ms(zero_jitter, 100_000)
        mean_rtt = sum(s.rtt_ms for s in real) / len(real)
        assert mean_rtt >= prediction - 0.5
        assert mean_rtt <= prediction * 1.25 + 1.0


def test_real_throughput_close_to_virtual():
    profile = NetProfile("t", 1.0, 0.0, 5e6)
    real = bench.bench_throughput(profile, total_bytes=1_000_000,
                                  chunk_bytes=65536, clock="real")
    virtual = bench.bench_throughput(profile, total_bytes=1_000_000,
                                     chunk_bytes=65536, clock="virtual")
    assert real.elapsed_ms >= virtual.elapsed_ms - 1.0
    assert real.elapsed_ms <= virtual.elapsed_ms * 1.25


@pytest.fixture()
def tcp_server():
    rules = [pc.ServiceRule("navigation", (pc.ZoneEquals("gate"),),
                            priority=10, dwell_ms=0),
             pc.ServiceRule("lighting", (pc.IlluminanceBelow(50),),
                            priority=1, dwell_ms=0)]
    platform = pc.Platform(rules, [pc.NavigationService(nav.demo_graph()),
                                   pc.LightingService()])
    server = PlatformTcpServer(platform, NetProfile("fast", 1.0, 0.0, 25e6))
    yield server
    server.close()


def test_tcp_handshake_and_echo(tcp_server):
    client = TcpClient(tcp_server.address, NetProfile("fast", 1.0, 0.0, 25e6),
                       user_id="alice")
    try:
        assert client.session_id >= 1
        sent_at = client.now_ms()
        client.send("control", MsgType.ECHO_REQ, b"ping")
        received_at, channel, env = client.recv()
        assert env.msg_type == MsgType.ECHO_RESP
        assert env.payload == b"ping"
        assert channel == "control"
        # both sides delay by >= 1 ms one-way
        assert received_at - sent_at >= 2.0 - 0.5
    finally:
        client.close()


def test_tcp_context_drives_dispatch_and_data_plane(tcp_server):
    client = TcpClient(tcp_server.address, NetProfile("fast", 1.0, 0.0, 25e6),
                       user_id="alice")
    try:
        ctx = pc.ContextRecord("alice", 1, (0.2, 0.1, 0.0), zone_id="gate")
        client.send("control", MsgType.CONTEXT_UPDATE, pc.pack_context(ctx))
        _t, channel, env = client.recv()
        assert (channel, env.msg_type) == ("control", MsgType.SERVICE_ACTIVATE)
        assert env.payload == b"navigation"

        client.send("data", MsgType.NAV_SELECT_DEST, nav.pack_select_dest("r2c3"))
        _t, channel, env = client.recv()
        assert (channel, env.msg_type) == ("data", MsgType.NAV_INSTRUCTION)
        instr = nav.unpack_instruction(env.payload)
        assert instr.remaining_distance_m > 0
    finally:
        client.close()
