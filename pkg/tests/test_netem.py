"""Link emulation: hand-checkable arithmetic, determinism, FIFO, monotonicity."""

import math

import pytest

from edgeframe import netem
from edgeframe.netem import (
    ClockRegression,
    EmulatedLink,
    InvalidProfile,
    NetProfile,
    VirtualClock,
    open_link,
)


def test_delay_only_round_trip_is_20ms():
    link = open_link(NetProfile("t", 10.0), seed=1)
    up = link.transmit(100, 0.0, netem.DIR_UP)
    assert up == 10.0
    down = link.transmit(100, up, netem.DIR_DOWN)
    assert down == 20.0


def test_serialization_time_at_bandwidth_limit():
    link = open_link(NetProfile("t", 0.0, 0.0, 1_000_000.0))
    assert link.transmit(1_000_000, 0.0) == pytest.approx(1000.0)


def test_pacing_serializes_back_to_back_sends():
    link = open_link(NetProfile("t", 0.0, 0.0, 1_000_000.0))
    first = link.transmit(500_000, 0.0)
    second = link.transmit(500_000, 0.0)
    assert first == pytest.approx(500.0)
    assert second == pytest.approx(1000.0)


def test_directions_have_independent_pacing():
    link = open_link(NetProfile("t", 0.0, 0.0, 1_000_000.0))
    assert link.transmit(500_000, 0.0, netem.DIR_UP) == pytest.approx(500.0)
    assert link.transmit(500_000, 0.0, netem.DIR_DOWN) == pytest.approx(500.0)


def test_clock_regression_rejected_per_direction():
    link = open_link(NetProfile("t", 1.0))
    link.transmit(10, 100.0, netem.DIR_UP)
    with pytest.raises(ClockRegression):
        link.transmit(10, 99.0, netem.DIR_UP)
    # the other direction has its own clock
    link.transmit(10, 0.0, netem.DIR_DOWN)


def test_profile_validation():
    NetProfile("edge", 2.0, 0.0, 25e6).validate()
    with pytest.raises(InvalidProfile):
        open_link(NetProfile("bad", 40.0, 50.0, 1e6))
    with pytest.raises(InvalidProfile):
        open_link(NetProfile("bad", -1.0))
    with pytest.raises(InvalidProfile):
        open_link(NetProfile("bad", 1.0, 0.0, 0.0))


def test_default_profiles_are_valid_and_ordered():
    edge = netem.DEFAULT_PROFILES["edge"]
    cloud = netem.DEFAULT_PROFILES["cloud"]
    edge.validate()
    cloud.validate()
    assert edge.one_way_delay_ms < cloud.one_way_delay_ms
    assert edge.bandwidth_bytes_per_s > cloud.bandwidth_bytes_per_s


def _delivery_times(profile: NetProfile, seed: int, sizes, gap_ms: float = 1.0):
    link = open_link(profile, seed=seed)
    return [link.transmit(s, i * gap_ms) for i, s in enumerate(sizes)]


def test_determinism_same_seed_same_times():
    profile = NetProfile("j", 40.0, 5.0, 1e6)
    sizes = [100, 5000, 1, 70000, 300]
    a = _delivery_times(profile, 7, sizes)
    b = _delivery_times(profile, 7, sizes)
    c = _delivery_times(profile, 8, sizes)
    assert a == b
    assert a != c


def test_fifo_under_jitter():
    profile = NetProfile("j", 40.0, 39.0, netem.UNLIMITED)
    link = open_link(profile, seed=3)
    times = [link.transmit(10, t * 0.5) for t in range(200)]
    assert times == sorted(times)


def test_monotone_in_delay_and_bandwidth():
    sizes = [100, 5000, 1, 70000, 300]
    base = _delivery_times(NetProfile("a", 10.0, 0.0, 1e6), 0, sizes)
    slower_link = _delivery_times(NetProfile("b", 20.0, 0.0, 1e6), 0, sizes)
    thinner_pipe = _delivery_times(NetProfile("c", 10.0, 0.0, 0.5e6), 0, sizes)
    assert all(s >= b for s, b in zip(slower_link, base))
    assert all(t >= b for t, b in zip(thinner_pipe, base))


def test_jitter_bounded_and_centered():
    profile = NetProfile("j", 40.0, 5.0, netem.UNLIMITED)
    link = open_link(profile, seed=11)
    draws = [link.transmit(1, float(i * 1000)) - (i * 1000 + 40.0) for i in range(500)]
    assert all(-5.0 <= d <= 5.0 for d in draws)
    assert abs(sum(draws) / len(draws)) < 1.0


def test_profile_text_round_trip():
    text = """
    # routes
    profile edge delay_ms=2 jitter_ms=0 bw_Bps=25000000
    profile cloud delay_ms=40 jitter_ms=5 bw_Bps=1000000
    profile wide delay_ms=1 bw_Bps=inf
    """
    table = netem.parse_profiles(text)
    assert table["edge"].one_way_delay_ms == 2.0
    assert table["cloud"].jitter_ms == 5.0
    assert table["wide"].bandwidth_bytes_per_s == math.inf
    with pytest.raises(InvalidProfile):
        netem.parse_profiles("profile broken delay_ms=1 jitter_ms=2")
    with pytest.raises(InvalidProfile):
        netem.parse_profiles("link x delay_ms=1")


def test_virtual_clock_orders_events():
    clock = VirtualClock()
    seen = []
    clock.schedule(5.0, lambda: seen.append("b"))
    clock.schedule(1.0, lambda: seen.append("a"))
    clock.schedule(5.0, lambda: seen.append("c"))  # same time: schedule order
    clock.run()
    assert seen == ["a", "b", "c"]
    assert clock.now_ms == 5.0
    with pytest.raises(ClockRegression):
        clock.schedule(1.0, lambda: None)


def test_virtual_clock_run_until():
    clock = VirtualClock()
    seen = []
    for t in (10.0, 20.0, 30.0):
        clock.schedule(t, lambda t=t: seen.append(t))
    clock.run(until_ms=20.0)
    assert seen == [10.0, 20.0]
    assert clock.now_ms == 20.0
    clock.run()
    assert seen == [10.0, 20.0, 30.0]
