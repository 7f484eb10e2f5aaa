"""Deterministic link emulation for the edge and cloud routes.

Every channel in the system runs over an EmulatedLink that models one-way
delay, symmetric uniform jitter, and serialization at a bandwidth limit.
Two clock modes exist: "virtual" computes delivery times on a discrete-event
timeline (exact, reproducible, used by tests and scenario runs) and "real"
applies the same arithmetic against the wall clock so benchmark numbers are
honest measurements.

Delivery time for one transmission in direction d:

    start    = max(send_time, pacing_free[d])
    ser_ms   = payload_size / bandwidth * 1000        (0 if unlimited)
    delivery = start + ser_ms + one_way_delay_ms + jitter_draw

pacing_free[d] advances to start + ser_ms, so back-to-back sends serialize
at the bandwidth limit.  Deliveries are clamped to be non-decreasing per
direction (FIFO), and jitter never exceeds the one-way delay, so delivery
never precedes the send.
"""

from __future__ import annotations

import heapq
import math
import threading
from dataclasses import dataclass

import numpy as np

DIR_UP = 0    # client -> platform
DIR_DOWN = 1  # platform -> client

UNLIMITED = math.inf


class NetemError(Exception):
    pass


class InvalidProfile(NetemError):
    pass


class ClockRegression(NetemError):
    pass


@dataclass(frozen=True)
class NetProfile:
    name: str
    one_way_delay_ms: float
    jitter_ms: float = 0.0
    bandwidth_bytes_per_s: float = UNLIMITED

    def validate(self) -> None:
        if self.one_way_delay_ms < 0:
            raise InvalidProfile(f"{self.name}: delay must be >= 0")
        if self.jitter_ms < 0:
            raise InvalidProfile(f"{self.name}: jitter must be >= 0")
        if self.jitter_ms > self.one_way_delay_ms:
            raise InvalidProfile(
                f"{self.name}: jitter {self.jitter_ms} exceeds delay "
                f"{self.one_way_delay_ms}")
        if not self.bandwidth_bytes_per_s > 0:
            raise InvalidProfile(f"{self.name}: bandwidth must be > 0")


# Default route profiles.  These are configuration, not measurements: edge is
# a local high-speed link, cloud a slower far one, and "stream" is the edge
# route calibrated so one video frame plus its result spend 300-400 ms in
# transit.
DEFAULT_PROFILES: dict[str, NetProfile] = {
    "edge": NetProfile("edge", one_way_delay_ms=2.0, jitter_ms=0.0,
                       bandwidth_bytes_per_s=25e6),
    "cloud": NetProfile("cloud", one_way_delay_ms=40.0, jitter_ms=5.0,
                        bandwidth_bytes_per_s=1e6),
    "stream": NetProfile("stream", one_way_delay_ms=170.0, jitter_ms=10.0,
                         bandwidth_bytes_per_s=25e6),
    "loopback": NetProfile("loopback", one_way_delay_ms=0.0),
}


def parse_profiles(text: str) -> dict[str, NetProfile]:
    """Parse `profile <name> delay_ms=<f> jitter_ms=<f> bw_Bps=<f|inf>` lines."""
    out: dict[str, NetProfile] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] != "profile" or len(parts) < 2:
            raise InvalidProfile(f"line {lineno}: expected 'profile <name> ...'")
        name = parts[1]
        kw = {"delay_ms": 0.0, "jitter_ms": 0.0, "bw_Bps": UNLIMITED}
        for tok in parts[2:]:
            key, _, val = tok.partition("=")
            if key not in kw:
                raise InvalidProfile(f"line {lineno}: unknown key {key!r}")
            kw[key] = UNLIMITED if val == "inf" else float(val)
        profile = NetProfile(name, kw["delay_ms"], kw["jitter_ms"], kw["bw_Bps"])
        profile.validate()
        out[name] = profile
    return out


def load_profiles(path: str) -> dict[str, NetProfile]:
    with open(path, encoding="utf-8") as fh:
        return parse_profiles(fh.read())


def resolve_profile(name: str, extra: dict[str, NetProfile] | None = None) -> NetProfile:
    table = dict(DEFAULT_PROFILES)
    if extra:
        table.update(extra)
    try:
        return table[name]
    except KeyError:
        raise InvalidProfile(f"no profile named {name!r}") from None


class _Direction:
    __slots__ = ("last_send", "pacing_free", "last_delivery", "rng")

    def __init__(self, seed: int, index: int) -> None:
        self.last_send = -math.inf
        self.pacing_free = -math.inf
        self.last_delivery = -math.inf
        # PCG64 keyed by (seed, direction) so the two directions draw
        # independent, reproducible jitter streams.
        self.rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, index])


class EmulatedLink:
    """A bidirectional link; direction 0 is up (to server), 1 is down."""

    def __init__(self, profile: NetProfile, seed: int = 0,
                 clock_mode: str = "virtual") -> None:
        profile.validate()
        if clock_mode not in ("virtual", "real"):
            raise ValueError(f"clock_mode {clock_mode!r}")
        self.profile = profile
        self.seed = seed
        self.clock_mode = clock_mode
        self._dirs = (_Direction(seed, 0), _Direction(seed, 1))
        self._lock = threading.Lock() if clock_mode == "real" else None

    def transmit(self, payload_size: int, send_time_ms: float,
                 direction: int = DIR_UP) -> float:
        """Return the delivery time for payload_size bytes sent at send_time_ms."""
        if self._lock is not None:
            with self._lock:
                return self._transmit(payload_size, send_time_ms, direction)
        return self._transmit(payload_size, send_time_ms, direction)

    def _transmit(self, payload_size: int, send_time_ms: float, direction: int) -> float:
        d = self._dirs[direction]
        if send_time_ms < d.last_send:
            raise ClockRegression(
                f"send at {send_time_ms} ms precedes earlier send at {d.last_send} ms")
        d.last_send = send_time_ms
        p = self.profile
        ser_ms = 0.0
        if p.bandwidth_bytes_per_s != UNLIMITED:
            ser_ms = payload_size / p.bandwidth_bytes_per_s * 1000.0
        start = max(send_time_ms, d.pacing_free)
        d.pacing_free = start + ser_ms
        jitter = 0.0
        if p.jitter_ms > 0:
            jitter = d.rng.uniform(-p.jitter_ms, p.jitter_ms)
        delivery = d.pacing_free + p.one_way_delay_ms + jitter
        # FIFO clamp: jitter must never reorder deliveries within a direction.
        delivery = max(delivery, d.last_delivery)
        d.last_delivery = delivery
        return delivery


def open_link(profile: NetProfile, seed: int = 0,
              clock_mode: str = "virtual") -> EmulatedLink:
    return EmulatedLink(profile, seed, clock_mode)


class VirtualClock:
    """Discrete-event timeline: time advances only by draining scheduled events."""

    def __init__(self, start_ms: float = 0.0) -> None:
        self.now_ms = start_ms
        self._heap: list[tuple[float, int, object]] = []
        self._counter = 0

    def schedule(self, at_ms: float, fn) -> None:
        if at_ms < self.now_ms:
            raise ClockRegression(f"cannot schedule at {at_ms} ms, now is {self.now_ms}")
        heapq.heappush(self._heap, (at_ms, self._counter, fn))
        self._counter += 1

    def schedule_in(self, delay_ms: float, fn) -> None:
        self.schedule(self.now_ms + delay_ms, fn)

    @property
    def pending(self) -> int:
        return len(self._heap)

    def step(self) -> bool:
        """Run the earliest event; returns False when nothing is queued."""
        if not self._heap:
            return False
        at_ms, _, fn = heapq.heappop(self._heap)
        self.now_ms = at_ms
        fn()
        return True

    def run(self, until_ms: float = math.inf, max_events: int = 10_000_000) -> None:
        """Drain events in time order until the queue empties or until_ms passes."""
        for _ in range(max_events):
            if not self._heap or self._heap[0][0] > until_ms:
                if until_ms != math.inf:
                    self.now_ms = max(self.now_ms, until_ms)
                return
            self.step()
        raise RuntimeError("virtual clock exceeded its event budget")
