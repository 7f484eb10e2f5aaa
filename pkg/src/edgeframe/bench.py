"""Benchmark harness: echo latency, upload throughput, recognition timing.

Latency probes are application-level ECHO_REQ/ECHO_RESP messages over the
reliable channel (no raw-socket ping), sent strictly sequentially so every
round trip is isolated.  Throughput uploads a file as UPLOAD_BEGIN /
UPLOAD_CHUNK... / UPLOAD_END and clocks the UPLOAD_ACK.  Recognition runs
the full pipeline per frame and, in edge mode, adds the emulated transit of
the frame up and the result back; local mode scales measured compute by the
device slowdown instead.

Virtual-clock benches are exact link arithmetic and reproduce to the
millisecond; real-clock benches realize the same delivery times against the
wall clock (see transport.RealLinkPair).  Percentiles are nearest-rank.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

from . import facerec as fr
from .client_sim import run_local_recognition
from .netem import DIR_DOWN, DIR_UP, NetProfile, open_link
from .platform_core import Platform
from .wire import (
    ErrorCode,
    FramePayload,
    MessageEnvelope,
    MsgType,
    encode_frame,
    pack_upload_begin,
    unpack_error,
    unpack_upload_ack,
)


class BenchError(Exception):
    pass


class EmptySamples(BenchError):
    pass


class ServerRejected(BenchError):
    pass


@dataclass(frozen=True)
class LatencySample:
    probe_seq: int
    rtt_ms: float


@dataclass(frozen=True)
class ThroughputSample:
    bytes: int
    elapsed_ms: float
    rate_Bps: float


@dataclass(frozen=True)
class RecogSample:
    frame_seq: int
    mode: str
    compute_ms: float
    transport_ms: float
    total_ms: float


@dataclass(frozen=True)
class SummaryStats:
    n: int
    min: float
    mean: float
    p50: float
    p95: float
    max: float


def nearest_rank(sorted_values: list[float], quantile: float) -> float:
    """Nearest-rank percentile: the ceil(q*n)-th smallest value."""
    import math

    n = len(sorted_values)
    rank = max(1, math.ceil(quantile * n))
    return sorted_values[rank - 1]


def summarize(values) -> SummaryStats:
    vals = [float(v) for v in values]
    if not vals:
        raise EmptySamples("cannot summarize zero samples")
    ordered = sorted(vals)
    return SummaryStats(
        n=len(ordered),
        min=ordered[0],
        mean=sum(ordered) / len(ordered),
        p50=nearest_rank(ordered, 0.50),
        p95=nearest_rank(ordered, 0.95),
        max=ordered[-1],
    )


def _bench_platform() -> tuple[Platform, object]:
    platform = Platform([], {})
    session = platform.open_session("bench")
    return platform, session


# ---------------------------------------------------------------------------
# Latency
# ---------------------------------------------------------------------------

def predicted_rtt_ms(profile: NetProfile, payload_bytes: int) -> float:
    """Closed-form zero-jitter round trip for one echo probe."""
    wire_len = 18 + payload_bytes + 4
    ser = 0.0
    if profile.bandwidth_bytes_per_s != float("inf"):
        ser = wire_len / profile.bandwidth_bytes_per_s * 1000.0
    return 2.0 * (ser + profile.one_way_delay_ms)


def bench_latency(profile: NetProfile, n_probes: int, payload_bytes: int = 64,
                  seed: int = 0, clock: str = "virtual") -> list[LatencySample]:
    if n_probes < 1:
        raise BenchError("need at least one probe")
    if clock == "real":
        from .transport import real_bench_latency
        return real_bench_latency(profile, n_probes, payload_bytes, seed)
    platform, session = _bench_platform()
    link = open_link(profile, seed=seed)
    samples = []
    now = 0.0
    payload = bytes(payload_bytes)
    for i in range(1, n_probes + 1):
        request = MessageEnvelope(MsgType.ECHO_REQ, session.session_id, i, payload)
        sent_at = now
        arrive = link.transmit(len(encode_frame(request)), sent_at, DIR_UP)
        control, data = platform.handle_envelope(session, "data", request, arrive)
        response = (data + control)[0]
        back = link.transmit(len(encode_frame(response)), arrive, DIR_DOWN)
        samples.append(LatencySample(i, back - sent_at))
        now = back  # next probe only after this one finished
    return samples


# ---------------------------------------------------------------------------
# Throughput
# ---------------------------------------------------------------------------

def bench_throughput(profile: NetProfile, total_bytes: int, chunk_bytes: int,
                     seed: int = 0, clock: str = "virtual") -> ThroughputSample:
    if not (total_bytes >= chunk_bytes >= 1):
        raise BenchError("need total_bytes >= chunk_bytes >= 1")
    if clock == "real":
        from .transport import real_bench_throughput
        return real_bench_throughput(profile, total_bytes, chunk_bytes, seed)
    platform, session = _bench_platform()
    link = open_link(profile, seed=seed)
    start = 0.0
    seq = 1
    begin = MessageEnvelope(MsgType.UPLOAD_BEGIN, session.session_id, seq,
                            pack_upload_begin(total_bytes))
    arrive = link.transmit(len(encode_frame(begin)), start, DIR_UP)
    control, data = platform.handle_envelope(session, "data", begin, arrive)
    for reply in control + data:
        if reply.msg_type == MsgType.ERROR:
            code, message = unpack_error(reply.payload)
            if code == ErrorCode.SERVER_REJECTED:
                raise ServerRejected(message)
            raise BenchError(message)
    remaining = total_bytes
    last_arrival = arrive
    while remaining > 0:
        size = min(chunk_bytes, remaining)
        remaining -= size
        seq += 1
        chunk = MessageEnvelope(MsgType.UPLOAD_CHUNK, session.session_id, seq,
                                bytes(size))
        # the client keeps the pipe full: everything is queued at start and
        # the link's pacing serializes it at the bandwidth limit
        last_arrival = link.transmit(len(encode_frame(chunk)), start, DIR_UP)
        platform.handle_envelope(session, "data", chunk, last_arrival)
    seq += 1
    end = MessageEnvelope(MsgType.UPLOAD_END, session.session_id, seq, b"")
    end_arrive = link.transmit(len(encode_frame(end)), start, DIR_UP)
    control, data = platform.handle_envelope(session, "data", end, end_arrive)
    ack = (data + control)[0]
    assert ack.msg_type == MsgType.UPLOAD_ACK
    if unpack_upload_ack(ack.payload) != total_bytes:
        raise BenchError("server acknowledged a different byte count")
    back = link.transmit(len(encode_frame(ack)), end_arrive, DIR_DOWN)
    elapsed = back - start
    return ThroughputSample(total_bytes, elapsed, total_bytes / elapsed * 1000.0)


# ---------------------------------------------------------------------------
# Recognition
# ---------------------------------------------------------------------------

def bench_recognition(model: fr.FaceModel, frames: list[FramePayload],
                      mode: str, profile: NetProfile | None = None,
                      slowdown: float = 10.0, seed: int = 0
                      ) -> list[RecogSample]:
    if not frames:
        raise BenchError("need at least one frame")
    if mode not in ("edge", "local"):
        raise BenchError(f"mode {mode!r}")
    samples = []
    if mode == "local":
        for frame in frames:
            _result, sim_ms = run_local_recognition(frame, model, slowdown)
            samples.append(RecogSample(frame.frame_seq, "local", sim_ms, 0.0,
                                       sim_ms))
        return samples
    if profile is None:
        raise BenchError("edge mode needs a link profile")
    from .wire import pack_frame_payload

    link = open_link(profile, seed=seed)
    now = 0.0
    for frame in frames:
        payload = encode_frame(MessageEnvelope(
            MsgType.FRAME, 0, frame.frame_seq, pack_frame_payload(frame)))
        t0 = time.perf_counter()
        result = fr.recognize_frame(frame, model, measure_time=False)
        compute_ms = (time.perf_counter() - t0) * 1000.0
        arrive = link.transmit(len(payload), now, DIR_UP)
        response = encode_frame(MessageEnvelope(
            MsgType.RECOG_RESULT, 0, frame.frame_seq,
            fr.pack_recog_result(result)))
        reply_sent = arrive + compute_ms
        back = link.transmit(len(response), reply_sent, DIR_DOWN)
        transport_ms = (arrive - now) + (back - reply_sent)
        samples.append(RecogSample(frame.frame_seq, "edge", compute_ms,
                                   transport_ms, compute_ms + transport_ms))
        now = back
    return samples


def make_bench_frames(gallery: list[fr.GalleryImage], n_frames: int,
                      frame_size: int = 384, seed: int = 0
                      ) -> list[FramePayload]:
    """Deterministic probe frames: two gallery faces on black, cycled."""
    import numpy as np

    labels = sorted({g.label for g in gallery})[:2]
    distinct = min(10, n_frames)
    base_frames = []
    rng = np.random.default_rng([seed, 77])
    for i in range(distinct):
        side = gallery[0].width
        max_off = frame_size - side
        offsets = []
        while len(offsets) < 2:
            x = int(rng.integers(0, max_off + 1))
            y = int(rng.integers(0, max_off + 1))
            if all(abs(x - ox) > side or abs(y - oy) > side for ox, oy in offsets):
                offsets.append((x, y))
        frame, _ = fr.make_two_face_frame(gallery, labels=tuple(labels),
                                          offsets=tuple(offsets),
                                          frame_w=frame_size,
                                          frame_h=frame_size, frame_seq=i + 1)
        base_frames.append(frame)
    out = []
    for i in range(n_frames):
        base = base_frames[i % distinct]
        out.append(FramePayload(i + 1, 0, base.width, base.height, base.pixels))
    return out


# ---------------------------------------------------------------------------
# CSV reports (fixed columns, header row mandatory)
# ---------------------------------------------------------------------------

LATENCY_COLUMNS = ("probe_seq", "rtt_ms")
THROUGHPUT_COLUMNS = ("bytes", "elapsed_ms", "rate_Bps")
RECOG_COLUMNS = ("frame_seq", "mode", "compute_ms", "transport_ms", "total_ms")


def write_latency_csv(samples: list[LatencySample], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LATENCY_COLUMNS)
        for s in samples:
            writer.writerow([s.probe_seq, repr(s.rtt_ms)])


def read_latency_csv(path: str) -> list[LatencySample]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != LATENCY_COLUMNS:
        raise BenchError(f"{path}: bad or missing header")
    return [LatencySample(int(r[0]), float(r[1])) for r in rows[1:]]


def write_throughput_csv(samples: list[ThroughputSample], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(THROUGHPUT_COLUMNS)
        for s in samples:
            writer.writerow([s.bytes, repr(s.elapsed_ms), repr(s.rate_Bps)])


def read_throughput_csv(path: str) -> list[ThroughputSample]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != THROUGHPUT_COLUMNS:
        raise BenchError(f"{path}: bad or missing header")
    return [ThroughputSample(int(r[0]), float(r[1]), float(r[2]))
            for r in rows[1:]]


def write_recog_csv(samples: list[RecogSample], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECOG_COLUMNS)
        for s in samples:
            writer.writerow([s.frame_seq, s.mode, repr(s.compute_ms),
                             repr(s.transport_ms), repr(s.total_ms)])


def read_recog_csv(path: str) -> list[RecogSample]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != RECOG_COLUMNS:
        raise BenchError(f"{path}: bad or missing header")
    return [RecogSample(int(r[0]), r[1], float(r[2]), float(r[3]), float(r[4]))
            for r in rows[1:]]


def format_summary_table(title: str, stats: SummaryStats,
                         unit: str = "ms") -> str:
    rows = [("n", f"{stats.n}"), ("min", f"{stats.min:.3f} {unit}"),
            ("mean", f"{stats.mean:.3f} {unit}"), ("p50", f"{stats.p50:.3f} {unit}"),
            ("p95", f"{stats.p95:.3f} {unit}"), ("max", f"{stats.max:.3f} {unit}")]
    width = max(len(title), max(len(f"{k}  {v}") for k, v in rows))
    lines = [title, "-" * width]
    lines += [f"{k:<6}{v}" for k, v in rows]
    return "\n".join(lines)
