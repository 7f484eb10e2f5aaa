"""Benchmark harness: closed-form latency checks, orderings, CSV fidelity."""

import random

import pytest

from edgeframe import bench
from edgeframe import facerec as fr
from edgeframe.bench import (
    EmptySamples,
    LatencySample,
    RecogSample,
    ServerRejected,
    ThroughputSample,
    bench_latency,
    bench_recognition,
    bench_throughput,
    predicted_rtt_ms,
    summarize,
)
from edgeframe.netem import DEFAULT_PROFILES, NetProfile


def test_summarize_single_value():
    stats = summarize([5.0])
    assert (stats.n, stats.min, stats.mean, stats.p50, stats.p95, stats.max) == \
        (1, 5.0, 5.0, 5.0, 5.0, 5.0)


def test_summarize_nearest_rank_definition():
    stats = summarize(range(1, 101))
    assert stats.p95 == 95.0
    assert stats.p50 == 50.0


def test_summarize_matches_sort_oracle():
    rng = random.Random(8)
    import math
    for _ in range(30):
        vals = [rng.uniform(0, 100) for _ in range(rng.randint(1, 50))]
        stats = summarize(vals)
        ordered = sorted(vals)
        assert stats.min == ordered[0]
        assert stats.max == ordered[-1]
        assert stats.mean == pytest.approx(sum(vals) / len(vals))
        assert stats.p50 == ordered[max(1, math.ceil(0.5 * len(vals))) - 1]
        assert stats.p95 == ordered[max(1, math.ceil(0.95 * len(vals))) - 1]
    with pytest.raises(EmptySamples):
        summarize([])


def test_latency_exact_in_virtual_zero_jitter():
    profile = NetProfile("t", 10.0, 0.0)
    samples = bench_latency(profile, n_probes=5, payload_bytes=100, seed=0)
    assert len(samples) == 5
    for s in samples:
        assert s.rtt_ms == pytest.approx(20.0, abs=1e-9)

    finite = NetProfile("t2", 10.0, 0.0, 1e6)
    samples = bench_latency(finite, n_probes=3, payload_bytes=100, seed=0)
    for s in samples:
        assert s.rtt_ms == pytest.approx(predicted_rtt_ms(finite, 100), abs=1e-9)


def test_latency_single_probe():
    samples = bench_latency(NetProfile("t", 1.0), n_probes=1)
    assert len(samples) == 1


def test_edge_beats_cloud_latency_in_every_seeded_run():
    edge = DEFAULT_PROFILES["edge"]
    cloud = DEFAULT_PROFILES["cloud"]
    for seed in range(10):
        edge_mean = summarize([s.rtt_ms for s in
                               bench_latency(edge, 20, 64, seed)]).mean
        cloud_mean = summarize([s.rtt_ms for s in
                                bench_latency(cloud, 20, 64, seed)]).mean
        assert edge_mean < cloud_mean


def test_throughput_virtual_arithmetic():
    profile = NetProfile("t", 0.0, 0.0, 1_000_000.0)
    sample = bench_throughput(profile, total_bytes=1_000_000,
                              chunk_bytes=65536, seed=0)
    assert sample.elapsed_ms == pytest.approx(1000.0, rel=0.02)
    assert sample.rate_Bps == pytest.approx(1_000_000.0, rel=0.02)


def test_throughput_single_chunk():
    profile = NetProfile("t", 1.0, 0.0, 1e6)
    sample = bench_throughput(profile, total_bytes=5000, chunk_bytes=5000)
    assert sample.bytes == 5000
    assert sample.rate_Bps == pytest.approx(sample.bytes / sample.elapsed_ms * 1000)


def test_throughput_edge_beats_cloud_in_every_seeded_run():
    for seed in range(10):
        edge = bench_throughput(DEFAULT_PROFILES["edge"], 500_000, 65536, seed)
        cloud = bench_throughput(DEFAULT_PROFILES["cloud"], 500_000, 65536, seed)
        assert edge.rate_Bps > cloud.rate_Bps


def test_oversized_upload_raises_server_rejected():
    from edgeframe.platform_core import UPLOAD_DECLARED_CAP
    with pytest.raises(ServerRejected):
        bench_throughput(NetProfile("t", 0.0), UPLOAD_DECLARED_CAP + 1,
                         1 << 20)


def test_throughput_validates_sizes():
    with pytest.raises(bench.BenchError):
        bench_throughput(NetProfile("t", 0.0), 10, 20)


def test_recognition_modes_and_degenerate_equality(standard_gallery,
                                                   standard_model):
    frames = bench.make_bench_frames(standard_gallery, n_frames=4,
                                     frame_size=96, seed=1)
    instant = NetProfile("none", 0.0, 0.0)
    edge = bench_recognition(standard_model, frames, "edge", instant, seed=0)
    local = bench_recognition(standard_model, frames, "local", slowdown=1.0)
    assert [s.frame_seq for s in edge] == [1, 2, 3, 4]
    assert all(s.transport_ms == 0.0 for s in edge)
    assert all(s.transport_ms == 0.0 for s in local)
    edge_mean = summarize([s.total_ms for s in edge]).mean
    local_mean = summarize([s.total_ms for s in local]).mean
    # sigma = 1 over a free link: the two paths time the same pipeline
    assert local_mean == pytest.approx(edge_mean, rel=0.5)


def test_recognition_transport_isolated_from_compute(standard_gallery,
                                                     standard_model):
    frames = bench.make_bench_frames(standard_gallery, n_frames=3,
                                     frame_size=96, seed=1)
    stream = DEFAULT_PROFILES["stream"]
    samples = bench_recognition(standard_model, frames, "edge", stream, seed=0)
    for s in samples:
        assert s.total_ms == pytest.approx(s.compute_ms + s.transport_ms)
        # two one-way trips bounded by delay +/- jitter plus serialization
        assert s.transport_ms >= 2 * (stream.one_way_delay_ms - stream.jitter_ms)


def test_local_slowdown_scales_total(standard_gallery, standard_model):
    frames = bench.make_bench_frames(standard_gallery, n_frames=2,
                                     frame_size=96, seed=1)
    fast = bench_recognition(standard_model, frames, "local", slowdown=1.0)
    slow = bench_recognition(standard_model, frames, "local", slowdown=10.0)
    # same pipeline, deterministic boxes; timing scales roughly by sigma
    ratio = (sum(s.total_ms for s in slow) / sum(s.total_ms for s in fast))
    assert ratio == pytest.approx(10.0, rel=0.9)


def test_csv_round_trips(tmp_path):
    latency = [LatencySample(i, 20.0 + i / 7.0) for i in range(1, 8)]
    p = tmp_path / "lat.csv"
    bench.write_latency_csv(latency, str(p))
    parsed = bench.read_latency_csv(str(p))
    assert parsed == latency
    assert summarize([s.rtt_ms for s in parsed]) == \
        summarize([s.rtt_ms for s in latency])
    assert p.read_text().splitlines()[0] == "probe_seq,rtt_ms"

    through = [ThroughputSample(1000, 12.5, 80000.0)]
    p2 = tmp_path / "thr.csv"
    bench.write_throughput_csv(through, str(p2))
    assert bench.read_throughput_csv(str(p2)) == through

    recog = [RecogSample(1, "edge", 5.25, 340.0, 345.25),
             RecogSample(2, "local", 52.5, 0.0, 52.5)]
    p3 = tmp_path / "rec.csv"
    bench.write_recog_csv(recog, str(p3))
    assert bench.read_recog_csv(str(p3)) == recog

    with pytest.raises(bench.BenchError):
        bad = tmp_path / "bad.csv"
        bad.write_text("nope,nope\n1,2\n")
        bench.read_latency_csv(str(bad))


def test_summary_table_renders():
    text = bench.format_summary_table("latency edge", summarize([1.0, 2.0, 3.0]))
    assert "latency edge" in text
    assert "mean" in text and "p95" in text
