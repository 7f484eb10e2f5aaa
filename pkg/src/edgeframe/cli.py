"""Command line entry points: serve, client, scenario, bench, generators."""

from __future__ import annotations

import os
import sys

import click

from . import bench as bench_mod
from . import client_sim as cs
from . import facerec as fr
from . import navigation as nav
from . import netem
from . import platform_core as pc
from .pgm import write_pgm

EXIT_ASSERTION = 2


def _resolve_profile(name: str, profiles_path: str | None) -> netem.NetProfile:
    extra = netem.load_profiles(profiles_path) if profiles_path else None
    try:
        return netem.resolve_profile(name, extra)
    except netem.InvalidProfile as exc:
        raise click.ClickException(str(exc)) from None


def _build_platform(rules_path: str, map_path: str | None,
                    model_path: str | None, measure_time: bool,
                    replan: bool = False) -> pc.Platform:
    try:
        rules = pc.load_rules(rules_path)
    except (OSError, ValueError) as exc:
        raise click.ClickException(f"rules: {exc}") from None
    services: list = [pc.LightingService()]
    if map_path:
        try:
            services.append(pc.NavigationService(nav.load_map(map_path),
                                                 replan=replan))
        except (OSError, nav.NavError) as exc:
            raise click.ClickException(f"map: {exc}") from None
    if model_path:
        try:
            services.append(pc.FaceRecognitionService(
                fr.load_model(model_path), measure_time=measure_time))
        except (OSError, fr.FaceRecError) as exc:
            raise click.ClickException(f"model: {exc}") from None
    return pc.Platform(rules, services)


def _parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise click.ClickException(f"address must be host:port, got {text!r}")
    return host, int(port)


seed_option = click.option("--seed", type=int, default=0, show_default=True,
                           envvar="EDGEFRAME_SEED",
                           help="Deterministic seed (env: EDGEFRAME_SEED).")


@click.group()
@click.version_option()
def main() -> None:
    """Context-driven edge offloading platform, services, and benchmarks."""


# ---------------------------------------------------------------------------
# serve / client / scenario
# ---------------------------------------------------------------------------

@main.command()
@click.option("--rules", "rules_path", required=True, type=click.Path(exists=True))
@click.option("--map", "map_path", type=click.Path(exists=True))
@click.option("--model", "model_path", type=click.Path(exists=True))
@click.option("--net-profile", default="edge", show_default=True)
@click.option("--profiles", "profiles_path", type=click.Path(exists=True),
              help="Extra profile definitions file.")
@click.option("--listen", default="127.0.0.1:7929", show_default=True)
@seed_option
def serve(rules_path, map_path, model_path, net_profile, profiles_path,
          listen, seed) -> None:
    """Run the platform server on a TCP socket."""
    from .transport import PlatformTcpServer

    profile = _resolve_profile(net_profile, profiles_path)
    platform = _build_platform(rules_path, map_path, model_path,
                               measure_time=True)
    host, port = _parse_addr(listen)
    server = PlatformTcpServer(platform, profile, host, port, seed=seed)
    click.echo(f"serving on {server.address[0]}:{server.address[1]} "
               f"(profile {profile.name}, services: "
               f"{', '.join(sorted(platform.services))})")
    try:
        while True:
            import time
            time.sleep(1.0)
    except KeyboardInterrupt:
        click.echo("shutting down")
    finally:
        server.close()


@main.command()
@click.option("--script", "script_path", required=True,
              type=click.Path(exists=True))
@click.option("--connect", required=True, help="Platform address host:port.")
@click.option("--net-profile", default="edge", show_default=True)
@click.option("--profiles", "profiles_path", type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["edge", "local"]), default="edge",
              show_default=True)
@click.option("--slowdown", type=float, default=cs.DEFAULT_SLOWDOWN,
              show_default=True, help="Local-mode compute slowdown factor.")
@click.option("--model", "model_path", type=click.Path(exists=True),
              help="Face model for local-mode recognition.")
@click.option("--user", default="user", show_default=True)
@click.option("--transcript", "transcript_path", type=click.Path(),
              help="Write the transcript here.")
@seed_option
def client(script_path, connect, net_profile, profiles_path, mode, slowdown,
           model_path, user, transcript_path, seed) -> None:
    """Run a scenario script against a live platform over TCP (wall clock)."""
    from .transport import TcpClient, TransportError, run_socket_scenario

    profile = _resolve_profile(net_profile, profiles_path)
    script = cs.load_script(script_path)
    model = fr.load_model(model_path) if model_path else None
    state = cs.ClientState(user_id=user, mode=mode, compute_slowdown=slowdown)
    try:
        tcp = TcpClient(_parse_addr(connect), profile, user_id=user, seed=seed)
    except OSError as exc:
        raise click.ClickException(f"connect: {exc}") from None
    try:
        transcript = run_socket_scenario(script, tcp, state=state, model=model,
                                         check_assertions=False)
    except TransportError as exc:
        raise click.ClickException(str(exc)) from None
    finally:
        tcp.close()
    _finish_scenario(transcript, script, transcript_path)


@main.command()
@click.option("--script", "script_path", required=True,
              type=click.Path(exists=True))
@click.option("--rules", "rules_path", required=True,
              type=click.Path(exists=True))
@click.option("--map", "map_path", type=click.Path(exists=True))
@click.option("--model", "model_path", type=click.Path(exists=True))
@click.option("--net-profile", default="edge", show_default=True)
@click.option("--control-profile", default=None,
              help="Control-channel profile (defaults to --net-profile).")
@click.option("--profiles", "profiles_path", type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["edge", "local"]), default="edge",
              show_default=True)
@click.option("--slowdown", type=float, default=cs.DEFAULT_SLOWDOWN,
              show_default=True)
@click.option("--user", default="user", show_default=True)
@click.option("--transcript", "transcript_path", type=click.Path())
@seed_option
def scenario(script_path, rules_path, map_path, model_path, net_profile,
             control_profile, profiles_path, mode, slowdown, user,
             transcript_path, seed) -> None:
    """Run a scenario in-process on the virtual clock (exact, reproducible)."""
    data_profile = _resolve_profile(net_profile, profiles_path)
    ctrl_profile = _resolve_profile(control_profile or net_profile,
                                    profiles_path)
    platform = _build_platform(rules_path, map_path, model_path,
                               measure_time=False)
    script = cs.load_script(script_path)
    model = fr.load_model(model_path) if model_path else None
    state = cs.ClientState(user_id=user, mode=mode, compute_slowdown=slowdown)
    transcript = cs.run_scenario(
        script, platform,
        {"control": ctrl_profile, "data": data_profile},
        seed=seed, state=state, model=model, check_assertions=False)
    _finish_scenario(transcript, script, transcript_path)


def _finish_scenario(transcript, script, transcript_path) -> None:
    if transcript_path:
        with open(transcript_path, "w", encoding="utf-8") as fh:
            fh.write(transcript.to_text())
    click.echo(f"{len(transcript.entries)} envelopes, "
               f"{len(transcript.recog_results)} recognition results, "
               f"arrived={'yes' if transcript.arrived_at_ms is not None else 'no'}, "
               f"errors={len(transcript.errors)}")
    failed = [r for r in transcript.assertion_results if not r[1]]
    for cond, ok, detail in transcript.assertion_results:
        click.echo(f"assert {cond}: {'pass' if ok else 'FAIL (' + detail + ')'}")
    if failed:
        sys.exit(EXIT_ASSERTION)


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

@main.group()
def bench() -> None:
    """Latency, throughput, and recognition benchmarks."""


def _echo_summary(title: str, values, unit: str = "ms") -> bench_mod.SummaryStats:
    stats = bench_mod.summarize(values)
    click.echo(bench_mod.format_summary_table(title, stats, unit))
    return stats


@bench.command("latency")
@click.option("--net-profile", default="edge", show_default=True)
@click.option("--profiles", "profiles_path", type=click.Path(exists=True))
@click.option("--n", "n_probes", type=int, default=20, show_default=True)
@click.option("--size", type=int, default=64, show_default=True,
              help="Echo payload bytes.")
@click.option("--csv", "csv_path", type=click.Path())
@click.option("--clock", type=click.Choice(["virtual", "real"]),
              default="virtual", show_default=True)
@click.option("--check", is_flag=True,
              help="Also run the cloud profile and fail unless edge is faster.")
@seed_option
def bench_latency_cmd(net_profile, profiles_path, n_probes, size, csv_path,
                      clock, check, seed) -> None:
    """Sequential application-level echo probes."""
    profile = _resolve_profile(net_profile, profiles_path)
    samples = bench_mod.bench_latency(profile, n_probes, size, seed, clock)
    if csv_path:
        bench_mod.write_latency_csv(samples, csv_path)
    stats = _echo_summary(f"latency {profile.name} ({clock})",
                          [s.rtt_ms for s in samples])
    if check:
        cloud = _resolve_profile("cloud", profiles_path)
        cloud_stats = bench_mod.summarize(
            [s.rtt_ms for s in bench_mod.bench_latency(cloud, n_probes, size,
                                                       seed, clock)])
        click.echo(f"edge mean {stats.mean:.3f} ms vs cloud mean "
                   f"{cloud_stats.mean:.3f} ms")
        if not stats.mean < cloud_stats.mean:
            click.echo("ordering FAILED: edge is not faster than cloud")
            sys.exit(EXIT_ASSERTION)


@bench.command("throughput")
@click.option("--net-profile", default="edge", show_default=True)
@click.option("--profiles", "profiles_path", type=click.Path(exists=True))
@click.option("--size", type=int, default=1_000_000, show_default=True,
              help="Total upload bytes.")
@click.option("--chunk", type=int, default=65536, show_default=True)
@click.option("--csv", "csv_path", type=click.Path())
@click.option("--clock", type=click.Choice(["virtual", "real"]),
              default="virtual", show_default=True)
@click.option("--check", is_flag=True,
              help="Also run the cloud profile and fail unless edge is faster.")
@seed_option
def bench_throughput_cmd(net_profile, profiles_path, size, chunk, csv_path,
                         clock, check, seed) -> None:
    """Chunked upload clocked to the final acknowledgment."""
    profile = _resolve_profile(net_profile, profiles_path)
    try:
        sample = bench_mod.bench_throughput(profile, size, chunk, seed, clock)
    except bench_mod.BenchError as exc:
        raise click.ClickException(str(exc)) from None
    if csv_path:
        bench_mod.write_throughput_csv([sample], csv_path)
    click.echo(f"throughput {profile.name} ({clock}): {sample.bytes} bytes in "
               f"{sample.elapsed_ms:.3f} ms = {sample.rate_Bps / 1e6:.3f} MB/s")
    if check:
        cloud = _resolve_profile("cloud", profiles_path)
        cloud_sample = bench_mod.bench_throughput(cloud, size, chunk, seed, clock)
        click.echo(f"edge {sample.rate_Bps / 1e6:.3f} MB/s vs cloud "
                   f"{cloud_sample.rate_Bps / 1e6:.3f} MB/s")
        if not sample.rate_Bps > cloud_sample.rate_Bps:
            click.echo("ordering FAILED: edge throughput does not beat cloud")
            sys.exit(EXIT_ASSERTION)


@bench.command("recognition")
@click.option("--net-profile", default="stream", show_default=True,
              help="Link profile for edge mode (stream is the calibrated one).")
@click.option("--profiles", "profiles_path", type=click.Path(exists=True))
@click.option("--n", "n_frames", type=int, default=20, show_default=True)
@click.option("--size", type=int, default=384, show_default=True,
              help="Probe frame side length in pixels.")
@click.option("--mode", type=click.Choice(["edge", "local"]), default="edge",
              show_default=True)
@click.option("--slowdown", type=float, default=10.0, show_default=True)
@click.option("--gallery", "gallery_dir", type=click.Path(exists=True),
              help="Gallery dir for probe frames; default is the standard "
                   "synthetic set.")
@click.option("--model", "model_path", type=click.Path(exists=True),
              help="Pre-trained model (defaults to training on the gallery).")
@click.option("--csv", "csv_path", type=click.Path())
@click.option("--check", is_flag=True,
              help="Run both modes and fail unless edge total beats local.")
@seed_option
def bench_recognition_cmd(net_profile, profiles_path, n_frames, size, mode,
                          slowdown, gallery_dir, model_path, csv_path, check,
                          seed) -> None:
    """Per-frame recognition timing, edge (offloaded) or local (slowed)."""
    profile = _resolve_profile(net_profile, profiles_path)
    try:
        gallery = (fr.load_gallery(gallery_dir) if gallery_dir
                   else fr.make_synthetic_gallery())
        model = (fr.load_model(model_path) if model_path
                 else fr.train(gallery, k=10))
    except fr.FaceRecError as exc:
        raise click.ClickException(str(exc)) from None
    frames = bench_mod.make_bench_frames(gallery, n_frames, size, seed)
    samples = bench_mod.bench_recognition(model, frames, mode, profile,
                                          slowdown, seed)
    if csv_path:
        bench_mod.write_recog_csv(samples, csv_path)
    _echo_summary(f"recognition {mode} ({profile.name})",
                  [s.total_ms for s in samples])
    if check:
        other = "local" if mode == "edge" else "edge"
        other_samples = bench_mod.bench_recognition(model, frames, other,
                                                    profile, slowdown, seed)
        edge_mean = bench_mod.summarize(
            [s.total_ms for s in (samples if mode == "edge" else other_samples)]).mean
        local_mean = bench_mod.summarize(
            [s.total_ms for s in (samples if mode == "local" else other_samples)]).mean
        click.echo(f"edge mean {edge_mean:.3f} ms vs local mean "
                   f"{local_mean:.3f} ms (slowdown {slowdown:g})")
        if not edge_mean < local_mean:
            click.echo("ordering FAILED: edge total does not beat local")
            sys.exit(EXIT_ASSERTION)


# ---------------------------------------------------------------------------
# generators and the model trainer
# ---------------------------------------------------------------------------

@main.command()
@click.option("--grid", required=True, help="Grid size as WxH, e.g. 4x3.")
@click.option("--spacing", type=float, default=5.0, show_default=True,
              help="Node spacing in meters.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Write map.txt and destination images here.")
@seed_option
def mapgen(grid, spacing, out_dir, seed) -> None:
    """Generate a grid map with random connectivity-preserving deletions."""
    try:
        cols, rows = (int(v) for v in grid.lower().split("x"))
    except ValueError:
        raise click.ClickException("--grid must look like 4x3") from None
    graph = nav.generate_grid_map(cols, rows, spacing, seed)
    corners = [f"r0c0", f"r0c{cols - 1}", f"r{rows - 1}c0",
               f"r{rows - 1}c{cols - 1}"]
    names = ["entrance", "lab", "storage", "meeting-room"]
    for node_id, name in zip(corners, names):
        graph.add_destination(node_id,
                              nav.DestinationInfo(name, nav.make_info_image(name)))
    dest_paths = {node_id: f"dest_{node_id}.pgm" for node_id in graph.destinations}
    text = nav.map_to_text(graph, dest_paths)
    if out_dir is None:
        click.echo(text, nl=False)
        return
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "map.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    for node_id, info in graph.destinations.items():
        write_pgm(info.image, os.path.join(out_dir, dest_paths[node_id]))
    click.echo(f"wrote {out_dir}/map.txt with {len(graph.nodes)} nodes, "
               f"{len(graph.destinations)} destinations")


@main.command()
@click.option("--identities", type=int, default=10, show_default=True)
@click.option("--per-id", "per_id", type=int, default=5, show_default=True)
@click.option("--size", default="32x32", show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@seed_option
def facegen(identities, per_id, size, out_dir, seed) -> None:
    """Generate the deterministic synthetic face gallery."""
    try:
        w, h = (int(v) for v in size.lower().split("x"))
    except ValueError:
        raise click.ClickException("--size must look like 32x32") from None
    gallery = fr.make_synthetic_gallery(identities, per_id, w, h, seed)
    fr.save_gallery(gallery, out_dir)
    click.echo(f"wrote {len(gallery)} images ({identities} identities) "
               f"under {out_dir}")


@main.group()
def facedb() -> None:
    """Face model database operations."""


@facedb.command("train")
@click.option("--gallery", "gallery_dir", required=True,
              type=click.Path(exists=True))
@click.option("--k", type=int, default=10, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def facedb_train(gallery_dir, k, out_path) -> None:
    """Train an eigenface model from a PGM gallery directory."""
    try:
        gallery = fr.load_gallery(gallery_dir)
        model = fr.train(gallery, k)
    except fr.FaceRecError as exc:
        raise click.ClickException(str(exc)) from None
    fr.save_model(model, out_path)
    gallery_bytes = sum(
        os.path.getsize(os.path.join(root, f))
        for root, _dirs, files in os.walk(gallery_dir) for f in files)
    model_bytes = os.path.getsize(out_path)
    labels = sorted({g.label for g in gallery})
    click.echo(f"gallery: {len(gallery)} images, {len(labels)} identities, "
               f"{gallery_bytes} bytes on disk")
    click.echo(f"model:   k={model.k}, theta_face={model.theta_face:.4f}, "
               f"theta_dffs={model.theta_dffs:.4f}, {model_bytes} bytes")
    click.echo(f"offload saves the client {gallery_bytes + model_bytes} bytes "
               f"of storage")


@facedb.command("info")
@click.argument("model_path", type=click.Path(exists=True))
def facedb_info(model_path) -> None:
    """Print a stored model's parameters."""
    model = fr.load_model(model_path)
    click.echo(f"{model.width}x{model.height}, trained on {model.n_train} "
               f"images, k={model.k}")
    click.echo(f"classes: {', '.join(sorted(model.class_centers))}")
    click.echo(f"theta_face={model.theta_face:.4f} "
               f"theta_dffs={model.theta_dffs:.4f}")
    click.echo(f"top eigenvalues: "
               f"{', '.join(f'{v:.4f}' for v in model.eigenvalues[:5])}")


if __name__ == "__main__":
    main()
