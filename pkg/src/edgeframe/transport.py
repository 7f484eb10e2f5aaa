"""Real-clock transport: in-process delayed links and the TCP server/client.

RealLinkPair realizes the emulated link's delivery times against the wall
clock with per-direction sender threads, so real-mode benchmark numbers are
honest measurements of the same arithmetic the virtual clock computes.

The TCP flavor runs the platform behind a listening socket.  A client opens
two connections (control and data), binds each with HELLO, and both sides
delay their outbound frames through their own link model, which yields a
full emulated round trip over real sockets.
"""

from __future__ import annotations

import queue
import socket
import threading
import time
from dataclasses import dataclass

from . import platform_core as pc
from .netem import DIR_DOWN, DIR_UP, EmulatedLink, NetProfile
from .wire import (
    CHANNEL_CONTROL,
    CHANNEL_DATA,
    FrameDecoder,
    MessageEnvelope,
    MsgType,
    WireError,
    encode_frame,
    pack_hello,
    unpack_hello,
    unpack_hello_ack,
    unpack_upload_ack,
)


class TransportError(Exception):
    pass


def _now_ms(t0: float) -> float:
    return (time.perf_counter() - t0) * 1000.0


class _DelayedSender(threading.Thread):
    """Delivers queued payloads at their due times (FIFO per direction)."""

    def __init__(self, deliver, t0: float) -> None:
        super().__init__(daemon=True)
        self._deliver = deliver
        self._t0 = t0
        self._q: queue.Queue = queue.Queue()
        self._closed = False
        self.start()

    def push(self, due_ms: float, item) -> None:
        self._q.put((due_ms, item))

    def close(self) -> None:
        self._closed = True
        self._q.put(None)

    def run(self) -> None:
        while True:
            entry = self._q.get()
            if entry is None:
                return
            due_ms, item = entry
            while True:
                lag = (due_ms - _now_ms(self._t0)) / 1000.0
                if lag <= 0:
                    break
                time.sleep(lag)
            if self._closed:
                return
            try:
                self._deliver(item)
            except Exception:
                return


class RealLinkPair:
    """Two endpoints joined by one emulated link, timed on the wall clock.

    left.send() delivers to on_right after the link's computed delay;
    right.send() delivers to on_left.  Callbacks run on sender threads.
    """

    def __init__(self, profile: NetProfile, seed: int = 0,
                 on_left=None, on_right=None) -> None:
        self.link = EmulatedLink(profile, seed=seed, clock_mode="real")
        self.t0 = time.perf_counter()
        self.on_left = on_left or (lambda item: None)
        self.on_right = on_right or (lambda item: None)
        self._up = _DelayedSender(lambda item: self.on_right(item), self.t0)
        self._down = _DelayedSender(lambda item: self.on_left(item), self.t0)

    def now_ms(self) -> float:
        return _now_ms(self.t0)

    def send_left(self, raw: bytes) -> float:
        """Send from the left endpoint; returns the scheduled delivery time."""
        due = self.link.transmit(len(raw), self.now_ms(), DIR_UP)
        self._up.push(due, raw)
        return due

    def send_right(self, raw: bytes) -> float:
        due = self.link.transmit(len(raw), self.now_ms(), DIR_DOWN)
        self._down.push(due, raw)
        return due

    def close(self) -> None:
        self._up.close()
        self._down.close()


# ---------------------------------------------------------------------------
# Real-clock benches over an in-process pair
# ---------------------------------------------------------------------------

def real_bench_latency(profile: NetProfile, n_probes: int, payload_bytes: int,
                       seed: int = 0):
    from .bench import LatencySample
    from .platform_core import Platform

    platform = Platform([], {})
    session = platform.open_session("bench")
    decoder_up = FrameDecoder()
    decoder_down = FrameDecoder()
    responses: queue.Queue = queue.Queue()
    pair = RealLinkPair(profile, seed=seed)

    def on_server(raw: bytes) -> None:
        for env in decoder_up.feed(raw):
            control, data = platform.handle_envelope(session, "data", env,
                                                     pair.now_ms())
            for reply in data + control:
                pair.send_right(encode_frame(reply))

    def on_client(raw: bytes) -> None:
        for env in decoder_down.feed(raw):
            responses.put((pair.now_ms(), env))

    pair.on_right = on_server
    pair.on_left = on_client
    samples = []
    payload = bytes(payload_bytes)
    try:
        for i in range(1, n_probes + 1):
            env = MessageEnvelope(MsgType.ECHO_REQ, session.session_id, i, payload)
            sent_at = pair.now_ms()
            pair.send_left(encode_frame(env))
            received_at, _resp = responses.get(timeout=30.0)
            samples.append(LatencySample(i, received_at - sent_at))
    except queue.Empty:
        raise TransportError(f"echo response timed out after {len(samples)} "
                             f"samples") from None
    finally:
        pair.close()
    return samples


def real_bench_throughput(profile: NetProfile, total_bytes: int,
                          chunk_bytes: int, seed: int = 0):
    from .bench import ServerRejected, ThroughputSample
    from .platform_core import Platform
    from .wire import ErrorCode, pack_upload_begin, unpack_error

    platform = Platform([], {})
    session = platform.open_session("bench")
    decoder_up = FrameDecoder()
    decoder_down = FrameDecoder()
    acks: queue.Queue = queue.Queue()
    pair = RealLinkPair(profile, seed=seed)

    def on_server(raw: bytes) -> None:
        for env in decoder_up.feed(raw):
            control, data = platform.handle_envelope(session, "data", env,
                                                     pair.now_ms())
            for reply in data + control:
                pair.send_right(encode_frame(reply))

    def on_client(raw: bytes) -> None:
        for env in decoder_down.feed(raw):
            acks.put((pair.now_ms(), env))

    pair.on_right = on_server
    pair.on_left = on_client
    try:
        start = pair.now_ms()
        seq = 1
        pair.send_left(encode_frame(MessageEnvelope(
            MsgType.UPLOAD_BEGIN, session.session_id, seq,
            pack_upload_begin(total_bytes))))
        remaining = total_bytes
        while remaining > 0:
            size = min(chunk_bytes, remaining)
            remaining -= size
            seq += 1
            pair.send_left(encode_frame(MessageEnvelope(
                MsgType.UPLOAD_CHUNK, session.session_id, seq, bytes(size))))
        seq += 1
        pair.send_left(encode_frame(MessageEnvelope(
            MsgType.UPLOAD_END, session.session_id, seq, b"")))
        deadline = 120.0
        received_at, env = acks.get(timeout=deadline)
        if env.msg_type == MsgType.ERROR:
            code, message = unpack_error(env.payload)
            if code == ErrorCode.SERVER_REJECTED:
                raise ServerRejected(message)
            raise TransportError(message)
        if unpack_upload_ack(env.payload) != total_bytes:
            raise TransportError("byte count mismatch in UPLOAD_ACK")
        elapsed = received_at - start
        return ThroughputSample(total_bytes, elapsed,
                                total_bytes / elapsed * 1000.0)
    except queue.Empty:
        raise TransportError("upload ack timed out") from None
    finally:
        pair.close()


# ---------------------------------------------------------------------------
# TCP platform server
# ---------------------------------------------------------------------------

@dataclass
class _Conn:
    sock: socket.socket
    sender: _DelayedSender
    link: EmulatedLink
    channel: str | None = None
    session: pc.Session | None = None


class PlatformTcpServer:
    """Serves the platform on a listening socket; one thread per connection.

    Outbound frames are delayed through the server-side link model, so a
    client applying the same profile on its side sees the full round trip.
    """

    def __init__(self, platform: pc.Platform, profile: NetProfile,
                 host: str = "127.0.0.1", port: int = 0, seed: int = 0) -> None:
        self.platform = platform
        self.profile = profile
        self.seed = seed
        self._t0 = time.perf_counter()
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()
        self._conns: list[_Conn] = []
        self._lock = threading.Lock()
        self._closed = False
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()

    def now_ms(self) -> float:
        return _now_ms(self._t0)

    def _accept_loop(self) -> None:
        while not self._closed:
            try:
                sock, _addr = self._listener.accept()
            except OSError:
                return
            link = EmulatedLink(self.profile, seed=self.seed, clock_mode="real")
            conn = _Conn(sock, _DelayedSender(self._make_writer(sock), self._t0),
                         link)
            self._conns.append(conn)
            threading.Thread(target=self._serve_conn, args=(conn,),
                             daemon=True).start()

    @staticmethod
    def _make_writer(sock: socket.socket):
        def write(raw: bytes) -> None:
            try:
                sock.sendall(raw)
            except OSError:
                pass
        return write

    def _send(self, conn: _Conn, env: MessageEnvelope) -> None:
        raw = encode_frame(env)
        due = conn.link.transmit(len(raw), self.now_ms(), DIR_DOWN)
        conn.sender.push(due, raw)

    def _serve_conn(self, conn: _Conn) -> None:
        decoder = FrameDecoder()
        try:
            while True:
                data = conn.sock.recv(65536)
                if not data:
                    return
                for env in decoder.feed(data):
                    self._dispatch(conn, env)
        except (OSError, WireError):
            return  # framing errors are fatal to the connection
        finally:
            conn.sender.close()
            try:
                conn.sock.close()
            except OSError:
                pass

    def _dispatch(self, conn: _Conn, env: MessageEnvelope) -> None:
        if env.msg_type == MsgType.HELLO:
            kind, _sid, _user = unpack_hello(env.payload)
            channel = "control" if kind == CHANNEL_CONTROL else "data"
            with self._lock:
                session, reply = self.platform.handle_hello(channel, env)
                conn.channel = channel
                conn.session = session
                if channel == "control":
                    session.control_channel = conn
                else:
                    session.data_channel = conn
            self._send(conn, reply)
            return
        if conn.session is None or conn.channel is None:
            return  # messages before HELLO are dropped
        with self._lock:
            control_out, data_out = self.platform.handle_envelope(
                conn.session, conn.channel, env, self.now_ms())
            control_conn = conn.session.control_channel or conn
            data_conn = conn.session.data_channel or conn
        for reply in control_out:
            self._send(control_conn, reply)
        for reply in data_out:
            self._send(data_conn, reply)

    def close(self) -> None:
        self._closed = True
        try:
            self._listener.close()
        except OSError:
            pass
        for conn in self._conns:
            conn.sender.close()
            try:
                conn.sock.close()
            except OSError:
                pass


def run_socket_scenario(script, client: "TcpClient", state=None, model=None,
                        check_assertions: bool = True):
    """Drive a scenario over TCP in real time; mirrors the virtual runner.

    Walking happens at wall-clock speed, so navigation scripts take as long
    as the simulated walk would.  Returns the transcript; raises
    client_sim.AssertionFailed on failed script assertions.
    """
    import os
    import queue as queue_mod
    from dataclasses import replace

    from . import client_sim as cs
    from . import facerec as fr
    from . import navigation as nav_mod
    from .wire import FramePayload, encode_frame as enc, pack_frame_payload

    state = state or cs.ClientState()
    transcript = cs.Transcript()
    active_service: str | None = None
    pending_dest: str | None = None
    dest_requested = False
    instruction = None
    frames_sent = 0
    frame_seq = 0
    stream_queue: list[tuple[float, object]] = []  # (due_ms, GrayImage)
    events = list(script.events)
    stop_at: float | None = None
    hard_stop = False

    def send(channel: str, msg_type: MsgType, payload: bytes) -> None:
        env = client.send(channel, msg_type, payload)
        transcript.record(client.now_ms(), "sent",
                          "C" if channel == "control" else "D", env, enc(env))

    def select_dest(dest: str) -> None:
        nonlocal dest_requested
        dest_requested = True
        send("data", MsgType.NAV_SELECT_DEST, nav_mod.pack_select_dest(dest))

    start = client.now_ms()
    while True:
        now = client.now_ms()
        # inbox
        while True:
            try:
                t_recv, channel, env = client.inbox.get_nowait()
            except queue_mod.Empty:
                break
            transcript.record(t_recv, "recv",
                              "C" if channel == "control" else "D", env,
                              enc(env))
            t = env.msg_type
            if t == MsgType.SERVICE_ACTIVATE:
                active_service = env.payload.decode("utf-8")
                if active_service == "navigation" and pending_dest:
                    select_dest(pending_dest)
            elif t == MsgType.SERVICE_DEACTIVATE:
                active_service = None
                instruction = None
            elif t == MsgType.NAV_INSTRUCTION:
                instruction = nav_mod.unpack_instruction(env.payload)
            elif t == MsgType.NAV_ARRIVED:
                transcript.arrived_at_ms = t_recv
                transcript.arrived_dest = nav_mod.unpack_arrived(env.payload)
                instruction = None
            elif t == MsgType.NAV_DEST_INFO:
                transcript.dest_info = nav_mod.unpack_dest_info(env.payload)
            elif t == MsgType.RECOG_RESULT:
                transcript.recog_results.append(
                    fr.unpack_recog_result(env.payload))
            elif t == MsgType.ACTUATOR_CMD:
                transcript.actuator_commands.append(
                    pc.unpack_actuator(env.payload))
            elif t == MsgType.ERROR:
                from .wire import unpack_error
                code, message = unpack_error(env.payload)
                transcript.errors.append((int(code), message))
        # script events
        while events and events[0].t_ms <= now - start:
            event = events.pop(0)
            if event.kind == "pos":
                state = replace(state, position=event.value)
            elif event.kind == "zone":
                state = replace(state, zone_id=event.value)
            elif event.kind == "lux":
                state = replace(state, illuminance_lux=event.value)
            elif event.kind == "dest":
                pending_dest = event.value
                if active_service == "navigation":
                    select_dest(event.value)
            elif event.kind == "stream":
                path, fps, dur = event.value
                frames = cs.load_stream_frames(
                    os.path.join(script.base_dir, path))
                count = int(round(dur * fps / 1000.0))
                gap = 1000.0 / fps
                for i in range(count):
                    stream_queue.append((now + i * gap, frames[i % len(frames)]))
            elif event.kind == "stop":
                hard_stop = True
        # due frames
        while stream_queue and stream_queue[0][0] <= now:
            _due, image = stream_queue.pop(0)
            frame_seq += 1
            frame = FramePayload(frame_seq, int(now), image.width,
                                 image.height, image.pixels)
            if state.mode == "local":
                if model is None:
                    raise TransportError("local mode needs a face model")
                result, _sim = cs.run_local_recognition(
                    frame, model, state.compute_slowdown)
                transcript.recog_results.append(result)
            else:
                send("data", MsgType.FRAME, pack_frame_payload(frame))
            frames_sent += 1
        if hard_stop:
            break
        # walk + context
        state, context = cs.step(state, instruction, state.tick_ms)
        send("control", MsgType.CONTEXT_UPDATE, pc.pack_context(context))
        # done?
        if stop_at is None and not events and not stream_queue:
            dest_settled = (not dest_requested
                            or transcript.arrived_at_ms is not None
                            or transcript.errors)
            frames_settled = (frames_sent <= len(transcript.recog_results)
                              or transcript.errors)
            if dest_settled and frames_settled:
                stop_at = now + 500.0
        if stop_at is not None and now >= stop_at:
            break
        if now - start > 600_000.0:
            break
        time.sleep(state.tick_ms / 1000.0)

    transcript.final_active = active_service
    transcript.finished_at_ms = client.now_ms()
    failures = transcript.evaluate(script.assertions)
    if failures and check_assertions:
        from .client_sim import AssertionFailed
        raise AssertionFailed(failures, transcript)
    return transcript


class TcpClient:
    """Client side: two delayed connections bound to one platform session."""

    def __init__(self, address, profile: NetProfile, user_id: str = "user",
                 seed: int = 0, timeout_s: float = 10.0) -> None:
        self._t0 = time.perf_counter()
        self.profile = profile
        self.user_id = user_id
        self.inbox: queue.Queue = queue.Queue()
        self.session_id = 0
        self._links = {
            "control": EmulatedLink(profile, seed=seed * 2 + 1, clock_mode="real"),
            "data": EmulatedLink(profile, seed=seed * 2 + 2, clock_mode="real"),
        }
        self._socks = {}
        self._senders = {}
        self._seq = {"control": 0, "data": 0}
        self._acks: queue.Queue = queue.Queue()
        for channel in ("control", "data"):
            sock = socket.create_connection(address, timeout=timeout_s)
            sock.settimeout(None)
            self._socks[channel] = sock
            self._senders[channel] = _DelayedSender(
                self._make_writer(sock), self._t0)
            threading.Thread(target=self._read_loop, args=(channel,),
                             daemon=True).start()
        self._handshake(timeout_s)

    @staticmethod
    def _make_writer(sock: socket.socket):
        def write(raw: bytes) -> None:
            try:
                sock.sendall(raw)
            except OSError:
                pass
        return write

    def now_ms(self) -> float:
        return _now_ms(self._t0)

    def _read_loop(self, channel: str) -> None:
        decoder = FrameDecoder()
        sock = self._socks[channel]
        try:
            while True:
                data = sock.recv(65536)
                if not data:
                    return
                for env in decoder.feed(data):
                    if env.msg_type == MsgType.HELLO_ACK:
                        self._acks.put((channel, env))
                    else:
                        self.inbox.put((self.now_ms(), channel, env))
        except (OSError, WireError):
            return

    def _handshake(self, timeout_s: float) -> None:
        self.send("control", MsgType.HELLO,
                  pack_hello(CHANNEL_CONTROL, 0, self.user_id))
        try:
            _ch, ack = self._acks.get(timeout=timeout_s)
            self.session_id = unpack_hello_ack(ack.payload)
            self.send("data", MsgType.HELLO,
                      pack_hello(CHANNEL_DATA, self.session_id, self.user_id))
            self._acks.get(timeout=timeout_s)
        except queue.Empty:
            raise TransportError("handshake timed out") from None

    def send(self, channel: str, msg_type: MsgType, payload: bytes) -> MessageEnvelope:
        self._seq[channel] += 1
        env = MessageEnvelope(msg_type, self.session_id, self._seq[channel],
                              payload)
        raw = encode_frame(env)
        due = self._links[channel].transmit(len(raw), self.now_ms(), DIR_UP)
        self._senders[channel].push(due, raw)
        return env

    def recv(self, timeout_s: float = 10.0) -> tuple[float, str, MessageEnvelope]:
        try:
            return self.inbox.get(timeout=timeout_s)
        except queue.Empty:
            raise TransportError("receive timed out") from None

    def close(self) -> None:
        for sender in self._senders.values():
            sender.close()
        for sock in self._socks.values():
            try:
                sock.close()
            except OSError:
                pass
