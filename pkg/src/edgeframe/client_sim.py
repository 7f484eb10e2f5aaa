"""The simulated AR glass: context emission, guided walking, frame streaming.

A scenario script drives the client on a virtual clock against an in-process
platform, with both channels crossing emulated links.  The client is thin:
it reports context, walks toward whatever instruction the platform last
sent, streams fixture frames, and records everything it sees in a
transcript.  In local mode the recognition pipeline runs client-side,
scaled by the device slowdown factor; the result bytes are identical to the
edge path, only the timing differs.

Script format, one event per line ('#' starts a comment):

    t=<ms> pos=<x>,<y>,<z>
    t=<ms> zone=<id>          (zone=- clears the zone)
    t=<ms> lux=<f>
    t=<ms> dest=<node_id>
    t=<ms> stream <pgm-file-or-dir> fps=<n> for=<ms>
    t=<ms> stop
    assert <condition>

Assertion conditions: arrived | arrived_before=<ms> | dest_info |
recog_count=<n> | recog_count>=<n> | recog_labels=<a,b,...> |
actuator=<device>:<action> | active=<service|none> | no_errors
"""

from __future__ import annotations

import math
import os
import time
import zlib
from dataclasses import dataclass, field, replace

from . import facerec as fr
from . import navigation as nav
from . import platform_core as pc
from .netem import DIR_DOWN, DIR_UP, EmulatedLink, NetProfile, VirtualClock
from .pgm import GrayImage, read_pgm
from .wire import (
    CHANNEL_CONTROL,
    CHANNEL_DATA,
    FramePayload,
    MessageEnvelope,
    MsgType,
    encode_frame,
    pack_frame_payload,
    pack_hello,
    unpack_error,
    unpack_hello_ack,
)

DEFAULT_SPEED_MPS = 1.2
DEFAULT_TICK_MS = 100
DEFAULT_SLOWDOWN = 10.0
SCENARIO_CAP_MS = 600_000.0
DRAIN_MS = 500.0


class ScenarioError(Exception):
    pass


class TransportError(ScenarioError):
    pass


class AssertionFailed(ScenarioError):
    """Raised after a run when script assertions fail; carries all failures."""

    def __init__(self, failures: list[str], transcript: "Transcript") -> None:
        super().__init__(failures[0])
        self.failures = failures
        self.transcript = transcript


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClientState:
    user_id: str = "user"
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    heading_deg: float = 0.0
    speed_mps: float = DEFAULT_SPEED_MPS
    tick_ms: int = DEFAULT_TICK_MS
    mode: str = "edge"
    compute_slowdown: float = DEFAULT_SLOWDOWN
    clock_ms: float = 0.0
    zone_id: str | None = None
    illuminance_lux: float | None = None
    # seeded measurement noise on reported positions (true position is exact)
    pos_noise_sigma: float = 0.0
    noise_seed: int = 0

    def __post_init__(self) -> None:
        if self.speed_mps < 0:
            raise ValueError("speed must be >= 0")
        if self.compute_slowdown < 1.0:
            raise ValueError("compute slowdown must be >= 1")
        if self.mode not in ("edge", "local"):
            raise ValueError(f"mode {self.mode!r}")
        if self.pos_noise_sigma < 0:
            raise ValueError("position noise sigma must be >= 0")


def step(state: ClientState, instruction: nav.MoveInstruction | None,
         dt_ms: float) -> tuple[ClientState, pc.ContextRecord]:
    """Advance the walk by dt toward the instruction target (clamped), and
    emit the context snapshot for the new position."""
    if dt_ms <= 0:
        raise ValueError("dt_ms must be > 0")
    pos = state.position
    heading = state.heading_deg
    moved = 0.0
    if instruction is not None:
        target = instruction.target_position
        gap = math.dist(pos, target)
        if gap > 0.0:
            moved = min(state.speed_mps * dt_ms / 1000.0, gap)
            pos = (pos[0] + (target[0] - pos[0]) / gap * moved,
                   pos[1] + (target[1] - pos[1]) / gap * moved,
                   pos[2] + (target[2] - pos[2]) / gap * moved)
        heading = instruction.bearing_deg
    new_state = replace(state, position=pos, heading_deg=heading,
                        clock_ms=state.clock_ms + dt_ms)
    reported = pos
    if state.pos_noise_sigma > 0.0:
        import numpy as np

        # keyed by (seed, tick time) so replays of the same walk reproduce
        rng = np.random.default_rng(
            [state.noise_seed, int(round(new_state.clock_ms))])
        dx, dy, dz = rng.normal(0.0, state.pos_noise_sigma, 3)
        reported = (pos[0] + dx, pos[1] + dy, pos[2] + dz)
    context = pc.ContextRecord(
        user_id=state.user_id,
        timestamp_ms=int(round(new_state.clock_ms)),
        position=reported,
        heading_deg=heading,
        motion_state="walking" if moved > 0.0 else "still",
        illuminance_lux=state.illuminance_lux,
        zone_id=state.zone_id,
    )
    return new_state, context


def run_local_recognition(frame: FramePayload, model: fr.FaceModel,
                          slowdown: float = DEFAULT_SLOWDOWN
                          ) -> tuple[fr.RecognitionResult, float]:
    """On-device recognition: same pipeline, wall time scaled by slowdown."""
    if slowdown < 1.0:
        raise ValueError("slowdown must be >= 1")
    t0 = time.perf_counter()
    result = fr.recognize_frame(frame, model, measure_time=False)
    elapsed_ms = (time.perf_counter() - t0) * 1000.0
    return result, elapsed_ms * slowdown


# ---------------------------------------------------------------------------
# Scenario scripts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioEvent:
    t_ms: float
    kind: str   # pos | zone | lux | dest | stream | stop
    value: object = None


@dataclass(frozen=True)
class ScenarioScript:
    events: tuple[ScenarioEvent, ...] = ()
    assertions: tuple[str, ...] = ()
    base_dir: str = "."


def parse_script(text: str, base_dir: str = ".") -> ScenarioScript:
    events: list[ScenarioEvent] = []
    assertions: list[str] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("assert "):
            assertions.append(line[7:].strip())
            continue
        parts = line.split()
        if not parts[0].startswith("t="):
            raise ScenarioError(f"script line {lineno}: expected t=<ms>")
        t_ms = float(parts[0][2:])
        body = parts[1:]
        if not body:
            raise ScenarioError(f"script line {lineno}: event missing")
        head = body[0]
        if head.startswith("pos="):
            vals = [float(v) for v in head[4:].split(",")]
            if len(vals) != 3:
                raise ScenarioError(f"script line {lineno}: pos needs x,y,z")
            events.append(ScenarioEvent(t_ms, "pos", tuple(vals)))
        elif head.startswith("zone="):
            zone = head[5:]
            events.append(ScenarioEvent(t_ms, "zone",
                                        None if zone == "-" else zone))
        elif head.startswith("lux="):
            events.append(ScenarioEvent(t_ms, "lux", float(head[4:])))
        elif head.startswith("dest="):
            events.append(ScenarioEvent(t_ms, "dest", head[5:]))
        elif head == "stream":
            if len(body) != 4 or not body[2].startswith("fps=") \
                    or not body[3].startswith("for="):
                raise ScenarioError(
                    f"script line {lineno}: stream <path> fps=<n> for=<ms>")
            events.append(ScenarioEvent(t_ms, "stream",
                                        (body[1], int(body[2][4:]),
                                         float(body[3][4:]))))
        elif head == "stop":
            events.append(ScenarioEvent(t_ms, "stop"))
        else:
            raise ScenarioError(f"script line {lineno}: unknown event {head!r}")
    times = [e.t_ms for e in events]
    if times != sorted(times):
        raise ScenarioError("event times must be non-decreasing")
    return ScenarioScript(tuple(events), tuple(assertions), base_dir)


def load_script(path: str) -> ScenarioScript:
    with open(path, encoding="utf-8") as fh:
        return parse_script(fh.read(),
                            base_dir=os.path.dirname(os.path.abspath(path)))


def load_stream_frames(path: str) -> list[GrayImage]:
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.endswith(".pgm"))
        if not names:
            raise ScenarioError(f"no .pgm frames under {path}")
        return [read_pgm(os.path.join(path, n)) for n in names]
    return [read_pgm(path)]


# ---------------------------------------------------------------------------
# Transcript
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TranscriptEntry:
    t_ms: float
    direction: str  # sent | recv
    channel: str    # C | D
    msg_type: str
    session_id: int
    seq: int
    length: int
    crc32: int

    def line(self) -> str:
        return (f"t={self.t_ms:.3f} {self.direction} {self.channel} "
                f"{self.msg_type} session={self.session_id} seq={self.seq} "
                f"len={self.length} crc={self.crc32:08x}")


@dataclass
class Transcript:
    entries: list[TranscriptEntry] = field(default_factory=list)
    arrived_at_ms: float | None = None
    arrived_dest: str | None = None
    dest_info: nav.DestinationInfo | None = None
    recog_results: list[fr.RecognitionResult] = field(default_factory=list)
    actuator_commands: list[pc.ActuatorCommand] = field(default_factory=list)
    errors: list[tuple[int, str]] = field(default_factory=list)
    final_active: str | None = None
    finished_at_ms: float = 0.0
    assertion_results: list[tuple[str, bool, str]] = field(default_factory=list)

    def record(self, t_ms: float, direction: str, channel: str,
               envelope: MessageEnvelope, raw: bytes) -> None:
        self.entries.append(TranscriptEntry(
            t_ms, direction, channel, envelope.msg_type.name,
            envelope.session_id, envelope.seq, len(envelope.payload),
            zlib.crc32(raw) & 0xFFFFFFFF))

    def to_text(self) -> str:
        lines = [e.line() for e in self.entries]
        lines.append(f"finished t={self.finished_at_ms:.3f} "
                     f"active={self.final_active or 'none'}")
        for cond, ok, detail in self.assertion_results:
            lines.append(f"assert {cond}: {'pass' if ok else 'FAIL ' + detail}")
        return "\n".join(lines) + "\n"

    @property
    def recog_labels(self) -> list[str]:
        labels = {box.label for res in self.recog_results for box in res.boxes
                  if box.label is not None}
        return sorted(labels)

    def evaluate(self, assertions: tuple[str, ...]) -> list[str]:
        failures = []
        for cond in assertions:
            ok, detail = self._check(cond)
            self.assertion_results.append((cond, ok, detail))
            if not ok:
                failures.append(f"{cond}: {detail}")
        return failures

    def _check(self, cond: str) -> tuple[bool, str]:
        if cond == "arrived":
            return self.arrived_at_ms is not None, "never arrived"
        if cond.startswith("arrived_before="):
            limit = float(cond.split("=", 1)[1])
            if self.arrived_at_ms is None:
                return False, "never arrived"
            return self.arrived_at_ms < limit, f"arrived at {self.arrived_at_ms}"
        if cond == "dest_info":
            return self.dest_info is not None, "no destination info received"
        if cond.startswith("recog_count>="):
            want = int(cond.split(">=", 1)[1])
            return len(self.recog_results) >= want, \
                f"got {len(self.recog_results)}"
        if cond.startswith("recog_count="):
            want = int(cond.split("=", 1)[1])
            return len(self.recog_results) == want, \
                f"got {len(self.recog_results)}"
        if cond.startswith("recog_labels="):
            want = sorted(v for v in cond.split("=", 1)[1].split(",") if v)
            return self.recog_labels == want, f"got {self.recog_labels}"
        if cond.startswith("actuator="):
            device, _, action = cond.split("=", 1)[1].partition(":")
            hit = any(c.device_id == device and c.action == action
                      for c in self.actuator_commands)
            return hit, f"got {[(c.device_id, c.action) for c in self.actuator_commands]}"
        if cond.startswith("active="):
            want = cond.split("=", 1)[1]
            got = self.final_active or "none"
            return got == want, f"got {got}"
        if cond == "no_errors":
            return not self.errors, f"errors: {self.errors}"
        return False, f"unknown assertion {cond!r}"


# ---------------------------------------------------------------------------
# The virtual-clock scenario runner
# ---------------------------------------------------------------------------

class VirtualScenarioRunner:
    """Runs one client against an in-process platform on a virtual clock."""

    def __init__(self, script: ScenarioScript, platform: pc.Platform,
                 profiles: dict[str, NetProfile], seed: int = 0,
                 state: ClientState | None = None,
                 model: fr.FaceModel | None = None) -> None:
        self.script = script
        self.platform = platform
        self.clock = VirtualClock()
        self.links = {
            "control": EmulatedLink(profiles["control"], seed=seed * 2 + 1),
            "data": EmulatedLink(profiles["data"], seed=seed * 2 + 2),
        }
        self.state = state or ClientState()
        self.model = model  # local-mode recognition only
        self.transcript = Transcript()
        self.session_id = 0
        self.session: pc.Session | None = None
        self.handshake_done = False
        self.active_service: str | None = None
        self.pending_dest: str | None = None
        self.dest_requested = False
        self.instruction: nav.MoveInstruction | None = None
        self.inbox: list[tuple[str, MessageEnvelope]] = []
        self.events = list(self.script.events)
        self.frames_pending = 0
        self.frames_sent = 0
        self.frame_seq = 0
        self.stop_at: float | None = None
        self.hard_stop = False
        self.stopped = False
        self._send_seq = {"control": 0, "data": 0}

    # -- plumbing ------------------------------------------------------------

    def _client_send(self, channel: str, msg_type: MsgType, payload: bytes) -> None:
        self._send_seq[channel] += 1
        env = MessageEnvelope(msg_type, self.session_id,
                              self._send_seq[channel], payload)
        raw = encode_frame(env)
        now = self.clock.now_ms
        self.transcript.record(now, "sent", "C" if channel == "control" else "D",
                               env, raw)
        delivery = self.links[channel].transmit(len(raw), now, DIR_UP)
        self.clock.schedule(delivery, lambda: self._platform_receive(channel, env))

    def _platform_receive(self, channel: str, env: MessageEnvelope) -> None:
        now = self.clock.now_ms
        if env.msg_type == MsgType.HELLO:
            session, reply = self.platform.handle_hello(channel, env)
            self.session = session
            self._platform_send(channel, reply)
            return
        if self.session is None:
            return
        control_out, data_out = self.platform.handle_envelope(
            self.session, channel, env, now)
        for reply in control_out:
            self._platform_send("control", reply)
        for reply in data_out:
            self._platform_send("data", reply)

    def _platform_send(self, channel: str, env: MessageEnvelope) -> None:
        raw = encode_frame(env)
        delivery = self.links[channel].transmit(len(raw), self.clock.now_ms,
                                                DIR_DOWN)
        self.clock.schedule(delivery, lambda: self._client_receive(channel, env,
                                                                   raw))

    def _client_receive(self, channel: str, env: MessageEnvelope,
                        raw: bytes) -> None:
        self.transcript.record(self.clock.now_ms, "recv",
                               "C" if channel == "control" else "D", env, raw)
        self.inbox.append((channel, env))

    # -- client behavior ------------------------------------------------------

    def _process_inbox(self) -> None:
        inbox, self.inbox = self.inbox, []
        for channel, env in inbox:
            t = env.msg_type
            if t == MsgType.HELLO_ACK:
                if self.session_id == 0:
                    self.session_id = unpack_hello_ack(env.payload)
                    self._client_send("data", MsgType.HELLO,
                                      pack_hello(CHANNEL_DATA, self.session_id,
                                                 self.state.user_id))
                else:
                    self.handshake_done = True
            elif t == MsgType.SERVICE_ACTIVATE:
                self.active_service = env.payload.decode("utf-8")
                if self.active_service == "navigation" and self.pending_dest:
                    self._select_dest(self.pending_dest)
            elif t == MsgType.SERVICE_DEACTIVATE:
                self.active_service = None
                self.instruction = None
            elif t == MsgType.NAV_INSTRUCTION:
                self.instruction = nav.unpack_instruction(env.payload)
            elif t == MsgType.NAV_ARRIVED:
                self.transcript.arrived_at_ms = self.clock.now_ms
                self.transcript.arrived_dest = nav.unpack_arrived(env.payload)
                self.instruction = None
            elif t == MsgType.NAV_DEST_INFO:
                self.transcript.dest_info = nav.unpack_dest_info(env.payload)
            elif t == MsgType.RECOG_RESULT:
                self.transcript.recog_results.append(
                    fr.unpack_recog_result(env.payload))
            elif t == MsgType.ACTUATOR_CMD:
                self.transcript.actuator_commands.append(
                    pc.unpack_actuator(env.payload))
            elif t == MsgType.ERROR:
                code, message = unpack_error(env.payload)
                self.transcript.errors.append((int(code), message))

    def _select_dest(self, dest: str) -> None:
        self.dest_requested = True
        self._client_send("data", MsgType.NAV_SELECT_DEST,
                          nav.pack_select_dest(dest))

    def _apply_events(self, now: float) -> None:
        while self.events and self.events[0].t_ms <= now:
            event = self.events.pop(0)
            if event.kind == "pos":
                self.state = replace(self.state, position=event.value)
            elif event.kind == "zone":
                self.state = replace(self.state, zone_id=event.value)
            elif event.kind == "lux":
                self.state = replace(self.state, illuminance_lux=event.value)
            elif event.kind == "dest":
                self.pending_dest = event.value
                if self.active_service == "navigation":
                    self._select_dest(event.value)
            elif event.kind == "stream":
                self._schedule_stream(*event.value)
            elif event.kind == "stop":
                self.hard_stop = True

    def _schedule_stream(self, path: str, fps: int, duration_ms: float) -> None:
        frames = load_stream_frames(os.path.join(self.script.base_dir, path))
        count = int(round(duration_ms * fps / 1000.0))
        gap = 1000.0 / fps
        start = self.clock.now_ms
        self.frames_pending += count
        for i in range(count):
            image = frames[i % len(frames)]
            self.clock.schedule(start + i * gap,
                                lambda img=image: self._send_frame(img))

    def _send_frame(self, image: GrayImage) -> None:
        if self.stopped:
            return
        self.frame_seq += 1
        self.frames_pending -= 1
        frame = FramePayload(self.frame_seq, int(round(self.clock.now_ms)),
                             image.width, image.height, image.pixels)
        if self.state.mode == "local":
            if self.model is None:
                raise ScenarioError("local mode needs a face model")
            result, _sim_ms = run_local_recognition(frame, self.model,
                                                    self.state.compute_slowdown)
            self.transcript.recog_results.append(result)
            self.frames_sent += 1
            return
        self._client_send("data", MsgType.FRAME, pack_frame_payload(frame))
        self.frames_sent += 1

    def _tick(self) -> None:
        if self.stopped:
            return
        now = self.clock.now_ms
        self._process_inbox()
        self._apply_events(now)
        if self.hard_stop:
            self._finish()
            return
        if self.handshake_done:
            self.state, context = step(self.state, self.instruction,
                                       self.state.tick_ms)
            self._client_send("control", MsgType.CONTEXT_UPDATE,
                              pc.pack_context(context))
        self._check_done(now)
        if self.stopped:
            return
        if now + self.state.tick_ms > SCENARIO_CAP_MS:
            self._finish()
            return
        self.clock.schedule(now + self.state.tick_ms, self._tick)

    def _check_done(self, now: float) -> None:
        if self.stop_at is not None:
            if now >= self.stop_at:
                self._finish()
            return
        if self.events or self.frames_pending > 0:
            return
        if (self.dest_requested and self.transcript.arrived_at_ms is None
                and not self.transcript.errors):
            return
        if (self.frames_sent > len(self.transcript.recog_results)
                and not self.transcript.errors):
            return
        self.stop_at = now + DRAIN_MS

    def _finish(self) -> None:
        self.stopped = True
        self.transcript.final_active = self.active_service
        self.transcript.finished_at_ms = self.clock.now_ms

    # -- entry ----------------------------------------------------------------

    def run(self) -> Transcript:
        self._client_send("control", MsgType.HELLO,
                          pack_hello(CHANNEL_CONTROL, 0, self.state.user_id))
        self.clock.schedule(float(self.state.tick_ms), self._tick)
        self.clock.run(until_ms=SCENARIO_CAP_MS + 1000.0)
        if not self.stopped:
            self._finish()
        return self.transcript


def run_scenario(script: ScenarioScript, platform: pc.Platform,
                 profiles: dict[str, NetProfile], seed: int = 0,
                 state: ClientState | None = None,
                 model: fr.FaceModel | None = None,
                 check_assertions: bool = True) -> Transcript:
    """Execute a script on the virtual clock; returns the full transcript.

    Raises AssertionFailed (carrying the transcript) when check_assertions
    is set and any script assertion does not hold.
    """
    runner = VirtualScenarioRunner(script, platform, profiles, seed=seed,
                                   state=state, model=model)
    transcript = runner.run()
    failures = transcript.evaluate(script.assertions)
    if failures and check_assertions:
        raise AssertionFailed(failures, transcript)
    return transcript
