"""The middleware: sessions, context-driven service dispatch, data routing.

Context updates arrive on the control channel; rules rank the services whose
conditions a context satisfies; the platform activates the top-ranked one
after it has stayed top-ranked for the rule's dwell time (hysteresis), and
at most one service is ever active per session.  Data-plane messages are
routed to the active service's handler; benchmark probes (echo/upload) are
answered by the platform itself on either channel.

Rules file format, one rule per line ('#' starts a comment):

    rule <service_id> prio=<int> dwell_ms=<int> <atom> [& <atom> ...]

with atoms  zone=<id>   lux<<f>   motion=<still|walking>
            box=<x0,y0,z0,x1,y1,z1>
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Protocol

from . import navigation as nav
from . import facerec as fr
from .wire import (
    CONTROL_TYPES,
    DATA_TYPES,
    BENCH_TYPES,
    ErrorCode,
    MessageEnvelope,
    MsgType,
    pack_error,
    unpack_frame_payload,
    unpack_upload_begin,
    pack_upload_ack,
)

MOTION_STATES = ("still", "walking")

DEFAULT_DWELL_MS = 500
LIGHT_ON_BELOW_LUX = 50.0
LIGHT_OFF_ABOVE_LUX = 200.0
UPLOAD_DECLARED_CAP = 1 << 30  # reject absurd upload announcements


class PlatformError(Exception):
    pass


class StaleContext(PlatformError):
    pass


class UnknownUser(PlatformError):
    pass


class NoActiveService(PlatformError):
    pass


class TypeNotAccepted(PlatformError):
    pass


# ---------------------------------------------------------------------------
# Context
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContextRecord:
    user_id: str
    timestamp_ms: int
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    heading_deg: float = 0.0
    motion_state: str = "still"
    illuminance_lux: float | None = None
    zone_id: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "heading_deg", self.heading_deg % 360.0)
        if self.motion_state not in MOTION_STATES:
            raise ValueError(f"motion_state {self.motion_state!r}")
        if self.illuminance_lux is not None and self.illuminance_lux < 0:
            raise ValueError("illuminance must be >= 0")


def pack_context(ctx: ContextRecord) -> bytes:
    user = ctx.user_id.encode("utf-8")
    out = bytearray(struct.pack(">H", len(user)) + user)
    x, y, z = ctx.position
    out += struct.pack(">Qdddd", ctx.timestamp_ms, x, y, z, ctx.heading_deg)
    out += struct.pack(">B", MOTION_STATES.index(ctx.motion_state))
    if ctx.illuminance_lux is None:
        out += b"\x00"
    else:
        out += b"\x01" + struct.pack(">d", ctx.illuminance_lux)
    if ctx.zone_id is None:
        out += b"\x00"
    else:
        zone = ctx.zone_id.encode("utf-8")
        out += b"\x01" + struct.pack(">H", len(zone)) + zone
    return bytes(out)


def unpack_context(payload: bytes) -> ContextRecord:
    (n,) = struct.unpack_from(">H", payload)
    pos = 2
    user = payload[pos:pos + n].decode("utf-8")
    pos += n
    ts, x, y, z, heading = struct.unpack_from(">Qdddd", payload, pos)
    pos += 40
    motion = MOTION_STATES[payload[pos]]
    pos += 1
    lux = None
    if payload[pos]:
        (lux,) = struct.unpack_from(">d", payload, pos + 1)
        pos += 8
    pos += 1
    zone = None
    if payload[pos]:
        (zn,) = struct.unpack_from(">H", payload, pos + 1)
        zone = payload[pos + 3:pos + 3 + zn].decode("utf-8")
    return ContextRecord(user, ts, (x, y, z), heading, motion, lux, zone)


# ---------------------------------------------------------------------------
# Actuators
# ---------------------------------------------------------------------------

ACTUATOR_ACTIONS = ("off", "on", "set_level")


@dataclass(frozen=True)
class ActuatorCommand:
    device_id: str
    action: str
    level: float | None = None

    def __post_init__(self) -> None:
        if self.action not in ACTUATOR_ACTIONS:
            raise ValueError(f"action {self.action!r}")
        if (self.level is not None) != (self.action == "set_level"):
            raise ValueError("level is required exactly when action is set_level")
        if self.level is not None and not 0.0 <= self.level <= 1.0:
            raise ValueError("level must be in [0, 1]")


def pack_actuator(cmd: ActuatorCommand) -> bytes:
    dev = cmd.device_id.encode("utf-8")
    out = struct.pack(">H", len(dev)) + dev
    out += struct.pack(">B", ACTUATOR_ACTIONS.index(cmd.action))
    if cmd.action == "set_level":
        out += struct.pack(">d", cmd.level)
    return out


def unpack_actuator(payload: bytes) -> ActuatorCommand:
    (n,) = struct.unpack_from(">H", payload)
    dev = payload[2:2 + n].decode("utf-8")
    action = ACTUATOR_ACTIONS[payload[2 + n]]
    level = None
    if action == "set_level":
        (level,) = struct.unpack_from(">d", payload, 3 + n)
    return ActuatorCommand(dev, action, level)


def lighting_demo(context: ContextRecord) -> ActuatorCommand | None:
    """Turn the zone light on below 50 lux, off at 200 and above."""
    if context.illuminance_lux is None or context.zone_id is None:
        return None
    device = f"light-{context.zone_id}"
    if context.illuminance_lux < LIGHT_ON_BELOW_LUX:
        return ActuatorCommand(device, "on")
    if context.illuminance_lux >= LIGHT_OFF_ABOVE_LUX:
        return ActuatorCommand(device, "off")
    return None


# ---------------------------------------------------------------------------
# Rules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ZoneEquals:
    zone_id: str


@dataclass(frozen=True)
class IlluminanceBelow:
    lux: float


@dataclass(frozen=True)
class MotionIs:
    state: str


@dataclass(frozen=True)
class InsideBox:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]


Atom = ZoneEquals | IlluminanceBelow | MotionIs | InsideBox


def atom_matches(atom: Atom, ctx: ContextRecord) -> bool:
    if isinstance(atom, ZoneEquals):
        return ctx.zone_id == atom.zone_id
    if isinstance(atom, IlluminanceBelow):
        return ctx.illuminance_lux is not None and ctx.illuminance_lux < atom.lux
    if isinstance(atom, MotionIs):
        return ctx.motion_state == atom.state
    if isinstance(atom, InsideBox):
        return all(lo <= p <= hi
                   for lo, p, hi in zip(atom.lo, ctx.position, atom.hi))
    raise TypeError(f"not an atom: {atom!r}")


@dataclass(frozen=True)
class ServiceRule:
    service_id: str
    conditions: tuple[Atom, ...]
    priority: int = 0
    dwell_ms: int = DEFAULT_DWELL_MS

    def __post_init__(self) -> None:
        if not self.conditions:
            raise ValueError("a rule needs at least one condition")
        if self.dwell_ms < 0:
            raise ValueError("dwell_ms must be >= 0")

    def matches(self, ctx: ContextRecord) -> bool:
        return all(atom_matches(a, ctx) for a in self.conditions)


def evaluate_rules(context: ContextRecord, rules: list[ServiceRule]) -> list[str]:
    """Services whose conjunction holds, best first (priority desc, id asc)."""
    hits = [r for r in rules if r.matches(context)]
    hits.sort(key=lambda r: (-r.priority, r.service_id))
    return [r.service_id for r in hits]


def _parse_atom(token: str) -> Atom:
    if token.startswith("zone="):
        return ZoneEquals(token[5:])
    if token.startswith("lux<"):
        return IlluminanceBelow(float(token[4:]))
    if token.startswith("motion="):
        state = token[7:]
        if state not in MOTION_STATES:
            raise ValueError(f"bad motion state {state!r}")
        return MotionIs(state)
    if token.startswith("box="):
        vals = [float(v) for v in token[4:].split(",")]
        if len(vals) != 6:
            raise ValueError("box needs six coordinates")
        return InsideBox(tuple(vals[:3]), tuple(vals[3:]))
    raise ValueError(f"cannot parse atom {token!r}")


def parse_rules(text: str) -> list[ServiceRule]:
    rules: list[ServiceRule] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] != "rule" or len(parts) < 4:
            raise ValueError(f"rules line {lineno}: expected "
                             f"'rule <id> prio=<n> dwell_ms=<n> <atom>...'")
        service_id = parts[1]
        if service_id in seen:
            raise ValueError(f"rules line {lineno}: duplicate rule for {service_id}")
        seen.add(service_id)
        if not (parts[2].startswith("prio=") and parts[3].startswith("dwell_ms=")):
            raise ValueError(f"rules line {lineno}: prio= and dwell_ms= required")
        priority = int(parts[2][5:])
        dwell = int(parts[3][9:])
        atom_text = " ".join(parts[4:])
        atoms = tuple(_parse_atom(tok.strip())
                      for tok in atom_text.split("&") if tok.strip())
        rules.append(ServiceRule(service_id, atoms, priority, dwell))
    return rules


def load_rules(path: str) -> list[ServiceRule]:
    with open(path, encoding="utf-8") as fh:
        return parse_rules(fh.read())


# ---------------------------------------------------------------------------
# Sessions and dispatch
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Directive:
    kind: str  # "activate" | "deactivate"
    service_id: str


@dataclass
class Session:
    session_id: int
    user_id: str
    control_channel: object | None = None
    data_channel: object | None = None
    active_service: str | None = None
    service_state: dict = field(default_factory=dict)
    last_context: ContextRecord | None = None
    # dispatch hysteresis: the would-be switch target and when it took the lead
    pending_candidate: str | None = None
    pending_since_ms: float | None = None
    _seq: dict = field(default_factory=lambda: {"control": 0, "data": 0})
    upload_received: int = 0
    upload_declared: int | None = None

    def next_seq(self, channel: str) -> int:
        self._seq[channel] += 1
        return self._seq[channel]


# An outgoing message before envelope wrapping: (channel, msg_type, payload).
Outgoing = tuple[str, MsgType, bytes]


class Service(Protocol):
    service_id: str

    def accepts(self, msg_type: MsgType) -> bool: ...

    def on_activate(self, session: Session, now_ms: float) -> list[Outgoing]: ...

    def on_deactivate(self, session: Session, now_ms: float) -> list[Outgoing]: ...

    def on_context(self, session: Session, ctx: ContextRecord,
                   now_ms: float) -> list[Outgoing]: ...

    def on_data(self, session: Session, envelope: MessageEnvelope,
                now_ms: float) -> list[Outgoing]: ...


class BaseService:
    """No-op defaults so concrete services override only what they use."""

    service_id = "base"

    def accepts(self, msg_type: MsgType) -> bool:
        return False

    def on_activate(self, session, now_ms):
        return []

    def on_deactivate(self, session, now_ms):
        return []

    def on_context(self, session, ctx, now_ms):
        return []

    def on_data(self, session, envelope, now_ms):
        return []


class NavigationService(BaseService):
    """Dijkstra guidance: selects routes, streams instructions per context.

    The route is computed once at selection; with replan=True a client seen
    more than replan_after_m from its next waypoint is re-snapped and gets a
    fresh route to the same destination.
    """

    service_id = "navigation"

    def __init__(self, graph: nav.NavGraph,
                 arrival_radius_m: float = nav.DEFAULT_ARRIVAL_RADIUS_M,
                 replan: bool = False, replan_after_m: float = 5.0) -> None:
        self.graph = graph
        self.arrival_radius_m = arrival_radius_m
        self.replan = replan
        self.replan_after_m = replan_after_m

    def accepts(self, msg_type: MsgType) -> bool:
        return msg_type == MsgType.NAV_SELECT_DEST

    def on_deactivate(self, session, now_ms):
        session.service_state.pop(self.service_id, None)
        return []

    def on_data(self, session, envelope, now_ms):
        dest = nav.unpack_select_dest(envelope.payload)
        if session.last_context is None:
            return [("control", MsgType.ERROR,
                     pack_error(ErrorCode.BAD_REQUEST, "no position known yet"))]
        try:
            src = nav.snap_to_node(self.graph, session.last_context.position)
            route = nav.shortest_path(self.graph, src, dest)
        except nav.NavError as exc:
            return [("control", MsgType.ERROR,
                     pack_error(ErrorCode.BAD_REQUEST, str(exc)))]
        state = nav.make_nav_state(self.graph, route, self.arrival_radius_m)
        session.service_state[self.service_id] = state
        return self._guidance(session, session.last_context.position)

    def on_context(self, session, ctx, now_ms):
        if self.service_id not in session.service_state:
            return []
        if self.replan:
            self._maybe_replan(session, ctx.position)
        return self._guidance(session, ctx.position)

    def _maybe_replan(self, session, position) -> None:
        import math

        state = session.service_state[self.service_id]
        idx = min(state.next_index, len(state.positions) - 1)
        if math.dist(position, state.positions[idx]) <= self.replan_after_m:
            return
        src = nav.snap_to_node(self.graph, position)
        try:
            route = nav.shortest_path(self.graph, src, state.route.destination)
        except nav.NavError:
            return  # keep the old route if the new snap has no path
        session.service_state[self.service_id] = nav.make_nav_state(
            self.graph, route, self.arrival_radius_m)

    def _guidance(self, session, position) -> list[Outgoing]:
        state = session.service_state[self.service_id]
        step = nav.next_instruction(state, position)
        if isinstance(step, nav.Arrived):
            del session.service_state[self.service_id]
            out = [("data", MsgType.NAV_ARRIVED, nav.pack_arrived(step.destination))]
            if step.info is not None:
                out.append(("data", MsgType.NAV_DEST_INFO,
                            nav.pack_dest_info(step.info)))
            return out
        return [("data", MsgType.NAV_INSTRUCTION, nav.pack_instruction(step))]


class FaceRecognitionService(BaseService):
    """Runs the eigenface pipeline on incoming frames."""

    service_id = "facerec"

    def __init__(self, model: fr.FaceModel, measure_time: bool = True) -> None:
        self.model = model
        # virtual-clock runs disable wall timing so transcripts reproduce
        self.measure_time = measure_time

    def accepts(self, msg_type: MsgType) -> bool:
        return msg_type == MsgType.FRAME

    def on_data(self, session, envelope, now_ms):
        frame = unpack_frame_payload(envelope.payload)
        try:
            result = fr.recognize_frame(frame, self.model,
                                        measure_time=self.measure_time)
        except fr.FaceRecError as exc:
            return [("control", MsgType.ERROR,
                     pack_error(ErrorCode.BAD_REQUEST, str(exc)))]
        return [("data", MsgType.RECOG_RESULT, fr.pack_recog_result(result))]


class LightingService(BaseService):
    """Drives the zone light actuator from illuminance context."""

    service_id = "lighting"

    def on_deactivate(self, session, now_ms):
        # never leave a light burning when the service goes away
        last = session.service_state.pop(self.service_id, None)
        if last is not None and last[1] == "on":
            cmd = ActuatorCommand(last[0], "off")
            return [("control", MsgType.ACTUATOR_CMD, pack_actuator(cmd))]
        return []

    def on_context(self, session, ctx, now_ms):
        cmd = lighting_demo(ctx)
        if cmd is None:
            return []
        last = session.service_state.get(self.service_id)
        if last == (cmd.device_id, cmd.action):
            return []  # only emit on a change
        session.service_state[self.service_id] = (cmd.device_id, cmd.action)
        return [("control", MsgType.ACTUATOR_CMD, pack_actuator(cmd))]


class Platform:
    """The dispatching middleware; owns sessions, rules, and services."""

    def __init__(self, rules: list[ServiceRule],
                 services: dict[str, Service] | list[Service]) -> None:
        if isinstance(services, list):
            services = {s.service_id: s for s in services}
        by_id: dict[str, ServiceRule] = {}
        for rule in rules:
            if rule.service_id in by_id:
                raise ValueError(f"duplicate rule for {rule.service_id}")
            by_id[rule.service_id] = rule
        self.rules = list(rules)
        self.rule_by_id = by_id
        self.services = services
        self.sessions: dict[int, Session] = {}
        self._next_session_id = 1

    # -- session lifecycle --------------------------------------------------

    def open_session(self, user_id: str) -> Session:
        session = Session(self._next_session_id, user_id)
        self.sessions[session.session_id] = session
        self._next_session_id += 1
        return session

    def close_session(self, session_id: int) -> None:
        self.sessions.pop(session_id, None)

    def get_session(self, session_id: int) -> Session:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise UnknownUser(f"no session {session_id}") from None

    def handle_hello(self, channel: str, envelope: MessageEnvelope
                     ) -> tuple[Session, MessageEnvelope]:
        """Bind a channel: session id 0 opens a new session, else joins one."""
        from .wire import pack_hello_ack, unpack_hello

        _kind, session_id, user_id = unpack_hello(envelope.payload)
        if session_id == 0:
            session = self.open_session(user_id)
        else:
            session = self.get_session(session_id)
            if session.user_id != user_id:
                raise UnknownUser(
                    f"{user_id!r} cannot join session of {session.user_id!r}")
        reply = MessageEnvelope(MsgType.HELLO_ACK, session.session_id,
                                session.next_seq(channel),
                                pack_hello_ack(session.session_id))
        return session, reply

    # -- dispatch -----------------------------------------------------------

    def ingest_context(self, session: Session, context: ContextRecord,
                       now_ms: float) -> list[Directive]:
        """Update a session's context; maybe switch the active service.

        The top-ranked satisfied service becomes the switch candidate; the
        switch happens only once the candidate has led continuously for the
        relevant rule's dwell time.  Directives come out deactivate-first.
        """
        if context.user_id != session.user_id:
            raise UnknownUser(
                f"context for {context.user_id!r} on session of "
                f"{session.user_id!r}")
        if (session.last_context is not None
                and context.timestamp_ms < session.last_context.timestamp_ms):
            raise StaleContext(
                f"timestamp {context.timestamp_ms} precedes "
                f"{session.last_context.timestamp_ms}")
        session.last_context = context

        ranked = evaluate_rules(context, self.rules)
        top = ranked[0] if ranked else None
        if top == session.active_service:
            session.pending_candidate = None
            session.pending_since_ms = None
            return []
        if session.pending_candidate != top or session.pending_since_ms is None:
            session.pending_candidate = top
            session.pending_since_ms = now_ms
        dwell_of = top if top is not None else session.active_service
        dwell = self.rule_by_id[dwell_of].dwell_ms if dwell_of in self.rule_by_id \
            else DEFAULT_DWELL_MS
        if now_ms - session.pending_since_ms < dwell:
            return []
        directives: list[Directive] = []
        if session.active_service is not None:
            directives.append(Directive("deactivate", session.active_service))
        if top is not None:
            directives.append(Directive("activate", top))
        session.active_service = top
        session.pending_candidate = None
        session.pending_since_ms = None
        return directives

    def route_data(self, session: Session, envelope: MessageEnvelope,
                   now_ms: float) -> list[Outgoing]:
        """Hand a data-plane message to the active service."""
        if session.active_service is None:
            raise NoActiveService("no active service for this session")
        service = self.services.get(session.active_service)
        if service is None or not service.accepts(envelope.msg_type):
            raise TypeNotAccepted(
                f"{session.active_service} does not accept "
                f"{envelope.msg_type.name}")
        return service.on_data(session, envelope, now_ms)

    # -- envelope-level entry points -----------------------------------------

    def wrap(self, session: Session, outgoing: list[Outgoing]
             ) -> tuple[list[MessageEnvelope], list[MessageEnvelope]]:
        """Assign per-channel sequence numbers and build envelopes."""
        control, data = [], []
        for channel, msg_type, payload in outgoing:
            env = MessageEnvelope(msg_type, session.session_id,
                                  session.next_seq(channel), payload)
            (control if channel == "control" else data).append(env)
        return control, data

    def handle_envelope(self, session: Session, channel: str,
                        envelope: MessageEnvelope, now_ms: float
                        ) -> tuple[list[MessageEnvelope], list[MessageEnvelope]]:
        """Process one inbound message; returns (control, data) responses."""
        t = envelope.msg_type
        if t in BENCH_TYPES:
            return self.wrap(session, self._handle_bench(session, channel,
                                                         envelope))
        if (channel == "control" and t not in CONTROL_TYPES) or \
                (channel == "data" and t not in DATA_TYPES):
            return self.wrap(session, [("control", MsgType.ERROR, pack_error(
                ErrorCode.WRONG_CHANNEL, f"{t.name} not allowed on {channel}"))])
        if channel == "control":
            return self.wrap(session, self._handle_control(session, envelope,
                                                           now_ms))
        return self.wrap(session, self._handle_data(session, envelope, now_ms))

    def _handle_control(self, session: Session, envelope: MessageEnvelope,
                        now_ms: float) -> list[Outgoing]:
        t = envelope.msg_type
        if t == MsgType.HEARTBEAT:
            return [("control", MsgType.HEARTBEAT, b"")]
        if t == MsgType.CONTEXT_UPDATE:
            try:
                ctx = unpack_context(envelope.payload)
                directives = self.ingest_context(session, ctx, now_ms)
            except (PlatformError, ValueError, struct.error) as exc:
                code = ErrorCode.STALE_CONTEXT if isinstance(exc, StaleContext) \
                    else ErrorCode.UNKNOWN_USER if isinstance(exc, UnknownUser) \
                    else ErrorCode.BAD_REQUEST
                return [("control", MsgType.ERROR, pack_error(code, str(exc)))]
            out: list[Outgoing] = []
            for directive in directives:
                service = self.services.get(directive.service_id)
                if directive.kind == "deactivate":
                    out.append(("control", MsgType.SERVICE_DEACTIVATE,
                                directive.service_id.encode()))
                    if service:
                        out.extend(service.on_deactivate(session, now_ms))
                else:
                    out.append(("control", MsgType.SERVICE_ACTIVATE,
                                directive.service_id.encode()))
                    if service:
                        out.extend(service.on_activate(session, now_ms))
            if session.active_service:
                service = self.services.get(session.active_service)
                if service:
                    out.extend(service.on_context(session, ctx, now_ms))
            return out
        if t == MsgType.ERROR:
            return []  # client-side report; nothing to answer
        return [("control", MsgType.ERROR,
                 pack_error(ErrorCode.BAD_REQUEST,
                            f"{t.name} is not a client-to-platform message"))]

    def _handle_data(self, session: Session, envelope: MessageEnvelope,
                     now_ms: float) -> list[Outgoing]:
        try:
            return self.route_data(session, envelope, now_ms)
        except NoActiveService as exc:
            return [("control", MsgType.ERROR,
                     pack_error(ErrorCode.NO_ACTIVE_SERVICE, str(exc)))]
        except TypeNotAccepted as exc:
            return [("control", MsgType.ERROR,
                     pack_error(ErrorCode.TYPE_NOT_ACCEPTED, str(exc)))]

    def _handle_bench(self, session: Session, channel: str,
                      envelope: MessageEnvelope) -> list[Outgoing]:
        t = envelope.msg_type
        if t == MsgType.ECHO_REQ:
            return [(channel, MsgType.ECHO_RESP, envelope.payload)]
        if t == MsgType.UPLOAD_BEGIN:
            declared = unpack_upload_begin(envelope.payload)
            if declared > UPLOAD_DECLARED_CAP:
                return [(channel, MsgType.ERROR,
                         pack_error(ErrorCode.SERVER_REJECTED,
                                    f"declared {declared} bytes exceeds cap"))]
            session.upload_declared = declared
            session.upload_received = 0
            return []
        if t == MsgType.UPLOAD_CHUNK:
            session.upload_received += len(envelope.payload)
            return []
        if t == MsgType.UPLOAD_END:
            total = session.upload_received
            session.upload_declared = None
            return [(channel, MsgType.UPLOAD_ACK, pack_upload_ack(total))]
        return []  # ECHO_RESP / UPLOAD_ACK are never client-to-platform
