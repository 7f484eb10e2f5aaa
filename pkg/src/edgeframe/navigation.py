"""Waypoint-graph navigation: shortest paths, snapping, turn-by-turn guidance.

The graph is undirected with positive edge weights (Euclidean distance
between endpoints when a weight is omitted).  Routes come from Dijkstra with
deterministic tie-breaking: among equal-cost shortest paths the returned
waypoint sequence is the lexicographically smallest by node id, obtained by
keying the priority queue on (distance, waypoint sequence).

Map file format, one statement per line ('#' starts a comment):

    node <id> <x> <y> <z>
    edge <id1> <id2> [weight]
    dest <id> <name> <pgm_path>
"""

from __future__ import annotations

import heapq
import math
import random
import struct
from dataclasses import dataclass, field

from .pgm import GrayImage, read_pgm

Point = tuple[float, float, float]

DEFAULT_ARRIVAL_RADIUS_M = 0.5


class NavError(Exception):
    pass


class UnknownNode(NavError):
    pass


class NoPath(NavError):
    pass


class EmptyGraph(NavError):
    pass


@dataclass(frozen=True)
class DestinationInfo:
    name: str
    image: GrayImage


class NavGraph:
    def __init__(self) -> None:
        self.nodes: dict[str, Point] = {}
        self.adj: dict[str, dict[str, float]] = {}
        self.destinations: dict[str, DestinationInfo] = {}

    def add_node(self, node_id: str, position: Point) -> None:
        if node_id in self.nodes:
            raise NavError(f"duplicate node id {node_id!r}")
        self.nodes[node_id] = (float(position[0]), float(position[1]),
                               float(position[2]))
        self.adj[node_id] = {}

    def add_edge(self, a: str, b: str, weight: float | None = None) -> None:
        for n in (a, b):
            if n not in self.nodes:
                raise UnknownNode(f"edge endpoint {n!r} is not a node")
        if a == b:
            raise NavError("self-loop edges are not allowed")
        if weight is None:
            weight = _dist(self.nodes[a], self.nodes[b])
        if not weight > 0:
            raise NavError(f"edge weight must be > 0, got {weight}")
        self.adj[a][b] = float(weight)
        self.adj[b][a] = float(weight)

    def add_destination(self, node_id: str, info: DestinationInfo) -> None:
        if node_id not in self.nodes:
            raise UnknownNode(f"destination {node_id!r} is not a node")
        self.destinations[node_id] = info

    def edge_weight(self, a: str, b: str) -> float:
        try:
            return self.adj[a][b]
        except KeyError:
            raise NavError(f"no edge {a!r}-{b!r}") from None


@dataclass(frozen=True)
class Route:
    waypoints: tuple[str, ...]
    total_cost: float
    destination: str


@dataclass(frozen=True)
class MoveInstruction:
    target_node: str
    target_position: Point
    bearing_deg: float
    remaining_distance_m: float


@dataclass(frozen=True)
class Arrived:
    destination: str
    info: DestinationInfo | None


@dataclass
class NavSessionState:
    route: Route
    next_index: int = 0
    arrival_radius_m: float = DEFAULT_ARRIVAL_RADIUS_M
    # per-waypoint positions and leg costs, cached so guidance needs no graph
    positions: tuple[Point, ...] = field(default=())
    leg_costs: tuple[float, ...] = field(default=())
    dest_info: DestinationInfo | None = None


def _dist(a: Point, b: Point) -> float:
    return math.sqrt((a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2 + (a[2] - b[2]) ** 2)


def bearing_deg(frm: Point, to: Point) -> float:
    """Compass bearing in the horizontal plane: 0 = +y, 90 = +x."""
    deg = math.degrees(math.atan2(to[0] - frm[0], to[1] - frm[1]))
    return deg % 360.0


def shortest_path(graph: NavGraph, src: str, dst: str) -> Route:
    for n in (src, dst):
        if n not in graph.nodes:
            raise UnknownNode(f"node {n!r} not in graph")
    if src == dst:
        return Route((src,), 0.0, dst)
    # Heap entries carry the whole waypoint sequence: ties on distance settle
    # on the lexicographically smallest path.
    heap: list[tuple[float, tuple[str, ...]]] = [(0.0, (src,))]
    settled: set[str] = set()
    while heap:
        dist, path = heapq.heappop(heap)
        node = path[-1]
        if node in settled:
            continue
        settled.add(node)
        if node == dst:
            return Route(path, dist, dst)
        for nbr, weight in graph.adj[node].items():
            if nbr not in settled:
                heapq.heappush(heap, (dist + weight, path + (nbr,)))
    raise NoPath(f"{dst!r} is unreachable from {src!r}")


def snap_to_node(graph: NavGraph, position: Point) -> str:
    if not graph.nodes:
        raise EmptyGraph("cannot snap on an empty graph")
    return min(graph.nodes, key=lambda n: (_dist(position, graph.nodes[n]), n))


def make_nav_state(graph: NavGraph, route: Route,
                   arrival_radius_m: float = DEFAULT_ARRIVAL_RADIUS_M) -> NavSessionState:
    legs = tuple(graph.edge_weight(a, b)
                 for a, b in zip(route.waypoints, route.waypoints[1:]))
    return NavSessionState(route=route, next_index=0,
                           arrival_radius_m=arrival_radius_m,
                           positions=tuple(graph.nodes[n] for n in route.waypoints),
                           leg_costs=legs,
                           dest_info=graph.destinations.get(route.destination))


def next_instruction(state: NavSessionState, position: Point) -> MoveInstruction | Arrived:
    """Advance past any waypoints within the arrival radius, then aim at the next.

    next_index only ever grows; once it passes the final waypoint the result
    is Arrived with the destination's info (None if the map carries none).
    """
    wp = state.route.waypoints
    while (state.next_index < len(wp)
           and _dist(position, state.positions[state.next_index])
           <= state.arrival_radius_m):
        state.next_index += 1
    if state.next_index >= len(wp):
        return Arrived(state.route.destination, state.dest_info)
    target = wp[state.next_index]
    target_pos = state.positions[state.next_index]
    remaining = _dist(position, target_pos) + sum(state.leg_costs[state.next_index:])
    return MoveInstruction(target, target_pos, bearing_deg(position, target_pos),
                           remaining)


# ---------------------------------------------------------------------------
# Map file io
# ---------------------------------------------------------------------------

def parse_map(text: str, base_dir: str | None = None) -> NavGraph:
    import os

    graph = NavGraph()
    pending_edges: list[tuple[int, str, str, float | None]] = []
    pending_dests: list[tuple[int, str, str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "node" and len(parts) == 5:
                graph.add_node(parts[1], (float(parts[2]), float(parts[3]),
                                          float(parts[4])))
            elif parts[0] == "edge" and len(parts) in (3, 4):
                w = float(parts[3]) if len(parts) == 4 else None
                pending_edges.append((lineno, parts[1], parts[2], w))
            elif parts[0] == "dest" and len(parts) == 4:
                pending_dests.append((lineno, parts[1], parts[2], parts[3]))
            else:
                raise NavError(f"map line {lineno}: cannot parse {raw.strip()!r}")
        except ValueError:
            raise NavError(f"map line {lineno}: bad number in {raw.strip()!r}") from None
    for lineno, a, b, w in pending_edges:
        graph.add_edge(a, b, w)
    for lineno, node_id, name, pgm_path in pending_dests:
        if base_dir is not None:
            pgm_path = os.path.join(base_dir, pgm_path)
        graph.add_destination(node_id, DestinationInfo(name, read_pgm(pgm_path)))
    return graph


def load_map(path: str) -> NavGraph:
    import os

    with open(path, encoding="utf-8") as fh:
        return parse_map(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))


def make_info_image(name: str, width: int = 48, height: int = 32) -> GrayImage:
    """Deterministic banner image for a destination: name-seeded stripes."""
    seed = struct.unpack(">I", (name.encode() * 4)[:4])[0]
    rng = random.Random(seed)
    stripe = [rng.randrange(64, 224) for _ in range(height)]
    rows = [bytes([stripe[y]] * width) for y in range(height)]
    return GrayImage(width, height, b"".join(rows))


def generate_grid_map(cols: int, rows: int, spacing_m: float, seed: int,
                      delete_fraction: float = 0.2) -> NavGraph:
    """Grid graph with random connectivity-preserving edge deletions."""
    if cols < 1 or rows < 1:
        raise NavError("grid dimensions must be >= 1")
    graph = NavGraph()
    for r in range(rows):
        for c in range(cols):
            graph.add_node(f"r{r}c{c}", (c * spacing_m, r * spacing_m, 0.0))
    edges = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                edges.append((f"r{r}c{c}", f"r{r}c{c + 1}"))
            if r + 1 < rows:
                edges.append((f"r{r}c{c}", f"r{r + 1}c{c}"))
    for a, b in edges:
        graph.add_edge(a, b)
    rng = random.Random(seed)
    rng.shuffle(edges)
    budget = int(len(edges) * delete_fraction)
    for a, b in edges:
        if budget == 0:
            break
        w = graph.adj[a].pop(b)
        del graph.adj[b][a]
        if _connected(graph):
            budget -= 1
        else:
            graph.adj[a][b] = w
            graph.adj[b][a] = w
    return graph


def _connected(graph: NavGraph) -> bool:
    if not graph.nodes:
        return True
    start = next(iter(graph.nodes))
    seen = {start}
    stack = [start]
    while stack:
        for nbr in graph.adj[stack.pop()]:
            if nbr not in seen:
                seen.add(nbr)
                stack.append(nbr)
    return len(seen) == len(graph.nodes)


def map_to_text(graph: NavGraph, dest_paths: dict[str, str] | None = None) -> str:
    """Render a graph back to the map file format (edges once per pair)."""
    lines = []
    for node_id in sorted(graph.nodes):
        x, y, z = graph.nodes[node_id]
        lines.append(f"node {node_id} {x:g} {y:g} {z:g}")
    for a in sorted(graph.adj):
        for b in sorted(graph.adj[a]):
            if a < b:
                lines.append(f"edge {a} {b} {graph.adj[a][b]:g}")
    for node_id in sorted(graph.destinations):
        info = graph.destinations[node_id]
        path = (dest_paths or {}).get(node_id, f"{node_id}.pgm")
        lines.append(f"dest {node_id} {info.name} {path}")
    return "\n".join(lines) + "\n"


def demo_graph() -> NavGraph:
    """The standard demo map: a 4x3 office floor, 5 m aisle spacing."""
    graph = generate_grid_map(cols=4, rows=3, spacing_m=5.0, seed=7,
                              delete_fraction=0.15)
    graph.add_destination("r2c3", DestinationInfo("meeting-room",
                                                  make_info_image("meeting-room")))
    graph.add_destination("r0c3", DestinationInfo("lab",
                                                  make_info_image("lab")))
    return graph


# ---------------------------------------------------------------------------
# Wire payload codecs for the navigation message types
# ---------------------------------------------------------------------------

def pack_select_dest(node_id: str) -> bytes:
    b = node_id.encode("utf-8")
    return struct.pack(">H", len(b)) + b


def unpack_select_dest(payload: bytes) -> str:
    (n,) = struct.unpack_from(">H", payload)
    return payload[2:2 + n].decode("utf-8")


def pack_instruction(instr: MoveInstruction) -> bytes:
    node = instr.target_node.encode("utf-8")
    x, y, z = instr.target_position
    return (struct.pack(">H", len(node)) + node
            + struct.pack(">ddddd", x, y, z, instr.bearing_deg,
                          instr.remaining_distance_m))


def unpack_instruction(payload: bytes) -> MoveInstruction:
    (n,) = struct.unpack_from(">H", payload)
    node = payload[2:2 + n].decode("utf-8")
    x, y, z, bearing, remaining = struct.unpack_from(">ddddd", payload, 2 + n)
    return MoveInstruction(node, (x, y, z), bearing, remaining)


def pack_arrived(destination: str) -> bytes:
    b = destination.encode("utf-8")
    return struct.pack(">H", len(b)) + b


def unpack_arrived(payload: bytes) -> str:
    (n,) = struct.unpack_from(">H", payload)
    return payload[2:2 + n].decode("utf-8")


def pack_dest_info(info: DestinationInfo) -> bytes:
    name = info.name.encode("utf-8")
    return (struct.pack(">H", len(name)) + name
            + struct.pack(">HH", info.image.width, info.image.height)
            + info.image.pixels)


def unpack_dest_info(payload: bytes) -> DestinationInfo:
    (n,) = struct.unpack_from(">H", payload)
    name = payload[2:2 + n].decode("utf-8")
    w, h = struct.unpack_from(">HH", payload, 2 + n)
    pixels = payload[2 + n + 4:2 + n + 4 + w * h]
    return DestinationInfo(name, GrayImage(w, h, pixels))
