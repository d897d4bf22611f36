"""Static road network: lanes, signalized intersections, routes and the agent graph.

A network file is a JSON document::

    {
      "format": 1,
      "neighbor_threshold": 1,
      "lanes": [{"id": "w_A", "length": 400, "free_speed": 13.9,
                 "from_node": "w0", "to_node": "A", "sensor_zone": 50}],
      "intersections": [{"id": "A", "is_agent": true,
                         "incoming_lanes": ["w_A", "B_A", "C_A"],
                         "phases": [{"id": "EW", "green_lanes": ["w_A", "B_A"]},
                                    {"id": "NS", "green_lanes": ["C_A"]}]}],
      "routes": [["w_A", "A_B"], {"lanes": ["w_A", "A_C"], "weight": 0.5}]
    }

Lengths are meters, speeds m/s.  Routes are either a bare list of lane ids or
an object with ``lanes`` and an optional sampling ``weight`` (default 1).
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

FORMAT_VERSION = 1
DEFAULT_SENSOR_ZONE = 50.0

DATA_DIR = Path(__file__).parent / "data"


class NetworkError(ValueError):
    """Raised when a network file cannot be parsed or fails validation."""


@dataclass(frozen=True)
class Lane:
    id: str
    length: float
    free_speed: float
    from_node: str
    to_node: str
    sensor_zone: float = DEFAULT_SENSOR_ZONE

    def __post_init__(self):
        if not self.length > 0:
            raise NetworkError(f"lane {self.id!r}: length must be > 0")
        if not self.free_speed > 0:
            raise NetworkError(f"lane {self.id!r}: free_speed must be > 0")
        if not 0 < self.sensor_zone <= self.length:
            raise NetworkError(
                f"lane {self.id!r}: sensor_zone must be in (0, length]")


@dataclass(frozen=True)
class Phase:
    id: str
    green_lanes: Tuple[str, ...]


@dataclass(frozen=True)
class Intersection:
    id: str
    incoming_lanes: Tuple[str, ...]
    phases: Tuple[Phase, ...]
    is_agent: bool = True

    def phase_index(self, phase_id: str) -> int:
        for k, ph in enumerate(self.phases):
            if ph.id == phase_id:
                return k
        raise KeyError(f"intersection {self.id!r} has no phase {phase_id!r}")


@dataclass(frozen=True)
class Route:
    lanes: Tuple[str, ...]
    weight: float = 1.0
    id: str = ""


@dataclass(frozen=True)
class NetworkSpec:
    """Validated, immutable road network.

    ``agents`` lists the ids of signalized intersections in ascending order;
    that order is the canonical agent index used everywhere downstream.
    """

    lanes: Tuple[Lane, ...]
    intersections: Tuple[Intersection, ...]
    routes: Tuple[Route, ...]
    neighbor_threshold: int = 1
    _lane_index: Dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_lane_index",
                           {ln.id: k for k, ln in enumerate(self.lanes)})
        _validate(self)

    @property
    def agents(self) -> List[str]:
        return sorted(x.id for x in self.intersections if x.is_agent)

    def lane(self, lane_id: str) -> Lane:
        return self.lanes[self._lane_index[lane_id]]

    def lane_index(self, lane_id: str) -> int:
        return self._lane_index[lane_id]

    def intersection(self, node_id: str) -> Intersection:
        for x in self.intersections:
            if x.id == node_id:
                return x
        raise KeyError(f"unknown intersection {node_id!r}")

    def agent_graph(self) -> Dict[str, Set[str]]:
        """Direct agent-to-agent adjacency: a lane joins the two nodes."""
        agents = set(self.agents)
        adj: Dict[str, Set[str]] = {a: set() for a in agents}
        for ln in self.lanes:
            if ln.from_node in agents and ln.to_node in agents and ln.from_node != ln.to_node:
                adj[ln.from_node].add(ln.to_node)
                adj[ln.to_node].add(ln.from_node)
        return adj

    def to_dict(self) -> dict:
        return {
            "format": FORMAT_VERSION,
            "neighbor_threshold": self.neighbor_threshold,
            "lanes": [
                {"id": ln.id, "length": ln.length, "free_speed": ln.free_speed,
                 "from_node": ln.from_node, "to_node": ln.to_node,
                 "sensor_zone": ln.sensor_zone}
                for ln in self.lanes
            ],
            "intersections": [
                {"id": x.id, "is_agent": x.is_agent,
                 "incoming_lanes": list(x.incoming_lanes),
                 "phases": [{"id": p.id, "green_lanes": list(p.green_lanes)}
                            for p in x.phases]}
                for x in self.intersections
            ],
            "routes": [
                {"id": r.id, "lanes": list(r.lanes), "weight": r.weight}
                for r in self.routes
            ],
        }


def _validate(spec: NetworkSpec) -> None:
    if len(spec._lane_index) != len(spec.lanes):
        raise NetworkError("duplicate lane ids")
    if spec.neighbor_threshold < 0:
        raise NetworkError("neighbor_threshold must be non-negative")
    ids = [x.id for x in spec.intersections]
    if len(set(ids)) != len(ids):
        raise NetworkError("duplicate intersection ids")

    for x in spec.intersections:
        for lid in x.incoming_lanes:
            if lid not in spec._lane_index:
                raise NetworkError(f"intersection {x.id!r}: unknown lane {lid!r}")
            if spec.lane(lid).to_node != x.id:
                raise NetworkError(
                    f"intersection {x.id!r}: lane {lid!r} does not end at it")
        if x.is_agent and len(x.phases) < 2:
            raise NetworkError(f"intersection {x.id!r}: an agent needs at least 2 phases")
        covered: Set[str] = set()
        for ph in x.phases:
            if not ph.green_lanes:
                raise NetworkError(f"intersection {x.id!r}: phase {ph.id!r} has no green lanes")
            extra = set(ph.green_lanes) - set(x.incoming_lanes)
            if extra:
                raise NetworkError(
                    f"intersection {x.id!r}: phase {ph.id!r} greens non-incoming "
                    f"lanes {sorted(extra)}")
            covered.update(ph.green_lanes)
        missing = [lid for lid in x.incoming_lanes if lid not in covered]
        if missing:
            raise NetworkError(
                f"intersection {x.id!r}: lane {missing[0]!r} is not covered by any phase")

    for k, r in enumerate(spec.routes):
        name = r.id or f"#{k}"
        if not r.lanes:
            raise NetworkError(f"route {name}: empty")
        if not r.weight > 0:
            raise NetworkError(f"route {name}: weight must be > 0")
        for lid in r.lanes:
            if lid not in spec._lane_index:
                raise NetworkError(f"route {name}: unknown lane {lid!r}")
        for a, b in zip(r.lanes, r.lanes[1:]):
            if spec.lane(a).to_node != spec.lane(b).from_node:
                raise NetworkError(f"route {name}: lanes {a!r} -> {b!r} do not connect")

    agents = spec.agents
    if agents:
        reach = _bfs(spec.agent_graph(), agents[0])
        if len(reach) != len(agents):
            raise NetworkError("agent graph is not connected")


def _bfs(adj: Dict[str, Set[str]], src: str) -> Dict[str, int]:
    dist = {src: 0}
    todo = deque([src])
    while todo:
        u = todo.popleft()
        for v in sorted(adj[u]):
            if v not in dist:
                dist[v] = dist[u] + 1
                todo.append(v)
    return dist


def hop_distances(spec: NetworkSpec) -> Dict[str, Dict[str, int]]:
    """All-pairs hop distance d(i, j) over the agent graph."""
    adj = spec.agent_graph()
    return {a: _bfs(adj, a) for a in spec.agents}


def neighbor_graph(spec: NetworkSpec) -> Dict[str, Set[str]]:
    """Neighborhood of every agent: other agents within ``neighbor_threshold`` hops."""
    dist = hop_distances(spec)
    thr = spec.neighbor_threshold
    return {i: {j for j, d in dist[i].items() if j != i and d <= thr}
            for i in spec.agents}


def sorted_neighbors(spec: NetworkSpec) -> Dict[str, List[str]]:
    return {i: sorted(js) for i, js in neighbor_graph(spec).items()}


def network_from_dict(doc: dict) -> NetworkSpec:
    if not isinstance(doc, dict):
        raise NetworkError("network document must be an object")
    fmt = doc.get("format", FORMAT_VERSION)
    if fmt != FORMAT_VERSION:
        raise NetworkError(f"unsupported network format {fmt!r}")
    try:
        lanes = tuple(
            Lane(id=str(d["id"]), length=float(d["length"]),
                 free_speed=float(d["free_speed"]), from_node=str(d["from_node"]),
                 to_node=str(d["to_node"]),
                 sensor_zone=float(d.get("sensor_zone", DEFAULT_SENSOR_ZONE)))
            for d in doc["lanes"])
        intersections = tuple(
            Intersection(
                id=str(d["id"]),
                incoming_lanes=tuple(str(x) for x in d["incoming_lanes"]),
                phases=tuple(Phase(id=str(p["id"]),
                                   green_lanes=tuple(str(x) for x in p["green_lanes"]))
                             for p in d["phases"]),
                is_agent=bool(d.get("is_agent", True)))
            for d in doc["intersections"])
        routes = []
        for k, r in enumerate(doc.get("routes", [])):
            if isinstance(r, dict):
                routes.append(Route(lanes=tuple(str(x) for x in r["lanes"]),
                                    weight=float(r.get("weight", 1.0)),
                                    id=str(r.get("id", f"r{k}"))))
            else:
                routes.append(Route(lanes=tuple(str(x) for x in r), id=f"r{k}"))
        threshold = int(doc.get("neighbor_threshold", 1))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, NetworkError):
            raise
        raise NetworkError(f"malformed network document: {exc!r}") from exc
    return NetworkSpec(lanes=lanes, intersections=intersections, routes=tuple(routes),
                       neighbor_threshold=threshold)


def load_network(path) -> NetworkSpec:
    """Parse and validate a network file."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise NetworkError(f"{path}: not valid JSON ({exc})") from exc
    return network_from_dict(doc)


def save_network(spec: NetworkSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(spec.to_dict(), fh, indent=1)


def fixture_path(name: str) -> Path:
    """Path of a shipped network fixture (``grid2x2``, ``grid3x3``, ``irregular7``)."""
    p = DATA_DIR / f"{name}.json"
    if not p.exists():
        raise FileNotFoundError(f"no shipped network named {name!r}")
    return p


# ---------------------------------------------------------------------------
# synthetic fixtures

def grid_network(rows: int, cols: int, *, block: float = 300.0, entry: float = 400.0,
                 exit: float = 200.0, free_speed: float = 13.9, row_weight: float = 6.0,
                 col_weight: float = 1.0, turn_weight: float = 0.25,
                 neighbor_threshold: int = 1) -> NetworkSpec:
    """One-way grid of alternating arterials.

    Even rows run eastbound, odd rows westbound; even columns run
    southbound, odd columns northbound.  Each corridor has an entry lane, one
    lane per block and an unsignalized exit lane, so every intersection has
    exactly one horizontal and one vertical approach and two phases (``EW``,
    ``NS``).  Routes follow a corridor to its exit, optionally turning once
    onto a crossing corridor; rows carry ``row_weight``, columns
    ``col_weight`` and each single-turn route ``turn_weight``.
    """
    def node(r, c):
        return f"n{r}{c}"

    lanes: List[Lane] = []
    approach: Dict[str, Dict[str, str]] = {node(r, c): {} for r in range(rows) for c in range(cols)}
    corridors = []   # (kind, [lane ids], [node per lane end], weight)

    def corridor(kind, nodes, src, dst, weight):
        ids, ends = [], []
        seq = [src] + nodes + [dst]
        for k, (a, b) in enumerate(zip(seq, seq[1:])):
            length = entry if k == 0 else (exit if k == len(seq) - 2 else block)
            lid = f"{a}_{b}"
            lanes.append(Lane(lid, length, free_speed, a, b))
            if b in approach:
                approach[b][kind] = lid
            ids.append(lid)
            ends.append(b)
        corridors.append((kind, ids, ends, weight))

    for r in range(rows):
        cs = range(cols) if r % 2 == 0 else range(cols - 1, -1, -1)
        nodes = [node(r, c) for c in cs]
        src, dst = (f"W{r}", f"E{r}") if r % 2 == 0 else (f"E{r}", f"W{r}")
        corridor("EW", nodes, src, dst, row_weight)
    for c in range(cols):
        rs = range(rows) if c % 2 == 0 else range(rows - 1, -1, -1)
        nodes = [node(r, c) for r in rs]
        src, dst = (f"N{c}", f"S{c}") if c % 2 == 0 else (f"S{c}", f"N{c}")
        corridor("NS", nodes, src, dst, col_weight)

    intersections = []
    for nid in sorted(approach):
        ew, ns = approach[nid]["EW"], approach[nid]["NS"]
        intersections.append(Intersection(nid, (ew, ns), (Phase("EW", (ew,)), Phase("NS", (ns,)))))

    routes: List[Route] = []
    out_of = {}
    for kind, ids, ends, _ in corridors:
        for k, nid in enumerate(ends[:-1]):
            out_of[(kind, nid)] = ids[k + 1:]
    for kind, ids, ends, weight in corridors:
        routes.append(Route(tuple(ids), weight, f"{ids[0]}>{ids[-1]}"))
        other = "NS" if kind == "EW" else "EW"
        for k, nid in enumerate(ends[:-1]):
            tail = out_of.get((other, nid))
            if tail:
                routes.append(Route(tuple(ids[:k + 1]) + tuple(tail), turn_weight,
                                    f"{ids[0]}>{tail[-1]}@{nid}"))
    return NetworkSpec(lanes=tuple(lanes), intersections=tuple(intersections),
                       routes=tuple(routes), neighbor_threshold=neighbor_threshold)


def pinwheel_network(*, block: float = 300.0, entry: float = 4000.0, exit: float = 200.0,
                     free_speed: float = 13.9, arterial_turn: float = 10.0,
                     arterial_through: float = 0.0, collector_turn: float = 1.33,
                     collector_through: float = 0.3, neighbor_threshold: int = 1) -> NetworkSpec:
    """2x2 grid of one-way streets circulating around the center block.

    Street ``r0`` runs W0 -> n00 -> n01 -> E0, ``c1`` N1 -> n01 -> n11 -> S1,
    ``r1`` E1 -> n11 -> n10 -> W1 and ``c0`` S0 -> n10 -> n00 -> N0, so every
    intersection has one entry approach, one approach from the previous
    intersection and one exit.  Rows are arterials, columns collectors.  A
    ``*_turn`` trip turns onto the exit at its entry intersection (one
    signal); a ``*_through`` trip follows its street to the next intersection
    (two signals).  Entry lanes are long enough to hold a saturated queue, so
    waiting vehicles stay on the network where queue sensors see them.
    """
    streets = {"r0": ("W0", "n00", "n01", "E0"), "c1": ("N1", "n01", "n11", "S1"),
               "r1": ("E1", "n11", "n10", "W1"), "c0": ("S0", "n10", "n00", "N0")}
    # the street whose exit leaves from this street's entry intersection
    prev = {"r0": "c0", "c1": "r0", "r1": "c1", "c0": "r1"}
    lanes: List[Lane] = []
    ids: Dict[str, Tuple[str, str, str]] = {}
    approach: Dict[str, Dict[str, str]] = {}
    for s, (src, a, b, dst) in streets.items():
        seq = ((src, a, entry), (a, b, block), (b, dst, exit))
        for u, v, length in seq:
            lanes.append(Lane(f"{u}_{v}", length, free_speed, u, v))
            if v.startswith("n"):
                approach.setdefault(v, {})["EW" if s[0] == "r" else "NS"] = f"{u}_{v}"
        ids[s] = tuple(f"{u}_{v}" for u, v, _ in seq)
    intersections = []
    for nid in sorted(approach):
        ew, ns = approach[nid]["EW"], approach[nid]["NS"]
        intersections.append(Intersection(nid, (ew, ns), (Phase("EW", (ew,)), Phase("NS", (ns,)))))
    routes: List[Route] = []
    for s in streets:
        turn, through = ((arterial_turn, arterial_through) if s[0] == "r"
                         else (collector_turn, collector_through))
        if turn > 0:
            routes.append(Route((ids[s][0], ids[prev[s]][2]), turn, f"{s}_turn"))
        if through > 0:
            routes.append(Route(ids[s], through, f"{s}_through"))
    return NetworkSpec(lanes=tuple(lanes), intersections=tuple(intersections),
                       routes=tuple(routes), neighbor_threshold=neighbor_threshold)


def irregular_network(*, free_speed: float = 13.9, neighbor_threshold: int = 1) -> NetworkSpec:
    """Seven signalized intersections on a tree-plus-cycle layout.

    Topology (agents)::

        a - b - c
            |   |
        d - e - f - g
    """
    links = [("a", "b"), ("b", "c"), ("b", "e"), ("c", "f"),
             ("d", "e"), ("e", "f"), ("f", "g")]
    entries = {"a": "xa", "c": "xc", "d": "xd", "g": "xg"}
    lanes: List[Lane] = []
    inc: Dict[str, List[str]] = {n: [] for n in "abcdefg"}
    for u, v in links:
        for a, b in ((u, v), (v, u)):
            lanes.append(Lane(f"{a}_{b}", 250.0, free_speed, a, b))
            inc[b].append(f"{a}_{b}")
    for n, src in entries.items():
        lanes.append(Lane(f"{src}_{n}", 400.0, free_speed, src, n))
        inc[n].append(f"{src}_{n}")
    intersections = []
    for n in "abcdefg":
        lids = inc[n]
        half = max(1, len(lids) // 2)
        phases = (Phase("P0", tuple(lids[:half])), Phase("P1", tuple(lids[half:])))
        intersections.append(Intersection(n, tuple(lids), phases))
    routes = [
        Route(("xa_a", "a_b", "b_c", "c_f", "f_g"), 1.0, "a->g"),
        Route(("xg_g", "g_f", "f_e", "e_d"), 1.0, "g->d"),
        Route(("xd_d", "d_e", "e_b", "b_a"), 1.0, "d->a"),
        Route(("xc_c", "c_b", "b_e", "e_f"), 1.0, "c->f"),
        Route(("xa_a", "a_b", "b_e"), 1.0, "a->e"),
        Route(("xg_g", "g_f", "f_c"), 1.0, "g->c"),
    ]
    return NetworkSpec(lanes=tuple(lanes), intersections=tuple(intersections),
                       routes=tuple(routes), neighbor_threshold=neighbor_threshold)
