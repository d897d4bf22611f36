"""Discrete-time point-queue traffic simulator with signal phase machines and emissions.

Vehicles cross each lane at its free speed and stop at the tail of a FIFO queue
in front of the stop line.  The queue head crosses only on green, at most
``s_rate`` vehicles per second, and only if the next lane on its route has
storage left (``length / vehicle_gap`` vehicles per lane).  A vehicle finishing
its last lane leaves the network.

Every vehicle accrues emissions once per step in one of three regimes: idle
(queued), acceleration (the first ``accel_duration`` seconds after leaving a
queue) or cruise (everything else).
"""
from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .network import NetworkSpec

POLLUTANTS = ("CO2", "CO", "NOx", "PMx", "HC", "fuel")
DEFAULT_INTERVALS = ((0.0, 1000.0), (1000.0, 2000.0), (2000.0, 3600.0))

FREE, QUEUED, EXITED = "free_flow", "queued", "exited"
IDLE, CRUISE, ACCEL = 0, 1, 2
QUEUE_SPEED = 0.1


@dataclass
class SimConfig:
    s_rate: float = 0.5           # queue discharge, veh/s per lane
    vehicle_gap: float = 7.5      # jam spacing, m
    accel_duration: float = 4.0   # s of acceleration regime after leaving a queue
    t_yellow: float = 2.0
    intervals: Tuple[Tuple[float, float], ...] = DEFAULT_INTERVALS
    record_trace: bool = True
    track_vehicles: bool = False  # per-vehicle emission shadow ledger (slow)

    def __post_init__(self):
        if self.s_rate <= 0 or self.vehicle_gap <= 0 or self.t_yellow <= 0:
            raise ValueError("s_rate, vehicle_gap and t_yellow must be positive")
        if self.accel_duration < 0:
            raise ValueError("accel_duration must be non-negative")
        self.intervals = tuple((float(a), float(b)) for a, b in self.intervals)
        for (a0, a1), (b0, _) in zip(self.intervals, self.intervals[1:]):
            if b0 < a1:
                raise ValueError("emission intervals must be sorted and non-overlapping")


@dataclass
class EmissionCoefficients:
    """Per-pollutant rates in g/s (fuel in mL/s), arrays ordered as ``POLLUTANTS``."""

    idle: np.ndarray
    cruise: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.idle, self.cruise, self.accel = (
            np.asarray(x, dtype=float).reshape(len(POLLUTANTS))
            for x in (self.idle, self.cruise, self.accel))
        for k, name in enumerate(POLLUTANTS):
            i, c, a = self.idle[k], self.cruise[k], self.accel[k]
            if not (a >= c >= i > 0):
                raise ValueError(
                    f"{name}: need accel >= cruise >= idle > 0, got {a}, {c}, {i}")

    @property
    def matrix(self) -> np.ndarray:
        """Rates stacked by regime, shape (3, n_pollutants)."""
        return np.stack([self.idle, self.cruise, self.accel])

    @classmethod
    def default(cls) -> "EmissionCoefficients":
        # passenger-car order of magnitude; acceleration at 2x cruise
        idle = np.array([1.10, 0.020, 5.0e-4, 2.5e-5, 3.0e-4, 0.47])
        cruise = np.array([2.40, 0.045, 1.1e-3, 5.5e-5, 6.5e-4, 1.03])
        return cls(idle=idle, cruise=cruise, accel=2.0 * cruise)

    @classmethod
    def from_dict(cls, doc: dict) -> "EmissionCoefficients":
        try:
            rows = [[float(doc[p][k]) for p in POLLUTANTS] for k in ("idle", "cruise", "accel")]
        except KeyError as exc:
            raise ValueError(f"emission coefficients: missing entry {exc}") from exc
        return cls(*rows)

    def to_dict(self) -> dict:
        return {p: {"idle": float(self.idle[k]), "cruise": float(self.cruise[k]),
                    "accel": float(self.accel[k])}
                for k, p in enumerate(POLLUTANTS)}


def load_coefficients(path) -> EmissionCoefficients:
    with open(path) as fh:
        return EmissionCoefficients.from_dict(json.load(fh))


@dataclass
class InsertionSchedule:
    entries: List[Tuple[int, int]]
    seed: int = 0

    def validate(self, spec: NetworkSpec) -> None:
        last = -math.inf
        for t, r in self.entries:
            if t < last:
                raise ValueError("insertion schedule times must be non-decreasing")
            if not 0 <= r < len(spec.routes):
                raise ValueError(f"insertion schedule: route index {r} out of range")
            last = t

    def __len__(self):
        return len(self.entries)


def make_schedule(spec: NetworkSpec, n_vehicles: int, insert_until: int = 2000,
                  seed: int = 0) -> InsertionSchedule:
    """Spread ``n_vehicles`` evenly over ``[0, insert_until)`` with weighted random routes."""
    rng = np.random.default_rng(seed)
    w = np.array([r.weight for r in spec.routes], dtype=float)
    routes = rng.choice(len(w), size=n_vehicles, p=w / w.sum())
    times = (np.arange(n_vehicles) * insert_until) // max(n_vehicles, 1)
    return InsertionSchedule([(int(t), int(r)) for t, r in zip(times, routes)], seed)


@dataclass(slots=True)
class Vehicle:
    id: int
    route: Tuple[int, ...]        # lane indices
    route_index: int = 0
    t_enter: float = 0.0          # time the vehicle entered its current lane
    speed: float = 0.0
    state: str = FREE
    accel_left: float = 0.0

    @property
    def lane(self) -> int:
        return self.route[min(self.route_index, len(self.route) - 1)]


@dataclass
class SignalMachine:
    intersection: str
    current_phase: str
    pending_phase: Optional[str] = None
    yellow_remaining: float = 0.0


class _LaneState:
    __slots__ = ("length", "speed", "zone", "capacity", "moving", "queue", "credit")

    def __init__(self, length, speed, zone, capacity):
        self.length = length
        self.speed = speed
        self.zone = zone
        self.capacity = capacity
        self.moving: Deque[Vehicle] = deque()   # head = furthest downstream
        self.queue: Deque[Vehicle] = deque()    # head = at the stop line
        self.credit = 0.0

    def occupancy(self) -> int:
        return len(self.moving) + len(self.queue)


class EmissionLedger:
    """Cumulative grams per (lane, pollutant), network totals, and interval subtotals."""

    def __init__(self, n_lanes: int, intervals: Sequence[Tuple[float, float]]):
        self.intervals = tuple(intervals)
        self.lane_totals = np.zeros((n_lanes, len(POLLUTANTS)))
        self.network = np.zeros(len(POLLUTANTS))
        self.by_interval = np.zeros((len(self.intervals), n_lanes, len(POLLUTANTS)))

    def interval_of(self, t: float) -> int:
        for k, (t0, t1) in enumerate(self.intervals):
            if t0 <= t < t1:
                return k
        return -1

    def add(self, grams: np.ndarray, t: float) -> None:
        self.lane_totals += grams
        self.network += grams.sum(axis=0)
        k = self.interval_of(t)
        if k >= 0:
            self.by_interval[k] += grams

    def total(self, pollutant: str) -> float:
        return float(self.network[POLLUTANTS.index(pollutant)])

    def copy(self) -> "EmissionLedger":
        other = EmissionLedger(self.lane_totals.shape[0], self.intervals)
        other.lane_totals = self.lane_totals.copy()
        other.network = self.network.copy()
        other.by_interval = self.by_interval.copy()
        return other


@dataclass
class SimState:
    spec: NetworkSpec
    config: SimConfig
    coeffs: EmissionCoefficients
    schedule: InsertionSchedule
    clock: float = 0.0
    signals: Dict[str, SignalMachine] = field(default_factory=dict)
    ledger: Optional[EmissionLedger] = None
    inserted: int = 0
    exited: int = 0
    deferred: int = 0          # vehicles whose insertion was postponed at least once
    trace: List[tuple] = field(default_factory=list)
    shadow: Dict[int, np.ndarray] = field(default_factory=dict)
    # runtime internals
    _lanes: List[_LaneState] = field(default_factory=list, repr=False)
    _next_entry: int = field(default=0, repr=False)
    _backlog: Dict[int, Deque[list]] = field(default_factory=dict, repr=False)
    _accelerating: List[Vehicle] = field(default_factory=list, repr=False)
    _signal_lanes: Dict[str, Tuple[List[int], List[List[int]]]] = field(
        default_factory=dict, repr=False)
    _agent_lanes: Dict[str, List[int]] = field(default_factory=dict, repr=False)
    _rates: np.ndarray = field(default=None, repr=False)
    _crossings: List[Tuple[float, int]] = field(default_factory=list, repr=False)

    @property
    def vehicles(self) -> List[Vehicle]:
        """Vehicles currently on the network, lane by lane, front to back."""
        out = []
        for ls in self._lanes:
            out.extend(ls.queue)
            out.extend(ls.moving)
        return out

    @property
    def backlog(self) -> int:
        """Scheduled vehicles waiting for room on their entry lane."""
        return sum(len(q) for q in self._backlog.values())

    def lane_state(self, lane_id: str) -> _LaneState:
        return self._lanes[self.spec.lane_index(lane_id)]

    def position(self, v: Vehicle) -> float:
        """Distance of ``v`` from the start of its current lane."""
        ls = self._lanes[v.lane]
        if v.state == QUEUED:
            return ls.length - ls.queue.index(v) * self.config.vehicle_gap
        return min(ls.length, (self.clock - v.t_enter) * ls.speed)


def init_sim(spec: NetworkSpec, schedule: InsertionSchedule,
             coeffs: Optional[EmissionCoefficients] = None,
             config: Optional[SimConfig] = None) -> SimState:
    """Empty network at t = 0 with every signal on its first phase."""
    config = config or SimConfig()
    coeffs = coeffs or EmissionCoefficients.default()
    schedule.validate(spec)
    st = SimState(spec=spec, config=config, coeffs=coeffs, schedule=schedule)
    st._rates = coeffs.matrix
    st.ledger = EmissionLedger(len(spec.lanes), config.intervals)
    for ln in spec.lanes:
        cap = max(1, int(ln.length // config.vehicle_gap))
        st._lanes.append(_LaneState(ln.length, ln.free_speed, ln.sensor_zone, cap))
    for x in spec.intersections:
        if not x.is_agent:
            continue
        st.signals[x.id] = SignalMachine(x.id, x.phases[0].id)
        incoming = [spec.lane_index(l) for l in x.incoming_lanes]
        greens = [[spec.lane_index(l) for l in ph.green_lanes] for ph in x.phases]
        st._signal_lanes[x.id] = (incoming, greens)
        st._agent_lanes[x.id] = incoming
    if config.record_trace:
        _record(st)
    return st


def _target_phase(sig: SignalMachine) -> str:
    return sig.pending_phase if sig.pending_phase is not None else sig.current_phase


def apply_action(state: SimState, agent: str, action: Union[str, int]) -> SimState:
    """Request phase ``action`` at ``agent``; a change starts a yellow transition.

    A request arriving during yellow retargets the transition without
    restarting the yellow clock.  ``action`` may be a phase id or index.
    """
    if agent not in state.signals:
        raise KeyError(f"unknown agent {agent!r}")
    x = state.spec.intersection(agent)
    if isinstance(action, (int, np.integer)):
        if not 0 <= action < len(x.phases):
            raise KeyError(f"agent {agent!r} has no phase index {action}")
        action = x.phases[int(action)].id
    else:
        x.phase_index(action)
    sig = state.signals[agent]
    if action == _target_phase(sig):
        return state
    if sig.yellow_remaining > 0:
        sig.pending_phase = action
    else:
        sig.pending_phase = action
        sig.yellow_remaining = state.config.t_yellow
    return state


def current_phase_index(state: SimState, agent: str) -> int:
    return state.spec.intersection(agent).phase_index(state.signals[agent].current_phase)


def _green_mask(state: SimState) -> List[bool]:
    green = [True] * len(state._lanes)
    spec = state.spec
    for aid, sig in state.signals.items():
        incoming, greens = state._signal_lanes[aid]
        for k in incoming:
            green[k] = False
        if sig.yellow_remaining <= 0:
            idx = spec.intersection(aid).phase_index(sig.current_phase)
            for k in greens[idx]:
                green[k] = True
    return green


def step(state: SimState, dt: float = 1.0) -> SimState:
    """Advance the simulation by ``dt`` seconds."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    cfg = state.config
    lanes = state._lanes
    t0 = state.clock
    t1 = t0 + dt

    _insert_due(state, t0)
    green = _green_mask(state)
    exited_now: List[Tuple[Vehicle, int, int]] = []
    cap = max(1.0, cfg.s_rate * dt)
    gap = cfg.vehicle_gap

    for k, ls in enumerate(lanes):
        g = green[k]
        if g:
            ls.credit = min(ls.credit + cfg.s_rate * dt, cap)
        else:
            ls.credit = 0.0
        queue = ls.queue
        while queue and ls.credit >= 1.0:
            v = queue[0]
            if not _has_room(state, v):
                break
            queue.popleft()
            ls.credit -= 1.0
            v.accel_left = cfg.accel_duration
            if cfg.accel_duration > 0:
                state._accelerating.append(v)
            _cross(state, v, k, t1, exited_now, ACCEL)
        moving = ls.moving
        tail = ls.length - len(queue) * gap
        while moving:
            v = moving[0]
            if (t1 - v.t_enter) * ls.speed < tail:
                break
            moving.popleft()
            if not queue and g and ls.credit >= 1.0 and _has_room(state, v):
                ls.credit -= 1.0
                _cross(state, v, k, t1, exited_now, CRUISE)
            else:
                v.state = QUEUED
                v.speed = 0.0
                queue.append(v)
                tail -= gap

    _accrue(state, exited_now, t0, dt)

    for sig in state.signals.values():
        if sig.yellow_remaining > 0:
            sig.yellow_remaining -= dt
            if sig.yellow_remaining <= 1e-9:
                sig.yellow_remaining = 0.0
                sig.current_phase = sig.pending_phase
                sig.pending_phase = None

    state.clock = t1
    if cfg.record_trace:
        _record(state)
    return state


def _insert_due(state: SimState, t: float) -> None:
    entries = state.schedule.entries
    routes = state.spec.routes
    spec = state.spec
    while state._next_entry < len(entries) and entries[state._next_entry][0] <= t:
        vid = state._next_entry
        ridx = entries[vid][1]
        first = spec.lane_index(routes[ridx].lanes[0])
        state._backlog.setdefault(first, deque()).append([vid, ridx, False])
        state._next_entry += 1
    for k in sorted(state._backlog):
        q = state._backlog[k]
        ls = state._lanes[k]
        while q and ls.occupancy() < ls.capacity:
            vid, ridx, _ = q.popleft()
            route = tuple(spec.lane_index(l) for l in routes[ridx].lanes)
            v = Vehicle(vid, route, 0, t, ls.speed, FREE)
            ls.moving.append(v)
            state.inserted += 1
        for item in q:
            if not item[2]:
                item[2] = True
                state.deferred += 1


def _has_room(state: SimState, v: Vehicle) -> bool:
    if v.route_index + 1 >= len(v.route):
        return True
    nxt = state._lanes[v.route[v.route_index + 1]]
    return nxt.occupancy() < nxt.capacity


def _cross(state: SimState, v: Vehicle, lane: int, t1: float, exited_now, regime) -> None:
    state._crossings.append((t1, lane))
    v.route_index += 1
    if v.route_index >= len(v.route):
        v.state = EXITED
        state.exited += 1
        exited_now.append((v, lane, ACCEL if v.accel_left > 0 else regime))
        return
    nxt = state._lanes[v.route[v.route_index]]
    v.t_enter = t1
    v.state = FREE
    v.speed = nxt.speed
    nxt.moving.append(v)


def _accrue(state: SimState, exited_now, t0: float, dt: float) -> None:
    lanes = state._lanes
    counts = np.zeros((len(lanes), 3))
    for k, ls in enumerate(lanes):
        counts[k, IDLE] = len(ls.queue)
        counts[k, CRUISE] = len(ls.moving)
    regimes: Dict[int, int] = {}
    still = []
    for v in state._accelerating:
        if v.state == FREE and v.accel_left > 0:
            counts[v.lane, CRUISE] -= 1
            counts[v.lane, ACCEL] += 1
            regimes[v.id] = ACCEL
            v.accel_left -= dt
            if v.accel_left > 1e-9:
                still.append(v)
        else:
            v.accel_left = 0.0
    state._accelerating = still
    for v, lane, regime in exited_now:
        counts[lane, regime] += 1
        regimes[v.id] = regime
    state.ledger.add(counts @ state._rates * dt, t0)

    if state.config.track_vehicles:
        rates = state._rates
        for ls in lanes:
            for v in ls.queue:
                _shadow_add(state, v.id, rates[IDLE] * dt)
            for v in ls.moving:
                _shadow_add(state, v.id, rates[regimes.get(v.id, CRUISE)] * dt)
        for v, _, regime in exited_now:
            _shadow_add(state, v.id, rates[regime] * dt)


def _shadow_add(state: SimState, vid: int, grams: np.ndarray) -> None:
    acc = state.shadow.get(vid)
    if acc is None:
        state.shadow[vid] = grams.copy()
    else:
        acc += grams


def _record(state: SimState) -> None:
    queues = tuple(measure_queue(state, a) for a in state.spec.agents)
    state.trace.append((state.clock, running_vehicles(state), state.inserted,
                        state.exited, queues, tuple(state.ledger.network)))


def measure_wave(state: SimState, agent: str) -> np.ndarray:
    """Vehicles within the sensor zone of each incoming lane, in ``incoming_lanes`` order."""
    lanes = state._agent_lanes[agent]
    gap = state.config.vehicle_gap
    out = np.zeros(len(lanes))
    for n, k in enumerate(lanes):
        ls = state._lanes[k]
        count = min(len(ls.queue), int(ls.zone // gap) + 1) if ls.queue else 0
        edge = ls.length - ls.zone
        for v in ls.moving:
            if min(ls.length, (state.clock - v.t_enter) * ls.speed) >= edge:
                count += 1
            else:
                break
        out[n] = count
    return out


def measure_queue(state: SimState, agent: str) -> int:
    """Vehicles slower than 0.1 m/s on the incoming lanes of ``agent``."""
    return sum(len(state._lanes[k].queue) for k in state._agent_lanes[agent])


def running_vehicles(state: SimState) -> int:
    return sum(ls.occupancy() for ls in state._lanes)


def place_vehicle(state: SimState, lane_id: str, pos: float = 0.0, *,
                  queued: bool = False, route: Optional[Sequence[str]] = None) -> Vehicle:
    """Put a vehicle directly on a lane, bypassing the schedule.

    Queued vehicles join the back of the queue (``pos`` is ignored); moving
    vehicles are placed ``pos`` meters from the lane start.  The default
    route is the single lane, so the vehicle leaves at its stop line.
    """
    spec = state.spec
    k = spec.lane_index(lane_id)
    ls = state._lanes[k]
    if route is None:
        route = [lane_id]
    if route[0] != lane_id:
        raise ValueError("route must start on the placement lane")
    if ls.occupancy() >= ls.capacity:
        raise ValueError(f"lane {lane_id!r} is full")
    ridx = tuple(spec.lane_index(l) for l in route)
    vid = -(state.inserted + 1)
    state.inserted += 1
    if queued:
        v = Vehicle(vid, ridx, 0, state.clock, 0.0, QUEUED)
        ls.queue.append(v)
        return v
    if not 0 <= pos <= ls.length:
        raise ValueError("pos outside lane")
    v = Vehicle(vid, ridx, 0, state.clock - pos / ls.speed, ls.speed, FREE)
    ahead = [u for u in ls.moving if state.position(u) >= pos]
    behind = [u for u in ls.moving if state.position(u) < pos]
    ls.moving.clear()
    ls.moving.extend(ahead + [v] + behind)
    return v


def stop_line_crossings(state: SimState) -> List[Tuple[float, int]]:
    """(time, lane index) of every stop-line crossing so far."""
    return list(state._crossings)


def trace_columns(spec: NetworkSpec) -> List[str]:
    return (["t", "running_vehicles", "inserted", "exited"]
            + [f"queue_{a}" for a in spec.agents] + list(POLLUTANTS))


def trace_rows(state: SimState) -> List[list]:
    return [[t, run, ins, ext, *qs, *tot] for t, run, ins, ext, qs, tot in state.trace]


def write_trace(state: SimState, path) -> None:
    """Per-second episode trace as CSV plus a sibling ``.ledger.json`` with lane detail."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trace_columns(state.spec))
        for row in trace_rows(state):
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    with open(ledger_path(path), "w") as fh:
        json.dump(ledger_to_dict(state), fh)


def ledger_path(trace_path) -> str:
    s = str(trace_path)
    return (s[:-4] if s.endswith(".csv") else s) + ".ledger.json"


def ledger_to_dict(state: SimState) -> dict:
    led = state.ledger
    return {
        "pollutants": list(POLLUTANTS),
        "lanes": [ln.id for ln in state.spec.lanes],
        "lane_lengths": [ln.length for ln in state.spec.lanes],
        "intervals": [list(iv) for iv in led.intervals],
        "lane_totals": led.lane_totals.tolist(),
        "network": led.network.tolist(),
        "by_interval": led.by_interval.tolist(),
        "episode_seconds": state.clock,
    }
