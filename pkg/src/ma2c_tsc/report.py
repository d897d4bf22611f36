"""Emission and traffic reports from finished episodes.

Inputs are per-second episode traces and emission ledgers (either live
:class:`~ma2c_tsc.microsim.SimState` objects or the CSV/JSON pair written by
:func:`~ma2c_tsc.microsim.write_trace`).  Outputs are CSV files; SVG charts
are optional and need matplotlib.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .microsim import POLLUTANTS, EmissionLedger, SimState, ledger_path, ledger_to_dict

# column label and grams -> unit factor for the comparison table
TABLE_UNITS = {"CO2": ("CO2 [kg]", 1e-3), "CO": ("CO [kg]", 1e-3), "NOx": ("NOx [g]", 1.0),
               "PMx": ("PMx [g]", 1.0), "HC": ("HC [g]", 1.0), "fuel": ("fuel [L]", 1e-3)}


@dataclass
class EpisodeRecord:
    """What a report needs from one episode."""

    trace: List[Tuple[float, int, int, int]]   # (t, running, inserted, exited)
    ledger: EmissionLedger
    lane_ids: List[str]
    lane_lengths: np.ndarray                    # m
    episode_seconds: float

    @classmethod
    def from_state(cls, state: SimState) -> "EpisodeRecord":
        return cls.from_dict([row[:4] for row in state.trace], ledger_to_dict(state))

    @classmethod
    def from_dict(cls, trace, doc: dict) -> "EpisodeRecord":
        if list(doc["pollutants"]) != list(POLLUTANTS):
            raise ValueError("ledger pollutant order does not match")
        led = EmissionLedger(len(doc["lanes"]), [tuple(iv) for iv in doc["intervals"]])
        led.lane_totals = np.array(doc["lane_totals"], dtype=float).reshape(led.lane_totals.shape)
        led.network = np.array(doc["network"], dtype=float)
        led.by_interval = np.array(doc["by_interval"], dtype=float).reshape(led.by_interval.shape)
        return cls(list(trace), led, list(doc["lanes"]),
                   np.array(doc["lane_lengths"], dtype=float), float(doc["episode_seconds"]))


def load_episode(trace_path) -> EpisodeRecord:
    """Read ``trace.csv`` and its sibling ``trace.ledger.json``."""
    rows = []
    with open(trace_path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append((float(rec["t"]), int(rec["running_vehicles"]), int(rec["inserted"]),
                         int(rec["exited"])))
    with open(ledger_path(trace_path)) as fh:
        doc = json.load(fh)
    return EpisodeRecord.from_dict(rows, doc)


def running_curve(record: EpisodeRecord) -> List[Tuple[float, int]]:
    """(t, running vehicles), one point per second from 0 to the episode end."""
    pts = [(t, run) for t, run, *_ in record.trace]
    n = int(round(record.episode_seconds)) + 1
    if len(pts) != n or any(abs(t - k) > 1e-9 for k, (t, _) in enumerate(pts)):
        raise ValueError(f"trace is truncated or not 1 s spaced ({len(pts)} points, "
                         f"expected {n})")
    return pts


def clearance_time(curve: Sequence[Tuple[float, int]], after: float = 0.0) -> Optional[float]:
    """First time at or after ``after`` (and after the first vehicle) with nobody running."""
    started = False
    for t, run in curve:
        started = started or run > 0
        if started and t >= after and run == 0:
            return t
    return None


@dataclass
class IntervalReport:
    interval: Tuple[float, float]
    lane_ids: List[str]
    lane_km: np.ndarray           # (lanes,)
    grams: np.ndarray             # (lanes, pollutants)
    network: np.ndarray           # (pollutants,) grams

    @property
    def hours(self) -> float:
        return (self.interval[1] - self.interval[0]) / 3600.0

    @property
    def normalized(self) -> np.ndarray:
        """g/h/km per lane and pollutant."""
        return self.grams / (self.hours * self.lane_km[:, None])

    @property
    def network_normalized(self) -> np.ndarray:
        return self.network / (self.hours * float(self.lane_km.sum()))


def interval_report(record: EpisodeRecord,
                    intervals: Optional[Sequence[Tuple[float, float]]] = None) -> List[IntervalReport]:
    """Per-lane emissions normalized by interval duration and lane length.

    Intervals must be among those the ledger accumulated during simulation.
    """
    led = record.ledger
    intervals = [tuple(map(float, iv)) for iv in (intervals or led.intervals)]
    for (a0, a1), (b0, b1) in zip(sorted(intervals), sorted(intervals)[1:]):
        if b0 < a1:
            raise ValueError(f"intervals {(a0, a1)} and {(b0, b1)} overlap")
    out = []
    for iv in intervals:
        if iv[1] <= iv[0]:
            raise ValueError(f"empty interval {iv}")
        if iv not in led.intervals:
            raise ValueError(f"interval {iv} was not recorded; ledger has {led.intervals}")
        g = led.by_interval[led.intervals.index(iv)]
        out.append(IntervalReport(iv, record.lane_ids, record.lane_lengths / 1000.0,
                                  g.copy(), g.sum(axis=0)))
    return out


@dataclass
class ComparisonTable:
    baseline: Dict[str, float]      # in table units
    trained: Dict[str, float]

    @property
    def reductions(self) -> Dict[str, float]:
        """Percentage reduction of trained w.r.t. baseline per pollutant."""
        out = {}
        for p in POLLUTANTS:
            b = self.baseline[p]
            out[p] = 0.0 if b == 0 else 100.0 * (1.0 - self.trained[p] / b)
        return out

    def rows(self) -> List[List]:
        head = ["", *[TABLE_UNITS[p][0] for p in POLLUTANTS]]
        red = self.reductions
        return [head,
                ["baseline", *[self.baseline[p] for p in POLLUTANTS]],
                ["trained", *[self.trained[p] for p in POLLUTANTS]],
                ["reduction [%]", *[red[p] for p in POLLUTANTS]]]

    def render(self) -> str:
        rows = self.rows()
        cells = [[r[0]] + [f"{x:.3f}" for x in r[1:]] if k else r for k, r in enumerate(rows)]
        widths = [max(len(str(r[c])) for r in cells) for c in range(len(cells[0]))]
        lines = [" | ".join(str(v).rjust(w) for v, w in zip(r, widths)) for r in cells]
        lines.insert(1, "-+-".join("-" * w for w in widths))
        return "\n".join(lines)


def _table_units(network: np.ndarray) -> Dict[str, float]:
    return {p: float(network[k]) * TABLE_UNITS[p][1] for k, p in enumerate(POLLUTANTS)}


def comparison_table(baseline: EmissionLedger, trained: EmissionLedger) -> ComparisonTable:
    return ComparisonTable(_table_units(baseline.network), _table_units(trained.network))


def mean_comparison(baselines: Sequence[EmissionLedger],
                    trained: Sequence[EmissionLedger]) -> ComparisonTable:
    """Table over several evaluation seeds (mean of the per-seed totals)."""
    b = np.mean([l.network for l in baselines], axis=0)
    t = np.mean([l.network for l in trained], axis=0)
    return ComparisonTable(_table_units(b), _table_units(t))


# ---------------------------------------------------------------------------
# CSV / SVG output

def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def running_curve_csv(curves: Dict[str, Sequence[Tuple[float, int]]]) -> str:
    names = list(curves)
    n = len(next(iter(curves.values())))
    rows = [["t", *names]]
    for k in range(n):
        rows.append([curves[names[0]][k][0], *[curves[c][k][1] for c in names]])
    return _csv_text(rows)


def interval_csv(rep: IntervalReport) -> str:
    head = ["lane", "lane_km", *[f"{p}_g" for p in POLLUTANTS],
            *[f"{p}_g_per_h_km" for p in POLLUTANTS]]
    rows = [head]
    norm = rep.normalized
    for k, lid in enumerate(rep.lane_ids):
        rows.append([lid, rep.lane_km[k], *rep.grams[k], *norm[k]])
    rows.append(["network", rep.lane_km.sum(), *rep.network, *rep.network_normalized])
    return _csv_text(rows)


def comparison_csv(table: ComparisonTable) -> str:
    return _csv_text(table.rows())


def write_report(out_dir, trained: EpisodeRecord, baseline: EpisodeRecord,
                 svg: bool = False) -> List[Path]:
    """Write running_curve.csv, intervals_<t0>_<t1>.csv (per controller) and comparison.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        p = out / name
        p.write_text(text)
        written.append(p)

    curves = {"trained": running_curve(trained), "baseline": running_curve(baseline)}
    put("running_curve.csv", running_curve_csv(curves))
    for label, rec in (("trained", trained), ("baseline", baseline)):
        for rep in interval_report(rec):
            t0, t1 = (int(x) if float(x).is_integer() else x for x in rep.interval)
            suffix = "" if label == "trained" else "_baseline"
            put(f"intervals_{t0}_{t1}{suffix}.csv", interval_csv(rep))
    table = comparison_table(baseline.ledger, trained.ledger)
    put("comparison.csv", comparison_csv(table))
    put("comparison.txt", table.render() + "\n")
    if svg:
        written += _write_svgs(out, curves, trained, baseline)
    return written


def _write_svgs(out: Path, curves, trained: EpisodeRecord, baseline: EpisodeRecord) -> List[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for name, pts in curves.items():
        ax.plot([t for t, _ in pts], [r for _, r in pts], label=name)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("running vehicles")
    ax.legend()
    fig.tight_layout()
    p = out / "running_curve.svg"
    fig.savefig(p)
    plt.close(fig)
    paths.append(p)

    k = POLLUTANTS.index("NOx")
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for off, (name, rec) in enumerate((("baseline", baseline), ("trained", trained))):
        reps = interval_report(rec)
        labels = [f"{int(r.interval[0])}-{int(r.interval[1])}" for r in reps]
        ax.bar(np.arange(len(reps)) + 0.4 * off, [r.network_normalized[k] for r in reps],
               width=0.4, label=name)
        ax.set_xticks(np.arange(len(reps)) + 0.2, labels)
    ax.set_ylabel("NOx [g/h/km]")
    ax.legend()
    fig.tight_layout()
    p = out / "nox_intervals.svg"
    fig.savefig(p)
    plt.close(fig)
    paths.append(p)
    return paths
