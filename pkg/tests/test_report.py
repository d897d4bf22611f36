import numpy as np
import pytest

from ma2c_tsc import cli, microsim, report
from ma2c_tsc.microsim import POLLUTANTS, EmissionLedger, SimConfig, apply_action, init_sim, step
from ma2c_tsc.network import grid_network
from ma2c_tsc.report import EpisodeRecord

NOX = POLLUTANTS.index("NOx")


def episode(seed=0, n=300, ticks=1200, coeffs=None):
    spec = grid_network(2, 2)
    st = init_sim(spec, microsim.make_schedule(spec, n, ticks // 2, seed), coeffs,
                  SimConfig(intervals=((0.0, 600.0), (600.0, float(ticks)))))
    rng = np.random.default_rng(seed)
    for t in range(ticks):
        if t % 5 == 0:
            for a in spec.agents:
                apply_action(st, a, int(rng.integers(2)))
        step(st)
    return st


def test_empty_schedule_gives_zero_curve_and_report():
    spec = grid_network(2, 2)
    st = init_sim(spec, microsim.InsertionSchedule([]), None, SimConfig())
    for _ in range(3600):
        step(st)
    rec = EpisodeRecord.from_state(st)
    assert all(r == 0 for _, r in report.running_curve(rec))
    for rep in report.interval_report(rec):
        assert np.all(rep.normalized == 0) and np.all(rep.network == 0)
    assert report.clearance_time(report.running_curve(rec)) is None


def test_curve_matches_conservation():
    st = episode(1)
    rec = EpisodeRecord.from_state(st)
    curve = report.running_curve(rec)
    assert len(curve) == 1201
    for (t, run), (_, r2, ins, ext) in zip(curve, rec.trace):
        assert run == r2 == ins - ext


def test_truncated_trace_rejected():
    rec = EpisodeRecord.from_state(episode(2, ticks=200))
    rec.episode_seconds = 300.0
    with pytest.raises(ValueError, match="truncated"):
        report.running_curve(rec)


def test_unit_arithmetic():
    led = EmissionLedger(1, [(0.0, 1000.0)])
    led.by_interval[0, 0, NOX] = 100.0
    led.network[NOX] = 100.0
    rec = EpisodeRecord([], led, ["x"], np.array([500.0]), 1000.0)
    rep = report.interval_report(rec)[0]
    assert rep.normalized[0, NOX] == pytest.approx(720.0, rel=1e-12)


def test_normalization_round_trip_and_totals():
    rec = EpisodeRecord.from_state(episode(3))
    reps = report.interval_report(rec)
    for rep in reps:
        back = rep.normalized * rep.hours * rep.lane_km[:, None]
        assert np.allclose(back, rep.grams, rtol=1e-9, atol=0)
    assert np.allclose(sum(r.network for r in reps), rec.ledger.network, rtol=1e-12)


def test_interval_errors():
    rec = EpisodeRecord.from_state(episode(4, ticks=200))
    with pytest.raises(ValueError, match="overlap"):
        report.interval_report(rec, [(0, 150), (100, 200)])
    with pytest.raises(ValueError):
        report.interval_report(rec, [(0, 50)])


def test_comparison_table():
    st = episode(5)
    same = report.comparison_table(st.ledger, st.ledger)
    assert all(v == 0 for v in same.reductions.values())
    other = episode(6, n=150)
    tab = report.comparison_table(st.ledger, other.ledger)
    assert tab.baseline["NOx"] == pytest.approx(st.ledger.network[NOX])
    assert tab.baseline["CO2"] == pytest.approx(st.ledger.network[0] / 1000)
    assert all(v >= 0 for row in tab.rows()[1:3] for v in row[1:])
    assert "NOx [g]" in tab.render()


def test_proportional_coefficients_give_equal_reductions():
    base = microsim.EmissionCoefficients.default().to_dict()
    k = {p: 1.0 + i for i, p in enumerate(POLLUTANTS)}
    prop = {p: {regime: base["NOx"][regime] * k[p] for regime in base["NOx"]} for p in POLLUTANTS}
    coeffs = microsim.EmissionCoefficients.from_dict(prop)
    a, b = episode(7, coeffs=coeffs), episode(8, n=200, coeffs=coeffs)
    red = report.comparison_table(a.ledger, b.ledger).reductions
    assert np.allclose(list(red.values()), red["NOx"], rtol=1e-9)


def test_report_is_pure(tmp_path):
    tr, bl = episode(9), episode(10)
    for name, st in (("t", tr), ("b", bl)):
        microsim.write_trace(st, tmp_path / f"{name}.csv")
    outs = []
    for k in range(2):
        rec_t = report.load_episode(tmp_path / "t.csv")
        rec_b = report.load_episode(tmp_path / "b.csv")
        paths = report.write_report(tmp_path / f"out{k}", rec_t, rec_b)
        outs.append({p.name: p.read_bytes() for p in paths})
    assert outs[0] == outs[1]
    assert {"running_curve.csv", "comparison.csv", "intervals_0_600.csv"} <= set(outs[0])


def test_cli_baseline_and_report(tmp_path, capsys):
    assert cli.main(["baseline", "--episodes", "1", "--seed", "3", "--out",
                     str(tmp_path / "bl")]) == 0
    trace = tmp_path / "bl" / "baseline_seed3.csv"
    assert trace.exists()
    assert cli.main(["report", "--trained", str(trace), "--baseline", str(trace),
                     "--out", str(tmp_path / "rep")]) == 0
    assert "reduction" in capsys.readouterr().out
    assert (tmp_path / "rep" / "intervals_2000_3600.csv").exists()
    assert cli.main(["report", "--trained", str(tmp_path / "nope.csv"), "--baseline",
                     str(trace), "--out", str(tmp_path / "x")]) == 2
