"""Command line entry point: ``ma2c-tsc {train,eval,baseline,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import marl, microsim, nn, report, trainer
from .network import fixture_path, load_network, network_from_dict

log = logging.getLogger("ma2c_tsc")

TRAIN_KEYS = ("total_training_steps", "checkpoint_every", "eval_every", "seed")


def _network(arg):
    """A network file path, or the name of a shipped fixture (grid2x2, grid3x3, irregular7)."""
    p = Path(arg)
    return load_network(p if p.exists() else fixture_path(arg))


def _coeffs(arg):
    return microsim.load_coefficients(arg) if arg else microsim.EmissionCoefficients.default()


def load_train_config(path) -> trainer.TrainConfig:
    """JSON with optional ``hyperparams`` object plus top-level training keys."""
    doc = json.loads(Path(path).read_text()) if path else {}
    unknown = set(doc) - {"hyperparams", "coefficients", *TRAIN_KEYS}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    hp = marl.HyperParams.from_dict(doc.get("hyperparams", {}))
    kw = {k: doc[k] for k in TRAIN_KEYS if k in doc}
    return trainer.TrainConfig(hp=hp, coeffs=_coeffs(doc.get("coefficients")), **kw)


def _write_episodes(out: Path, prefix: str, logs, seeds) -> list:
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for s, ep in zip(seeds, logs):
        path = out / f"{prefix}_seed{s}.csv"
        microsim.write_trace(ep.state, path)
        curve = report.running_curve(report.EpisodeRecord.from_state(ep.state))
        rows.append({"seed": s, "trace": str(path), "cumulative_queue": ep.cumulative_queue,
                     "cumulative_reward": ep.cumulative_reward,
                     "running_at_end": ep.final_running + ep.state.backlog,
                     "clearance_time": report.clearance_time(curve),
                     "NOx_g": float(ep.state.ledger.network[microsim.POLLUTANTS.index("NOx")])})
    (out / f"{prefix}_summary.json").write_text(json.dumps(rows, indent=2))
    return rows


def _print_rows(rows):
    for r in rows:
        clear = "-" if r["clearance_time"] is None else f"{r['clearance_time']:.0f}"
        print(f"seed {r['seed']}: cumulative queue {r['cumulative_queue']:.0f}, "
              f"running at end {r['running_at_end']}, cleared at {clear}, NOx {r['NOx_g']:.1f} g")
    print(f"mean cumulative queue {np.mean([r['cumulative_queue'] for r in rows]):.0f}")


def cmd_train(args):
    cfg = load_train_config(args.config)
    if args.steps is not None:
        cfg.total_training_steps = args.steps
    if args.seed is not None:
        cfg.seed = args.seed
    spec = _network(args.network)
    res = trainer.train(cfg, spec, out_dir=args.out)
    print(f"trained {len(res.curve)} episodes; checkpoint {res.checkpoints[-1]}")
    return 0


def cmd_eval(args):
    nets, meta = nn.load_checkpoint(args.checkpoint)
    spec = _network(args.network) if args.network else network_from_dict(meta["network"])
    hp = marl.HyperParams.from_dict(meta.get("hp", {}))
    seeds = [args.seed + k for k in range(args.episodes)]
    logs = trainer.evaluate(spec, nets, hp, seeds, coeffs=_coeffs(args.coefficients))
    _print_rows(_write_episodes(Path(args.out), "eval", logs, seeds))
    return 0


def cmd_baseline(args):
    spec = _network(args.network)
    hp = marl.HyperParams.from_dict(json.loads(Path(args.hyperparams).read_text())) \
        if args.hyperparams else marl.HyperParams()
    ctl = trainer.fixed_time_baseline(spec, args.cycle, hp.t_yellow)
    seeds = [args.seed + k for k in range(args.episodes)]
    logs = trainer.evaluate(spec, ctl, hp, seeds, coeffs=_coeffs(args.coefficients))
    _print_rows(_write_episodes(Path(args.out), "baseline", logs, seeds))
    return 0


def cmd_report(args):
    trained = report.load_episode(args.trained)
    baseline = report.load_episode(args.baseline)
    paths = report.write_report(args.out, trained, baseline, svg=args.svg)
    print(report.comparison_table(baseline.ledger, trained.ledger).render())
    for p in paths:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ma2c-tsc", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train MA2C agents")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--network", default="grid2x2", help="network file or fixture name")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="override total_training_steps")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=500)
    p.add_argument("--network", help="defaults to the network stored in the checkpoint")
    p.add_argument("--coefficients")
    p.add_argument("--out", default="eval_out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="fixed-time control episodes")
    p.add_argument("--cycle", type=float, default=20.0)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=500)
    p.add_argument("--network", default="grid2x2")
    p.add_argument("--hyperparams", help="JSON hyperparameters (demand, timing)")
    p.add_argument("--coefficients")
    p.add_argument("--out", default="baseline_out")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("report", help="emission report from two traces")
    p.add_argument("--trained", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--svg", action="store_true", help="also write SVG charts (needs matplotlib)")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
