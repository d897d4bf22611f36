"""Episode orchestration: sensing, acting every delta_t seconds, batching and updates."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import marl, microsim, nn
from .network import NetworkSpec, sorted_neighbors

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    hp: marl.HyperParams = field(default_factory=marl.HyperParams)
    total_training_steps: int = 50_000
    checkpoint_every: int = 10        # episodes; 0 disables intermediate checkpoints
    eval_every: int = 0               # episodes; 0 disables periodic evaluation
    seed: int = 0
    sim: microsim.SimConfig = field(default_factory=lambda: microsim.SimConfig(record_trace=False))
    coeffs: microsim.EmissionCoefficients = field(
        default_factory=microsim.EmissionCoefficients.default)

    @property
    def steps_per_episode(self) -> int:
        return self.hp.steps_per_episode

    def __post_init__(self):
        if self.steps_per_episode * self.hp.delta_t != self.hp.episode_seconds:
            raise ValueError("episode_seconds must be a multiple of delta_t")
        if self.total_training_steps < 1:
            raise ValueError("total_training_steps must be positive")

    @property
    def n_episodes(self) -> int:
        return math.ceil(self.total_training_steps / self.steps_per_episode)


@dataclass
class EpisodeLog:
    agents: List[str]
    rewards: np.ndarray          # (steps, agents) clipped local rewards
    queues: np.ndarray           # (steps, agents) queue sum at t + delta_t
    actions: np.ndarray          # (steps, agents)
    entropy: np.ndarray          # (steps, agents); zero for fixed-time control
    updates: int = 0
    state: Optional[microsim.SimState] = None

    @property
    def cumulative_reward(self) -> float:
        return float(self.rewards.sum())

    @property
    def cumulative_queue(self) -> float:
        return float(self.queues.sum())

    @property
    def final_running(self) -> int:
        return microsim.running_vehicles(self.state) if self.state is not None else 0


def episode_schedule(spec: NetworkSpec, hp: marl.HyperParams, seed: int) -> microsim.InsertionSchedule:
    return microsim.make_schedule(spec, hp.n_vehicles, hp.insert_seconds, seed)


def init_nets(spec: NetworkSpec, hp: marl.HyperParams, seed: int = 0) -> Dict[str, nn.AgentNet]:
    """One actor-critic pair per agent, sized from its lanes and neighborhood."""
    nbrs = sorted_neighbors(spec)
    nets = {}
    for k, a in enumerate(spec.agents):
        x = spec.intersection(a)
        n_wave = len(x.incoming_lanes) + sum(len(spec.intersection(j).incoming_lanes)
                                             for j in nbrs[a])
        n_fp = sum(len(spec.intersection(j).phases) for j in nbrs[a])
        nets[a] = nn.AgentNet(n_wave, n_fp, len(x.phases), seed=seed * 1009 + k,
                              gain=hp.init_gain)
    return nets


class FixedTimeController:
    """Round-robin phases with ``cycle`` seconds per phase, blind to traffic (no sync)."""

    def __init__(self, spec: NetworkSpec, cycle: float = 20.0, t_yellow: float = 2.0):
        if not cycle > t_yellow:
            raise ValueError("cycle must exceed the yellow time")
        self.spec = spec
        self.cycle = cycle
        self.n_phases = {a: len(spec.intersection(a).phases) for a in spec.agents}

    def phase_at(self, agent: str, t: float) -> int:
        return int(t // self.cycle) % self.n_phases[agent]

    def act(self, t: float) -> Dict[str, int]:
        return {a: self.phase_at(a, t) for a in self.spec.agents}


def fixed_time_baseline(spec: NetworkSpec, cycle: float = 20.0,
                        t_yellow: float = 2.0) -> FixedTimeController:
    return FixedTimeController(spec, cycle, t_yellow)


def _observe(state, spec, agents, nbrs, fps, hp):
    waves = {a: microsim.measure_wave(state, a) for a in agents}
    return {a: marl.assemble_observation(waves, fps, a, nbrs[a], hp) for a in agents}


def _uniform_fps(spec, agents):
    return {a: np.full(len(spec.intersection(a).phases), 1.0 / len(spec.intersection(a).phases))
            for a in agents}


def run_episode(spec: NetworkSpec, schedule: microsim.InsertionSchedule, nets, hp: marl.HyperParams,
                mode: str = "train", seed: int = 0, *,
                sim_config: Optional[microsim.SimConfig] = None,
                coeffs: Optional[microsim.EmissionCoefficients] = None,
                update_order: Optional[Sequence[str]] = None,
                on_update=None) -> EpisodeLog:
    """Simulate one episode under learned (``train``/``eval``) or fixed-time control.

    ``nets`` is a dict of :class:`AgentNet` for train/eval, or a
    :class:`FixedTimeController` for ``mode="baseline"``.
    """
    if mode not in ("train", "eval", "baseline"):
        raise ValueError(f"unknown mode {mode!r}")
    if sim_config is None:
        sim_config = microsim.SimConfig(t_yellow=hp.t_yellow)
    state = microsim.init_sim(spec, schedule, coeffs, sim_config)
    agents = spec.agents
    nbrs = sorted_neighbors(spec)
    steps = hp.steps_per_episode
    rng = np.random.default_rng(seed)
    learned = mode != "baseline"
    if learned:
        for net in nets.values():
            net.reset_state()
    buffers = {a: marl.ExperienceBuffer(a, hp.batch_size) for a in agents}
    fps = _uniform_fps(spec, agents)

    n = len(agents)
    rewards = np.zeros((steps, n))
    queues = np.zeros((steps, n))
    actions = np.zeros((steps, n), dtype=int)
    ent = np.zeros((steps, n))
    updates = 0

    for k in range(steps):
        t = state.clock
        if learned:
            obs = _observe(state, spec, agents, nbrs, fps, hp)
            if mode == "train" and buffers[agents[0]].full:
                boot = {a: nets[a].value(obs[a].wave, obs[a].fingerprint) for a in agents}
                for a in agents:
                    buffers[a].items[-1].next_obs = obs[a]
                update_agents(nets, buffers, boot, hp, order=update_order)
                updates += 1
                if on_update is not None:
                    on_update(updates)
            policies, values = {}, {}
            for j, a in enumerate(agents):
                if mode == "train" and not buffers[a].items:
                    buffers[a].start_state = nets[a].snapshot_state()
                pi, v = nets[a].forward(obs[a].wave, obs[a].fingerprint)
                policies[a], values[a] = pi, v
                if mode == "train":
                    u = int(rng.choice(len(pi), p=pi))
                else:
                    u = int(np.argmax(pi))
                actions[k, j] = u
                ent[k, j] = float(marl.entropy(pi))
        else:
            plan = nets.act(t)
            for j, a in enumerate(agents):
                actions[k, j] = plan[a]

        for j, a in enumerate(agents):
            microsim.apply_action(state, a, int(actions[k, j]))
        for _ in range(hp.delta_t):
            microsim.step(state, 1.0)

        for j, a in enumerate(agents):
            q = microsim.measure_queue(state, a)
            queues[k, j] = q
            rewards[k, j] = marl.local_reward(q, hp.reward_norm, hp.reward_clip)

        if learned:
            if mode == "train":
                for j, a in enumerate(agents):
                    nb = {b: rewards[k, agents.index(b)] for b in nbrs[a]}
                    buffers[a].append(marl.Transition(obs[a], int(actions[k, j]), rewards[k, j],
                                                      nb, values[a], policies[a]))
            fps = policies

    if mode == "train" and buffers[agents[0]].items:
        obs = _observe(state, spec, agents, nbrs, fps, hp)
        boot = {a: nets[a].value(obs[a].wave, obs[a].fingerprint) for a in agents}
        for a in agents:
            buffers[a].items[-1].next_obs = obs[a]
        update_agents(nets, buffers, boot, hp, order=update_order)
        updates += 1
        if on_update is not None:
            on_update(updates)

    return EpisodeLog(agents, rewards, queues, actions, ent, updates, state)


def update_agents(nets: Dict[str, nn.AgentNet], buffers: Dict[str, marl.ExperienceBuffer],
                  bootstrap: Dict[str, float], hp: marl.HyperParams,
                  order: Optional[Sequence[str]] = None) -> Dict[str, nn.LossInfo]:
    """One MA2C update per agent from its batch; buffers are cleared afterwards.

    Every quantity an agent needs (its observations with the fingerprints
    seen at collection time, neighbor rewards, frozen critic values) is in
    its own buffer, so the result does not depend on ``order``.
    """
    order = list(order) if order is not None else sorted(buffers)
    lengths = {len(b) for b in buffers.values()}
    if len(lengths) != 1 or 0 in lengths:
        raise ValueError("all buffers must hold the same, non-zero number of transitions")
    infos = {}
    for a in order:
        buf = buffers[a]
        waves, fps, acts, _, values = buf.arrays()
        r_tilde = buf.discounted_rewards(hp)
        returns = marl.n_step_returns(r_tilde, bootstrap[a], hp)
        adv = marl.advantage(returns, values)
        info, grads = nets[a].loss_and_grads(waves, fps, acts, returns, adv,
                                             buf.start_state, hp)
        nn.apply_update(nets[a], grads, hp)
        infos[a] = info
    for buf in buffers.values():
        buf.clear()
    return infos


@dataclass
class TrainResult:
    nets: Dict[str, nn.AgentNet]
    curve: List[dict]
    checkpoints: List[str]


CURVE_COLUMNS = ("episode", "steps", "mean_reward", "mean_queue")


def train(config: TrainConfig, spec: NetworkSpec, out_dir=None, nets=None) -> TrainResult:
    """Train from scratch (or from ``nets``) for ``ceil(total_training_steps / 720)`` episodes."""
    hp = config.hp
    nets = nets if nets is not None else init_nets(spec, hp, config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    curve, ckpts = [], []
    steps = 0
    sim_cfg = microsim.SimConfig(**{**config.sim.__dict__, "t_yellow": hp.t_yellow,
                                    "record_trace": False})
    for ep in range(config.n_episodes):
        schedule = episode_schedule(spec, hp, seed=config.seed * 100_003 + ep)
        elog = run_episode(spec, schedule, nets, hp, "train", seed=config.seed * 7919 + ep,
                           sim_config=sim_cfg, coeffs=config.coeffs)
        steps += hp.steps_per_episode
        row = {"episode": ep, "steps": steps,
               "mean_reward": float(elog.rewards.mean()),
               "mean_queue": float(elog.queues.mean())}
        curve.append(row)
        log.info("episode %d steps %d mean_reward %.4f mean_queue %.2f running %d",
                 ep, steps, row["mean_reward"], row["mean_queue"], elog.final_running)
        if out is not None:
            _write_curve(out / "training_curve.csv", curve)
            last = ep == config.n_episodes - 1
            if last or (config.checkpoint_every and (ep + 1) % config.checkpoint_every == 0):
                path = out / ("final.npz" if last else f"ckpt_{ep + 1:05d}.npz")
                nn.save_checkpoint(path, nets, meta=_meta(config, spec, ep + 1, steps))
                ckpts.append(str(path))
        if config.eval_every and (ep + 1) % config.eval_every == 0:
            ev = evaluate(spec, nets, hp, seeds=[10_000 + ep])
            log.info("eval after episode %d: cumulative queue %.0f", ep, ev[0].cumulative_queue)
    return TrainResult(nets, curve, ckpts)


def _meta(config: TrainConfig, spec: NetworkSpec, episodes: int, steps: int) -> dict:
    return {"hp": config.hp.to_dict(), "seed": config.seed, "episodes": episodes,
            "steps": steps, "agents": spec.agents, "network": spec.to_dict()}


def _write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        w.writeheader()
        w.writerows(curve)


def evaluate(spec: NetworkSpec, controller, hp: marl.HyperParams, seeds: Sequence[int], *,
             coeffs: Optional[microsim.EmissionCoefficients] = None,
             sim_config: Optional[microsim.SimConfig] = None) -> List[EpisodeLog]:
    """Greedy (argmax) episodes for learned nets, or fixed-time episodes, one per seed."""
    mode = "baseline" if isinstance(controller, FixedTimeController) else "eval"
    cfg = sim_config or microsim.SimConfig(t_yellow=hp.t_yellow)
    return [run_episode(spec, episode_schedule(spec, hp, s), controller, hp, mode, seed=s,
                        sim_config=cfg, coeffs=coeffs)
            for s in seeds]
