"""Multi-agent advantage actor-critic math.

Observation assembly with spatially discounted neighbor waves and neighbor
fingerprints, spatially discounted rewards, n-step returns, advantages, and
the actor / critic losses together with their gradients with respect to the
network outputs (policy logits and state values).

Sign convention: every loss here is minimized.  The actor loss is

    L_actor = - sum_t A_t log pi(u_t) - beta * sum_t H(pi_t),
    H(pi) = - sum_u pi(u) log pi(u),

so descending it follows the policy gradient and raises policy entropy.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

PROB_TOL = 1e-6


@dataclass
class HyperParams:
    alpha: float = 0.9              # spatial discount
    gamma: float = 0.99
    beta: float = 0.01              # entropy weight
    xi_critic: float = 0.5          # critic loss weight
    eta_actor: float = 5e-4
    eta_critic: float = 2.5e-4
    batch_size: int = 40
    delta_t: int = 5                # s between agent interactions
    t_yellow: float = 2.0
    episode_seconds: int = 3600
    n_vehicles: int = 2000
    insert_seconds: int = 2000      # vehicles enter during [0, insert_seconds)
    wave_norm: float = 5.0          # veh per lane
    reward_norm: float = 100.0      # veh per agent
    state_clip: float = 2.0
    reward_clip: float = 2.0
    grad_clip: float = 40.0
    rms_decay: float = 0.99
    rms_epsilon: float = 1e-5
    init_gain: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("eta_actor", "eta_critic", "delta_t", "t_yellow", "episode_seconds",
                     "wave_norm", "reward_norm", "state_clip", "reward_clip", "grad_clip"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.beta < 0 or self.xi_critic < 0 or self.n_vehicles < 0:
            raise ValueError("beta, xi_critic and n_vehicles must be non-negative")

    @property
    def steps_per_episode(self) -> int:
        return self.episode_seconds // self.delta_t

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**dict(doc))


def load_hyperparams(path) -> HyperParams:
    with open(path) as fh:
        return HyperParams.from_dict(json.load(fh))


def save_hyperparams(hp: HyperParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(hp.to_dict(), fh, indent=2)


@dataclass
class Observation:
    """Input of one agent at one interaction step.

    Components are ordered: own lanes, then neighbors in ascending id.
    """

    own_wave: np.ndarray
    neighbor_waves: List[np.ndarray]
    fingerprints: List[np.ndarray]
    neighbors: List[str] = field(default_factory=list)

    @property
    def wave(self) -> np.ndarray:
        return np.concatenate([self.own_wave, *self.neighbor_waves])

    @property
    def fingerprint(self) -> np.ndarray:
        if not self.fingerprints:
            return np.zeros(0)
        return np.concatenate(self.fingerprints)


def _check_distribution(p: np.ndarray, what: str) -> None:
    if np.any(p < 0) or abs(float(np.sum(p)) - 1.0) > PROB_TOL:
        raise ValueError(f"{what} is not a probability vector")


def assemble_observation(waves: Mapping[str, np.ndarray], fingerprints: Mapping[str, np.ndarray],
                         agent: str, neighbors: Sequence[str], hp: HyperParams,
                         norm: Optional[float] = None) -> Observation:
    norm = hp.wave_norm if norm is None else norm
    if not norm > 0:
        raise ValueError("norm must be positive")
    nbrs = sorted(neighbors)
    missing = [j for j in [agent, *nbrs] if j not in waves] + \
              [j for j in nbrs if j not in fingerprints]
    if missing:
        raise KeyError(f"missing observation data for {sorted(set(missing))}")
    clip = hp.state_clip

    def scaled(w):
        return np.clip(np.asarray(w, dtype=float) / norm, 0.0, clip)

    fps = []
    for j in nbrs:
        p = np.asarray(fingerprints[j], dtype=float)
        _check_distribution(p, f"fingerprint of {j!r}")
        fps.append(p)
    return Observation(own_wave=scaled(waves[agent]),
                       neighbor_waves=[hp.alpha * scaled(waves[j]) for j in nbrs],
                       fingerprints=fps, neighbors=nbrs)


def local_reward(queue_sum: float, norm: float, clip: float = 2.0) -> float:
    """Negated, normalized, clipped queue count of one agent."""
    if queue_sum < 0 or not norm > 0:
        raise ValueError("need queue_sum >= 0 and norm > 0")
    return float(np.clip(-queue_sum / norm, -clip, clip))


def spatial_discount(r_i: float, neighbor_rewards: Mapping[str, float], hp: HyperParams) -> float:
    total = r_i + hp.alpha * sum(neighbor_rewards[j] for j in sorted(neighbor_rewards))
    return total / (len(neighbor_rewards) + 1)


def n_step_returns(rewards: Sequence[float], bootstrap: float, hp: HyperParams) -> np.ndarray:
    """Discounted returns to the end of the batch, bootstrapped with the frozen critic."""
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ValueError("rewards must be non-empty")
    out = np.empty_like(r)
    acc = float(bootstrap)
    for t in range(r.size - 1, -1, -1):
        acc = r[t] + hp.gamma * acc
        out[t] = acc
    return out


def advantage(returns: Sequence[float], values: Sequence[float]) -> np.ndarray:
    R = np.asarray(returns, dtype=float)
    V = np.asarray(values, dtype=float)
    if R.shape != V.shape:
        raise ValueError(f"length mismatch: {R.shape} returns vs {V.shape} values")
    return R - V


def entropy(policy: np.ndarray) -> np.ndarray:
    """Entropy along the last axis with 0 log 0 = 0."""
    p = np.asarray(policy, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -plogp.sum(axis=-1)


def actor_loss(log_probs: Sequence[float], advantages: Sequence[float],
               policies: np.ndarray, hp: HyperParams) -> float:
    lp = np.asarray(log_probs, dtype=float)
    adv = np.asarray(advantages, dtype=float)
    pol = np.atleast_2d(np.asarray(policies, dtype=float))
    if not lp.shape == adv.shape == (pol.shape[0],):
        raise ValueError("log_probs, advantages and policies must have equal length")
    for p in pol:
        _check_distribution(p, "policy")
    return float(-np.sum(lp * adv) - hp.beta * np.sum(entropy(pol)))


def critic_loss(returns: Sequence[float], values: Sequence[float]) -> float:
    resid = advantage(returns, values)
    return float(0.5 * np.sum(resid * resid))


def total_loss(actor: float, critic: float, hp: HyperParams) -> float:
    return actor + hp.xi_critic * critic


def actor_logit_grad(policies: np.ndarray, actions: Sequence[int],
                     advantages: Sequence[float], beta: float) -> np.ndarray:
    """d L_actor / d logits for softmax policies, shape (T, n_actions)."""
    pol = np.asarray(policies, dtype=float)
    T = pol.shape[0]
    onehot = np.zeros_like(pol)
    onehot[np.arange(T), np.asarray(actions)] = 1.0
    adv = np.asarray(advantages, dtype=float)[:, None]
    logp = np.log(pol)
    H = -np.sum(pol * logp, axis=1, keepdims=True)
    return adv * (pol - onehot) + beta * pol * (logp + H)


def critic_value_grad(returns: Sequence[float], values: Sequence[float], xi: float) -> np.ndarray:
    """d (xi * L_critic) / d values."""
    return -xi * advantage(returns, values)


@dataclass
class Transition:
    obs: Observation
    action: int
    reward: float                       # clipped local reward r_{t,i}
    neighbor_rewards: Dict[str, float]  # r_{t,j}, j in N_i
    value: float                        # frozen critic output at collection
    policy: np.ndarray                  # pi_{t,i}, also this agent's next fingerprint
    next_obs: Optional[Observation] = None


@dataclass
class ExperienceBuffer:
    """Time-contiguous transitions of one agent plus the recurrent state at the first one."""

    agent: str
    capacity: int
    items: List[Transition] = field(default_factory=list)
    start_state: Optional[dict] = None

    def __len__(self):
        return len(self.items)

    @property
    def full(self) -> bool:
        return len(self.items) >= self.capacity

    def append(self, tr: Transition) -> None:
        if self.full:
            raise OverflowError(f"buffer of {self.agent!r} is full")
        if self.items:
            self.items[-1].next_obs = tr.obs
        self.items.append(tr)

    def clear(self) -> None:
        self.items.clear()
        self.start_state = None

    def arrays(self):
        """Stacked (waves, fingerprints, actions, rewards, values) for the batch."""
        waves = np.stack([tr.obs.wave for tr in self.items])
        fps = np.stack([tr.obs.fingerprint for tr in self.items])
        actions = np.array([tr.action for tr in self.items], dtype=int)
        rewards = np.array([tr.reward for tr in self.items])
        values = np.array([tr.value for tr in self.items])
        return waves, fps, actions, rewards, values

    def discounted_rewards(self, hp: HyperParams) -> np.ndarray:
        return np.array([spatial_discount(tr.reward, tr.neighbor_rewards, hp)
                         for tr in self.items])


def dump_buffer(buf: ExperienceBuffer, path) -> None:
    """Debug CSV of one batch: one row per transition."""
    nbrs = sorted(buf.items[0].neighbor_rewards) if buf.items else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "action", "reward", *[f"reward_{j}" for j in nbrs], "value",
                    "policy", "wave"])
        for t, tr in enumerate(buf.items):
            w.writerow([t, tr.action, tr.reward, *[tr.neighbor_rewards[j] for j in nbrs],
                        tr.value, " ".join(map(repr, tr.policy.tolist())),
                        " ".join(map(repr, tr.obs.wave.tolist()))])
