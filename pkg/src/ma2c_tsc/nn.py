"""Small recurrent actor-critic networks in numpy with exact backpropagation.

Each agent owns two networks of identical shape (actor and critic)::

    wave  -> FC + ReLU --\\
                          concat (128) -> LSTM (64) -> head
    print -> FC + ReLU --/

The actor head is a softmax over phases, the critic head a single linear
unit.  Gradients are computed by backpropagation through time over a whole
batch, starting from the recurrent state recorded at the batch's first step.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import marl

FC_UNITS = 128
LSTM_UNITS = 64
CHECKPOINT_FORMAT = 1

Grads = Dict[str, np.ndarray]


class NonFiniteError(FloatingPointError):
    pass


def orthogonal(shape: Tuple[int, int], rng: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    """(Semi-)orthogonal matrix: orthonormal columns if rows >= cols, else orthonormal rows."""
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q


def orthogonality_error(w: np.ndarray) -> float:
    """max |W^T W - I| (or W W^T for wide matrices)."""
    g = w.T @ w if w.shape[0] >= w.shape[1] else w @ w.T
    return float(np.max(np.abs(g - np.eye(g.shape[0]))))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _finite(x, where):
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {where}")
    return x


class RecurrentNet:
    """FC(wave) | FC(fingerprint) -> LSTM -> linear head."""

    def __init__(self, n_wave: int, n_fp: int, n_out: int, rng: np.random.Generator, *,
                 fc_units: int = FC_UNITS, lstm_units: int = LSTM_UNITS, gain: float = 1.0):
        if n_wave < 1 or n_out < 1 or n_fp < 0:
            raise ValueError("need n_wave >= 1, n_out >= 1, n_fp >= 0")
        self.n_wave, self.n_fp, self.n_out = n_wave, n_fp, n_out
        self.lstm_units = lstm_units
        fw = fc_units if n_fp == 0 else fc_units - fc_units // 2
        ff = 0 if n_fp == 0 else fc_units // 2
        self.fc_wave_units, self.fc_fp_units = fw, ff
        H = lstm_units
        p = {
            "fc_wave_W": orthogonal((n_wave, fw), rng, gain),
            "fc_wave_b": np.zeros(fw),
        }
        if n_fp:
            p["fc_fp_W"] = orthogonal((n_fp, ff), rng, gain)
            p["fc_fp_b"] = np.zeros(ff)
        p["lstm_Wx"] = orthogonal((fc_units, 4 * H), rng, gain)
        p["lstm_Wh"] = orthogonal((H, 4 * H), rng, gain)
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0   # forget gate
        p["lstm_b"] = b
        p["head_W"] = orthogonal((H, n_out), rng, gain)
        p["head_b"] = np.zeros(n_out)
        self.params = p

    def zero_state(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.zeros(self.lstm_units), np.zeros(self.lstm_units)

    def forward_seq(self, xw: np.ndarray, xf: np.ndarray, h0: np.ndarray, c0: np.ndarray):
        """Run T steps.  Returns (outputs (T, n_out), (h_T, c_T), cache)."""
        p = self.params
        xw = np.atleast_2d(xw)
        T = xw.shape[0]
        if xw.shape[1] != self.n_wave:
            raise ValueError(f"wave input has {xw.shape[1]} features, expected {self.n_wave}")
        aw = xw @ p["fc_wave_W"] + p["fc_wave_b"]
        zw = np.maximum(aw, 0.0)
        if self.n_fp:
            xf = np.atleast_2d(xf)
            if xf.shape != (T, self.n_fp):
                raise ValueError(f"fingerprint input shape {xf.shape}, expected {(T, self.n_fp)}")
            af = xf @ p["fc_fp_W"] + p["fc_fp_b"]
            z = np.concatenate([zw, np.maximum(af, 0.0)], axis=1)
        else:
            af = None
            z = zw
        H = self.lstm_units
        xg = z @ p["lstm_Wx"] + p["lstm_b"]
        Wh = p["lstm_Wh"]
        hs = np.empty((T + 1, H))
        cs = np.empty((T + 1, H))
        gates = np.empty((T, 4 * H))
        hs[0], cs[0] = h0, c0
        for t in range(T):
            a = xg[t] + hs[t] @ Wh
            g = np.empty(4 * H)
            g[:3 * H] = _sigmoid(a[:3 * H])
            g[3 * H:] = np.tanh(a[3 * H:])
            cs[t + 1] = g[H:2 * H] * cs[t] + g[:H] * g[3 * H:]
            hs[t + 1] = g[2 * H:3 * H] * np.tanh(cs[t + 1])
            gates[t] = g
        out = hs[1:] @ p["head_W"] + p["head_b"]
        _finite(out, "network output")
        cache = (xw, xf, aw, af, z, hs, cs, gates)
        return out, (hs[T].copy(), cs[T].copy()), cache

    def backward_seq(self, dout: np.ndarray, cache) -> Grads:
        """Gradients of sum_t <dout_t, out_t> w.r.t. all parameters (initial state held fixed)."""
        p = self.params
        xw, xf, aw, af, z, hs, cs, gates = cache
        T = dout.shape[0]
        H = self.lstm_units
        g: Grads = {}
        g["head_W"] = hs[1:].T @ dout
        g["head_b"] = dout.sum(axis=0)
        dh_out = dout @ p["head_W"].T
        Wh_T = p["lstm_Wh"].T
        dA = np.empty((T, 4 * H))
        dh_next = np.zeros(H)
        dc_next = np.zeros(H)
        for t in range(T - 1, -1, -1):
            gi, gf, go, gg = (gates[t, :H], gates[t, H:2 * H], gates[t, 2 * H:3 * H],
                              gates[t, 3 * H:])
            tc = np.tanh(cs[t + 1])
            dh = dh_out[t] + dh_next
            dc = dc_next + dh * go * (1.0 - tc * tc)
            da = dA[t]
            da[:H] = dc * gg * gi * (1.0 - gi)
            da[H:2 * H] = dc * cs[t] * gf * (1.0 - gf)
            da[2 * H:3 * H] = dh * tc * go * (1.0 - go)
            da[3 * H:] = dc * gi * (1.0 - gg * gg)
            dc_next = dc * gf
            dh_next = da @ Wh_T
        g["lstm_Wx"] = z.T @ dA
        g["lstm_Wh"] = hs[:-1].T @ dA
        g["lstm_b"] = dA.sum(axis=0)
        dz = dA @ p["lstm_Wx"].T
        fw = self.fc_wave_units
        daw = dz[:, :fw] * (aw > 0)
        g["fc_wave_W"] = xw.T @ daw
        g["fc_wave_b"] = daw.sum(axis=0)
        if self.n_fp:
            daf = dz[:, fw:] * (af > 0)
            g["fc_fp_W"] = xf.T @ daf
            g["fc_fp_b"] = daf.sum(axis=0)
        for k, v in g.items():
            _finite(v, f"gradient {k}")
        return g


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class LossInfo:
    actor: float
    critic: float
    total: float
    entropy: float


class AgentNet:
    """Actor and critic networks of one agent, their RMSprop state and recurrent state."""

    def __init__(self, n_wave: int, n_fp: int, n_actions: int, seed: int = 0, *,
                 fc_units: int = FC_UNITS, lstm_units: int = LSTM_UNITS, gain: float = 1.0):
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.n_actions = n_actions
        self.actor = RecurrentNet(n_wave, n_fp, n_actions, rng, fc_units=fc_units,
                                  lstm_units=lstm_units, gain=gain)
        self.critic = RecurrentNet(n_wave, n_fp, 1, rng, fc_units=fc_units,
                                   lstm_units=lstm_units, gain=gain)
        self.accum = {
            "actor": {k: np.zeros_like(v) for k, v in self.actor.params.items()},
            "critic": {k: np.zeros_like(v) for k, v in self.critic.params.items()},
        }
        self.reset_state()

    def reset_state(self) -> None:
        self.state = {"actor": self.actor.zero_state(), "critic": self.critic.zero_state()}

    def snapshot_state(self) -> dict:
        return {k: (h.copy(), c.copy()) for k, (h, c) in self.state.items()}

    def forward(self, wave: np.ndarray, fp: np.ndarray, *, advance: bool = True):
        """One step: (policy, value); advances the recurrent state unless ``advance`` is False."""
        logits, sa, _ = self.actor.forward_seq(wave[None, :], fp[None, :], *self.state["actor"])
        value, sc, _ = self.critic.forward_seq(wave[None, :], fp[None, :], *self.state["critic"])
        if advance:
            self.state = {"actor": sa, "critic": sc}
        return softmax(logits[0]), float(value[0, 0])

    def value(self, wave: np.ndarray, fp: np.ndarray) -> float:
        """Critic output for one step without advancing any state."""
        v, _, _ = self.critic.forward_seq(wave[None, :], fp[None, :], *self.state["critic"])
        return float(v[0, 0])

    def loss_and_grads(self, waves, fps, actions, returns, advantages, start_state: dict,
                       hp: marl.HyperParams) -> Tuple[LossInfo, Dict[str, Grads]]:
        """Total loss over one batch and its gradients for actor and critic parameters.

        ``advantages`` are constants (computed from the frozen critic);
        ``returns`` are the regression targets of the critic.
        """
        logits, _, ca = self.actor.forward_seq(waves, fps, *start_state["actor"])
        values, _, cc = self.critic.forward_seq(waves, fps, *start_state["critic"])
        pol = softmax(logits)
        T = pol.shape[0]
        logp = np.log(pol)
        la = marl.actor_loss(logp[np.arange(T), actions], advantages, pol, hp)
        lc = marl.critic_loss(returns, values[:, 0])
        info = LossInfo(la, lc, marl.total_loss(la, lc, hp), float(np.mean(marl.entropy(pol))))
        d_logits = marl.actor_logit_grad(pol, actions, advantages, hp.beta)
        d_values = marl.critic_value_grad(returns, values[:, 0], hp.xi_critic)[:, None]
        return info, {"actor": self.actor.backward_seq(d_logits, ca),
                      "critic": self.critic.backward_seq(d_values, cc)}


def global_norm(grads: Grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: Grads, max_norm: float = 40.0) -> Grads:
    """Rescale one parameter set so its global l2 norm is at most ``max_norm``."""
    for k, g in grads.items():
        _finite(g, f"gradient {k}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def rmsprop_step(params: Grads, accum: Grads, grads: Grads, lr: float,
                 decay: float = 0.99, epsilon: float = 1e-5) -> None:
    """In-place RMSprop update of ``params`` and its accumulators."""
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} "
                             f"{params[k].shape}")
        a = accum[k]
        a *= decay
        a += (1.0 - decay) * g * g
        params[k] -= lr * g / np.sqrt(a + epsilon)


def apply_update(net: AgentNet, grads: Dict[str, Grads], hp: marl.HyperParams) -> None:
    """Clip each parameter set and take one RMSprop step with its own learning rate."""
    for name, lr in (("actor", hp.eta_actor), ("critic", hp.eta_critic)):
        g = clip_gradients(grads[name], hp.grad_clip)
        rmsprop_step(getattr(net, name).params, net.accum[name], g, lr,
                     hp.rms_decay, hp.rms_epsilon)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, nets: Dict[str, AgentNet], meta: Optional[dict] = None) -> None:
    arrays = {}
    layout = {}
    for agent, net in nets.items():
        layout[agent] = {"n_wave": net.actor.n_wave, "n_fp": net.actor.n_fp,
                         "n_actions": net.n_actions, "seed": net.seed,
                         "fc_units": net.actor.fc_wave_units + net.actor.fc_fp_units,
                         "lstm_units": net.actor.lstm_units}
        for part in ("actor", "critic"):
            for k, v in getattr(net, part).params.items():
                arrays[f"{agent}/{part}/{k}"] = v
            for k, v in net.accum[part].items():
                arrays[f"{agent}/{part}_acc/{k}"] = v
    header = {"format": CHECKPOINT_FORMAT, "layout": layout, "meta": meta or {}}
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Tuple[Dict[str, AgentNet], dict]:
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {header.get('format')!r}")
        nets = {}
        for agent, lay in header["layout"].items():
            net = AgentNet(lay["n_wave"], lay["n_fp"], lay["n_actions"], lay["seed"],
                           fc_units=lay["fc_units"], lstm_units=lay["lstm_units"])
            for part in ("actor", "critic"):
                params = getattr(net, part).params
                for k in params:
                    params[k] = data[f"{agent}/{part}/{k}"].copy()
                    net.accum[part][k] = data[f"{agent}/{part}_acc/{k}"].copy()
            nets[agent] = net
    return nets, header["meta"]
