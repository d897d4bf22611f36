import numpy as np
import pytest

from ma2c_tsc import marl, nn
from ma2c_tsc.marl import HyperParams


def mini(seed=0, n_wave=3, n_fp=2, n_actions=2):
    return nn.AgentNet(n_wave, n_fp, n_actions, seed=seed, fc_units=8, lstm_units=4)


def random_batch(net, T, rng):
    waves = rng.uniform(0, 2, (T, net.actor.n_wave))
    fps = rng.dirichlet(np.ones(2), T) if net.actor.n_fp else np.zeros((T, 0))
    acts = rng.integers(0, net.n_actions, T)
    ret = rng.normal(size=T)
    adv = rng.normal(size=T)
    state = {"actor": (rng.normal(0, 0.3, 4), rng.normal(0, 0.3, 4)),
             "critic": (rng.normal(0, 0.3, 4), rng.normal(0, 0.3, 4))}
    return waves, fps, acts, ret, adv, state


def total(net, batch, hp):
    info, _ = net.loss_and_grads(*batch, hp)
    return info.total


@pytest.mark.parametrize("shape", [(5, 5), (3, 8), (128, 256), (64, 2), (2, 64), (64, 1)])
def test_orthogonal_init(shape):
    w = nn.orthogonal(shape, np.random.default_rng(0))
    assert nn.orthogonality_error(w) < 1e-6


def test_fresh_net_weights_orthogonal_and_deterministic():
    a, b = nn.AgentNet(6, 4, 2, seed=7), nn.AgentNet(6, 4, 2, seed=7)
    for part in ("actor", "critic"):
        for k, v in getattr(a, part).params.items():
            assert np.array_equal(v, getattr(b, part).params[k])
            if k.endswith("W") or k.endswith("Wx") or k.endswith("Wh"):
                assert nn.orthogonality_error(v) < 1e-6
        assert all(np.all(acc == 0) for acc in a.accum[part].values())
    assert a.actor.fc_wave_units + a.actor.fc_fp_units == nn.FC_UNITS
    assert a.actor.lstm_units == nn.LSTM_UNITS


def test_zero_input_gives_uniform_policy():
    net = nn.AgentNet(4, 2, 3, seed=1)
    pi, v = net.forward(np.zeros(4), np.zeros(2))
    assert np.allclose(pi, 1 / 3, atol=1e-12)
    assert v == 0.0


def test_policy_normalized_and_stateful():
    rng = np.random.default_rng(2)
    net = nn.AgentNet(4, 2, 2, seed=3)
    x, f = rng.uniform(0, 2, 4), np.array([0.2, 0.8])
    p1, _ = net.forward(x, f)
    p2, _ = net.forward(x, f)
    assert not np.allclose(p1, p2)
    for _ in range(50):
        p, v = net.forward(rng.uniform(0, 2, 4) * 10, rng.dirichlet([1, 1]))
        assert np.all(p > 0) and abs(p.sum() - 1) < 1e-6 and np.isfinite(v)
    net.reset_state()
    assert np.allclose(net.forward(x, f)[0], p1, atol=0)


def test_dimension_mismatch():
    net = mini()
    with pytest.raises(ValueError):
        net.forward(np.zeros(4), np.zeros(2))
    with pytest.raises(ValueError):
        net.forward(np.zeros(3), np.zeros(3))


def test_lstm_forward_matches_step_equations():
    rng = np.random.default_rng(4)
    net = nn.RecurrentNet(3, 0, 2, rng, fc_units=5, lstm_units=4)
    for k in net.params:
        net.params[k] = rng.normal(size=net.params[k].shape)
    p = net.params
    xs = rng.normal(size=(6, 3))
    h, c = rng.normal(size=4), rng.normal(size=4)
    out, (hT, cT), _ = net.forward_seq(xs, None, h, c)

    def sig(v):
        return 1 / (1 + np.exp(-v))

    for t in range(6):
        z = np.maximum(xs[t] @ p["fc_wave_W"] + p["fc_wave_b"], 0)
        a = z @ p["lstm_Wx"] + h @ p["lstm_Wh"] + p["lstm_b"]
        i, f, o, g = sig(a[:4]), sig(a[4:8]), sig(a[8:12]), np.tanh(a[12:])
        c = f * c + i * g
        h = o * np.tanh(c)
        assert np.allclose(out[t], h @ p["head_W"] + p["head_b"], rtol=0, atol=1e-10)
    assert np.allclose(hT, h, atol=1e-10) and np.allclose(cT, c, atol=1e-10)


@pytest.mark.parametrize("n_fp", [0, 2])
def test_gradients_match_finite_differences(n_fp):
    rng = np.random.default_rng(5 + n_fp)
    net = mini(seed=3, n_fp=n_fp)
    hp = HyperParams(beta=0.05)
    batch = random_batch(net, 8, rng)
    _, grads = net.loss_and_grads(*batch, hp)
    eps = 1e-5
    worst = 0.0
    for part in ("actor", "critic"):
        params = getattr(net, part).params
        for k, w in params.items():
            for idx in np.ndindex(*w.shape):
                old = w[idx]
                w[idx] = old + eps
                up = total(net, batch, hp)
                w[idx] = old - eps
                down = total(net, batch, hp)
                w[idx] = old
                fd = (up - down) / (2 * eps)
                an = grads[part][k][idx]
                if max(abs(fd), abs(an)) > 1e-7:
                    worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
    assert worst < 1e-4


def test_zero_advantage_and_exact_values_give_zero_gradients():
    rng = np.random.default_rng(6)
    net = mini()
    waves, fps, acts, _, _, state = random_batch(net, 5, rng)
    values, _, _ = net.critic.forward_seq(waves, fps, *state["critic"])
    _, g = net.loss_and_grads(waves, fps, acts, values[:, 0], np.zeros(5), state,
                              HyperParams(beta=0.0))
    assert all(np.allclose(v, 0, atol=1e-14) for v in g["actor"].values())
    assert all(np.allclose(v, 0, atol=1e-14) for v in g["critic"].values())


def test_clip_gradients():
    g = {"a": np.array([30.0, 40.0, 0.0]), "b": np.array([[0.0, 0.0]])}
    assert nn.clip_gradients({"a": np.array([6.0, 8.0])})["a"].tolist() == [6.0, 8.0]
    g80 = {k: 1.6 * v for k, v in g.items()}
    out = nn.clip_gradients(g80)
    assert nn.global_norm(out) == pytest.approx(40.0, abs=1e-12)
    assert np.allclose(out["a"], 0.5 * g80["a"])
    assert nn.global_norm(nn.clip_gradients({"a": np.zeros(3)})) == 0.0
    with pytest.raises(FloatingPointError):
        nn.clip_gradients({"a": np.array([np.nan])})
    rng = np.random.default_rng(0)
    for _ in range(50):
        gr = {"x": rng.normal(0, 100, (5, 5)), "y": rng.normal(0, 100, 7)}
        assert nn.global_norm(nn.clip_gradients(gr)) <= 40 + 1e-9


def test_rmsprop_step():
    p, a = {"w": np.array([1.0])}, {"w": np.array([0.0])}
    nn.rmsprop_step(p, a, {"w": np.array([1.0])}, lr=5e-4)
    assert p["w"][0] - 1.0 == pytest.approx(-4.9975e-3, rel=1e-4)
    before = p["w"].copy()
    nn.rmsprop_step(p, a, {"w": np.array([0.0])}, lr=5e-4)
    assert np.array_equal(p["w"], before)
    p, a = {"w": np.array([0.0])}, {"w": np.array([0.0])}
    for _ in range(3000):
        prev = p["w"][0]
        nn.rmsprop_step(p, a, {"w": np.array([1.0])}, lr=1e-3)
    assert prev - p["w"][0] == pytest.approx(1e-3, rel=1e-4)
    with pytest.raises(ValueError):
        nn.rmsprop_step(p, a, {"w": np.zeros(2)}, lr=1e-3)


def test_update_determinism_and_checkpoint(tmp_path):
    rng = np.random.default_rng(8)
    nets = [mini(seed=11), mini(seed=11)]
    batches = [random_batch(nets[0], 6, rng) for _ in range(3)]
    hp = HyperParams()
    for net in nets:
        for b in batches:
            nn.apply_update(net, net.loss_and_grads(*b, hp)[1], hp)
    for k, v in nets[0].actor.params.items():
        assert np.array_equal(v, nets[1].actor.params[k])
    path = tmp_path / "c.npz"
    nn.save_checkpoint(path, {"x": nets[0]}, meta={"note": 1})
    loaded, meta = nn.load_checkpoint(path)
    assert meta == {"note": 1}
    for part in ("actor", "critic"):
        for k, v in getattr(nets[0], part).params.items():
            assert np.array_equal(v, getattr(loaded["x"], part).params[k])
            assert np.array_equal(nets[0].accum[part][k], loaded["x"].accum[part][k])


def test_non_finite_rejected():
    net = mini()
    with pytest.raises(nn.NonFiniteError):
        net.forward(np.array([np.nan, 0, 0]), np.array([0.5, 0.5]))
