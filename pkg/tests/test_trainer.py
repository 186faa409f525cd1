import numpy as np
import pytest

from t2mac import comm
from t2mac.config import RunConfig
from t2mac.envs import make_env
from t2mac.neural import AgentNetwork
from t2mac.trainer import (
    Batch,
    ReplayBuffer,
    TrainingError,
    act,
    collect_episode,
    epsilon_at,
    evaluate,
    link_values,
    make_state,
    split_evidence,
    td_loss_and_grads,
    td_update,
    train,
)

SMALL = dict(hidden=8, batch_size=4, buffer_size=16, eval_interval=5, eval_episodes=3)


def small_cfg(**kw):
    return RunConfig(**{**SMALL, **kw})


def episodes(cfg, count=4, eps=1.0, seed=0, env=None):
    env = env or make_env(cfg.env)
    state = make_state(cfg, seed, env)
    rng = np.random.default_rng(seed)
    return state, [collect_episode(env, state.net, cfg.variant, eps, 100 + k, rng, cfg.gate_threshold)
                   for k in range(count)]


# -- acting ----------------------------------------------------------------------


class TestAct:
    def test_greedy_on_dirichlet_mean(self):
        rng = np.random.default_rng(0)
        assert act([0.0, 3.0, 1.0], 0.0, rng) == (1, False)

    def test_ties_break_to_lowest_index(self):
        rng = np.random.default_rng(0)
        assert act([2.0, 2.0, 0.0], 0.0, rng) == (0, False)
        assert act([0.0, 0.0, 0.0], 0.0, rng) == (0, False)

    def test_uniform_under_full_exploration(self):
        rng = np.random.default_rng(1)
        N, K = 100_000, 3
        counts = np.zeros(K)
        for _ in range(N):
            a, explored = act([50.0, 0.0, 0.0], 1.0, rng)
            assert explored
            counts[a] += 1
        sigma = np.sqrt(N * (1 / K) * (1 - 1 / K))
        assert np.all(np.abs(counts - N / K) < 3 * sigma), counts


def test_epsilon_schedule():
    cfg = RunConfig(episodes=1000)
    assert epsilon_at(cfg, 0) == 1.0
    assert epsilon_at(cfg, 100) == pytest.approx(0.525)
    assert epsilon_at(cfg, 200) == pytest.approx(0.05)
    assert epsilon_at(cfg, 999) == pytest.approx(0.05)


# -- collection ------------------------------------------------------------------


class TestCollect:
    def test_nocomm_uses_local_opinion(self):
        cfg = small_cfg(variant="nocomm")
        _, eps = episodes(cfg)
        for ep in eps:
            assert not ep.gates.any()
            np.testing.assert_allclose(ep.integrated, ep.local_evidence, rtol=1e-9, atol=1e-9)
            K = ep.local_evidence.shape[-1]
            np.testing.assert_allclose(ep.uncertainty, K / (ep.local_evidence.sum(-1) + K), rtol=1e-12)

    def test_fullcomm_three_agents_six_messages(self):
        cfg = small_cfg(env="cn_medium", variant="fullcomm")
        _, eps = episodes(cfg, count=2)
        for ep in eps:
            opened, possible, rate = comm.comm_accounting(ep.gates)
            assert opened == 6 * ep.length == possible
            assert rate == 1.0

    def test_payload_matches_heads(self):
        cfg = small_cfg(variant="t2mac")
        state, eps = episodes(cfg, count=1)
        ep = eps[0]
        h = state.net.init_hidden(2)
        out = state.net.forward_step(ep.obs[0], h)
        np.testing.assert_array_equal(ep.payloads[0], out.evidence.transpose(1, 0, 2))
        np.testing.assert_array_equal(ep.local_evidence[0], out.evidence[[0, 1], [0, 1]])

    def test_deterministic(self):
        cfg = small_cfg(variant="t2mac")
        _, a = episodes(cfg, eps=0.5)
        _, b = episodes(cfg, eps=0.5)
        for x, y in zip(a, b):
            assert x.actions.tobytes() == y.actions.tobytes()
            assert x.payloads.tobytes() == y.payloads.tobytes()

    def test_episode_shapes(self):
        cfg = small_cfg(variant="t2mac")
        _, eps = episodes(cfg)
        for ep in eps:
            T = ep.length
            assert 1 <= T <= 20
            assert ep.obs.shape == (T + 1, 2, 7 + 2)
            assert ep.payloads.shape == (T, 2, 2, 3)
            assert ep.terminated[:-1].sum() == 0


# -- replay and target -------------------------------------------------------------


def test_replay_capacity_and_liveness():
    cfg = small_cfg()
    _, eps = episodes(cfg, count=10)
    buf = ReplayBuffer(4)
    for ep in eps:
        buf.add(ep)
        assert len(buf) <= 4
    live = {id(e) for e in eps[-4:]}
    rng = np.random.default_rng(0)
    for _ in range(20):
        batch = buf.sample(3, rng)
        assert len({id(e) for e in batch}) == 3
        assert {id(e) for e in batch} <= live


def test_target_constant_between_refreshes():
    cfg = small_cfg(variant="fullcomm", target_update_interval=3)
    state, eps = episodes(cfg)
    first = state.target_checksum
    for k in range(1, 7):
        td_update(eps, state, cfg)
        if k % 3:
            assert state.target.checksum() == state.target_checksum
        else:
            assert state.target_checksum == state.net.checksum() != first
    state.target.params["offset"][0] += 1.0
    with pytest.raises(TrainingError):
        td_update(eps, state, cfg)


# -- TD loss ---------------------------------------------------------------------


def test_td_loss_hand_value():
    # zero heads make every opinion vacuous: q_i = temperature_i / K + offset_i
    cfg = small_cfg(variant="fullcomm", gamma=0.9)
    state, eps = episodes(cfg, count=3)
    for net in (state.net, state.target):
        net.params["heads.weight"][...] = 0.0
        net.params["heads.bias"][...] = 0.0
        net.params["temperature"][...] = [3.0, 6.0]
        net.params["offset"][...] = [0.5, -1.0]
    q_tot = 3.0 / 3 + 0.5 + 6.0 / 3 - 1.0  # 2.5
    batch = Batch.from_episodes(eps)
    res = td_loss_and_grads(state.net, state.target, batch, "fullcomm", cfg)
    errs = []
    for ep in eps:
        for t in range(ep.length):
            y = ep.rewards[t] + 0.9 * (not ep.terminated[t]) * q_tot
            errs.append(q_tot - y)
    assert res.td_loss == pytest.approx(np.mean(np.square(errs)), rel=1e-12)


@pytest.mark.parametrize("variant", ["fullcomm", "t2mac", "nocomm"])
def test_gamma_zero_matches_recorded_opinions(variant):
    # with gamma 0 the loss is mean (Q_tot - r)^2, Q_tot rebuilt from collection records
    cfg = small_cfg(variant=variant, gamma=0.0)
    state, eps = episodes(cfg, count=3)
    state.net.params["temperature"][...] = [2.0, 4.0]
    state.net.params["offset"][...] = [0.25, -0.5]
    rng = np.random.default_rng(0)
    eps = [collect_episode(make_env(cfg.env), state.net, variant, 1.0, 7 + k, rng) for k in range(3)]
    T, off = state.net.params["temperature"], state.net.params["offset"]
    errs = []
    for ep in eps:
        p = (ep.integrated + 1.0) / (ep.integrated.sum(-1, keepdims=True) + 3)
        chosen = np.take_along_axis(p, ep.actions[..., None], -1)[..., 0]
        q = (chosen * T + off).sum(-1)
        errs.extend(q - ep.rewards)
    res = td_loss_and_grads(state.net, state.target, Batch.from_episodes(eps), variant, cfg)
    assert res.td_loss == pytest.approx(np.mean(np.square(errs)), rel=1e-9)


def _total_loss(net, target, batch, cfg):
    res = td_loss_and_grads(net, target, batch, cfg.variant, cfg)
    bce = 0.0 if res.bce_loss != res.bce_loss else cfg.bce_weight * res.bce_loss
    return res.td_loss + bce, res


@pytest.mark.parametrize("variant", ["t2mac", "fullcomm", "nocomm", "baseline"])
def test_td_gradient_finite_differences(variant):
    cfg = small_cfg(variant=variant, gamma=0.9)
    state, eps = episodes(cfg, count=3, eps=0.7)
    rng = np.random.default_rng(3)
    for k, v in state.net.params.items():  # move off the init so heads carry real evidence
        state.net.params[k] = v + rng.normal(0, 0.2, v.shape)
    batch = Batch.from_episodes(eps)
    _, res = _total_loss(state.net, state.target, batch, cfg)
    keys = ["enc0.weight", "rnn.w_h", "rnn.b_x"]
    keys += ["heads.weight", "temperature", "offset"] if variant != "baseline" else ["q_head.weight"]
    h = 1e-6
    for key in keys:
        flat = state.net.params[key].reshape(-1)
        for i in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = _total_loss(state.net, state.target, batch, cfg)
            flat[i] = orig - h
            lm, _ = _total_loss(state.net, state.target, batch, cfg)
            flat[i] = orig
            num = (lp - lm) / (2 * h)
            ana = res.grads[key].reshape(-1)[i]
            assert abs(num - ana) <= 1e-3 * max(abs(num), abs(ana), 1e-4), (key, i, num, ana)


def test_selector_gets_only_bce_gradient():
    cfg = small_cfg(variant="fullcomm")
    state, eps = episodes(cfg, count=2)
    res = td_loss_and_grads(state.net, state.target, Batch.from_episodes(eps), "fullcomm", cfg)
    assert np.all(res.grads["selector.weight"] == 0)
    assert res.bce_loss != res.bce_loss  # nan outside t2mac


def test_timeout_bootstrap_flag():
    cfg = small_cfg(variant="nocomm", gamma=0.9, episodes=10)
    state, eps = episodes(cfg, count=12, eps=1.0)
    truncated = [ep for ep in eps if not ep.terminated[-1]]
    assert truncated and all(ep.length == 20 for ep in truncated)
    batch = Batch.from_episodes(truncated[:1])
    a = td_loss_and_grads(state.net, state.target, batch, "nocomm", cfg).td_loss
    b = td_loss_and_grads(state.net, state.target, batch, "nocomm", cfg.replace(bootstrap_timeouts=False)).td_loss
    assert a != b


# -- labels ----------------------------------------------------------------------


class TestLabels:
    def test_vacuous_message_has_zero_value(self):
        rng = np.random.default_rng(0)
        local = rng.exponential(2.0, size=(5, 3, 4))
        msgs = [rng.exponential(2.0, size=(5, 3, 4)), np.zeros((5, 3, 4))]
        v = comm.leave_one_out_values(local, msgs)
        assert np.all(v[1] == 0.0)
        assert np.all(comm.label_array(v[1], 0.01) == 0)

    def test_recomputation_bit_identical_on_stored_trajectories(self):
        cfg = small_cfg(env="cn_medium", variant="t2mac")
        _, eps = episodes(cfg, count=2)
        for ep in eps:
            E = ep.payloads.transpose(2, 0, 1, 3).reshape(3, -1, ep.payloads.shape[-1])
            _, local, msgs = split_evidence(E, 3)
            gates = [np.ones(local.shape[:2], dtype=bool)] * 2
            v1 = link_values(local, msgs, gates, cfg)
            v2 = link_values(local.copy(), [m.copy() for m in msgs], gates, cfg)
            assert v1.tobytes() == v2.tobytes()
            # silence sender 0 entirely: every link out of it is worth nothing
            E0 = E.copy().reshape(3, -1, 3, E.shape[-1])
            E0[:, :, 0, :] = 0.0
            _, l0, m0 = split_evidence(E0.reshape(E.shape), 3)
            v0 = link_values(l0, m0, gates, cfg)
            assert np.all(v0[:, 0, 1:] == 0.0)
            assert np.all(comm.label_array(v0[:, 0, 1:], cfg.tau) == 0)


# -- whole runs ------------------------------------------------------------------


def test_single_episode_run():
    res = train(small_cfg(episodes=1))
    assert len(res.metrics) == 1
    row = res.metrics[0]
    assert row["episode"] == 1
    assert row["td_loss"] != row["td_loss"]  # no update before the buffer fills
    assert 0.0 <= row["eval_success"] <= 1.0


def test_metric_series_bit_identical(tmp_path):
    cfg = small_cfg(variant="t2mac", episodes=10, seeds=(4,))
    train(cfg, out_dir=tmp_path / "a")
    train(cfg, out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_seeds_differ():
    a = train(small_cfg(episodes=10), seed=0).state.net.checksum()
    b = train(small_cfg(episodes=10), seed=1).state.net.checksum()
    assert a != b


def test_comm_rate_monotone_in_threshold_on_stored_probs():
    # gating feeds back into actions, so thresholds are swept over one frozen rollout
    cfg = small_cfg(variant="t2mac", env="cn_medium")
    env = make_env(cfg.env)
    state = make_state(cfg, 0, env)
    rng = np.random.default_rng(2)
    for k, v in state.net.params.items():
        if k.startswith("selector"):
            state.net.params[k] = v + rng.normal(0, 1.0, v.shape)
    probs = np.concatenate([e.probs for e in evaluate(state.net, env, "t2mac", range(4)).episodes])
    rates = [comm.comm_accounting(comm.gate_messages(probs, "selective", th))[2]
             for th in (0.0, 0.2, 0.4, 0.5, 0.6, 0.8, 1.0)]
    assert all(a >= b for a, b in zip(rates, rates[1:])), rates
    assert rates[0] == 1.0 and rates[-1] == 0.0


def test_fixed_network_evaluation_uses_frozen_params():
    cfg = small_cfg(variant="t2mac")
    env = make_env(cfg.env)
    net = AgentNetwork(env.spec.obs_dim + 2, 2, 3, hidden=8, seed=1)
    before = net.checksum()
    evaluate(net, env, "t2mac", [0, 1, 2])
    assert net.checksum() == before
