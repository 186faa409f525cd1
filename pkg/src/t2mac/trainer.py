"""Episode collection, replay and value-decomposition TD learning.

Per step every agent encodes its observation, emits local evidence plus one
tailored evidence message per teammate and a communication probability per
teammate.  Messages pass through the gates (all open, none open, or the
learned selector), each recipient fuses its inbox with its local opinion by
Dempster's rule, and acts greedily on the fused Dirichlet mean.

Agent utility is ``q_i(a) = temperature_i * alpha_a / S + offset_i`` of the
fused opinion and the team value is the sum over agents.  The offset starts
at ``-temperature_i / K`` so a vacuous opinion is worth nothing.  The TD gradient flows
through the fusion into the local head of the acting agent and into every
message head that reached it.  The selector head is trained separately on
thresholded leave-one-out uncertainty reductions.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import comm
from .config import RunConfig
from .envs import DecPomdp, make_env
from .neural import Adam, AgentNetwork, GradientTape, StepGrads, clip_grad_norm, save_checkpoint

log = logging.getLogger(__name__)

GATE_MODE = {"t2mac": "selective", "fullcomm": "full", "nocomm": "none"}
METRIC_FIELDS = ("episode", "td_loss", "bce_loss", "eval_success", "comm_rate", "mean_uncertainty")


class TrainingError(RuntimeError):
    pass


@dataclass
class EpisodeRecord:
    obs: np.ndarray  # (T+1, n, obs_dim) network inputs, final one for bootstrapping
    actions: np.ndarray  # (T, n)
    explored: np.ndarray  # (T, n) bool
    rewards: np.ndarray  # (T,)
    terminated: np.ndarray  # (T,) bool, true terminal (timeouts excluded)
    hidden: np.ndarray  # (T, n, H)
    local_evidence: np.ndarray | None = None  # (T, n, K)
    payloads: np.ndarray | None = None  # (T, n, n, K), [sender, recipient]
    probs: np.ndarray | None = None  # (T, n, n)
    gates: np.ndarray | None = None  # (T, n, n)
    integrated: np.ndarray | None = None  # (T, n, K)
    uncertainty: np.ndarray | None = None  # (T, n)
    seed: int = 0
    success: bool = False

    @property
    def length(self) -> int:
        return len(self.actions)

    def validate(self, K: int):
        T = self.length
        assert self.obs.shape[0] == T + 1
        for arr in (self.explored, self.rewards, self.terminated, self.hidden):
            assert len(arr) == T
        if self.actions.size and (self.actions.min() < 0 or self.actions.max() >= K):
            raise ValueError("action outside [0, K)")


class ReplayBuffer:
    """FIFO ring of episodes; a batch is drawn uniformly without replacement."""

    def __init__(self, capacity: int = 2000):
        self.capacity = capacity
        self.episodes: deque[EpisodeRecord] = deque(maxlen=capacity)

    def __len__(self):
        return len(self.episodes)

    def add(self, episode: EpisodeRecord):
        self.episodes.append(episode)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[EpisodeRecord]:
        idx = rng.choice(len(self.episodes), size=min(batch_size, len(self.episodes)), replace=False)
        return [self.episodes[int(i)] for i in idx]


# -- team-level evidence plumbing ------------------------------------------------


def sender_slots(n: int) -> np.ndarray:
    """``slots[s, j]``: sender feeding inbox slot ``s`` of recipient ``j`` (ascending, skipping j)."""
    return np.array([[s if s < j else s + 1 for j in range(n)] for s in range(n - 1)], dtype=np.int64)


def split_evidence(E: np.ndarray, n: int):
    """Net evidence (heads n, B*n rows, K) -> local (B, n, K) and per-slot messages."""
    _, R, K = E.shape
    B = R // n
    Et = E.reshape(n, B, n, K).transpose(1, 2, 0, 3)  # (B, sender, recipient, K)
    ar = np.arange(n)
    local = Et[:, ar, ar, :]
    slots = sender_slots(n)
    msgs = [Et[:, slots[s], ar, :] for s in range(n - 1)]
    return Et, local, msgs


def merge_evidence_grads(g_local, g_msgs, n: int) -> np.ndarray:
    B, _, K = g_local.shape
    g = np.zeros((B, n, n, K))
    ar = np.arange(n)
    g[:, ar, ar, :] += g_local
    slots = sender_slots(n)
    for s, gm in enumerate(g_msgs):
        g[:, slots[s], ar, :] += gm
    return g.transpose(2, 0, 1, 3).reshape(n, B * n, K)


def slot_gates(gates: np.ndarray, n: int):
    """Gate matrices (B, sender, recipient) -> per-slot boolean (B, n)."""
    slots = sender_slots(n)
    ar = np.arange(n)
    return [gates[:, slots[s], ar] for s in range(n - 1)]


def team_gates(probs: np.ndarray, variant: str, threshold: float) -> np.ndarray:
    return comm.gate_messages(probs, GATE_MODE[variant], threshold)


def fuse_team(E, probs, variant, n, threshold=0.5):
    """Gate and fuse a whole team.  Returns b (B,n,K), u (B,n), gates, cache."""
    B = E.shape[1] // n
    P = probs.reshape(B, n, n)
    gates = team_gates(P, variant, threshold)
    _, local, msgs = split_evidence(E, n)
    b, u, skipped, cache = comm.fuse_evidence(local, msgs, slot_gates(gates, n))
    return b, u, gates, skipped, (cache, local, msgs)


def network_inputs(observations, n: int) -> np.ndarray:
    """Stack agent observations and append a one-hot agent id."""
    obs = np.asarray(observations, dtype=np.float64)
    return np.concatenate([obs, np.eye(n)], axis=1)


def act(evidence, epsilon: float, rng: np.random.Generator) -> tuple[int, bool]:
    """Epsilon-greedy on the Dirichlet mean of integrated evidence (lowest index wins ties)."""
    e = np.asarray(evidence, dtype=np.float64)
    K = e.shape[-1]
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(K)), True
    values = (e + 1.0) / (e.sum() + K)
    return int(np.argmax(values)), False


def act_values(values, epsilon: float, rng: np.random.Generator) -> tuple[int, bool]:
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(len(values))), True
    return int(np.argmax(values)), False


# -- collection ------------------------------------------------------------------------


def collect_episode(
    env: DecPomdp,
    net: AgentNetwork,
    variant: str,
    epsilon: float,
    seed: int,
    rng: np.random.Generator,
    gate_threshold: float = 0.5,
    comm_log: comm.CommLog | None = None,
) -> EpisodeRecord:
    spec = env.spec
    n, K = spec.n, spec.K
    res = env.reset(seed)
    h = net.init_hidden(n)
    evidential = variant != "baseline"
    obs_l, act_l, exp_l, rew_l, term_l, hid_l = [], [], [], [], [], []
    loc_l, pay_l, prob_l, gate_l, int_l, unc_l = [], [], [], [], [], []
    success = False
    while True:
        x = network_inputs(res.observations, n)
        obs_l.append(x)
        if res.terminated:
            break
        out = net.forward_step(x, h)
        h = out.hidden
        hid_l.append(h)
        actions, explored = [], []
        if evidential:
            b, u, gates, _, (_, local, _) = fuse_team(out.evidence, out.selector, variant, n, gate_threshold)
            e_hat = comm.evidence_rows(b[0], u[0])
            for j in range(n):
                a, ex = act(e_hat[j], epsilon, rng)
                actions.append(a)
                explored.append(ex)
            Et = out.evidence.transpose(1, 0, 2)  # (sender, recipient, K)
            loc_l.append(local[0])
            pay_l.append(Et)
            prob_l.append(out.selector)
            gate_l.append(gates[0])
            int_l.append(e_hat)
            unc_l.append(u[0])
            if comm_log is not None:
                for i in range(n):
                    for j in range(n):
                        if i != j:
                            comm_log.write(len(act_l), i, j, gates[0, i, j], out.selector[i, j])
        else:
            for j in range(n):
                a, ex = act_values(out.q[j], epsilon, rng)
                actions.append(a)
                explored.append(ex)
        res = env.step(actions)
        act_l.append(actions)
        exp_l.append(explored)
        rew_l.append(res.team_reward)
        term_l.append(res.terminated and not res.info.get("episode_limit", False))
        success = bool(res.info.get("success", False))
    rec = EpisodeRecord(
        obs=np.array(obs_l),
        actions=np.array(act_l, dtype=np.int64).reshape(-1, n),
        explored=np.array(exp_l, dtype=bool).reshape(-1, n),
        rewards=np.array(rew_l, dtype=np.float64),
        terminated=np.array(term_l, dtype=bool),
        hidden=np.array(hid_l).reshape(-1, n, net.hidden),
        seed=seed,
        success=success,
    )
    if evidential:
        rec.local_evidence = np.array(loc_l)
        rec.payloads = np.array(pay_l)
        rec.probs = np.array(prob_l)
        rec.gates = np.array(gate_l)
        rec.integrated = np.array(int_l)
        rec.uncertainty = np.array(unc_l)
    rec.validate(K)
    return rec


# -- learning --------------------------------------------------------------------------


@dataclass
class Batch:
    obs: np.ndarray  # (T+1, B*n, d)
    actions: np.ndarray  # (T, B, n)
    rewards: np.ndarray  # (T, B)
    terminated: np.ndarray  # (T, B)
    mask: np.ndarray  # (T, B)
    n: int
    timeouts: np.ndarray | None = None  # (T, B) last step of a truncated episode

    @classmethod
    def from_episodes(cls, episodes: list[EpisodeRecord]) -> "Batch":
        B = len(episodes)
        T = max(ep.length for ep in episodes)
        n, d = episodes[0].obs.shape[1:]
        obs = np.zeros((T + 1, B, n, d))
        actions = np.zeros((T, B, n), dtype=np.int64)
        rewards = np.zeros((T, B))
        term = np.zeros((T, B))
        mask = np.zeros((T, B))
        timeouts = np.zeros((T, B))
        for b, ep in enumerate(episodes):
            L = ep.length
            obs[: L + 1, b] = ep.obs
            actions[:L, b] = ep.actions
            rewards[:L, b] = ep.rewards
            term[:L, b] = ep.terminated
            mask[:L, b] = 1.0
            timeouts[L - 1, b] = float(not ep.terminated[-1])
        return cls(obs.reshape(T + 1, B * n, d), actions, rewards, term, mask, n, timeouts)

    @property
    def T(self):
        return self.actions.shape[0]

    @property
    def B(self):
        return self.actions.shape[1]


def link_values(local, msgs, gates_slots, cfg: RunConfig):
    """v[b, sender, recipient] for every link of a team step (NaN where unlabeled)."""
    B, n, _ = local.shape
    if cfg.link_reference == "local":
        _, u0, _, _ = comm.fuse_evidence(local, [])
        per_slot = []
        for s, m in enumerate(msgs):
            _, u1, _, _ = comm.fuse_evidence(local, [m])
            v = u0 - u1
            if cfg.label_source == "replay_gated":
                v = np.where(gates_slots[s], v, np.nan)
            per_slot.append(v)
    else:
        g = gates_slots if cfg.label_source == "replay_gated" else None
        per_slot = comm.leave_one_out_values(local, msgs, g)
    V = np.full((B, n, n), np.nan)
    slots = sender_slots(n)
    ar = np.arange(n)
    for s, v in enumerate(per_slot):
        V[:, slots[s], ar] = v
    return V


def team_values(E, probs, variant, params, n, threshold):
    b, u, gates, skipped, cache = fuse_team(E, probs, variant, n, threshold)
    p = comm.expected_values_rows(b, u)
    q = p * params["temperature"][None, :, None] + params["offset"][None, :, None]
    return q, p, b, u, gates, skipped, cache


def target_max_values(target: AgentNetwork, batch: Batch, variant: str, threshold: float) -> np.ndarray:
    """Sum over agents of max_a q_i for steps 1..T (index t holds step t+1)."""
    n, B = batch.n, batch.B
    h = target.init_hidden(B * n)
    out_vals = np.zeros((batch.T, B))
    for t in range(batch.T + 1):
        out = target.forward_step(batch.obs[t], h)
        h = out.hidden
        if t == 0:
            continue
        if variant == "baseline":
            q = out.q.reshape(B, n, -1)
        else:
            q = team_values(out.evidence, out.selector, variant, target.params, n, threshold)[0]
        out_vals[t - 1] = q.max(axis=-1).sum(axis=-1)
    return out_vals


@dataclass
class LossResult:
    td_loss: float
    bce_loss: float
    grads: dict
    label_rate: float = float("nan")
    skipped: int = 0


def td_loss_and_grads(
    net: AgentNetwork,
    target: AgentNetwork,
    batch: Batch,
    variant: str,
    cfg: RunConfig,
    include_bce: bool = True,
) -> LossResult:
    """Mean squared TD error over valid steps (+ selector BCE) and exact gradients."""
    n, B, T = batch.n, batch.B, batch.T
    gamma = cfg.gamma
    next_max = target_max_values(target, batch, variant, cfg.gate_threshold)
    stop = batch.terminated
    if not cfg.bootstrap_timeouts and batch.timeouts is not None:
        stop = np.maximum(stop, batch.timeouts)
    y = batch.rewards + gamma * (1.0 - stop) * next_max
    count = float(batch.mask.sum())

    tape = GradientTape(net)
    h = net.init_hidden(B * n)
    steps = []
    q_tot = np.zeros((T, B))
    labels_all, probs_all, lmask_all = [], [], []
    skipped = 0
    temperature = net.params.get("temperature")
    ar = np.arange(n)
    for t in range(T):
        out = net.forward_step(batch.obs[t], h, tape)
        h = out.hidden
        a = batch.actions[t]  # (B, n)
        if variant == "baseline":
            q = out.q.reshape(B, n, -1)
            q_tot[t] = np.take_along_axis(q, a[..., None], axis=-1)[..., 0].sum(axis=-1)
            steps.append({"a": a})
            continue
        q, p, b, u, gates, sk, (cache, local, msgs) = team_values(
            out.evidence, out.selector, variant, net.params, n, cfg.gate_threshold
        )
        skipped += sk
        p_chosen = np.take_along_axis(p, a[..., None], axis=-1)[..., 0]  # (B, n)
        q_tot[t] = (temperature[None, :] * p_chosen + net.params["offset"][None, :]).sum(axis=-1)
        steps.append({"a": a, "p_chosen": p_chosen, "cache": cache, "K": p.shape[-1]})
        if variant == "t2mac" and include_bce:
            V = link_values(local, msgs, slot_gates(gates, n), cfg)
            probs = out.selector.reshape(B, n, n)
            live = ~np.isnan(V) & (batch.mask[t][:, None, None] > 0)
            live[:, ar, ar] = False
            labels_all.append(comm.label_array(np.nan_to_num(V, nan=-np.inf), cfg.tau))
            probs_all.append(probs)
            lmask_all.append(live.astype(np.float64))

    delta = (q_tot - y) * batch.mask
    td_loss = float(np.sum(delta * delta) / count)
    dq = 2.0 * delta / count  # (T, B)

    bce = float("nan")
    bce_grads = None
    label_rate = float("nan")
    if labels_all:
        Y = np.stack(labels_all)
        P = np.stack(probs_all)
        M = np.stack(lmask_all)
        bce, gP = comm.bce_loss(P, Y, M)
        bce_grads = cfg.bce_weight * gP
        label_rate = float((Y * M).sum() / max(M.sum(), 1.0))

    grad_t = np.zeros(n) if temperature is not None else None
    grad_off = np.zeros(n) if temperature is not None else None
    step_grads = []
    for t in range(T):
        st = steps[t]
        a = st["a"]
        if variant == "baseline":
            K = net.n_actions
            gq = np.zeros((B, n, K))
            np.put_along_axis(gq, a[..., None], dq[t][:, None, None] * np.ones((B, n, 1)), axis=-1)
            step_grads.append(StepGrads(q=gq.reshape(B * n, K)))
            continue
        K = st["K"]
        grad_t += (st["p_chosen"] * dq[t][:, None]).sum(axis=0)
        grad_off += dq[t].sum() * np.ones(n)
        gp = np.zeros((B, n, K))
        np.put_along_axis(gp, a[..., None], (dq[t][:, None] * temperature[None, :])[..., None], axis=-1)
        gb = gp
        gu = gp.sum(axis=-1) / K
        g_local, g_msgs = comm.fuse_evidence_backward(st["cache"], gb, gu)
        sg = StepGrads(evidence=merge_evidence_grads(g_local, g_msgs, n))
        if bce_grads is not None:
            sg.selector = bce_grads[t].reshape(B * n, n)
        step_grads.append(sg)
    grads = tape.backward(step_grads)
    if grad_t is not None:
        grads["temperature"] += grad_t
        grads["offset"] += grad_off
    return LossResult(td_loss, bce, grads, label_rate, skipped)


@dataclass
class TrainState:
    net: AgentNetwork
    target: AgentNetwork
    optimizer: Adam
    episode: int = 0
    updates: int = 0
    target_checksum: str = ""
    rngs: dict = field(default_factory=dict)


def make_state(cfg: RunConfig, seed: int, env: DecPomdp) -> TrainState:
    spec = env.spec
    streams = np.random.SeedSequence(seed).spawn(5)
    net_seed = int(streams[0].generate_state(1)[0])
    net = AgentNetwork(
        spec.obs_dim + spec.n, spec.n, spec.K, hidden=cfg.hidden, cell=cfg.cell,
        kind="baseline" if cfg.variant == "baseline" else "evidential",
        seed=net_seed, temperature_init=cfg.temperature_init,
        evidence_bias_init=cfg.evidence_bias_init,
        offset_init=-cfg.temperature_init / spec.K if cfg.offset_init is None else cfg.offset_init,
    )
    target = net.copy()
    state = TrainState(net, target, Adam(lr=cfg.lr), target_checksum=target.checksum())
    state.rngs = {
        "env": np.random.default_rng(streams[1]),
        "explore": np.random.default_rng(streams[2]),
        "replay": np.random.default_rng(streams[3]),
        "eval": np.random.default_rng(streams[4]),
    }
    return state


def td_update(batch_episodes: list[EpisodeRecord], state: TrainState, cfg: RunConfig) -> LossResult:
    if not batch_episodes:
        raise ValueError("empty batch")
    if state.target.checksum() != state.target_checksum:
        raise TrainingError("target network changed between refreshes")
    batch = Batch.from_episodes(batch_episodes)
    res = td_loss_and_grads(state.net, state.target, batch, cfg.variant, cfg)
    if not math.isfinite(res.td_loss) or (res.bce_loss == res.bce_loss and not math.isfinite(res.bce_loss)):
        raise TrainingError(f"non-finite loss: td={res.td_loss} bce={res.bce_loss}")
    clip_grad_norm(res.grads, cfg.grad_clip)
    state.optimizer.step(state.net.params, res.grads)
    state.updates += 1
    if state.updates % cfg.target_update_interval == 0:
        state.target = state.net.copy()
        state.target_checksum = state.target.checksum()
    return res


def epsilon_at(cfg: RunConfig, episode: int) -> float:
    horizon = cfg.epsilon_anneal_fraction * cfg.episodes
    if horizon <= 0:
        return cfg.epsilon_finish
    frac = min(episode / horizon, 1.0)
    return cfg.epsilon_start + frac * (cfg.epsilon_finish - cfg.epsilon_start)


@dataclass
class EvalResult:
    success: float
    comm_rate: float
    mean_uncertainty: float
    episodes: list[EpisodeRecord]


def evaluate(net: AgentNetwork, env: DecPomdp, variant: str, seeds, gate_threshold=0.5) -> EvalResult:
    rng = np.random.default_rng(0)  # unused at epsilon 0
    eps = [collect_episode(env, net, variant, 0.0, int(s), rng, gate_threshold) for s in seeds]
    success = float(np.mean([e.success for e in eps]))
    if variant == "baseline":
        return EvalResult(success, float("nan"), float("nan"), eps)
    gates = np.concatenate([e.gates for e in eps])
    rate = comm.comm_accounting(gates)[2]
    unc = float(np.mean(np.concatenate([e.uncertainty.ravel() for e in eps])))
    return EvalResult(success, rate, unc, eps)


@dataclass
class TrainResult:
    metrics: list[dict]
    state: TrainState
    final: EvalResult

    @property
    def final_success(self) -> float:
        return self.final.success


def _fmt(x: float) -> str:
    return "nan" if x != x else repr(float(x))


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r["episode"]] + [_fmt(r[k]) for k in METRIC_FIELDS[1:]])


def train(cfg: RunConfig, seed: int | None = None, out_dir=None) -> TrainResult:
    """Run one seed of ``cfg`` end to end; writes artifacts when ``out_dir`` is given."""
    seed = cfg.seeds[0] if seed is None else seed
    env = make_env(cfg.env)
    eval_env = make_env(cfg.env)
    state = make_state(cfg, seed, env)
    buffer = ReplayBuffer(cfg.buffer_size)
    rows = []
    td_acc, bce_acc = [], []
    final = None
    for episode in range(1, cfg.episodes + 1):
        eps = epsilon_at(cfg, episode - 1)
        ep_seed = int(state.rngs["env"].integers(2**31))
        rec = collect_episode(env, state.net, cfg.variant, eps, ep_seed, state.rngs["explore"], cfg.gate_threshold)
        buffer.add(rec)
        state.episode = episode
        if len(buffer) >= cfg.batch_size:
            res = td_update(buffer.sample(cfg.batch_size, state.rngs["replay"]), state, cfg)
            td_acc.append(res.td_loss)
            bce_acc.append(res.bce_loss)
        if episode % cfg.eval_interval == 0 or episode == cfg.episodes:
            seeds = state.rngs["eval"].integers(2**31, size=cfg.eval_episodes)
            final = evaluate(state.net, eval_env, cfg.variant, seeds, cfg.gate_threshold)
            rows.append({
                "episode": episode,
                "td_loss": float(np.mean(td_acc)) if td_acc else float("nan"),
                "bce_loss": float(np.nanmean(bce_acc)) if bce_acc and not np.all(np.isnan(bce_acc)) else float("nan"),
                "eval_success": final.success,
                "comm_rate": final.comm_rate,
                "mean_uncertainty": final.mean_uncertainty,
            })
            td_acc, bce_acc = [], []
            log.info("seed %d episode %d success %.3f comm %.3f", seed, episode,
                     final.success, final.comm_rate)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.csv", rows)
        save_checkpoint(out / "final.ckpt", state.net,
                        extra={"episode": state.episode, "updates": state.updates,
                               "variant": cfg.variant, "env": cfg.env, "seed": seed})
    return TrainResult(rows, state, final)
