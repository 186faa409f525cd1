"""Small recurrent agent network with hand-written reverse-mode gradients.

Layout (hidden width H, defaults to 64)::

    obs -> Linear(obs_dim, H) -> relu -> Linear(H, H) -> relu
        -> Linear(H, H) -> relu -> recurrent cell (H, H) -> h
    h -> n evidence heads Linear(H, K) + relu   (head j = evidence for agent j)
    h -> selector Linear(H, n) + sigmoid         (p_ij)
    h -> q head Linear(H, K)                     (baseline variant only)

All arrays are float64 and batched along the first axis (one row per agent
per episode).  Parameters live in one ordered ``dict`` so the optimizer,
gradient buffers and checkpoints share a single declaration order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")
CELLS = ("gru", "tanh")
KINDS = ("evidential", "baseline")


def sigmoid(x):
    # tanh form never overflows for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def activate(z, activation):
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "sigmoid":
        return sigmoid(z)
    if activation == "tanh":
        return np.tanh(z)
    if activation == "identity":
        return z
    raise ValueError(f"unknown activation {activation!r}")


def activation_grad(z, y, dy, activation):
    """Gradient w.r.t. pre-activation ``z`` given output ``y`` and ``dy``."""
    if activation == "relu":
        return dy * (z > 0.0)
    if activation == "sigmoid":
        return dy * y * (1.0 - y)
    if activation == "tanh":
        return dy * (1.0 - y * y)
    if activation == "identity":
        return dy
    raise ValueError(f"unknown activation {activation!r}")


@dataclass
class DenseLayer:
    """View onto a weight/bias pair inside a parameter dict."""

    name: str
    in_dim: int
    out_dim: int
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def weight_key(self):
        return f"{self.name}.weight"

    @property
    def bias_key(self):
        return f"{self.name}.bias"

    def shapes(self):
        return {self.weight_key: (self.out_dim, self.in_dim), self.bias_key: (self.out_dim,)}

    def forward(self, params, x):
        z = x @ params[self.weight_key].T + params[self.bias_key]
        y = activate(z, self.activation)
        return y, (x, z, y)

    def backward(self, params, grads, cache, dy):
        x, z, y = cache
        dz = activation_grad(z, y, dy, self.activation)
        grads[self.weight_key] += dz.T @ x
        grads[self.bias_key] += dz.sum(axis=0)
        return dz @ params[self.weight_key]


@dataclass
class RecurrentCell:
    """Gated recurrent unit (gate order reset, update, candidate) or plain tanh RNN."""

    name: str
    in_dim: int
    hidden: int
    cell: str = "gru"

    def __post_init__(self):
        if self.cell not in CELLS:
            raise ValueError(f"unknown recurrent cell {self.cell!r}")

    def shapes(self):
        H = self.hidden
        g = 3 * H if self.cell == "gru" else H
        return {
            f"{self.name}.w_x": (g, self.in_dim),
            f"{self.name}.w_h": (g, H),
            f"{self.name}.b_x": (g,),
            f"{self.name}.b_h": (g,),
        }

    def forward(self, params, x, h):
        p = self.name
        gx = x @ params[f"{p}.w_x"].T + params[f"{p}.b_x"]
        gh = h @ params[f"{p}.w_h"].T + params[f"{p}.b_h"]
        if self.cell == "tanh":
            h_new = np.tanh(gx + gh)
            return h_new, (x, h, h_new)
        H = self.hidden
        r = sigmoid(gx[:, :H] + gh[:, :H])
        z = sigmoid(gx[:, H : 2 * H] + gh[:, H : 2 * H])
        n = np.tanh(gx[:, 2 * H :] + r * gh[:, 2 * H :])
        h_new = (1.0 - z) * n + z * h
        return h_new, (x, h, r, z, n, gh[:, 2 * H :])

    def backward(self, params, grads, cache, dh_new):
        """Returns (dx, dh_prev)."""
        p = self.name
        if self.cell == "tanh":
            x, h, h_new = cache
            da = dh_new * (1.0 - h_new * h_new)
            dgx = dgh = da
            dh = np.zeros_like(h)
        else:
            x, h, r, z, n, gh_n = cache
            dn = dh_new * (1.0 - z)
            dz = dh_new * (h - n)
            dh = dh_new * z
            dan = dn * (1.0 - n * n)
            dar = dan * gh_n * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dgx = np.concatenate([dar, daz, dan], axis=1)
            dgh = np.concatenate([dar, daz, dan * r], axis=1)
        grads[f"{p}.w_x"] += dgx.T @ x
        grads[f"{p}.b_x"] += dgx.sum(axis=0)
        grads[f"{p}.w_h"] += dgh.T @ h
        grads[f"{p}.b_h"] += dgh.sum(axis=0)
        dx = dgx @ params[f"{p}.w_x"]
        dh = dh + dgh @ params[f"{p}.w_h"]
        return dx, dh


@dataclass
class StepOutput:
    hidden: np.ndarray
    evidence: np.ndarray | None = None  # (n, R, K)
    selector: np.ndarray | None = None  # (R, n)
    q: np.ndarray | None = None  # (R, K)


@dataclass
class StepGrads:
    """Loss gradients w.r.t. one step's outputs; ``None`` means zero."""

    evidence: np.ndarray | None = None
    selector: np.ndarray | None = None
    q: np.ndarray | None = None
    hidden: np.ndarray | None = None


class GradientTape:
    """Records per-step caches of one unroll; :meth:`backward` runs BPTT once."""

    def __init__(self, net: "AgentNetwork"):
        self.net = net
        self.steps: list[dict] = []
        self.used = False

    def __len__(self):
        return len(self.steps)

    def backward(self, output_grads: Sequence[StepGrads | None]) -> dict[str, np.ndarray]:
        if self.used:
            raise RuntimeError("backward already called on this tape")
        if len(output_grads) != len(self.steps):
            raise ValueError(
                f"got gradients for {len(output_grads)} steps, tape has {len(self.steps)}"
            )
        self.used = True
        net = self.net
        params = net.params
        grads = net.zero_grads()
        dh_next = None
        for cache, g in zip(reversed(self.steps), reversed(list(output_grads))):
            R = cache["rows"]
            dh = np.zeros((R, net.hidden)) if dh_next is None else dh_next
            if g is not None:
                if g.hidden is not None:
                    dh = dh + g.hidden
                if g.evidence is not None and "heads" in cache:
                    dh = dh + net._heads_backward(grads, cache["heads"], g.evidence)
                if g.selector is not None and "selector" in cache:
                    dh = dh + net.selector_layer.backward(params, grads, cache["selector"], g.selector)
                if g.q is not None and "q" in cache:
                    dh = dh + net.q_layer.backward(params, grads, cache["q"], g.q)
            dx, dh_next = net.cell.backward(params, grads, cache["cell"], dh)
            for layer, lc in zip(reversed(net.encoder), reversed(cache["encoder"])):
                dx = layer.backward(params, grads, lc, dx)
        return grads


class AgentNetwork:
    """Shared-parameter agent network.

    ``obs_dim`` is the width of the network input (environment observation
    plus any agent-id one-hot appended by the caller).
    """

    def __init__(
        self,
        obs_dim: int,
        n_agents: int,
        n_actions: int,
        hidden: int = 64,
        cell: str = "gru",
        kind: str = "evidential",
        seed: int = 0,
        temperature_init: float = 1.0,
        evidence_bias_init: float = 0.0,
        offset_init: float = 0.0,
    ):
        if kind not in KINDS:
            raise ValueError(f"unknown network kind {kind!r}")
        self.obs_dim = obs_dim
        self.n_agents = n_agents
        self.n_actions = n_actions
        self.hidden = hidden
        self.kind = kind
        self.seed = seed
        self.temperature_init = temperature_init
        self.evidence_bias_init = evidence_bias_init
        self.offset_init = offset_init
        self.encoder = [
            DenseLayer("enc0", obs_dim, hidden, "relu"),
            DenseLayer("enc1", hidden, hidden, "relu"),
            DenseLayer("enc2", hidden, hidden, "relu"),
        ]
        self.cell = RecurrentCell("rnn", hidden, hidden, cell)
        self.selector_layer = DenseLayer("selector", hidden, n_agents, "sigmoid")
        self.q_layer = DenseLayer("q_head", hidden, n_actions, "identity")

        shapes: dict[str, tuple[int, ...]] = {}
        groups: dict[str, list[str]] = {}
        for layer in self.encoder:
            shapes.update(layer.shapes())
        groups["encoder"] = list(shapes)
        groups["recurrent"] = list(self.cell.shapes())
        shapes.update(self.cell.shapes())
        if kind == "evidential":
            shapes["heads.weight"] = (n_agents, n_actions, hidden)
            shapes["heads.bias"] = (n_agents, n_actions)
            groups["evidence_heads"] = ["heads.weight", "heads.bias"]
            shapes.update(self.selector_layer.shapes())
            groups["selector"] = list(self.selector_layer.shapes())
            shapes["temperature"] = (n_agents,)
            shapes["offset"] = (n_agents,)
            groups["mixer"] = ["temperature", "offset"]
        else:
            shapes.update(self.q_layer.shapes())
            groups["q_head"] = list(self.q_layer.shapes())
        self.shapes = shapes
        self.groups = groups

        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        for key, shape in shapes.items():
            if key == "temperature":
                self.params[key] = np.full(shape, float(temperature_init))
                continue
            if key == "offset":
                self.params[key] = np.full(shape, float(offset_init))
                continue
            fan_in = obs_dim if key.startswith("enc0.") else hidden
            bound = 1.0 / np.sqrt(fan_in)
            self.params[key] = rng.uniform(-bound, bound, size=shape)
        if kind == "evidential":
            # tiny early hidden states leave relu heads at their bias; a positive
            # shift keeps them alive until the TD signal carries information
            self.params["heads.bias"] += float(evidence_bias_init)

    # -- parameter helpers -------------------------------------------------

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "AgentNetwork":
        other = object.__new__(AgentNetwork)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def load_params(self, params: dict[str, np.ndarray]):
        for k, v in params.items():
            self.params[k][...] = v

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def init_hidden(self, rows: int) -> np.ndarray:
        return np.zeros((rows, self.hidden))

    # -- forward pieces ------------------------------------------------------

    def encode(self, obs, h_prev):
        """Observation MLP followed by the recurrent cell; returns (h, cache)."""
        obs = np.asarray(obs, dtype=np.float64)
        if obs.ndim == 1:
            obs = obs[None, :]
        h_prev = np.asarray(h_prev, dtype=np.float64)
        if h_prev.ndim == 1:
            h_prev = h_prev[None, :]
        if obs.shape[1] != self.obs_dim:
            raise ValueError(f"observation width {obs.shape[1]} != obs_dim {self.obs_dim}")
        if h_prev.shape != (obs.shape[0], self.hidden):
            raise ValueError(f"hidden state shape {h_prev.shape} != {(obs.shape[0], self.hidden)}")
        x = obs
        enc_caches = []
        for layer in self.encoder:
            x, c = layer.forward(self.params, x)
            enc_caches.append(c)
        h, cell_cache = self.cell.forward(self.params, x, h_prev)
        return h, {"encoder": enc_caches, "cell": cell_cache, "rows": obs.shape[0]}

    def evidence_heads_forward(self, h):
        """Returns evidence of shape (n, R, K) and the cache for backward."""
        self._require("evidential")
        h = self._check_hidden(h)
        W = self.params["heads.weight"]
        n, K, H = W.shape
        z = h @ W.reshape(n * K, H).T + self.params["heads.bias"].reshape(n * K)
        z = z.reshape(-1, n, K).transpose(1, 0, 2)
        e = np.maximum(z, 0.0)
        return e, (h, z)

    def _heads_backward(self, grads, cache, de):
        h, z = cache
        dz = de * (z > 0.0)  # (n, R, K)
        W = self.params["heads.weight"]
        grads["heads.weight"] += np.einsum("nrk,rh->nkh", dz, h)
        grads["heads.bias"] += dz.sum(axis=1)
        return np.einsum("nrk,nkh->rh", dz, W)

    def selector_forward(self, h):
        self._require("evidential")
        y, cache = self.selector_layer.forward(self.params, self._check_hidden(h))
        return y, cache

    def q_forward(self, h):
        self._require("baseline")
        return self.q_layer.forward(self.params, self._check_hidden(h))

    def forward_step(self, obs, h_prev, tape: GradientTape | None = None) -> StepOutput:
        h, cache = self.encode(obs, h_prev)
        out = StepOutput(hidden=h)
        if self.kind == "evidential":
            out.evidence, cache["heads"] = self.evidence_heads_forward(h)
            out.selector, cache["selector"] = self.selector_forward(h)
        else:
            out.q, cache["q"] = self.q_forward(h)
        if tape is not None:
            if tape.net is not self:
                raise ValueError("tape belongs to a different network")
            if tape.used:
                raise RuntimeError("tape already consumed by backward")
            tape.steps.append(cache)
        return out

    def _require(self, kind):
        if self.kind != kind:
            raise ValueError(f"operation needs a {kind} network, this one is {self.kind}")

    def _check_hidden(self, h):
        h = np.asarray(h, dtype=np.float64)
        if h.ndim == 1:
            h = h[None, :]
        if h.shape[1] != self.hidden:
            raise ValueError(f"hidden width {h.shape[1]} != {self.hidden}")
        return h



def expected_parameter_count(
    obs_dim: int, n_agents: int, n_actions: int, hidden: int = 64,
    cell: str = "gru", kind: str = "evidential",
) -> int:
    """Closed-form parameter count of :class:`AgentNetwork`."""
    H = hidden
    encoder = (obs_dim * H + H) + 2 * (H * H + H)
    gates = 3 if cell == "gru" else 1
    recurrent = gates * (H * H + H * H + 2 * H)
    if kind == "baseline":
        return encoder + recurrent + (H * n_actions + n_actions)
    heads = n_agents * (H * n_actions + n_actions)
    selector = H * n_agents + n_agents
    return encoder + recurrent + heads + selector + 2 * n_agents


@dataclass
class Adam:
    """Adaptive-moment optimizer over a parameter dict (updates in place)."""

    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            raise FloatingPointError(f"non-finite gradients in {bad}")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# -- checkpoints -----------------------------------------------------------

MAGIC = b"T2MACPK1"


def save_checkpoint(path, net: AgentNetwork, extra: dict | None = None):
    """Write ``MAGIC | u32 header length | JSON header | float64 LE arrays``."""
    header = {
        "obs_dim": net.obs_dim,
        "n_agents": net.n_agents,
        "n_actions": net.n_actions,
        "hidden": net.hidden,
        "cell": net.cell.cell,
        "kind": net.kind,
        "seed": net.seed,
        "layers": [[k, list(v.shape)] for k, v in net.params.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in net.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[AgentNetwork, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen])
    net = AgentNetwork(
        header["obs_dim"], header["n_agents"], header["n_actions"],
        hidden=header["hidden"], cell=header["cell"], kind=header["kind"],
        seed=header["seed"],
    )
    offset = 12 + hlen
    for key, shape in header["layers"]:
        size = int(np.prod(shape)) * 8
        arr = np.frombuffer(data[offset : offset + size], dtype="<f8").reshape(shape)
        net.params[key] = arr.astype(np.float64).copy()
        offset += size
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return net, header["extra"]
