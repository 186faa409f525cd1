"""Cooperative Dec-POMDP environments: Hallway and two small gridworlds.

Every environment shares one stepping interface::

    env = make_env("hallway_easy")
    res = env.reset(seed=0)          # StepResult with initial observations
    res = env.step([0, 2])           # one action index per agent

Agents only ever observe their own local view; teammates are never part of
an observation, so any coordination has to come through communication.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SUCCESS_REWARD = 10.0


@dataclass(frozen=True)
class DecPomdpSpec:
    n: int
    K: int
    obs_dim: int
    episode_limit: int
    gamma: float = 0.99

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("need at least two agents")
        if self.K < 2:
            raise ValueError("need at least two actions")
        if self.episode_limit < 1:
            raise ValueError("episode_limit must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


@dataclass
class StepResult:
    observations: list[np.ndarray]
    team_reward: float
    terminated: bool
    info: dict = field(default_factory=dict)


class DecPomdp:
    """Base class: subclasses implement ``_reset``, ``_transition`` and ``observe``."""

    spec: DecPomdpSpec
    name = "env"

    def __init__(self):
        self.t = 0
        self.done = True
        self.rng = np.random.default_rng(0)

    def reset(self, seed: int) -> StepResult:
        self.rng = np.random.default_rng(seed)
        self.t = 0
        self.done = False
        self._reset()
        return StepResult(self.observations(), 0.0, False, {"success": False})

    def step(self, joint_action: Sequence[int]) -> StepResult:
        if self.done:
            raise RuntimeError("episode already terminated; call reset()")
        actions = [int(a) for a in joint_action]
        if len(actions) != self.spec.n:
            raise ValueError(f"expected {self.spec.n} actions, got {len(actions)}")
        for i, a in enumerate(actions):
            if not 0 <= a < self.spec.K:
                raise ValueError(f"action {a} of agent {i} outside [0, {self.spec.K})")
        self.t += 1
        reward, terminated, success = self._transition(actions)
        info = {"success": success, "episode_limit": False}
        if not terminated and self.t >= self.spec.episode_limit:
            terminated = True
            info["episode_limit"] = True
        self.done = terminated
        return StepResult(self.observations(), float(reward), terminated, info)

    def observations(self) -> list[np.ndarray]:
        return [self.observe(i) for i in range(self.spec.n)]

    def observe(self, agent_index: int) -> np.ndarray:
        raise NotImplementedError

    def state_summary(self) -> dict:
        raise NotImplementedError

    def _reset(self):
        raise NotImplementedError

    def _transition(self, actions):
        raise NotImplementedError


# -- Hallway -------------------------------------------------------------------


@dataclass(frozen=True)
class HallwayConfig:
    chain_lengths: tuple[int, ...] = (4, 6)
    episode_limit: int = 20
    gamma: float = 0.99

    def __post_init__(self):
        if any(l < 1 for l in self.chain_lengths):
            raise ValueError("chain lengths must be positive")


class Hallway(DecPomdp):
    """Agent ``i`` walks a chain of cells ``0..l_i``; cell 0 is the goal.

    Actions: 0 = left (towards the goal), 1 = right, 2 = stay.  The team is
    rewarded only if every agent enters the goal at the same step; a partial
    arrival ends the episode with nothing.
    """

    LEFT, RIGHT, STAY = 0, 1, 2
    name = "hallway"

    def __init__(self, config: HallwayConfig = HallwayConfig()):
        super().__init__()
        self.config = config
        self.lengths = tuple(config.chain_lengths)
        self.spec = DecPomdpSpec(
            n=len(self.lengths), K=3, obs_dim=max(self.lengths) + 1,
            episode_limit=config.episode_limit, gamma=config.gamma,
        )
        self.pos = [1] * len(self.lengths)

    def _reset(self):
        self.pos = [int(self.rng.integers(1, l + 1)) for l in self.lengths]

    def _transition(self, actions):
        for i, a in enumerate(actions):
            if a == self.LEFT:
                self.pos[i] = max(self.pos[i] - 1, 0)
            elif a == self.RIGHT:
                self.pos[i] = min(self.pos[i] + 1, self.lengths[i])
        at_goal = [p == 0 for p in self.pos]
        if all(at_goal):
            return SUCCESS_REWARD, True, True
        if any(at_goal):
            return 0.0, True, False
        return 0.0, False, False

    def observe(self, agent_index):
        obs = np.zeros(self.spec.obs_dim)
        obs[self.pos[agent_index]] = 1.0
        return obs

    def state_summary(self):
        return {"positions": list(self.pos)}


# -- grid worlds -----------------------------------------------------------------

# dx, dy per action; the last action stays put
MOVES = ((-1, 0), (1, 0), (0, 1), (0, -1), (0, 0))


@dataclass(frozen=True)
class GridConfig:
    width: int = 7
    height: int = 7
    n_agents: int = 3
    n_targets: int = 3
    vision_radius: int = 2
    episode_limit: int = 30
    gamma: float = 0.99

    def __post_init__(self):
        if self.width * self.height <= self.n_agents + self.n_targets:
            raise ValueError("grid too small for agents and targets")
        if self.vision_radius < 0:
            raise ValueError("vision_radius must be >= 0")


class GridWorld(DecPomdp):
    """Shared grid mechanics: wall-clamped moves and local target sensing.

    Observation of agent ``i``: own ``(x, y)`` scaled to [0, 1], then for each
    target ``(dx, dy, visible)`` with offsets mapped from ``[-r, r]`` to [0, 1]
    when the target is within Chebyshev distance ``r``, all zeros otherwise.
    """

    def __init__(self, config: GridConfig):
        super().__init__()
        self.config = config
        self.spec = DecPomdpSpec(
            n=config.n_agents, K=len(MOVES), obs_dim=2 + 3 * config.n_targets,
            episode_limit=config.episode_limit, gamma=config.gamma,
        )
        self.agents: list[tuple[int, int]] = []
        self.targets: list[tuple[int, int]] = []

    def _place(self):
        c = self.config
        cells = self.rng.choice(c.width * c.height, size=c.n_agents + c.n_targets, replace=False)
        xy = [(int(k) % c.width, int(k) // c.width) for k in cells]
        self.agents = xy[: c.n_agents]
        self.targets = xy[c.n_agents :]

    def _move(self, xy, action):
        dx, dy = MOVES[action]
        x = min(max(xy[0] + dx, 0), self.config.width - 1)
        y = min(max(xy[1] + dy, 0), self.config.height - 1)
        return (x, y)

    def observe(self, agent_index):
        c = self.config
        x, y = self.agents[agent_index]
        obs = np.zeros(self.spec.obs_dim)
        obs[0] = x / max(c.width - 1, 1)
        obs[1] = y / max(c.height - 1, 1)
        r = c.vision_radius
        for k, (tx, ty) in enumerate(self.targets):
            dx, dy = tx - x, ty - y
            if max(abs(dx), abs(dy)) <= r:
                base = 2 + 3 * k
                obs[base] = (dx + r) / (2 * r) if r else 0.5
                obs[base + 1] = (dy + r) / (2 * r) if r else 0.5
                obs[base + 2] = 1.0
        return obs

    def state_summary(self):
        return {"agents": [list(a) for a in self.agents], "targets": [list(t) for t in self.targets]}


class CooperativeNavigation(GridWorld):
    """Cover every landmark; penalty is the uncovered fraction each step."""

    name = "cooperative_navigation"

    def _reset(self):
        self._place()

    def _transition(self, actions):
        self.agents = [self._move(a, act) for a, act in zip(self.agents, actions)]
        occupied = set(self.agents)
        uncovered = sum(1 for t in self.targets if t not in occupied)
        if uncovered == 0:
            return SUCCESS_REWARD, True, True
        return -uncovered / len(self.targets), False, False


class PredatorPrey(GridWorld):
    """Predators catch a randomly wandering prey by flanking it with two."""

    name = "predator_prey"
    STEP_PENALTY = -0.01

    def __init__(self, config: GridConfig):
        if config.n_targets != 1:
            raise ValueError("predator-prey has exactly one prey")
        super().__init__(config)

    def _reset(self):
        self._place()

    def _captured(self):
        px, py = self.targets[0]
        adjacent = sum(1 for (x, y) in self.agents if abs(x - px) + abs(y - py) == 1)
        return adjacent >= 2

    def _transition(self, actions):
        prey = self.targets[0]
        moved = []
        for xy, act in zip(self.agents, actions):
            nxt = self._move(xy, act)
            moved.append(xy if nxt == prey else nxt)
        self.agents = moved
        if self._captured():
            return SUCCESS_REWARD, True, True
        blocked = set(self.agents)
        free = [
            nxt
            for nxt in (self._move(prey, a) for a in range(4))
            if nxt != prey and nxt not in blocked
        ]
        if free:
            self.targets = [free[int(self.rng.integers(len(free)))]]
        return self.STEP_PENALTY, False, False


# -- registry --------------------------------------------------------------------

ENV_PRESETS = {
    "hallway_easy": lambda: Hallway(HallwayConfig((4, 6), 20)),
    "hallway_hard": lambda: Hallway(HallwayConfig((4, 6, 8, 10), 30)),
    "cn_medium": lambda: CooperativeNavigation(GridConfig(7, 7, 3, 3, 2, 30)),
    "cn_hard": lambda: CooperativeNavigation(GridConfig(9, 9, 3, 3, 1, 40)),
    "pp_medium": lambda: PredatorPrey(GridConfig(5, 5, 3, 1, 1, 30)),
    "pp_hard": lambda: PredatorPrey(GridConfig(7, 7, 3, 1, 1, 40)),
}


def make_env(name: str) -> DecPomdp:
    try:
        return ENV_PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENV_PRESETS)}") from None


class TrajectoryDump:
    """Appends one JSON line per step: step, state summary, joint action, reward."""

    def __init__(self, path):
        self.fh = open(path, "a", encoding="utf-8")

    def write(self, step, env, joint_action, reward):
        rec = {"step": step, "state": env.state_summary(),
               "joint_action": [int(a) for a in joint_action], "reward": reward}
        self.fh.write(json.dumps(rec) + "\n")

    def close(self):
        self.fh.close()
