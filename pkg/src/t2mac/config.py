"""Run configuration: one flat JSON object, every key has a default.

Unknown keys are rejected with the key named so typos never silently fall
back to defaults.  The resolved config is echoed next to the run outputs
and can be fed back verbatim to reproduce the run.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .envs import ENV_PRESETS

VARIANTS = ("t2mac", "fullcomm", "nocomm", "baseline")
LABEL_SOURCES = ("replay_full", "replay_gated")
LINK_REFERENCES = ("leave_one_out", "local")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    env: str = "hallway_easy"
    variant: str = "t2mac"
    seeds: tuple[int, ...] = (0,)
    episodes: int = 5000
    output_dir: str = "runs"
    # learning
    lr: float = 5e-4
    gamma: float = 0.99
    batch_size: int = 32
    buffer_size: int = 2000
    target_update_interval: int = 50
    grad_clip: float = 10.0
    bootstrap_timeouts: bool = True
    epsilon_start: float = 1.0
    epsilon_finish: float = 0.05
    epsilon_anneal_fraction: float = 0.2
    # network
    hidden: int = 64
    cell: str = "gru"
    temperature_init: float = 10.0
    evidence_bias_init: float = 1.0
    offset_init: float | None = None  # None: -temperature_init / K, so vacuous opinions are worth 0
    # communication
    tau: float = 0.01
    gate_threshold: float = 0.5
    label_source: str = "replay_full"
    link_reference: str = "leave_one_out"
    bce_weight: float = 1.0
    # evaluation
    eval_interval: int = 100
    eval_episodes: int = 32

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        checks = [
            ("env", self.env in ENV_PRESETS, f"unknown environment {self.env!r}"),
            ("variant", self.variant in VARIANTS, f"must be one of {VARIANTS}"),
            ("seeds", len(self.seeds) > 0, "need at least one seed"),
            ("episodes", self.episodes >= 1, "must be >= 1"),
            ("lr", self.lr > 0, "must be > 0"),
            ("gamma", 0.0 <= self.gamma < 1.0, "must lie in [0, 1)"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("buffer_size", self.buffer_size >= self.batch_size, "must be >= batch_size"),
            ("target_update_interval", self.target_update_interval >= 1, "must be >= 1"),
            ("epsilon_finish", 0.0 <= self.epsilon_finish <= self.epsilon_start <= 1.0,
             "need 0 <= epsilon_finish <= epsilon_start <= 1"),
            ("epsilon_anneal_fraction", 0.0 <= self.epsilon_anneal_fraction <= 1.0, "must lie in [0, 1]"),
            ("hidden", self.hidden >= 1, "must be >= 1"),
            ("cell", self.cell in ("gru", "tanh"), "must be 'gru' or 'tanh'"),
            ("tau", self.tau >= 0, "must be >= 0"),
            ("gate_threshold", 0.0 <= self.gate_threshold <= 1.0, "must lie in [0, 1]"),
            ("label_source", self.label_source in LABEL_SOURCES, f"must be one of {LABEL_SOURCES}"),
            ("link_reference", self.link_reference in LINK_REFERENCES, f"must be one of {LINK_REFERENCES}"),
            ("eval_interval", self.eval_interval >= 1, "must be >= 1"),
            ("eval_episodes", self.eval_episodes >= 1, "must be >= 1"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, msg)

    @classmethod
    def from_dict(cls, data: dict, required: tuple[str, ...] = ()) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in names:
                raise ConfigError(key, "unknown configuration key")
        for key in required:
            if key not in data:
                raise ConfigError(key, "missing required key")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def load_config(path, overrides: dict | None = None, required=("env",)) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path} is not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path} must hold a JSON object")
    data.update(overrides or {})
    return RunConfig.from_dict(data, required=required)


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with a JSON value, falling back to the raw string."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
