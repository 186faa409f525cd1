"""Run summaries, the communication-efficiency report and curve tables.

Improvement attributable to communication is relative::

    improvement = (mean_success(comm) - mean_success(nocomm)) / max(mean_success(nocomm), EPS_DIV)
    efficiency  = improvement / comm_rate

A zero no-communication baseline hits the ``EPS_DIV`` guard and the report
row is flagged so the (huge) ratio is never mistaken for a real number.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EPS_DIV = 1e-6

SUMMARY_FIELDS = ("seed", "episodes", "final_success", "comm_rate", "mean_uncertainty")
REPORT_FIELDS = ("method", "env", "episodes", "comm_success", "nocomm_success",
                 "improvement", "comm_rate", "efficiency", "guarded")
CURVE_FIELDS = ("env", "variant", "seed", "episode", "success")
BAND_FIELDS = ("env", "variant", "episode", "n_seeds", "median", "q25", "q75")


@dataclass(frozen=True)
class RunSummary:
    env: str
    variant: str
    seed: int
    episodes: int
    final_success: float
    comm_rate: float = float("nan")
    mean_uncertainty: float = float("nan")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunSummary":
        data = json.loads(text)
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


@dataclass(frozen=True)
class EfficiencyReport:
    method: str
    env: str
    episodes: int
    comm_success: float
    nocomm_success: float
    improvement: float
    comm_rate: float
    efficiency: float
    guarded: bool

    def row(self) -> dict:
        return asdict(self)


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return "nan" if x != x else repr(x)
    return str(x)


def write_rows(path, header: Sequence[str], rows: Iterable[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in header])


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def efficiency_report(comm_runs: Sequence[RunSummary], nocomm_runs: Sequence[RunSummary]) -> EfficiencyReport:
    if not comm_runs or not nocomm_runs:
        raise ValueError("need at least one run on each side")
    settings = {(r.env, r.episodes) for r in list(comm_runs) + list(nocomm_runs)}
    if len(settings) != 1:
        raise ValueError(f"runs disagree on environment/budget: {sorted(settings)}")
    methods = {r.variant for r in comm_runs}
    if len(methods) != 1:
        raise ValueError(f"communicating runs mix variants {sorted(methods)}")
    env, episodes = settings.pop()
    comm_mean = float(np.mean([r.final_success for r in comm_runs]))
    base_mean = float(np.mean([r.final_success for r in nocomm_runs]))
    guarded = base_mean < EPS_DIV
    improvement = (comm_mean - base_mean) / max(base_mean, EPS_DIV)
    rate = float(np.mean([r.comm_rate for r in comm_runs]))
    if not np.isfinite(rate) or not 0.0 <= rate <= 1.0:
        raise ValueError(f"communication rate {rate} outside [0, 1]")
    efficiency = improvement / rate if rate > 0 else float("nan")
    return EfficiencyReport(methods.pop(), env, episodes, comm_mean, base_mean,
                            improvement, rate, efficiency, guarded)


@dataclass(frozen=True)
class CurvePoint:
    env: str
    variant: str
    seed: int
    episode: int
    success: float


def curve_export(points: Iterable[CurvePoint]) -> tuple[list[dict], list[dict]]:
    """Long-format rows plus median / interquartile bands per (env, variant, episode).

    Every seed of an (env, variant) pair must report the same evaluation
    episodes.  Output is sorted, so input order never matters.
    """
    long_rows = sorted(
        (asdict(p) for p in points),
        key=lambda r: (r["env"], r["variant"], r["seed"], r["episode"]),
    )
    if not long_rows:
        raise ValueError("no curve points")
    cadences: dict[tuple, dict[int, list[int]]] = {}
    values: dict[tuple, list[float]] = {}
    for r in long_rows:
        key = (r["env"], r["variant"])
        eps = cadences.setdefault(key, {}).setdefault(r["seed"], [])
        if eps and eps[-1] == r["episode"]:
            raise ValueError(f"duplicate episode {r['episode']} for {key} seed {r['seed']}")
        eps.append(r["episode"])
        values.setdefault(key + (r["episode"],), []).append(float(r["success"]))
    for key, per_seed in cadences.items():
        grids = {tuple(v) for v in per_seed.values()}
        if len(grids) != 1:
            raise ValueError(f"inconsistent evaluation cadence across seeds for {key}")
    bands = []
    for (env, variant, episode), vals in sorted(values.items()):
        q25, med, q75 = np.percentile(vals, [25, 50, 75])
        bands.append({"env": env, "variant": variant, "episode": episode, "n_seeds": len(vals),
                      "median": float(med), "q25": float(q25), "q75": float(q75)})
    return long_rows, bands


def points_from_metrics(path, env: str, variant: str, seed: int) -> list[CurvePoint]:
    return [
        CurvePoint(env, variant, int(seed), int(r["episode"]), float(r["eval_success"]))
        for r in read_rows(path)
    ]


def load_run_dir(path: Path) -> RunSummary:
    """A seed directory holds ``run.json`` (summary) and ``metrics.csv``."""
    return RunSummary.from_json((Path(path) / "run.json").read_text())


def find_runs(paths: Iterable) -> list[Path]:
    """Seed directories under the given paths, sorted for stable output."""
    found = set()
    for p in paths:
        p = Path(p)
        if (p / "run.json").is_file():
            found.add(p)
        elif p.is_dir():
            found.update(q.parent for q in p.rglob("run.json"))
        else:
            raise FileNotFoundError(f"{p} is not a run directory")
    if not found:
        raise FileNotFoundError("no runs found under " + ", ".join(str(p) for p in paths))
    return sorted(found)
