"""Subjective-logic opinions over a set of K actions and Dempster's rule.

An agent's evidence ``e`` (one non-negative count per action) defines a
Dirichlet with ``alpha = e + 1``.  The equivalent subjective-logic opinion
has belief masses ``b = e / S`` and uncertainty mass ``u = K / S`` where
``S = sum(alpha)``.  Opinions are fused with the reduced Dempster rule that
only has singleton focal elements plus the whole frame.

Everything here is plain Python floats so the algebra can be checked
without any numerical library in the loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from typing import Iterable, Sequence

CONFLICT_EPS = 1e-9


class FusionConflictError(ValueError):
    """Raised when two opinions are in (numerically) total conflict."""

    def __init__(self, conflict: float):
        super().__init__(f"total conflict between opinions (C={conflict!r})")
        self.conflict = conflict


@dataclass(frozen=True)
class EvidenceVector:
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) < 1:
            raise ValueError("evidence vector must be non-empty")
        for k, v in enumerate(vals):
            if not math.isfinite(v):
                raise ValueError(f"evidence[{k}] is not finite: {v!r}")
            if v < 0.0:
                raise ValueError(f"evidence[{k}] is negative: {v!r}")
        object.__setattr__(self, "values", vals)

    @property
    def K(self) -> int:
        return len(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, k):
        return self.values[k]


@dataclass(frozen=True)
class DirichletOpinion:
    """Belief masses plus uncertainty mass; strength and alphas are derived.

    Equality compares ``beliefs`` and ``uncertainty`` only, which is what
    makes the vacuous opinion an exact neutral element of :func:`combine_pair`.
    """

    beliefs: tuple[float, ...]
    uncertainty: float

    def __post_init__(self):
        b = tuple(float(x) for x in self.beliefs)
        u = float(self.uncertainty)
        if len(b) < 1:
            raise ValueError("opinion needs at least one action")
        if not all(math.isfinite(x) and x >= 0.0 for x in b):
            raise ValueError(f"belief masses must be finite and >= 0: {b!r}")
        if not (math.isfinite(u) and 0.0 <= u <= 1.0 + 1e-9):
            raise ValueError(f"uncertainty mass out of range: {u!r}")
        if abs(u + math.fsum(b) - 1.0) > 1e-9:
            raise ValueError(f"masses do not sum to one: u={u!r}, b={b!r}")
        object.__setattr__(self, "beliefs", b)
        object.__setattr__(self, "uncertainty", u)

    @property
    def K(self) -> int:
        return len(self.beliefs)

    @property
    def strength(self) -> float:
        if self.uncertainty <= 0.0:
            return math.inf
        return self.K / self.uncertainty

    @property
    def alphas(self) -> tuple[float, ...]:
        s = self.strength
        return tuple(bk * s + 1.0 for bk in self.beliefs)

    @classmethod
    def vacuous(cls, K: int) -> "DirichletOpinion":
        return cls((0.0,) * K, 1.0)


def _as_evidence(e) -> EvidenceVector:
    return e if isinstance(e, EvidenceVector) else EvidenceVector(tuple(e))


def opinion_from_evidence(e: EvidenceVector | Sequence[float]) -> DirichletOpinion:
    ev = _as_evidence(e)
    K = ev.K
    S = math.fsum(ev.values) + K
    return DirichletOpinion(tuple(v / S for v in ev.values), K / S)


def evidence_from_opinion(m: DirichletOpinion) -> EvidenceVector:
    if m.uncertainty <= 0.0:
        raise ValueError("opinion with zero uncertainty has infinite strength")
    S = m.K / m.uncertainty
    return EvidenceVector(tuple(bk * S for bk in m.beliefs))


def conflict(mi: DirichletOpinion, mj: DirichletOpinion) -> float:
    """Mass the two opinions assign to disjoint actions."""
    return math.fsum(
        bi * bj
        for k, bi in enumerate(mi.beliefs)
        for kk, bj in enumerate(mj.beliefs)
        if k != kk
    )


def combine_pair(
    mi: DirichletOpinion, mj: DirichletOpinion, eps: float = CONFLICT_EPS
) -> DirichletOpinion:
    """Dempster combination of two opinions over the same K actions."""
    if mi.K != mj.K:
        raise ValueError(f"cannot combine opinions over {mi.K} and {mj.K} actions")
    C = conflict(mi, mj)
    norm = 1.0 - C
    if norm <= eps:
        raise FusionConflictError(C)
    ui, uj = mi.uncertainty, mj.uncertainty
    b = tuple(
        (bi * bj + bi * uj + bj * ui) / norm
        for bi, bj in zip(mi.beliefs, mj.beliefs)
    )
    return DirichletOpinion(b, ui * uj / norm)


def combine_all(
    opinions: Iterable[DirichletOpinion], eps: float = CONFLICT_EPS
) -> DirichletOpinion:
    ops = list(opinions)
    if not ops:
        raise ValueError("combine_all needs at least one opinion")
    return reduce(lambda a, b: combine_pair(a, b, eps), ops)


def expected_action_values(m: DirichletOpinion) -> tuple[float, ...]:
    """Dirichlet mean ``alpha / S`` for each action.

    ``alpha / S = b + 1 / S = b + u / K``; the last form stays finite at u = 0.
    """
    share = m.uncertainty / m.K
    return tuple(bk + share for bk in m.beliefs)
