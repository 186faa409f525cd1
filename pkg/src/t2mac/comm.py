"""Message routing, selective engagement and evidence-level inbox fusion.

Two layers live here:

* a per-message API on :mod:`t2mac.evidence_core` values (used for audit,
  logging and as the reference path in tests), and
* batched numpy versions of the same fusion with exact reverse-mode
  gradients, used by the trainer so the TD loss reaches every sender's
  evidence head through the messages it sent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .evidence_core import (
    CONFLICT_EPS,
    DirichletOpinion,
    EvidenceVector,
    FusionConflictError,
    combine_pair,
    evidence_from_opinion,
    opinion_from_evidence,
)

MODES = ("selective", "full", "none")


@dataclass(frozen=True)
class TailoredMessage:
    sender: int
    recipient: int
    payload: EvidenceVector
    timestep: int = 0

    def __post_init__(self):
        if self.sender == self.recipient:
            raise ValueError(f"agent {self.sender} cannot message itself")
        if not isinstance(self.payload, EvidenceVector):
            object.__setattr__(self, "payload", EvidenceVector(tuple(self.payload)))


@dataclass(frozen=True)
class CommDecision:
    probs: np.ndarray  # (n, n) p_ij, row = sender
    gates: np.ndarray  # (n, n) bool, diagonal always False


@dataclass(frozen=True)
class LinkLabel:
    sender: int
    recipient: int
    value: float
    label: int


def gate_messages(probs, mode: str = "selective", threshold: float = 0.5) -> np.ndarray:
    """Open link i->j where ``p_ij > threshold`` (strict); works on (..., n, n)."""
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[-1]
    if mode == "selective":
        gates = probs > threshold
    elif mode == "full":
        gates = np.ones(probs.shape, dtype=bool)
    elif mode == "none":
        gates = np.zeros(probs.shape, dtype=bool)
    else:
        raise ValueError(f"unknown gating mode {mode!r}; choose from {MODES}")
    gates = gates.copy()
    gates[..., np.arange(n), np.arange(n)] = False
    return gates


def decide(probs, mode="selective", threshold=0.5) -> CommDecision:
    probs = np.asarray(probs, dtype=np.float64)
    return CommDecision(probs, gate_messages(probs, mode, threshold))


def _ordered(inbox: Sequence[TailoredMessage]) -> list[TailoredMessage]:
    return sorted(inbox, key=lambda m: m.sender)


def integrate_inbox(
    local: DirichletOpinion,
    inbox: Sequence[TailoredMessage],
    stats: dict | None = None,
    eps: float = CONFLICT_EPS,
) -> tuple[EvidenceVector, DirichletOpinion]:
    """Fold ``local`` with each payload's opinion, senders in ascending order.

    A message that would put the running opinion in total conflict is dropped
    and counted under ``stats["skipped"]``.
    """
    fused = local
    for msg in _ordered(inbox):
        if msg.payload.K != local.K:
            raise ValueError(f"message from {msg.sender} has {msg.payload.K} actions, expected {local.K}")
        try:
            fused = combine_pair(fused, opinion_from_evidence(msg.payload), eps)
        except FusionConflictError:
            if stats is not None:
                stats["skipped"] = stats.get("skipped", 0) + 1
    return evidence_from_opinion(fused), fused


def link_value(
    local: DirichletOpinion,
    message: TailoredMessage,
    full_inbox: Sequence[TailoredMessage],
    reference: str = "leave_one_out",
) -> float:
    """Drop in the recipient's uncertainty mass credited to ``message``.

    ``leave_one_out`` compares the inbox without this message against the
    full inbox; ``local`` compares the purely local opinion against local
    plus this message alone.
    """
    if message not in full_inbox:
        raise ValueError("message is not part of the inbox")
    if reference == "leave_one_out":
        rest = list(full_inbox)
        rest.remove(message)
        _, without = integrate_inbox(local, rest)
        _, with_all = integrate_inbox(local, full_inbox)
    elif reference == "local":
        without = local
        _, with_all = integrate_inbox(local, [message])
    else:
        raise ValueError(f"unknown reference {reference!r}")
    return without.uncertainty - with_all.uncertainty


def label_array(values, tau: float) -> np.ndarray:
    if tau < 0:
        raise ValueError("threshold must be >= 0")
    return (np.asarray(values, dtype=np.float64) > tau).astype(np.int64)


def make_labels(values: Mapping[tuple[int, int], float], tau: float) -> list[LinkLabel]:
    """``values`` maps (sender, recipient) to v_ij; label 1 iff v_ij > tau."""
    if tau < 0:
        raise ValueError("threshold must be >= 0")
    return [
        LinkLabel(i, j, float(v), int(v > tau))
        for (i, j), v in sorted(values.items())
    ]


def bce_loss(p, y, mask=None) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over masked links and its gradient w.r.t. ``p``."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mask = np.ones_like(p) if mask is None else np.asarray(mask, dtype=np.float64)
    live = mask > 0
    if np.any(live & ((p <= 0.0) | (p >= 1.0))):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    count = float(mask.sum())
    if count == 0:
        return 0.0, np.zeros_like(p)
    ps = np.where(live, p, 0.5)
    ll = y * np.log(ps) + (1.0 - y) * np.log1p(-ps)
    loss = -float(np.sum(ll * mask)) / count
    grad = mask * (ps - y) / (ps * (1.0 - ps)) / count
    return loss, grad


def comm_accounting(gates) -> tuple[int, int, float]:
    """Opened links, possible links and rate over a stack of (n, n) gate matrices."""
    gates = np.asarray(gates, dtype=bool)
    if gates.ndim == 2:
        gates = gates[None]
    steps, n = gates.shape[0], gates.shape[-1]
    off = ~np.eye(n, dtype=bool)
    opened = int(np.sum(gates & off))
    possible = n * (n - 1) * steps
    return opened, possible, (opened / possible if possible else 0.0)


class CommLog:
    """Line-delimited audit records: step, sender, recipient, gate, p, v, y."""

    def __init__(self, path):
        self.fh = open(path, "a", encoding="utf-8")

    def write(self, step, sender, recipient, gate, p, v=None, y=None):
        rec = {"step": int(step), "sender": int(sender), "recipient": int(recipient),
               "gate": bool(gate), "p": float(p),
               "v": None if v is None else float(v), "y": None if y is None else int(y)}
        self.fh.write(json.dumps(rec) + "\n")

    def close(self):
        self.fh.close()


# -- batched, differentiable fusion ---------------------------------------------


def opinions_from_evidence(e):
    """Rows of evidence (..., K) -> beliefs (..., K), uncertainty (...), strength (...)."""
    K = e.shape[-1]
    S = e.sum(axis=-1) + K
    return e / S[..., None], K / S, S


def opinions_from_evidence_backward(b, u, S, gb, gu):
    inner = (gb * b).sum(axis=-1) + gu * u
    return (gb - inner[..., None]) / S[..., None]


def combine_rows(bi, ui, bj, uj, eps=CONFLICT_EPS):
    """Row-wise Dempster combination.  Rows in total conflict keep the left operand."""
    Bi = bi.sum(axis=-1)
    Bj = bj.sum(axis=-1)
    C = Bi * Bj - (bi * bj).sum(axis=-1)
    D = 1.0 - C
    bad = D <= eps
    Ds = np.where(bad, 1.0, D)
    b = (bi * bj + bi * uj[..., None] + bj * ui[..., None]) / Ds[..., None]
    u = ui * uj / Ds
    if bad.any():
        b = np.where(bad[..., None], bi, b)
        u = np.where(bad, ui, u)
    return b, u, (bi, ui, bj, uj, Bi, Bj, Ds, b, u, bad)


def combine_rows_backward(cache, gb, gu):
    bi, ui, bj, uj, Bi, Bj, D, b, u, bad = cache
    s = ((gb * b).sum(axis=-1) + gu * u) / D
    gbi = gb * (bj + uj[..., None]) / D[..., None] + s[..., None] * (Bj[..., None] - bj)
    gbj = gb * (bi + ui[..., None]) / D[..., None] + s[..., None] * (Bi[..., None] - bi)
    gui = ((gb * bj).sum(axis=-1) + gu * uj) / D
    guj = ((gb * bi).sum(axis=-1) + gu * ui) / D
    if bad.any():
        gbi = np.where(bad[..., None], gb, gbi)
        gui = np.where(bad, gu, gui)
        gbj = np.where(bad[..., None], 0.0, gbj)
        guj = np.where(bad, 0.0, guj)
    return gbi, gui, gbj, guj


@dataclass
class FusionCache:
    local: tuple
    messages: list
    pairs: list
    gates: list


def fuse_evidence(local_e, messages, gates=None, eps=CONFLICT_EPS):
    """Fuse local evidence rows with message rows, in the given order.

    ``local_e`` is (..., K); ``messages`` a list of (..., K) arrays; ``gates``
    an optional list of boolean (...) arrays.  A closed gate turns that
    message into the vacuous opinion, which is an exact no-op.

    Returns (beliefs, uncertainty, skipped, cache).
    """
    b, u, S = opinions_from_evidence(local_e)
    cache = FusionCache((b, u, S), [], [], [])
    skipped = 0
    for idx, m in enumerate(messages):
        g = None if gates is None else np.asarray(gates[idx], dtype=bool)
        mb, mu, mS = opinions_from_evidence(m)
        if g is not None:
            mb = np.where(g[..., None], mb, 0.0)
            mu = np.where(g, mu, 1.0)
        cache.messages.append((mb, mu, mS))
        cache.gates.append(g)
        b, u, pc = combine_rows(b, u, mb, mu, eps)
        skipped += int(pc[-1].sum())
        cache.pairs.append(pc)
    return b, u, skipped, cache


def fuse_evidence_backward(cache: FusionCache, gb, gu):
    """Gradients of a scalar loss w.r.t. the local and every message evidence."""
    g_msgs = [None] * len(cache.pairs)
    for idx in range(len(cache.pairs) - 1, -1, -1):
        gb, gu, gmb, gmu = combine_rows_backward(cache.pairs[idx], gb, gu)
        mb, mu, mS = cache.messages[idx]
        gm = opinions_from_evidence_backward(mb, mu, mS, gmb, gmu)
        g = cache.gates[idx]
        if g is not None:
            gm = np.where(g[..., None], gm, 0.0)
        g_msgs[idx] = gm
    lb, lu, lS = cache.local
    return opinions_from_evidence_backward(lb, lu, lS, gb, gu), g_msgs


def expected_values_rows(b, u):
    """Dirichlet mean per action for rows of opinions: ``b + u / K``."""
    return b + (u / b.shape[-1])[..., None]


def evidence_rows(b, u):
    """Back-map fused opinions to evidence: ``b * K / u``."""
    return b * (b.shape[-1] / u)[..., None]


def leave_one_out_values(local_e, messages, gates=None, eps=CONFLICT_EPS):
    """v for every message slot: u(inbox without it) - u(full inbox).

    With ``gates`` given, the inbox is the gated one and closed slots get NaN.
    """
    _, u_full, _, _ = fuse_evidence(local_e, messages, gates, eps)
    values = []
    for s in range(len(messages)):
        rest = [m for k, m in enumerate(messages) if k != s]
        rest_g = None if gates is None else [g for k, g in enumerate(gates) if k != s]
        _, u_wo, _, _ = fuse_evidence(local_e, rest, rest_g, eps)
        v = u_wo - u_full
        if gates is not None:
            v = np.where(np.asarray(gates[s], dtype=bool), v, np.nan)
        values.append(v)
    return values
