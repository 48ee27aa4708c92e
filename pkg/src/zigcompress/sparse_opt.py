"""Salience scoring, redundant-group selection and the dual half-space step.

The per-group geometry follows one convention throughout: with ``x`` the
group's variables and ``g`` its gradient,

    cos   = <x, g> / (max(|x|, tau) * max(|g|, tau))
    d     = -g - lam * x / max(|x|, tau)
    trial = x + lr * d

``d`` is a descent direction for the loss when ``<d, -g> > 0`` and shrinks the
group when ``<d, -x> > 0``.  For ``cos < 0`` both hold exactly when ``lam``
lies in the open interval returned by :func:`lambda_interval`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .erase_space import ErasingGraph, is_valid
from .partition import GroupPartition


@dataclass
class OptimizerConfig:
    variant: str = "sgd"
    lr: float = 0.1
    lr_schedule: str = "constant"
    lr_gamma: float = 0.1
    lr_every: int = 0
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    steps: int = 100
    warmup_steps: int | None = None  # default: steps // 10
    target: int | float = 0.5  # group count (int) or fraction of ZIGs (float)
    tau: float = 1e-6
    eps_hs: float = 0.0
    salience_mix: float = 0.5
    ema_decay: float = 0.9
    batch_size: int = 32
    seed: int = 0
    # zero any redundant group still nonzero after the last step
    final_projection: bool = True

    def resolved_warmup(self) -> int:
        t = self.steps // 10 if self.warmup_steps is None else self.warmup_steps
        if t < 1:
            raise ValueError("warm-up requires ≥1 step")
        if t > self.steps:
            raise ValueError(f"warm-up ({t} steps) exceeds the training budget ({self.steps} steps)")
        return t

    def validate(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.eps_hs < 1.0:
            raise ValueError("eps_hs must lie in [0, 1)")
        if not 0.0 <= self.salience_mix <= 1.0:
            raise ValueError("salience_mix must lie in [0, 1]")
        self.resolved_warmup()


def resolve_target(target, n_zigs: int) -> int:
    """Integer targets are group counts; floats are fractions of the ZIG count (rounded up)."""
    if isinstance(target, bool):
        raise ValueError("target must be a count or a fraction")
    if isinstance(target, (int, np.integer)):
        k = int(target)
    else:
        f = float(target)
        if not 0.0 <= f <= 1.0:
            raise ValueError(f"target fraction {f} outside [0, 1]")
        k = int(math.ceil(f * n_zigs - 1e-9))
    if not 0 <= k <= n_zigs:
        raise ValueError(f"target K={k} out of range for {n_zigs} ZIGs")
    return k


# -- salience --------------------------------------------------------------------


@dataclass
class SalienceReport:
    ids: list[int]
    cos: dict[int, float]
    magnitude: dict[int, float]  # |x_g| / sqrt(|g|)
    score: dict[int, float]

    def ranking(self) -> list[int]:
        return sorted(self.ids, key=lambda gid: (self.score[gid], gid))


def group_cosine(xg: np.ndarray, gg: np.ndarray, tau: float) -> float:
    xg = np.asarray(xg, dtype=np.float64)
    gg = np.asarray(gg, dtype=np.float64)
    c = float(xg @ gg) / (max(np.linalg.norm(xg), tau) * max(np.linalg.norm(gg), tau))
    return float(np.clip(c, -1.0, 1.0))


def salience_scores(x: np.ndarray, grad: np.ndarray, partition: GroupPartition, ids=None, *, tau: float = 1e-6, mix: float = 0.5) -> SalienceReport:
    """Lower scores mark groups whose removal costs the least."""
    ids = [grp.id for grp in partition.zig_groups] if ids is None else list(ids)
    cos, mag = {}, {}
    for gid in ids:
        ix = partition.flat_indices(gid)
        xg, gg = x[ix], grad[ix]
        cos[gid] = group_cosine(xg, gg, tau)
        mag[gid] = float(np.linalg.norm(np.asarray(xg, dtype=np.float64))) / math.sqrt(max(len(ix), 1))
    top = max(mag.values(), default=0.0)
    score = {}
    for gid in ids:
        m = mag[gid] / top if top > 0 else 0.0
        score[gid] = mix * (1.0 - cos[gid]) / 2.0 + (1.0 - mix) * m
    return SalienceReport(ids, cos, mag, score)


# -- selection ---------------------------------------------------------------------


@dataclass
class GroupClassification:
    redundant: frozenset[int]
    important: frozenset[int]
    requested: int = 0
    shortfall: int = 0
    rejected: list[int] = field(default_factory=list)
    order: list[int] = field(default_factory=list)  # acceptance order

    def to_dict(self) -> dict:
        return {
            "redundant": sorted(self.redundant),
            "important": sorted(self.important),
            "requested": self.requested,
            "accepted": len(self.redundant),
            "shortfall": self.shortfall,
            "rejected": list(self.rejected),
        }


def _all_ids(partition: GroupPartition | None, report: SalienceReport) -> set[int]:
    return {grp.id for grp in partition.groups} if partition is not None else set(report.ids)


def select_redundant_flat(report: SalienceReport, k: int, partition: GroupPartition | None = None, *, keep_one_channel: bool = True) -> GroupClassification:
    """The ``k`` lowest-scoring ZIGs (ties by id).

    For a pruning partition, a candidate that would take the last surviving
    channel of its node group is passed over (the layer would vanish), so the
    next-lowest group is taken instead; set ``keep_one_channel=False`` for
    the unconstrained ranking.
    """
    if not 0 <= k <= len(report.ids):
        raise ValueError(f"K={k} out of range for {len(report.ids)} ZIGs")
    ranking = report.ranking()
    if partition is None or partition.mode != "prune" or not keep_one_channel:
        chosen = ranking[:k]
        skipped: list[int] = []
    else:
        left: dict[int, int] = {}
        for gid in report.ids:
            ng = partition[gid].structure["node_group"]
            left[ng] = left.get(ng, 0) + 1
        chosen, skipped = [], []
        for gid in ranking:
            if len(chosen) >= k:
                break
            ng = partition[gid].structure["node_group"]
            if left[ng] <= 1:
                skipped.append(gid)
                continue
            left[ng] -= 1
            chosen.append(gid)
        if len(chosen) < k:
            raise ValueError(f"K={k} would remove every channel of some node group (at most {len(chosen)} possible)")
    red = frozenset(chosen)
    return GroupClassification(red, frozenset(_all_ids(partition, report) - red), k, 0, skipped, chosen)


def hierarchical_search(eg: ErasingGraph, report: SalienceReport, k: int, partition: GroupPartition) -> GroupClassification:
    """Accept EZIGs in ascending score while the remaining graph stays valid."""
    if not 0 <= k <= len(report.ids):
        raise ValueError(f"K={k} out of range for {len(report.ids)} ZIGs")
    removed: set[int] = set()
    accepted, rejected = [], []
    for gid in report.ranking():
        if len(accepted) >= k:
            break
        sid = partition[gid].structure["segment"]
        if is_valid(eg, removed | {sid}):
            removed.add(sid)
            accepted.append(gid)
        else:
            rejected.append(gid)
    red = frozenset(accepted)
    return GroupClassification(red, frozenset(_all_ids(partition, report) - red), k, k - len(accepted), rejected, accepted)


# -- dual half-space geometry ---------------------------------------------------------


@dataclass(frozen=True)
class LambdaChoice:
    kind: str  # "interval", "any_positive" or "degenerate"
    lam: float
    lo: float = float("nan")
    hi: float = float("nan")
    cos: float = 0.0


AnyPositive = "any_positive"


def lambda_interval(xg: np.ndarray, gg: np.ndarray, tau: float = 1e-6):
    """Open interval of penalty weights giving a dual half-space direction, or ``AnyPositive``.

    With ``s = |x| / max(|x|, tau)`` (1 unless the group is tiny) the bounds
    are ``(-cos |g| / s, -|g| / (s cos))``.
    """
    xg = np.asarray(xg, dtype=np.float64)
    gg = np.asarray(gg, dtype=np.float64)
    c = group_cosine(xg, gg, tau)
    if c >= 0.0:
        return AnyPositive
    nx = float(np.linalg.norm(xg))
    ng = float(np.linalg.norm(gg))
    s = nx / max(nx, tau)
    return (-c * ng / s, -ng / (s * c))


def choose_lambda(xg: np.ndarray, gg: np.ndarray, tau: float = 1e-6) -> LambdaChoice:
    """Midpoint of the interval; ``|g|`` when any positive value works or the interval is empty."""
    ng = float(np.linalg.norm(np.asarray(gg, dtype=np.float64)))
    c = group_cosine(xg, gg, tau)
    iv = lambda_interval(xg, gg, tau)
    if iv is AnyPositive:
        return LambdaChoice("any_positive", ng, cos=c)
    lo, hi = iv
    mid = 0.5 * (lo + hi)
    if not (hi - lo > 1e-12 * max(1.0, abs(hi)) and lo < mid < hi):
        return LambdaChoice("degenerate", ng, lo, hi, c)
    return LambdaChoice("interval", mid, lo, hi, c)


def redundant_direction(xg: np.ndarray, gg: np.ndarray, lam: float, tau: float = 1e-6) -> np.ndarray:
    xg = np.asarray(xg, dtype=np.float64)
    gg = np.asarray(gg, dtype=np.float64)
    return -gg - lam * xg / max(float(np.linalg.norm(xg)), tau)


def half_space_project(trial: np.ndarray, ref: np.ndarray, eps_hs: float = 0.0) -> np.ndarray:
    """Zero the trial group when it leaves the half-space around the reference; zero is absorbing."""
    ref64 = np.asarray(ref, dtype=np.float64)
    if not np.any(ref64):
        return np.zeros_like(trial)
    if float(np.asarray(trial, dtype=np.float64) @ ref64) < eps_hs * float(ref64 @ ref64):
        return np.zeros_like(trial)
    return trial
