"""Warm-up, classification and hybrid training for both compression modes.

``train`` runs three phases over one minibatch stream:

1. warm-up: the configured variant on every variable while an exponential
   moving average of the gradient accumulates;
2. classification: salience scores from the warm-up iterate and averaged
   gradient pick redundant groups, flat (prune) or hierarchically (erase);
3. hybrid steps: the variant on everything, after which each redundant group
   is overwritten by a dual half-space step followed by half-space
   projection.

With no redundant groups phase 3 is exactly the plain variant, so a K=0 run
reproduces the baseline bit for bit.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .engine import EngineError, loss_and_grad, updated_running_stats
from .erase_space import ErasingGraph
from .graph import Graph
from .params import ParamStore
from .partition import GroupPartition
from .sparse_opt import (
    GroupClassification,
    OptimizerConfig,
    SalienceReport,
    choose_lambda,
    half_space_project,
    hierarchical_search,
    redundant_direction,
    resolve_target,
    salience_scores,
    select_redundant_flat,
)
from .variants import Variant, lr_at

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class StepRecord:
    step: int
    phase: str
    loss: float
    zero_groups: int
    lr: float


@dataclass
class GeometryRecord:
    step: int
    group: int
    kind: str
    lam: float
    lo: float
    hi: float
    cos: float
    ip_grad: float  # <d, -grad>
    ip_x: float  # <d, -x>
    projected: bool


@dataclass
class TrainResult:
    params: ParamStore
    history: list[StepRecord]
    classification: GroupClassification | None
    report: SalienceReport | None
    geometry: list[GeometryRecord] = field(default_factory=list)
    # redundant groups already exactly zero before the closing projection
    natural_zero: int = 0
    flags: list[str] = field(default_factory=list)

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss", "zero_groups", "lr"])
        for r in self.history:
            w.writerow([r.step, repr(r.loss), r.zero_groups, repr(r.lr)])
        return buf.getvalue()


def flatten_params(params: ParamStore, names) -> np.ndarray:
    return np.concatenate([params[n].reshape(-1) for n in names]).astype(np.float32) if names else np.zeros(0, np.float32)


def unflatten_into(params: ParamStore, names, x: np.ndarray) -> ParamStore:
    out = params.copy()
    off = 0
    for n in names:
        size = out[n].size
        out[n] = x[off : off + size].reshape(out[n].shape)
        off += size
    return out


def _zero_count(x: np.ndarray, partition: GroupPartition, ids) -> int:
    return sum(1 for gid in ids if not np.any(x[partition.flat_indices(gid)]))


def train(
    g: Graph,
    params: ParamStore,
    partition: GroupPartition | None,
    config: OptimizerConfig,
    data,
    mode: str = "dhspg",
    eg: ErasingGraph | None = None,
    *,
    record_geometry: bool = False,
) -> TrainResult:
    """Train ``g`` on ``data`` (a :class:`~zigcompress.data.Dataset`).

    ``mode`` is ``"dhspg"`` (flat selection over PZIGs), ``"h2spg"``
    (hierarchical selection over EZIGs, needs ``eg``) or ``"baseline"``
    (the plain variant, no partition needed).
    """
    if mode not in ("dhspg", "h2spg", "baseline"):
        raise ValueError(f"unknown training mode {mode!r}")
    if mode == "h2spg" and eg is None:
        raise ValueError("h2spg needs the erasing graph")
    if mode == "dhspg" and eg is not None:
        raise ValueError("dhspg does not take an erasing graph")
    config.validate()
    warm = config.resolved_warmup()
    names = g.trainable_names()
    x = flatten_params(params, names)
    state = params.copy()
    variant = Variant(config.variant, momentum=config.momentum, betas=tuple(config.betas), weight_decay=config.weight_decay)
    stream = data.batches(config.batch_size, config.seed)

    zig_ids = [grp.id for grp in partition.zig_groups] if (partition is not None and mode != "baseline") else []
    k = resolve_target(config.target, len(zig_ids)) if zig_ids else 0
    ema = None
    redundant: list[int] = []
    red_idx: dict[int, np.ndarray] = {}
    cls = None
    report = None
    history: list[StepRecord] = []
    geometry: list[GeometryRecord] = []
    flags: list[str] = []

    for t in range(config.steps):
        lr = lr_at(t, config.lr, config.lr_schedule, config.steps, config.lr_gamma, config.lr_every)
        xb, yb = next(stream)
        cur = unflatten_into(state, names, x)
        try:
            loss, grads, cache = loss_and_grad(g, cur, xb, yb, "train")
        except EngineError as exc:
            raise TrainingError(f"training diverged at step {t} (lr={lr}): {exc}") from exc
        state = updated_running_stats(g, cur, cache)
        grad = flatten_params(ParamStore(grads), names)

        if t < warm or mode == "baseline":
            x = variant.step(x, grad, lr)
            if mode != "baseline":
                ema = grad.astype(np.float64) if ema is None else config.ema_decay * ema + (1 - config.ema_decay) * grad
            phase = "warmup" if mode != "baseline" else "baseline"
        else:
            if cls is None:
                report = salience_scores(x, ema.astype(np.float32), partition, zig_ids, tau=config.tau, mix=config.salience_mix)
                if mode == "dhspg":
                    cls = select_redundant_flat(report, k, partition)
                else:
                    cls = hierarchical_search(eg, report, k, partition)
                    if cls.shortfall:
                        flags.append(f"hierarchical search accepted {len(cls.redundant)} of {k} requested groups")
                        log.info(flags[-1])
                redundant = sorted(cls.redundant)
                red_idx = {gid: partition.flat_indices(gid) for gid in redundant}
            x_new = variant.step(x, grad, lr)
            for gid in redundant:
                ix = red_idx[gid]
                xg = x[ix]
                if not np.any(xg):
                    x_new[ix] = 0.0
                    continue
                gg = grad[ix]
                choice = choose_lambda(xg, gg, config.tau)
                d = redundant_direction(xg, gg, choice.lam, config.tau)
                trial = xg.astype(np.float64) + lr * d
                nxt = half_space_project(trial, xg, config.eps_hs)
                x_new[ix] = nxt.astype(np.float32)
                if record_geometry:
                    geometry.append(
                        GeometryRecord(
                            t, gid, choice.kind, choice.lam, choice.lo, choice.hi, choice.cos,
                            float(d @ -gg.astype(np.float64)), float(d @ -xg.astype(np.float64)), not np.any(nxt),
                        )
                    )
            x = x_new
            phase = "hybrid"
        if not np.all(np.isfinite(x)):
            raise TrainingError(f"non-finite iterate after step {t} (loss {loss}, lr {lr})")
        history.append(StepRecord(t, phase, float(loss), _zero_count(x, partition, zig_ids) if zig_ids else 0, float(lr)))

    natural = _zero_count(x, partition, redundant) if redundant else 0
    if config.final_projection and redundant:
        for gid in redundant:
            x[red_idx[gid]] = 0.0
        if natural < len(redundant):
            flags.append(f"closing projection zeroed {len(redundant) - natural} redundant groups")
    final = unflatten_into(state, names, x)
    return TrainResult(final, history, cls, report, geometry, natural, flags)


def train_baseline(g: Graph, params: ParamStore, config: OptimizerConfig, data) -> TrainResult:
    """The configured variant alone, same batch stream as :func:`train`."""
    return train(g, params, None, config, data, mode="baseline")
