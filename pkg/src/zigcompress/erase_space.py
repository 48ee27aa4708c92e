"""Erasing search space: segments, the segment graph, and erasing ZIGs (EZIGs).

A segment is a single path of vertices grown depth-first from a seed until the
next vertex is a joint (or has several producers), the graph output, or was
already claimed, or until the current vertex feeds more than one consumer.
Seeds are visited breadth-first from the graph inputs.  A segment is an
erasing candidate when it owns trainable variables and every consumer of its
endpoint is an Add or Concat: deleting it then leaves every consumer with at
least one operand.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .channels import NONE, owner_of, owners_in, propagate_erase_atoms
from .graph import Graph, VertexRole, topological_order
from .params import trainable_shapes
from .partition import GroupPartition, VariableGroup, complement_groups

_JOINT_ROLES = (VertexRole.JOINT_SD, VertexRole.JOINT_SID)
# consumers that tolerate losing one operand
_ABSORBING = ("Add", "Concat")


@dataclass(frozen=True)
class Segment:
    id: int
    members: tuple[str, ...]
    erasable: bool = False
    reason: str = ""

    @property
    def endpoint(self) -> str:
        return self.members[-1]

    @property
    def head(self) -> str:
        return self.members[0]


@dataclass
class ErasingGraph:
    segments: dict[int, Segment]
    edges: list[tuple[int, int]]
    inputs: list[int]
    outputs: list[int]
    owner: dict[str, int] = field(default_factory=dict)  # vertex -> segment id

    def __post_init__(self):
        if not self.owner:
            self.owner = {v: s.id for s in self.segments.values() for v in s.members}
        self._succ: dict[int, list[int]] = {sid: [] for sid in self.segments}
        self._pred: dict[int, list[int]] = {sid: [] for sid in self.segments}
        for a, b in self.edges:
            self._succ[a].append(b)
            self._pred[b].append(a)

    def successors(self, sid: int) -> list[int]:
        return list(self._succ[sid])

    def predecessors(self, sid: int) -> list[int]:
        return list(self._pred[sid])

    @property
    def erasable(self) -> list[int]:
        return [sid for sid in sorted(self.segments) if self.segments[sid].erasable]

    def to_json(self) -> str:
        doc = {
            "segments": [
                {"id": s.id, "members": list(s.members), "endpoint": s.endpoint, "erasable": s.erasable, "reason": s.reason}
                for s in (self.segments[k] for k in sorted(self.segments))
            ],
            "edges": [list(e) for e in self.edges],
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        return json.dumps(doc, indent=1) + "\n"


def _is_joint(g: Graph, vid: str) -> bool:
    return g.role(vid) in _JOINT_ROLES or len(g.in_edges(vid)) > 1


def _grow(g: Graph, seed: str, visited: set[str]) -> list[str]:
    members = [seed]
    visited.add(seed)
    tag = g.vertices[seed].tag
    if tag in ("Input", "Output"):
        return members
    cur = seed
    while True:
        succ = g.successors(cur)
        if len(succ) != 1:
            break
        nxt = succ[0]
        if nxt in visited or _is_joint(g, nxt) or g.vertices[nxt].tag == "Output":
            break
        members.append(nxt)
        visited.add(nxt)
        cur = nxt
    return members


def build_erasing_dependency(g: Graph) -> ErasingGraph:
    """Segment the trace graph and derive which segments are erasing candidates."""
    visited: set[str] = set()
    paths: list[list[str]] = []
    queue = deque()
    for vid in sorted(g.inputs):
        paths.append(_grow(g, vid, visited))
        queue.extend(g.successors(vid))
    while queue:
        vid = queue.popleft()
        if vid in visited:
            continue
        path = _grow(g, vid, visited)
        paths.append(path)
        queue.extend(g.successors(path[-1]))
    # vertices unreachable from any input still get a segment
    for vid in topological_order(g):
        if vid not in visited:
            paths.append(_grow(g, vid, visited))

    owner = {v: i for i, path in enumerate(paths) for v in path}
    seg_edges = sorted({(owner[e.src], owner[e.dst]) for e in g.edges if owner[e.src] != owner[e.dst]})
    segments = {i: Segment(i, tuple(p)) for i, p in enumerate(paths)}
    inputs = sorted(owner[v] for v in g.inputs)
    outputs = sorted(owner[v] for v in g.outputs)
    segments = _mark_erasable(g, segments, owner)
    return ErasingGraph(segments, seg_edges, inputs, outputs, owner)


def _mark_erasable(g: Graph, segments: dict[int, Segment], owner: dict[str, int]) -> dict[int, Segment]:
    reasons: dict[int, str] = {}
    for sid, seg in segments.items():
        tags = [g.vertices[v].tag for v in seg.members]
        consumers = [e.dst for e in g.out_edges(seg.endpoint)]
        if tags[0] in ("Input", "Output"):
            reasons[sid] = "graph boundary"
        elif not any(g.vertices[v].trainable_params() for v in seg.members):
            reasons[sid] = "no trainable variables"
        elif any(g.role(v) == VertexRole.UNKNOWN for v in seg.members):
            reasons[sid] = "contains an unknown operator"
        elif not consumers:
            reasons[sid] = "no consumers"
        elif not all(g.vertices[c].tag in _ABSORBING for c in consumers):
            reasons[sid] = "endpoint feeds a vertex that needs this input"
    candidates = {sid for sid in segments if sid not in reasons}

    # Concat slices owned by candidates must be trackable to the next stem,
    # and a candidate may not pass through channels owned by another candidate.
    while True:
        amap = propagate_erase_atoms(g, _slot_owner(g, owner, candidates))
        drop = {sid: why for sid, why in amap.conflicts.items() if sid in candidates}
        for sid in sorted(candidates - set(drop)):
            foreign = owners_in(amap.atoms[segments[sid].endpoint]) - {sid}
            if foreign:
                drop[sid] = f"endpoint carries channels of segments {sorted(foreign)}"
        if not drop:
            break
        for sid, why in drop.items():
            reasons[sid] = why
            candidates.discard(sid)
    return {
        sid: Segment(sid, seg.members, sid in candidates, reasons.get(sid, ""))
        for sid, seg in segments.items()
    }


def _slot_owner(g: Graph, owner: dict[str, int], candidates: set[int]) -> dict[tuple[str, int], int]:
    out = {}
    for e in g.edges:
        if g.vertices[e.dst].tag == "Concat" and owner[e.src] in candidates:
            out[(e.dst, e.slot)] = owner[e.src]
    return out


def partition_ezig(g: Graph, eg: ErasingGraph) -> GroupPartition:
    """One EZIG per erasable segment: all its trainable scalars plus the
    BatchNorm channels that normalise its slice behind a Concat."""
    shapes = trainable_shapes(g)
    cands = set(eg.erasable)
    amap = propagate_erase_atoms(g, _slot_owner(g, eg.owner, cands))
    bn_vertices = [v for v in topological_order(g) if g.vertices[v].tag == "BatchNorm2d"]
    zigs = []
    claimed: dict[str, set[int]] = {}
    absorbed: dict[int, dict[str, np.ndarray]] = {sid: {} for sid in cands}
    for bn in bn_vertices:
        atoms = amap.atoms[bn]
        for sid in owners_in(atoms):
            absorbed[sid][bn] = np.flatnonzero((atoms != NONE) & (owner_of(atoms) == sid))
    for sid in sorted(cands):
        seg = eg.segments[sid]
        idx: dict[str, np.ndarray] = {}
        zero_outputs: list[tuple[str, list[int] | None]] = [(seg.endpoint, None)]
        for v in seg.members:
            vx = g.vertices[v]
            for n in vx.trainable_params():
                if vx.tag == "BatchNorm2d":
                    # channels owned by an upstream candidate belong to that EZIG
                    idx[n] = np.flatnonzero(amap.atoms[v] == NONE).astype(np.int64)
                else:
                    idx[n] = np.arange(int(np.prod(shapes[n])), dtype=np.int64)
        for bn, ch in absorbed[sid].items():
            for n in g.vertices[bn].params[:2]:
                idx[n] = ch.astype(np.int64)
            zero_outputs.append((bn, ch.tolist()))
        idx = {n: ix for n, ix in idx.items() if ix.size}
        for n, ix in idx.items():
            claimed.setdefault(n, set()).update(ix.tolist())
        zigs.append(VariableGroup(len(zigs), True, idx, {"segment": sid, "members": list(seg.members), "zero_outputs": zero_outputs}))
    rest = complement_groups(g, claimed, len(zigs))
    part = GroupPartition("erase", zigs + rest, g.trainable_names(), shapes)
    part.meta.update(erasing_graph=eg, atoms=amap.atoms)
    return part


def erasing_space(g: Graph) -> GroupPartition:
    return partition_ezig(g, build_erasing_dependency(g))


def is_valid(eg: ErasingGraph, removed) -> bool:
    """Whether deleting the ``removed`` segments leaves a usable network.

    Every remaining segment must be reachable from an input segment and must
    reach an output segment, and a segment starting at a non-joint vertex must
    keep all of its producers.
    """
    return not validity_problems(eg, removed)


def validity_problems(eg: ErasingGraph, removed) -> list[str]:
    removed = set(removed)
    alive = [sid for sid in sorted(eg.segments) if sid not in removed]
    alive_set = set(alive)
    problems = []
    for sid in eg.outputs + eg.inputs:
        if sid in removed:
            problems.append(f"boundary segment {sid} removed")
    fwd = _reach(eg.inputs, alive_set, eg.successors)
    bwd = _reach(eg.outputs, alive_set, eg.predecessors)
    for sid in alive:
        if sid not in fwd:
            problems.append(f"segment {sid} ({eg.segments[sid].head}) unreachable from the input")
        elif sid not in bwd:
            problems.append(f"segment {sid} ({eg.segments[sid].endpoint}) no longer reaches an output")
    for sid in alive:
        preds = eg.predecessors(sid)
        lost = [p for p in preds if p in removed]
        if lost and len(lost) == len(preds):
            problems.append(f"segment {sid} lost every producer")
    return problems


def _reach(starts, alive, step) -> set[int]:
    seen = set(s for s in starts if s in alive)
    stack = list(seen)
    while stack:
        s = stack.pop()
        for t in step(s):
            if t in alive and t not in seen:
                seen.add(t)
                stack.append(t)
    return seen
