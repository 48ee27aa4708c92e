"""Pruning search space: node groups and pruning zero-invariant groups (PZIGs).

Node groups collect vertices whose output channels must be removed together.
Accessory, shape-dependent joint and unknown vertices that touch each other
are connected first; each connected set then absorbs the stem and
shape-independent joint vertices feeding it, and sets sharing a vertex merge.
Each prunable node group with output width ``m`` yields ``m`` PZIGs, one per
channel, holding that channel's filter rows and biases across the group's
stems plus every BatchNorm scale/shift that normalises the channel (found by
channel-atom propagation, so slices behind a Concat are attributed to the
right producer).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .channels import encode, propagate_prune_atoms
from .graph import Graph, VertexRole, topological_order
from .params import trainable_shapes
from .partition import GroupPartition, PartitionError, VariableGroup, complement_groups


class Exclusion(str, Enum):
    ADJACENT_TO_OUTPUT = "AdjacentToOutput"
    CONTAINS_UNKNOWN = "ContainsUnknown"
    # channels cannot be tracked consistently (e.g. an Add with an untracked operand)
    CHANNEL_CONFLICT = "ChannelConflict"


@dataclass(frozen=True)
class NodeGroup:
    id: int
    members: frozenset[str]
    prunable: bool = True
    exclusion_reason: Exclusion | None = None
    detail: str = ""

    def stems(self, g: Graph) -> list[str]:
        return sorted(v for v in self.members if g.role(v) == VertexRole.STEM)


_LINKED = (VertexRole.ACCESSORY, VertexRole.JOINT_SD, VertexRole.UNKNOWN)


class _DSU:
    def __init__(self, items):
        self.parent = {x: x for x in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the lexicographically smaller root for determinism
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def merge_intersecting(sets) -> list[frozenset[str]]:
    """Merge vertex sets that share a member, transitively."""
    sets = [frozenset(s) for s in sets if s]
    items = sorted(set().union(*sets)) if sets else []
    dsu = _DSU(items)
    for s in sets:
        first = min(s)
        for x in s:
            dsu.union(first, x)
    comps: dict[str, set[str]] = {}
    for x in items:
        comps.setdefault(dsu.find(x), set()).add(x)
    return [frozenset(comps[k]) for k in sorted(comps)]


def build_pruning_dependency(g: Graph) -> list[NodeGroup]:
    order = topological_order(g)
    pos = {vid: i for i, vid in enumerate(order)}
    roles = {vid: g.role(vid) for vid in order}
    linked = [v for v in order if roles[v] in _LINKED]

    # (1) connect adjacent accessory / SD-joint / unknown vertices
    dsu = _DSU(linked)
    for e in g.edges:
        if roles[e.src] in _LINKED and roles[e.dst] in _LINKED:
            dsu.union(e.src, e.dst)
    comps: dict[str, set[str]] = {}
    for v in linked:
        comps.setdefault(dsu.find(v), set()).add(v)

    # (2) grow each set to its incoming stem and SID-joint vertices
    grown = []
    for members in comps.values():
        extra = set()
        for v in members:
            for p in g.predecessors(v):
                if roles[p] in (VertexRole.STEM, VertexRole.JOINT_SID):
                    extra.add(p)
        grown.append(members | extra)

    # (3) merge intersecting sets; leftover vertices become singletons
    merged = merge_intersecting(grown)
    covered = set().union(*merged) if merged else set()
    for v in order:
        if v not in covered and roles[v] != VertexRole.TERMINAL:
            merged.append(frozenset([v]))
    merged.sort(key=lambda s: min(pos[v] for v in s))

    groups = []
    for gid, members in enumerate(merged):
        reason = None
        if any(roles[v] == VertexRole.UNKNOWN for v in members):
            reason = Exclusion.CONTAINS_UNKNOWN
        elif any(g.vertices[s].tag == "Output" for v in members for s in g.successors(v)):
            reason = Exclusion.ADJACENT_TO_OUTPUT
        groups.append(NodeGroup(gid, members, reason is None, reason))
    return groups


def partition_pzig(g: Graph, groups: list[NodeGroup]) -> GroupPartition:
    groups = list(groups)
    for ng in groups:
        if not ng.prunable:
            continue
        widths = {g.shape(s)[1] for s in ng.stems(g)}
        if len(widths) > 1:
            raise PartitionError(f"channel-count mismatch inside node group {ng.id} ({sorted(ng.members)}): widths {sorted(widths)}")

    # demote groups whose channels cannot be tracked until nothing changes
    while True:
        owner = {s: ng.id for ng in groups if ng.prunable for s in ng.stems(g)}
        amap = propagate_prune_atoms(g, owner)
        bad = {o: why for o, why in amap.conflicts.items() if groups[o].prunable}
        if not bad:
            break
        for o, why in bad.items():
            groups[o] = replace(groups[o], prunable=False, exclusion_reason=Exclusion.CHANNEL_CONFLICT, detail=why)

    shapes = trainable_shapes(g)
    bn_vertices = [v for v in topological_order(g) if g.vertices[v].tag == "BatchNorm2d"]
    zigs: list[VariableGroup] = []
    claimed: dict[str, set[int]] = {}
    for ng in groups:
        stems = ng.stems(g)
        if not ng.prunable or not stems:
            continue
        width = g.shape(stems[0])[1]
        for j in range(width):
            code = int(encode(ng.id, j))
            idx: dict[str, np.ndarray] = {}
            for s in stems:
                v = g.vertices[s]
                wname = v.params[0]
                row = int(np.prod(shapes[wname][1:]))
                idx[wname] = np.arange(j * row, (j + 1) * row, dtype=np.int64)
                if len(v.params) > 1:
                    idx[v.params[1]] = np.array([j], dtype=np.int64)
            for bn in bn_vertices:
                ch = np.flatnonzero(amap.atoms[bn] == code)
                if ch.size:
                    gamma, beta = g.vertices[bn].params[:2]
                    idx[gamma] = ch.astype(np.int64)
                    idx[beta] = ch.astype(np.int64)
            for n, ix in idx.items():
                claimed.setdefault(n, set()).update(ix.tolist())
            zero_outputs = [(vid, ch) for vid, ch in amap.where(code) if g.vertices[vid].tag != "Output"]
            zigs.append(VariableGroup(len(zigs), True, idx, {"node_group": ng.id, "channel": j, "zero_outputs": zero_outputs}))
    rest = complement_groups(g, claimed, len(zigs))
    part = GroupPartition("prune", zigs + rest, g.trainable_names(), shapes)
    part.meta.update(node_groups=groups, atoms=amap.atoms)
    return part


def pruning_space(g: Graph) -> GroupPartition:
    """Convenience: node groups plus their PZIG partition."""
    return partition_pzig(g, build_pruning_dependency(g))
