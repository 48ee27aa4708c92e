"""Variable groups over the flattened trainable vector and their JSON form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .graph import Graph, topological_order
from .params import ParamStore, trainable_shapes


class PartitionError(ValueError):
    pass


@dataclass
class VariableGroup:
    """A set of trainable scalars, addressed per tensor by flat (row-major) index.

    ``structure`` records what the group removes: for pruning groups the
    node group and channel, for erasing groups the segment.  Its
    ``zero_outputs`` entry lists the (vertex, channels) outputs that must be
    exactly zero whenever the group is zero; ``None`` channels means all.
    """

    id: int
    is_zig: bool
    indices: dict[str, np.ndarray]
    structure: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(sum(len(ix) for ix in self.indices.values()))

    def values(self, params) -> np.ndarray:
        return np.concatenate([np.asarray(params[n]).reshape(-1)[ix] for n, ix in sorted(self.indices.items())]) if self.indices else np.zeros(0)

    def is_zero(self, params) -> bool:
        return all(not np.any(np.asarray(params[n]).reshape(-1)[ix]) for n, ix in self.indices.items())

    def zeroed(self, params: ParamStore) -> ParamStore:
        out = params.copy()
        for n, ix in self.indices.items():
            flat = out[n].reshape(-1)
            flat[ix] = 0.0
        return out


@dataclass
class GroupPartition:
    mode: str  # "prune" or "erase"
    groups: list[VariableGroup]
    names: list[str]
    shapes: dict[str, tuple[int, ...]]
    # analysis by-products (node groups, segments, channel atoms); not serialized
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._offsets = {}
        off = 0
        for n in self.names:
            self._offsets[n] = off
            off += int(np.prod(self.shapes[n]))
        self.n = off
        self._by_id = {grp.id: grp for grp in self.groups}

    def __getitem__(self, gid: int) -> VariableGroup:
        return self._by_id[gid]

    def __len__(self) -> int:
        return len(self.groups)

    @property
    def zig_groups(self) -> list[VariableGroup]:
        return [grp for grp in self.groups if grp.is_zig]

    @property
    def complement(self) -> list[VariableGroup]:
        return [grp for grp in self.groups if not grp.is_zig]

    def flat_indices(self, gid: int) -> np.ndarray:
        grp = self._by_id[gid]
        parts = [self._offsets[n] + ix for n, ix in sorted(grp.indices.items())]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def check_cover(self) -> None:
        """Raise unless the groups cover every trainable scalar exactly once."""
        count = np.zeros(self.n, dtype=np.int64)
        for grp in self.groups:
            np.add.at(count, self.flat_indices(grp.id), 1)
        if np.any(count != 1):
            bad = np.flatnonzero(count != 1)
            raise PartitionError(f"partition is not a disjoint cover: {bad.size} scalars covered {set(count[bad].tolist())} times")

    def zero_groups(self, params, ids=None) -> list[int]:
        ids = [grp.id for grp in self.zig_groups] if ids is None else ids
        return [gid for gid in ids if self._by_id[gid].is_zero(params)]

    def zeroed(self, params: ParamStore, ids) -> ParamStore:
        out = params.copy()
        for gid in ids:
            for n, ix in self._by_id[gid].indices.items():
                out[n].reshape(-1)[ix] = 0.0
        return out

    # -- serialization -------------------------------------------------------
    def to_json(self) -> str:
        doc = {
            "mode": self.mode,
            "n": self.n,
            "groups": [
                {
                    "id": grp.id,
                    "is_zig": grp.is_zig,
                    "tensors": {n: ix.tolist() for n, ix in sorted(grp.indices.items())},
                    "structure": _jsonable(grp.structure),
                }
                for grp in self.groups
            ],
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str, g: Graph) -> "GroupPartition":
        doc = json.loads(text)
        names = g.trainable_names()
        groups = [
            VariableGroup(
                item["id"],
                item["is_zig"],
                {n: np.asarray(ix, dtype=np.int64) for n, ix in item["tensors"].items()},
                _unjson(item.get("structure", {})),
            )
            for item in doc["groups"]
        ]
        part = cls(doc["mode"], groups, names, trainable_shapes(g))
        if part.n != doc.get("n", part.n):
            raise PartitionError(f"partition covers {doc['n']} scalars but the graph has {part.n}")
        return part


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _unjson(obj):
    if isinstance(obj, dict):
        out = {k: _unjson(v) for k, v in obj.items()}
        if "zero_outputs" in out:
            out["zero_outputs"] = [(vid, ch) for vid, ch in out["zero_outputs"]]
        return out
    return obj


def complement_groups(g: Graph, claimed: dict[str, set[int]], start_id: int) -> list[VariableGroup]:
    """One non-ZIG group per vertex holding its unclaimed trainable scalars."""
    shapes = trainable_shapes(g)
    out = []
    gid = start_id
    for vid in topological_order(g):
        idx = {}
        for n in g.vertices[vid].trainable_params():
            size = int(np.prod(shapes[n]))
            mask = np.ones(size, dtype=bool)
            mask[list(claimed.get(n, ()))] = False
            free = np.flatnonzero(mask)
            if free.size:
                idx[n] = free
        if idx:
            out.append(VariableGroup(gid, False, idx, {"vertex": vid}))
            gid += 1
    return out


def zero_invariance_violations(g: Graph, params: ParamStore, partition: GroupPartition, inputs, mode: str = "eval") -> list[tuple[int, str, float]]:
    """Zero each ZIG in turn and report (group, vertex, max |output|) for any nonzero structure output."""
    from .engine import _as_f64, _normalise_inputs, run_forward

    xin = _normalise_inputs(g, inputs)
    bad = []
    for grp in partition.zig_groups:
        cache = run_forward(g, _as_f64(grp.zeroed(params)), xin, mode)
        for vid, ch in grp.structure.get("zero_outputs", []):
            y = cache.values[vid]
            part = y if ch is None else y[:, ch]
            worst = float(np.max(np.abs(part))) if part.size else 0.0
            if worst != 0.0:
                bad.append((grp.id, vid, worst))
    return bad
