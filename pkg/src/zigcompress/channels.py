"""Channel ownership propagation.

Every channel (axis 1) of every vertex output gets an integer *atom*: either
-1 (not owned by any searchable group) or ``encode(owner, j)`` meaning "this
channel is channel ``j`` of owner ``owner``".  Pruning owners are node groups,
erasing owners are segments.  Atoms flow forward through shape-preserving
operators, get repeated by Flatten and concatenated by Concat, which is how
BatchNorm parameters behind a Concat end up attributed to the right producer
and how consumer columns are located during surgery.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .graph import Graph, VertexRole, topological_order

NONE = -1
STRIDE = 1 << 32

_PASS_THROUGH = ("BatchNorm2d", "ReLU", "MaxPool2d", "AvgPool2d")


def encode(owner: int, j) -> np.ndarray:
    return owner * STRIDE + np.asarray(j, dtype=np.int64)


def owner_of(code) -> np.ndarray:
    return np.asarray(code, dtype=np.int64) // STRIDE


def index_of(code) -> np.ndarray:
    return np.asarray(code, dtype=np.int64) % STRIDE


def owners_in(atoms: np.ndarray) -> set[int]:
    live = atoms[atoms != NONE]
    return set(int(o) for o in np.unique(live // STRIDE))


def channels(g: Graph, vid: str) -> int:
    s = g.shape(vid)
    return s[1] if len(s) >= 2 else 1


def _empty(g: Graph, vid: str) -> np.ndarray:
    return np.full(channels(g, vid), NONE, dtype=np.int64)


@dataclass
class AtomMap:
    atoms: dict[str, np.ndarray] = field(default_factory=dict)
    # owner -> human-readable reason its channels could not be tracked
    conflicts: dict[int, str] = field(default_factory=dict)

    def where(self, code: int) -> list[tuple[str, list[int]]]:
        """(vertex, channel positions) of every output carrying ``code``."""
        out = []
        for vid in sorted(self.atoms):
            pos = np.flatnonzero(self.atoms[vid] == code)
            if pos.size:
                out.append((vid, pos.tolist()))
        return out


def _blame(conflicts, atoms_list, reason):
    for a in atoms_list:
        for o in owners_in(a):
            conflicts.setdefault(o, reason)


def _concat_axis_ok(g: Graph, vid: str) -> bool:
    axis = g.vertices[vid].kind["axis"]
    rank = len(g.shape(vid))
    return axis == 1 or axis + rank == 1


def propagate_prune_atoms(g: Graph, stem_owner: Mapping[str, int]) -> AtomMap:
    """Forward propagation with stems in ``stem_owner`` emitting fresh atoms."""
    res = AtomMap()
    atoms = res.atoms
    for vid in topological_order(g):
        v = g.vertices[vid]
        tag = v.tag
        ins = [atoms[s] for s in g.predecessors(vid)]
        role = g.role(vid)
        if tag == "Input":
            out = _empty(g, vid)
        elif role == VertexRole.STEM:
            out = encode(stem_owner[vid], np.arange(channels(g, vid))) if vid in stem_owner else _empty(g, vid)
        elif tag in _PASS_THROUGH:
            out = ins[0].copy()
        elif tag == "Flatten":
            s = g.shape(g.predecessors(vid)[0])
            out = np.repeat(ins[0], int(np.prod(s[2:])) if len(s) > 2 else 1)
        elif tag == "Concat":
            if _concat_axis_ok(g, vid):
                out = np.concatenate(ins)
            else:
                _blame(res.conflicts, ins, f"concat {vid!r} is not along channels")
                out = _empty(g, vid)
        elif tag in ("Add", "Mul"):
            if all(np.array_equal(a, ins[0]) for a in ins[1:]):
                out = ins[0].copy()
            else:
                _blame(res.conflicts, ins, f"operands of {vid!r} carry different channels")
                out = _empty(g, vid)
        elif tag == "Output":
            _blame(res.conflicts, ins, f"channels reach output {vid!r}")
            out = ins[0].copy()
        else:
            _blame(res.conflicts, ins, f"channels reach unknown operator {vid!r}")
            out = _empty(g, vid)
        atoms[vid] = out
    return res


def propagate_erase_atoms(g: Graph, slot_owner: Mapping[tuple[str, int], int]) -> AtomMap:
    """Propagate Concat input slices owned by erasable segments.

    ``slot_owner`` maps (concat vertex, input slot) to the segment whose
    endpoint feeds that slot.  Atoms stop at stems (whose input columns they
    identify); reaching an Add, Mul, unknown operator or graph output is a
    conflict, because deleting the slice would change that operand's shape.
    """
    res = AtomMap()
    atoms = res.atoms
    for vid in topological_order(g):
        v = g.vertices[vid]
        tag = v.tag
        ins = [atoms[s] for s in g.predecessors(vid)]
        role = g.role(vid)
        if tag == "Input" or role == VertexRole.STEM:
            out = _empty(g, vid)
        elif tag in _PASS_THROUGH:
            out = ins[0].copy()
        elif tag == "Flatten":
            s = g.shape(g.predecessors(vid)[0])
            out = np.repeat(ins[0], int(np.prod(s[2:])) if len(s) > 2 else 1)
        elif tag == "Concat":
            parts = []
            for slot, a in enumerate(ins):
                owner = slot_owner.get((vid, slot))
                if owner is not None:
                    a = a.copy()
                    free = a == NONE
                    a[free] = encode(owner, np.flatnonzero(free))
                parts.append(a)
            if _concat_axis_ok(g, vid):
                out = np.concatenate(parts)
            else:
                _blame(res.conflicts, parts, f"concat {vid!r} is not along channels")
                out = _empty(g, vid)
        else:
            # Add, Mul, Output and unknown operators cannot absorb a narrower input
            _blame(res.conflicts, ins, f"channel slice reaches {tag} {vid!r}")
            out = _empty(g, vid)
        atoms[vid] = out
    return res
