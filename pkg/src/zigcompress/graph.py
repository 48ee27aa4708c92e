"""Computation-graph IR: operator kinds, vertices, edges, and structural queries.

Graphs are immutable once built.  Every analysis in the package consumes
these types, so they stay deliberately small: topology, operator attributes,
parameter tensor names and (after :func:`zigcompress.shapes.infer_shapes`)
per-vertex output shapes.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping


class GraphError(ValueError):
    """Base class for structural problems in a graph or parameter store."""


class DuplicateIdError(GraphError):
    pass


class DanglingEdgeError(GraphError):
    pass


class CycleError(GraphError):
    pass


class ShapeMismatchError(GraphError):
    pass


class ShapeConflictError(GraphError):
    pass


class BlobError(GraphError):
    pass


class Tag(str, Enum):
    CONV2D = "Conv2d"
    LINEAR = "Linear"
    BATCHNORM2D = "BatchNorm2d"
    RELU = "ReLU"
    MAXPOOL2D = "MaxPool2d"
    AVGPOOL2D = "AvgPool2d"
    ADD = "Add"
    MUL = "Mul"
    CONCAT = "Concat"
    FLATTEN = "Flatten"
    INPUT = "Input"
    OUTPUT = "Output"


KNOWN_TAGS = frozenset(t.value for t in Tag)


class VertexRole(str, Enum):
    STEM = "Stem"
    JOINT_SD = "JointSD"
    JOINT_SID = "JointSID"
    ACCESSORY = "Accessory"
    UNKNOWN = "Unknown"
    # graph boundary markers; never grouped or erased
    TERMINAL = "Terminal"


_ROLE_TABLE = {
    Tag.CONV2D.value: VertexRole.STEM,
    Tag.LINEAR.value: VertexRole.STEM,
    Tag.ADD.value: VertexRole.JOINT_SD,
    Tag.MUL.value: VertexRole.JOINT_SD,
    Tag.CONCAT.value: VertexRole.JOINT_SID,
    Tag.BATCHNORM2D.value: VertexRole.ACCESSORY,
    Tag.RELU.value: VertexRole.ACCESSORY,
    Tag.MAXPOOL2D.value: VertexRole.ACCESSORY,
    Tag.AVGPOOL2D.value: VertexRole.ACCESSORY,
    Tag.FLATTEN.value: VertexRole.ACCESSORY,
    Tag.INPUT.value: VertexRole.TERMINAL,
    Tag.OUTPUT.value: VertexRole.TERMINAL,
}

# tag -> (required attrs, number of params: (min, max))
_REQUIRED = {
    "Conv2d": (("in_channels", "out_channels", "kernel", "stride", "padding"), (1, 2)),
    "Linear": (("in_features", "out_features"), (1, 2)),
    "BatchNorm2d": (("num_features",), (4, 4)),
    "MaxPool2d": (("kernel",), (0, 0)),
    "AvgPool2d": (("kernel",), (0, 0)),
    "ReLU": ((), (0, 0)),
    "Add": ((), (0, 0)),
    "Mul": ((), (0, 0)),
    "Concat": ((), (0, 0)),
    "Flatten": ((), (0, 0)),
    "Input": ((), (0, 0)),
    "Output": ((), (0, 0)),
}

_PAIR_ATTRS = ("kernel", "stride", "padding")


def _pair(value) -> tuple[int, int]:
    if isinstance(value, int):
        return (value, value)
    a, b = value
    return (int(a), int(b))


@dataclass(frozen=True)
class OpKind:
    """Operator tag plus its attribute map.

    Unrecognised tags are accepted; they classify as ``Unknown``.
    """

    tag: str
    attrs: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        attrs = dict(self.attrs)
        for key in _PAIR_ATTRS:
            if key in attrs:
                attrs[key] = _pair(attrs[key])
        if self.tag in ("MaxPool2d", "AvgPool2d"):
            attrs.setdefault("stride", attrs.get("kernel"))
            attrs.setdefault("padding", (0, 0))
        if self.tag == "Concat":
            attrs.setdefault("axis", 1)
        if self.tag == "BatchNorm2d":
            attrs.setdefault("eps", 1e-5)
            attrs.setdefault("momentum", 0.1)
        if self.tag in ("Conv2d", "Linear"):
            attrs.setdefault("bias", True)
        object.__setattr__(self, "attrs", attrs)

    @property
    def known(self) -> bool:
        return self.tag in KNOWN_TAGS

    def __getitem__(self, key):
        return self.attrs[key]

    def get(self, key, default=None):
        return self.attrs.get(key, default)

    def with_attrs(self, **updates) -> "OpKind":
        attrs = dict(self.attrs)
        attrs.update(updates)
        return OpKind(self.tag, attrs)


@dataclass(frozen=True)
class Vertex:
    id: str
    kind: OpKind
    params: tuple[str, ...] = ()
    out_shape: tuple[int, ...] | None = None

    @property
    def tag(self) -> str:
        return self.kind.tag

    def trainable_params(self) -> tuple[str, ...]:
        # BatchNorm running statistics are buffers, not optimisation variables
        if self.tag == "BatchNorm2d":
            return self.params[:2]
        return self.params


@dataclass(frozen=True, order=True)
class Edge:
    src: str
    dst: str
    slot: int = 0


def classify_vertex(v: Vertex) -> VertexRole:
    return _ROLE_TABLE.get(v.tag, VertexRole.UNKNOWN)


@dataclass(frozen=True)
class Graph:
    vertices: Mapping[str, Vertex]
    edges: tuple[Edge, ...]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "vertices", dict(self.vertices))
        object.__setattr__(self, "edges", tuple(sorted(self.edges)))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        ins: dict[str, list[Edge]] = {vid: [] for vid in self.vertices}
        outs: dict[str, list[Edge]] = {vid: [] for vid in self.vertices}
        for e in self.edges:
            if e.src not in self.vertices or e.dst not in self.vertices:
                missing = e.src if e.src not in self.vertices else e.dst
                raise DanglingEdgeError(f"edge {e.src}->{e.dst} references unknown vertex {missing!r}")
            outs[e.src].append(e)
            ins[e.dst].append(e)
        for lst in ins.values():
            lst.sort(key=lambda e: e.slot)
        for lst in outs.values():
            lst.sort(key=lambda e: (e.dst, e.slot))
        object.__setattr__(self, "_in", ins)
        object.__setattr__(self, "_out", outs)

    # -- queries -----------------------------------------------------------
    def __getitem__(self, vid: str) -> Vertex:
        return self.vertices[vid]

    def __contains__(self, vid: str) -> bool:
        return vid in self.vertices

    def __len__(self) -> int:
        return len(self.vertices)

    def in_edges(self, vid: str) -> list[Edge]:
        return list(self._in[vid])

    def out_edges(self, vid: str) -> list[Edge]:
        return list(self._out[vid])

    def predecessors(self, vid: str) -> list[str]:
        """Producers of ``vid`` in input-slot order (may repeat)."""
        return [e.src for e in self._in[vid]]

    def successors(self, vid: str) -> list[str]:
        """Distinct consumers of ``vid`` sorted by id."""
        return sorted({e.dst for e in self._out[vid]})

    def role(self, vid: str) -> VertexRole:
        return classify_vertex(self.vertices[vid])

    def shape(self, vid: str) -> tuple[int, ...]:
        s = self.vertices[vid].out_shape
        if s is None:
            raise GraphError(f"vertex {vid!r} has no inferred shape; run infer_shapes first")
        return s

    def trainable_names(self) -> list[str]:
        """Trainable tensor names in topological vertex order."""
        names = []
        for vid in topological_order(self):
            names.extend(self.vertices[vid].trainable_params())
        return names

    def replace_vertices(self, vertices: Mapping[str, Vertex]) -> "Graph":
        return Graph(vertices, self.edges, self.inputs, self.outputs)

    # -- validation --------------------------------------------------------
    def validate(self) -> "Graph":
        for vid in self.inputs:
            if vid not in self.vertices or self.vertices[vid].tag != "Input":
                raise GraphError(f"declared input {vid!r} is not an Input vertex")
        for vid in self.outputs:
            if vid not in self.vertices or self.vertices[vid].tag != "Output":
                raise GraphError(f"declared output {vid!r} is not an Output vertex")
        for vid, v in self.vertices.items():
            if v.tag == "Input" and vid not in self.inputs:
                raise GraphError(f"Input vertex {vid!r} missing from graph inputs")
            if v.tag == "Output" and vid not in self.outputs:
                raise GraphError(f"Output vertex {vid!r} missing from graph outputs")
            _check_attrs(v)
            ins = self._in[vid]
            slots = [e.slot for e in ins]
            if sorted(slots) != list(range(len(slots))):
                raise GraphError(f"vertex {vid!r} input slots {sorted(slots)} are not dense 0..k-1")
            if v.tag == "Input":
                if ins:
                    raise GraphError(f"Input vertex {vid!r} has incoming edges")
            elif not ins:
                raise GraphError(f"vertex {vid!r} has no incoming edge")
            if v.tag == "Output":
                if self._out[vid]:
                    raise GraphError(f"Output vertex {vid!r} has outgoing edges")
                if len(ins) != 1:
                    raise GraphError(f"Output vertex {vid!r} must have exactly one producer")
            elif not self._out[vid]:
                raise GraphError(f"vertex {vid!r} has no outgoing edge")
            if v.kind.known and v.tag not in ("Input", "Add", "Mul", "Concat") and len(ins) != 1:
                raise GraphError(f"vertex {vid!r} ({v.tag}) expects one input, has {len(ins)}")
        topological_order(self)
        return self


def _check_attrs(v: Vertex) -> None:
    if not v.kind.known:
        return
    required, (lo, hi) = _REQUIRED[v.tag]
    for key in required:
        if key not in v.kind.attrs:
            raise GraphError(f"vertex {v.id!r} ({v.tag}) missing attribute {key!r}")
    n = len(v.params)
    if v.tag in ("Conv2d", "Linear"):
        lo = hi = 2 if v.kind["bias"] else 1
    if not lo <= n <= hi:
        raise GraphError(f"vertex {v.id!r} ({v.tag}) expects {lo}..{hi} params, got {n}")


def topological_order(g: Graph) -> list[str]:
    """Kahn's algorithm, ties broken by ascending vertex id."""
    indeg = {vid: 0 for vid in g.vertices}
    for e in g.edges:
        indeg[e.dst] += 1
    heap = [vid for vid, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        vid = heapq.heappop(heap)
        order.append(vid)
        for e in g._out[vid]:
            indeg[e.dst] -= 1
            if indeg[e.dst] == 0:
                heapq.heappush(heap, e.dst)
    if len(order) != len(g.vertices):
        stuck = sorted(vid for vid, d in indeg.items() if d > 0)
        raise CycleError(f"cycle detected among vertices {stuck}")
    return order


def make_graph(
    vertices: Iterable[Vertex],
    edges: Iterable[tuple[str, str, int] | Edge],
    inputs: Iterable[str] | None = None,
    outputs: Iterable[str] | None = None,
) -> Graph:
    """Build and validate a graph; inputs/outputs default to all Input/Output vertices."""
    vmap: dict[str, Vertex] = {}
    for v in vertices:
        if v.id in vmap:
            raise DuplicateIdError(f"duplicate vertex id {v.id!r}")
        vmap[v.id] = v
    elist = [e if isinstance(e, Edge) else Edge(*e) for e in edges]
    if inputs is None:
        inputs = sorted(vid for vid, v in vmap.items() if v.tag == "Input")
    if outputs is None:
        outputs = sorted(vid for vid, v in vmap.items() if v.tag == "Output")
    return Graph(vmap, tuple(elist), tuple(inputs), tuple(outputs)).validate()


def with_shapes(g: Graph, shapes: Mapping[str, tuple[int, ...]]) -> Graph:
    return g.replace_vertices({vid: replace(v, out_shape=tuple(shapes[vid])) for vid, v in g.vertices.items()})
