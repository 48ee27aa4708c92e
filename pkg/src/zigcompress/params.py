"""Parameter storage and the shape contract between operators and tensors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .graph import Graph, ShapeMismatchError, Vertex, GraphError


def expected_param_shapes(v: Vertex) -> list[tuple[int, ...]]:
    """Shapes the vertex's params must have, in param-list order."""
    k = v.kind
    if v.tag == "Conv2d":
        kh, kw = k["kernel"]
        shapes = [(k["out_channels"], k["in_channels"], kh, kw)]
        if k["bias"]:
            shapes.append((k["out_channels"],))
        return shapes
    if v.tag == "Linear":
        shapes = [(k["out_features"], k["in_features"])]
        if k["bias"]:
            shapes.append((k["out_features"],))
        return shapes
    if v.tag == "BatchNorm2d":
        c = k["num_features"]
        return [(c,)] * 4
    return []


@dataclass
class ParamStore:
    """Named float32 tensors.  Arrays are stored C-contiguous."""

    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.tensors = {
            name: np.ascontiguousarray(arr, dtype=np.float32) for name, arr in self.tensors.items()
        }

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = np.ascontiguousarray(value, dtype=np.float32)

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.tensors.items()})

    def num_scalars(self, names=None) -> int:
        names = self.tensors if names is None else names
        return int(sum(self.tensors[n].size for n in names))

    def bit_equal(self, other: "ParamStore") -> bool:
        if set(self.tensors) != set(other.tensors):
            return False
        return all(
            self.tensors[n].shape == other.tensors[n].shape
            and self.tensors[n].tobytes() == other.tensors[n].tobytes()
            for n in self.tensors
        )


def check_params(g: Graph, params: ParamStore) -> None:
    """Every referenced tensor exists and agrees with its operator's attributes."""
    referenced = set()
    for vid in sorted(g.vertices):
        v = g.vertices[vid]
        for name, shape in zip(v.params, expected_param_shapes(v)):
            referenced.add(name)
            if name not in params:
                raise GraphError(f"vertex {vid!r} references missing tensor {name!r}")
            got = params[name].shape
            if tuple(got) != tuple(shape):
                raise ShapeMismatchError(
                    f"shape mismatch for tensor {name!r} of vertex {vid!r}: "
                    f"expected {list(shape)}, got {list(got)}"
                )
    extra = sorted(set(params) - referenced)
    if extra:
        raise GraphError(f"tensors not referenced by any vertex: {extra}")


def trainable_shapes(g: Graph) -> dict[str, tuple[int, ...]]:
    """Shape of every trainable tensor, derived from operator attributes."""
    out = {}
    for v in g.vertices.values():
        for name, shape in zip(v.params, expected_param_shapes(v)):
            if name in v.trainable_params():
                out[name] = tuple(shape)
    return out


def trainable_count(g: Graph) -> int:
    total = 0
    for v in g.vertices.values():
        for name, shape in zip(v.params, expected_param_shapes(v)):
            if name in v.trainable_params():
                total += int(np.prod(shape))
    return total


def random_params(g: Graph, rng: np.random.Generator, bn_stats: bool = False) -> ParamStore:
    """He-style initialisation; BN affine at (1, 0) unless ``bn_stats`` randomises everything."""
    out: dict[str, np.ndarray] = {}
    for vid in sorted(g.vertices):
        v = g.vertices[vid]
        shapes = expected_param_shapes(v)
        if v.tag in ("Conv2d", "Linear"):
            w_shape = shapes[0]
            fan_in = int(np.prod(w_shape[1:]))
            out[v.params[0]] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w_shape)
            if len(v.params) > 1:
                out[v.params[1]] = rng.normal(0.0, 0.05, size=shapes[1])
        elif v.tag == "BatchNorm2d":
            c = shapes[0]
            if bn_stats:
                out[v.params[0]] = rng.uniform(0.5, 1.5, size=c)
                out[v.params[1]] = rng.normal(0.0, 0.2, size=c)
                out[v.params[2]] = rng.normal(0.0, 0.2, size=c)
                out[v.params[3]] = rng.uniform(0.5, 1.5, size=c)
            else:
                out[v.params[0]] = np.ones(c)
                out[v.params[1]] = np.zeros(c)
                out[v.params[2]] = np.zeros(c)
                out[v.params[3]] = np.ones(c)
    return ParamStore(out)


def flat_layout(names, params: Mapping[str, np.ndarray] | ParamStore) -> dict[str, tuple[int, tuple[int, ...]]]:
    """Offsets of each named tensor inside the flattened variable vector."""
    layout = {}
    offset = 0
    for name in names:
        shape = tuple(params[name].shape)
        layout[name] = (offset, shape)
        offset += int(np.prod(shape))
    return layout
