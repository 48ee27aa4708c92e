"""Static shape inference over the graph IR."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .graph import Graph, GraphError, ShapeConflictError, ShapeMismatchError, topological_order, with_shapes


def _window_out(size: int, k: int, s: int, p: int, vid: str) -> int:
    out = (size + 2 * p - k) // s + 1
    if out < 1:
        raise ShapeConflictError(f"vertex {vid!r}: non-positive spatial size {out} (input {size}, kernel {k}, stride {s}, pad {p})")
    return out


def infer_shapes(g: Graph, input_shapes: Mapping[str, tuple[int, ...]] | None = None) -> Graph:
    """Annotate every vertex with its output shape.

    Input shapes come from ``input_shapes`` or, failing that, from the Input
    vertex's ``shape`` attribute (with a leading batch dimension of 1 added
    when the attribute omits it).
    """
    input_shapes = dict(input_shapes or {})
    shapes: dict[str, tuple[int, ...]] = {}
    for vid in topological_order(g):
        v = g.vertices[vid]
        ins = [shapes[p] for p in g.predecessors(vid)]
        tag = v.tag
        k = v.kind
        if tag == "Input":
            if vid in input_shapes:
                s = tuple(int(d) for d in input_shapes[vid])
            elif "shape" in k.attrs:
                s = tuple(int(d) for d in k["shape"])
                if len(s) in (1, 3):
                    s = (1,) + s
            else:
                raise GraphError(f"no shape given for input {vid!r}")
            if len(s) not in (2, 4):
                raise ShapeMismatchError(f"input {vid!r} must be (N,C,H,W) or (N,F), got {s}")
            out = s
        elif tag == "Conv2d":
            (x,) = ins
            if len(x) != 4 or x[1] != k["in_channels"]:
                raise ShapeMismatchError(f"shape mismatch at {vid!r}: Conv2d expects C={k['in_channels']}, got input {x}")
            (kh, kw), (sh, sw), (ph, pw) = k["kernel"], k["stride"], k["padding"]
            out = (x[0], k["out_channels"], _window_out(x[2], kh, sh, ph, vid), _window_out(x[3], kw, sw, pw, vid))
        elif tag == "Linear":
            (x,) = ins
            if len(x) != 2 or x[1] != k["in_features"]:
                raise ShapeMismatchError(f"shape mismatch at {vid!r}: Linear expects F={k['in_features']}, got input {x}")
            out = (x[0], k["out_features"])
        elif tag == "BatchNorm2d":
            (x,) = ins
            if len(x) != 4 or x[1] != k["num_features"]:
                raise ShapeMismatchError(f"shape mismatch at {vid!r}: BatchNorm2d expects C={k['num_features']}, got input {x}")
            out = x
        elif tag in ("MaxPool2d", "AvgPool2d"):
            (x,) = ins
            if len(x) != 4:
                raise ShapeMismatchError(f"shape mismatch at {vid!r}: pooling needs a 4-D input, got {x}")
            (kh, kw), (sh, sw), (ph, pw) = k["kernel"], k["stride"], k["padding"]
            out = (x[0], x[1], _window_out(x[2], kh, sh, ph, vid), _window_out(x[3], kw, sw, pw, vid))
        elif tag in ("ReLU", "Output"):
            (out,) = ins
        elif tag in ("Add", "Mul"):
            if any(s != ins[0] for s in ins[1:]):
                raise ShapeConflictError(f"shape conflict at {tag} {vid!r}: operands {ins}")
            out = ins[0]
        elif tag == "Concat":
            axis = k["axis"]
            rank = len(ins[0])
            if axis < 0:
                axis += rank
            for s in ins[1:]:
                if len(s) != rank or any(a != b for i, (a, b) in enumerate(zip(s, ins[0])) if i != axis):
                    raise ShapeConflictError(f"shape conflict at Concat {vid!r}: operands {ins} on axis {axis}")
            out = list(ins[0])
            out[axis] = sum(s[axis] for s in ins)
            out = tuple(out)
        elif tag == "Flatten":
            (x,) = ins
            out = (x[0], int(np.prod(x[1:])))
        else:
            # unknown operator: trust an explicit attribute, else shape-preserving
            if "out_shape" in k.attrs:
                out = tuple(int(d) for d in k["out_shape"])
            else:
                out = ins[0]
        shapes[vid] = tuple(int(d) for d in out)
    return with_shapes(g, shapes)


def concat_offsets(g: Graph, vid: str) -> list[tuple[str, int, int]]:
    """(producer, start, stop) channel ranges of a Concat's inputs, in slot order."""
    v = g.vertices[vid]
    axis = v.kind["axis"]
    ranges = []
    start = 0
    for src in g.predecessors(vid):
        s = g.shape(src)
        width = s[axis if axis >= 0 else axis + len(s)]
        ranges.append((src, start, start + width))
        start += width
    return ranges


def input_shapes_of(g: Graph, batch: int | None = None) -> dict[str, tuple[int, ...]]:
    out = {}
    for vid in g.inputs:
        s = g.shape(vid)
        out[vid] = (batch,) + tuple(s[1:]) if batch is not None else tuple(s)
    return out
