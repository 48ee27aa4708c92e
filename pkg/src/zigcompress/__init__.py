"""Automated structured compression of small computation graphs.

The package builds pruning and erasing search spaces from a graph's
dependency structure, trains once with a group-sparsity optimizer, and cuts
the zeroed structures out to obtain an equivalent smaller network.
"""

from .graph import (
    Edge,
    Graph,
    GraphError,
    OpKind,
    Vertex,
    VertexRole,
    classify_vertex,
    make_graph,
    topological_order,
)
from .params import ParamStore, random_params
from .serialize import load_model, parse_graph, save_model, serialize_graph
from .shapes import infer_shapes

__version__ = "0.1.0"

__all__ = [
    "Edge",
    "Graph",
    "GraphError",
    "OpKind",
    "ParamStore",
    "Vertex",
    "VertexRole",
    "classify_vertex",
    "infer_shapes",
    "load_model",
    "make_graph",
    "parse_graph",
    "random_params",
    "save_model",
    "serialize_graph",
    "topological_order",
]
