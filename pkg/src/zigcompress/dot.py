"""GraphViz DOT rendering of a graph and its dependency groupings.

Vertices in one pruning node group, or one erasing segment, share a fill
colour.  Redundant structures are drawn dashed.  Output is stable: vertices
are written in topological order and every colour is chosen from the group id
alone, so equal inputs give byte-identical text.
"""

from __future__ import annotations

from .erase_space import ErasingGraph
from .graph import Graph, topological_order
from .partition import GroupPartition

PALETTE = (
    "#8dd3c7", "#ffffb3", "#bebada", "#fb8072", "#80b1d3", "#fdb462",
    "#b3de69", "#fccde5", "#bc80bd", "#ccebc5", "#ffed6f", "#a6cee3",
)
DEFAULT_FILL = "#ffffff"
EXCLUDED_FILL = "#d9d9d9"


def _quote(s: str) -> str:
    # backslashes are left alone so that label escapes such as \n survive
    return '"' + str(s).replace('"', '\\"') + '"'


def _label(g: Graph, vid: str) -> str:
    v = g.vertices[vid]
    shape = v.out_shape
    dims = "x".join(str(d) for d in shape[1:]) if shape else "?"
    return f"{vid}\\n{v.tag} [{dims}]"


def _vertex_groups(grouping, redundant) -> tuple[dict[str, int], set[str], set[int], str]:
    """Vertex -> colour group, dashed vertices, excluded groups, and a title."""
    redundant = set(redundant or ())
    if grouping is None:
        return {}, set(), set(), "model"
    if isinstance(grouping, GroupPartition) and grouping.mode == "erase":
        eg = grouping.meta["erasing_graph"]
        segs = {grouping[gid].structure["segment"] for gid in redundant}
        return _erase_groups(eg, segs)
    if isinstance(grouping, ErasingGraph):
        return _erase_groups(grouping, redundant)
    if isinstance(grouping, GroupPartition):
        node_groups = grouping.meta["node_groups"]
        colour = {v: ng.id for ng in node_groups for v in ng.members}
        excluded = {ng.id for ng in node_groups if not ng.prunable}
        hit = {grouping[gid].structure["node_group"] for gid in redundant}
        dashed = {v for ng in node_groups if ng.id in hit for v in ng.members}
        return colour, dashed, excluded, "pruning_dependency"
    raise TypeError(f"cannot render grouping of type {type(grouping).__name__}")


def _erase_groups(eg: ErasingGraph, redundant: set[int]):
    colour = dict(eg.owner)
    excluded = {sid for sid, s in eg.segments.items() if not s.erasable}
    dashed = {v for sid in redundant for v in eg.segments[sid].members}
    return colour, dashed, excluded, "erasing_dependency"


def export_dot(g: Graph, grouping=None, redundant=None) -> str:
    """DOT text for ``g``.

    ``grouping`` is a pruning or erasing :class:`GroupPartition`, or an
    :class:`ErasingGraph`.  ``redundant`` holds ZIG ids for a partition or
    segment ids for an erasing graph; their vertices are drawn dashed.
    Groups that cannot be compressed are filled grey.
    """
    colour, dashed, excluded, title = _vertex_groups(grouping, redundant)
    lines = [f"digraph {title} {{", "  rankdir=TB;", '  node [shape=box, style="filled", fontname="Helvetica"];']
    order = topological_order(g)
    for vid in order:
        attrs = {"label": _label(g, vid)}
        gid = colour.get(vid)
        if gid is None:
            fill = DEFAULT_FILL
        elif gid in excluded:
            fill = EXCLUDED_FILL
        else:
            fill = PALETTE[gid % len(PALETTE)]
        attrs["fillcolor"] = fill
        if gid is not None:
            attrs["group"] = str(gid)
        if vid in dashed:
            attrs["style"] = "filled,dashed"
        body = ", ".join(f"{k}={_quote(v)}" for k, v in attrs.items())
        lines.append(f"  {_quote(vid)} [{body}];")
    for vid in order:
        for e in g.out_edges(vid):
            lines.append(f"  {_quote(e.src)} -> {_quote(e.dst)} [label={_quote(e.slot)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_segment_dot(eg: ErasingGraph, redundant=None) -> str:
    """The erasing graph itself: one node per segment, edges between segments."""
    redundant = set(redundant or ())
    lines = ["digraph segments {", "  rankdir=TB;", '  node [shape=box, style="filled", fontname="Helvetica"];']
    for sid in sorted(eg.segments):
        s = eg.segments[sid]
        fill = PALETTE[sid % len(PALETTE)] if s.erasable else EXCLUDED_FILL
        style = "filled,dashed" if sid in redundant else "filled"
        label = f"S{sid}\\n" + "\\n".join(s.members)
        lines.append(f"  S{sid} [label={_quote(label)}, fillcolor={_quote(fill)}, style={_quote(style)}];")
    for a, b in sorted(eg.edges):
        lines.append(f"  S{a} -> S{b};")
    lines.append("}")
    return "\n".join(lines) + "\n"
