"""Sub-network construction by graph surgery, and output-equivalence checks.

Surgery never inspects parameter values to decide what to cut: the removed
groups name channel atoms (pruning) or segments (erasing), and those index
sets drive every slice.  Values are only read to confirm that what is being
removed really is zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .channels import NONE, encode, owner_of, propagate_erase_atoms, propagate_prune_atoms
from .erase_space import ErasingGraph, _slot_owner, validity_problems
from .graph import Edge, Graph, GraphError, Vertex, VertexRole, make_graph, topological_order
from .params import ParamStore, trainable_count
from .partition import GroupPartition
from .shapes import infer_shapes, input_shapes_of


class SurgeryError(GraphError):
    pass


@dataclass
class Subnetwork:
    graph: Graph
    params: ParamStore
    # new tensor name -> {"source": original name, "kept": [indices per axis or None]}
    provenance: dict[str, dict]
    removed: list[int]
    mode: str = "prune"
    notes: list[str] = field(default_factory=list)

    def provenance_json(self) -> str:
        return json.dumps({"mode": self.mode, "removed_groups": self.removed, "tensors": self.provenance}, indent=1, default=_json_default) + "\n"


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


# -- shared helpers -------------------------------------------------------------


def _check_removed_zero(partition: GroupPartition, params, removed) -> None:
    for gid in removed:
        grp = partition[gid]
        if not grp.is_zig:
            raise SurgeryError(f"group {gid} is not a zero-invariant group and cannot be removed")
        if not grp.is_zero(params):
            raise SurgeryError(f"consistency error: group {gid} is marked redundant but is not exactly zero")


def _slice_tensor(arr: np.ndarray, rows, cols):
    out = arr
    if rows is not None:
        out = out[np.asarray(rows, dtype=np.int64)]
    if cols is not None:
        out = out[:, np.asarray(cols, dtype=np.int64)]
    return np.ascontiguousarray(out)


def _resliced_vertex(v: Vertex, rows, cols, params: ParamStore, new_params: dict, prov: dict) -> Vertex:
    """Slice a vertex's tensors to kept output ``rows`` / input ``cols`` and fix its attrs."""
    tag = v.tag
    if tag in ("Conv2d", "Linear"):
        w = params[v.params[0]]
        out_n, in_n = w.shape[0], w.shape[1]
        r = None if rows is None or len(rows) == out_n else list(rows)
        c = None if cols is None or len(cols) == in_n else list(cols)
        new_params[v.params[0]] = _slice_tensor(w, r, c)
        prov[v.params[0]] = {"source": v.params[0], "kept": [r, c]}
        if len(v.params) > 1:
            new_params[v.params[1]] = _slice_tensor(params[v.params[1]], r, None)
            prov[v.params[1]] = {"source": v.params[1], "kept": [r]}
        n_out = out_n if r is None else len(r)
        n_in = in_n if c is None else len(c)
        if tag == "Conv2d":
            kind = v.kind.with_attrs(out_channels=n_out, in_channels=n_in)
        else:
            kind = v.kind.with_attrs(out_features=n_out, in_features=n_in)
        return Vertex(v.id, kind, v.params)
    if tag == "BatchNorm2d":
        c = v.kind["num_features"]
        r = None if rows is None or len(rows) == c else list(rows)
        for n in v.params:
            new_params[n] = _slice_tensor(params[n], r, None)
            prov[n] = {"source": n, "kept": [r]}
        return Vertex(v.id, v.kind.with_attrs(num_features=c if r is None else len(r)), v.params)
    for n in v.params:
        new_params[n] = params[n].copy()
        prov[n] = {"source": n, "kept": [None]}
    return Vertex(v.id, v.kind, v.params)


def _rebuild(g: Graph, vertices: dict[str, Vertex], edges, what: str) -> Graph:
    try:
        ng = make_graph(vertices.values(), edges, [i for i in g.inputs if i in vertices], [o for o in g.outputs if o in vertices])
        return infer_shapes(ng, input_shapes_of(g))
    except GraphError as exc:
        raise SurgeryError(f"{what} produced an invalid graph: {exc}") from exc


# -- pruning ---------------------------------------------------------------------


def construct_pruned(g: Graph, params: ParamStore, partition: GroupPartition, removed=None) -> Subnetwork:
    """Cut the channels of the removed PZIGs out of every tensor that carries them.

    Pass one drops filter rows, biases and BatchNorm scalars of the removed
    channels; pass two drops the matching input columns of every consuming
    stem, following Concat offsets and Flatten layouts through the channel
    atoms.
    """
    if partition.mode != "prune":
        raise SurgeryError("construct_pruned needs a pruning partition")
    removed = sorted(partition.zero_groups(params) if removed is None else removed)
    _check_removed_zero(partition, params, removed)
    atoms = partition.meta.get("atoms")
    if atoms is None:
        from .prune_space import build_pruning_dependency

        ngs = build_pruning_dependency(g)
        owner = {s: ng.id for ng in ngs if ng.prunable for s in ng.stems(g)}
        atoms = propagate_prune_atoms(g, owner).atoms
    gone = np.array(
        sorted(int(encode(partition[gid].structure["node_group"], partition[gid].structure["channel"])) for gid in removed),
        dtype=np.int64,
    )

    def kept(vid):
        return np.flatnonzero(~np.isin(atoms[vid], gone))

    new_vertices: dict[str, Vertex] = {}
    new_params: dict[str, np.ndarray] = {}
    prov: dict[str, dict] = {}
    for vid in topological_order(g):
        v = g.vertices[vid]
        role = g.role(vid)
        if role == VertexRole.TERMINAL or not v.params:
            new_vertices[vid] = Vertex(vid, v.kind, v.params)
            for n in v.params:
                new_params[n] = params[n].copy()
            if v.tag != "Output" and len(g.shape(vid)) >= 2 and len(kept(vid)) == 0:
                raise SurgeryError(f"degenerate layer: every channel of {vid!r} would be removed")
            continue
        rows = kept(vid)
        if len(rows) == 0:
            raise SurgeryError(f"degenerate layer: every output channel of {vid!r} would be removed")
        cols = kept(g.predecessors(vid)[0]) if role == VertexRole.STEM else None
        if cols is not None and len(cols) == 0:
            raise SurgeryError(f"degenerate layer: {vid!r} would have no input channels")
        new_vertices[vid] = _resliced_vertex(v, rows, cols, params, new_params, prov)
    sub_graph = _rebuild(g, new_vertices, g.edges, "pruning surgery")
    return Subnetwork(sub_graph, ParamStore(new_params), prov, list(removed), "prune")


# -- erasing ---------------------------------------------------------------------


def construct_erased(g: Graph, params: ParamStore, partition: GroupPartition, eg: ErasingGraph, removed=None) -> Subnetwork:
    """Delete the removed segments and repair everything that depended on them.

    Pass one deletes the segments' vertices and edges; pass two narrows
    BatchNorms and consumer stems behind a Concat that lost inputs; pass
    three repeatedly drops isolated vertices and replaces joints left with
    a single operand by a direct edge, keeping the consumer's slot.
    """
    if partition.mode != "erase":
        raise SurgeryError("construct_erased needs an erasing partition")
    removed = sorted(partition.zero_groups(params) if removed is None else removed)
    _check_removed_zero(partition, params, removed)
    seg_ids = {partition[gid].structure["segment"] for gid in removed}
    problems = validity_problems(eg, seg_ids)
    if problems:
        raise SurgeryError("internal error: removing segments " + str(sorted(seg_ids)) + " leaves an invalid graph: " + "; ".join(problems))
    dead = {v for sid in seg_ids for v in eg.segments[sid].members}

    atoms = partition.meta.get("atoms")
    if atoms is None:
        atoms = propagate_erase_atoms(g, _slot_owner(g, eg.owner, set(eg.erasable))).atoms
    gone_owners = np.array(sorted(seg_ids), dtype=np.int64)

    def kept(vid):
        a = atoms[vid]
        return np.flatnonzero(~((a != NONE) & np.isin(owner_of(a), gone_owners)))

    # pass 1 + 2: surviving vertices, narrowed where slices vanished
    new_vertices: dict[str, Vertex] = {}
    new_params: dict[str, np.ndarray] = {}
    prov: dict[str, dict] = {}
    for vid in topological_order(g):
        if vid in dead:
            continue
        v = g.vertices[vid]
        role = g.role(vid)
        if v.tag == "BatchNorm2d":
            new_vertices[vid] = _resliced_vertex(v, kept(vid), None, params, new_params, prov)
        elif role == VertexRole.STEM:
            new_vertices[vid] = _resliced_vertex(v, None, kept(g.predecessors(vid)[0]), params, new_params, prov)
        else:
            new_vertices[vid] = _resliced_vertex(v, None, None, params, new_params, prov)
    edges = [e for e in g.edges if e.src not in dead and e.dst not in dead]

    # pass 3: isolated vertices and single-operand joints, to a fixed point
    notes = []
    changed = True
    while changed:
        changed = False
        ins: dict[str, list[Edge]] = {vid: [] for vid in new_vertices}
        outs: dict[str, list[Edge]] = {vid: [] for vid in new_vertices}
        for e in edges:
            outs[e.src].append(e)
            ins[e.dst].append(e)
        for vid in sorted(new_vertices):
            v = new_vertices[vid]
            if v.tag in ("Input", "Output"):
                continue
            if not ins[vid] and not outs[vid]:
                notes.append(f"removed isolated vertex {vid}")
                _drop_vertex(vid, new_vertices, new_params, prov)
                changed = True
                break
            if v.tag in ("Add", "Mul", "Concat") and len(ins[vid]) == 1:
                src = ins[vid][0].src
                edges = [e for e in edges if e.dst != vid and e.src != vid]
                edges += [Edge(src, e.dst, e.slot) for e in outs[vid]]
                notes.append(f"replaced single-input {v.tag} {vid} by a direct edge from {src}")
                _drop_vertex(vid, new_vertices, new_params, prov)
                changed = True
                break
        if not changed:
            edges = _compact_slots(edges)
    sub_graph = _rebuild(g, new_vertices, edges, "erasing surgery")
    return Subnetwork(sub_graph, ParamStore(new_params), prov, list(removed), "erase", notes)


def _drop_vertex(vid, vertices, params, prov):
    for n in vertices[vid].params:
        params.pop(n, None)
        prov.pop(n, None)
    del vertices[vid]


def _compact_slots(edges: list[Edge]) -> list[Edge]:
    """Renumber each vertex's input slots densely, preserving their order."""
    by_dst: dict[str, list[Edge]] = {}
    for e in edges:
        by_dst.setdefault(e.dst, []).append(e)
    out = []
    for dst, lst in by_dst.items():
        lst.sort(key=lambda e: e.slot)
        out.extend(Edge(e.src, dst, i) for i, e in enumerate(lst))
    return sorted(out)


# -- verification and reporting ------------------------------------------------------


def verify_equivalence(full_g: Graph, full_params: ParamStore, sub: Subnetwork, n: int = 16, tol: float = 1e-5, seed: int = 0, batch: int = 16) -> dict:
    """Eval-mode outputs of the zeroed full network against the sub-network on ``n`` random inputs."""
    from .engine import forward

    report = {"n": n, "tol": tol, "max_abs_diff": None, "pass": False, "reason": ""}
    if list(full_g.outputs) != list(sub.graph.outputs):
        report["reason"] = f"output arity mismatch: {list(full_g.outputs)} vs {list(sub.graph.outputs)}"
        return report
    shapes = input_shapes_of(full_g)
    if shapes != input_shapes_of(sub.graph):
        report["reason"] = "input shapes differ"
        return report
    rng = np.random.default_rng(seed)
    worst = 0.0
    for start in range(0, n, batch):
        m = min(batch, n - start)
        xs = {vid: rng.standard_normal((m,) + tuple(s[1:])).astype(np.float32) for vid, s in shapes.items()}
        ya, _ = forward(full_g, full_params, xs, "eval")
        yb, _ = forward(sub.graph, sub.params, xs, "eval")
        for vid in full_g.outputs:
            if ya[vid].shape != yb[vid].shape:
                report["reason"] = f"output {vid!r} shape {ya[vid].shape} vs {yb[vid].shape}"
                return report
            worst = max(worst, float(np.max(np.abs(ya[vid].astype(np.float64) - yb[vid].astype(np.float64)))))
    report["max_abs_diff"] = worst
    report["pass"] = bool(worst < tol)
    if not report["pass"]:
        report["reason"] = f"max abs diff {worst:.3e} >= tol {tol:.1e}"
    return report


def count_params(g: Graph) -> int:
    """Trainable scalars (BatchNorm running statistics excluded)."""
    return trainable_count(g)


def count_flops(g: Graph) -> int:
    """Multiply-accumulates of Conv2d and Linear vertices at batch size 1."""
    total = 0
    for vid, v in g.vertices.items():
        if v.tag == "Conv2d":
            _, co, ho, wo = g.shape(vid)
            kh, kw = v.kind["kernel"]
            total += co * ho * wo * v.kind["in_channels"] * kh * kw
        elif v.tag == "Linear":
            total += v.kind["in_features"] * v.kind["out_features"]
    return int(total)


def surgery_report(full_g: Graph, sub: Subnetwork, equivalence: dict | None = None) -> str:
    pf, ps = count_params(full_g), count_params(sub.graph)
    ff, fs = count_flops(full_g), count_flops(sub.graph)
    lines = [
        "# surgery report",
        "# FLOPs are multiply-accumulates of Conv2d/Linear at batch size 1; parameters are trainable scalars",
        f"mode: {sub.mode}",
        f"removed groups: {sub.removed}",
        f"vertices: {len(full_g)} -> {len(sub.graph)}",
        f"params: {pf} -> {ps} ({ps / pf:.3f} of full)" if pf else "params: 0",
        f"flops: {ff} -> {fs} ({fs / ff:.3f} of full)" if ff else "flops: 0",
    ]
    for vid in sorted(sub.graph.vertices):
        a, b = full_g.vertices[vid], sub.graph.vertices[vid]
        if a.kind.attrs != b.kind.attrs:
            diff = {k: (a.kind.attrs[k], b.kind.attrs[k]) for k in a.kind.attrs if a.kind.attrs[k] != b.kind.attrs.get(k)}
            lines.append(f"  {vid}: " + ", ".join(f"{k} {x}->{y}" for k, (x, y) in sorted(diff.items())))
    for vid in sorted(set(full_g.vertices) - set(sub.graph.vertices)):
        lines.append(f"  {vid}: removed")
    lines.extend(f"  note: {n}" for n in sub.notes)
    if equivalence is not None:
        lines.append(f"equivalence: max abs diff {equivalence['max_abs_diff']} over {equivalence['n']} inputs, pass={equivalence['pass']}")
    return "\n".join(lines) + "\n"


def removed_scalars(partition: GroupPartition, removed) -> int:
    return sum(partition[gid].size for gid in removed)
