import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zigcompress import fixtures as F
from zigcompress.dot import export_dot, export_segment_dot
from zigcompress.erase_space import erasing_space
from zigcompress.graph import (
    BlobError,
    CycleError,
    DanglingEdgeError,
    DuplicateIdError,
    GraphError,
    KNOWN_TAGS,
    OpKind,
    ShapeConflictError,
    ShapeMismatchError,
    Vertex,
    VertexRole,
    classify_vertex,
    make_graph,
    topological_order,
)
from zigcompress.params import ParamStore, random_params
from zigcompress.prune_space import pruning_space
from zigcompress.serialize import MAGIC, load_model, parse_graph, read_blob, save_model, serialize_graph, write_blob
from zigcompress.shapes import concat_offsets, infer_shapes


def v(vid, tag, params=(), **attrs):
    return Vertex(vid, OpKind(tag, attrs), tuple(params))


def minimal_manifest(weight_shape=(2, 1, 3, 3)):
    doc = {
        "version": 1,
        "vertices": [
            {"id": "in", "op": "Input", "attrs": {"shape": [1, 1, 5, 5]}, "params": []},
            {"id": "conv", "op": "Conv2d", "attrs": {"in_channels": 1, "out_channels": 2, "kernel": 3, "stride": 1, "padding": 1, "bias": False}, "params": ["conv.w"]},
            {"id": "out", "op": "Output", "attrs": {}, "params": []},
        ],
        "edges": [["in", "conv", 0], ["conv", "out", 0]],
        "inputs": ["in"],
        "outputs": ["out"],
    }
    blob = write_blob(ParamStore({"conv.w": np.ones(weight_shape, np.float32)}))
    return json.dumps(doc), blob


# -- roles -----------------------------------------------------------------------


ROLE_TABLE = {
    "Conv2d": VertexRole.STEM,
    "Linear": VertexRole.STEM,
    "Add": VertexRole.JOINT_SD,
    "Mul": VertexRole.JOINT_SD,
    "Concat": VertexRole.JOINT_SID,
    "BatchNorm2d": VertexRole.ACCESSORY,
    "ReLU": VertexRole.ACCESSORY,
    "MaxPool2d": VertexRole.ACCESSORY,
    "AvgPool2d": VertexRole.ACCESSORY,
    "Flatten": VertexRole.ACCESSORY,
    "Input": VertexRole.TERMINAL,
    "Output": VertexRole.TERMINAL,
}


def test_role_table_covers_all_twelve_tags():
    assert set(ROLE_TABLE) == set(KNOWN_TAGS)
    for tag, role in ROLE_TABLE.items():
        assert classify_vertex(Vertex("x", OpKind(tag, {}))) is role


def test_custom_tag_is_unknown():
    assert classify_vertex(v("m", "MyOp")) is VertexRole.UNKNOWN


@given(st.text(min_size=1, max_size=12))
def test_classify_total_and_pure(tag):
    vx = Vertex("x", OpKind(tag, {}))
    r1, r2 = classify_vertex(vx), classify_vertex(vx)
    assert r1 is r2
    assert r1 is ROLE_TABLE.get(tag, VertexRole.UNKNOWN)


# -- construction and validation -------------------------------------------------------


def test_minimal_manifest_parses_to_three_vertices():
    g, p = parse_graph(*minimal_manifest())
    assert len(g) == 3 and g.inputs == ("in",) and g.outputs == ("out",)
    assert p["conv.w"].shape == (2, 1, 3, 3)


def test_wrong_filter_length_is_shape_mismatch():
    with pytest.raises(GraphError, match="shape mismatch"):
        parse_graph(*minimal_manifest(weight_shape=(2, 1, 3, 2)))


def test_duplicate_and_dangling():
    text, blob = minimal_manifest()
    doc = json.loads(text)
    doc["vertices"].append(dict(doc["vertices"][1]))
    with pytest.raises(DuplicateIdError, match="conv"):
        parse_graph(json.dumps(doc), blob)
    doc = json.loads(text)
    doc["edges"].append(["conv", "ghost", 0])
    with pytest.raises(GraphError, match="ghost"):
        parse_graph(json.dumps(doc), blob)
    with pytest.raises(DanglingEdgeError):
        make_graph([v("a", "Input", shape=[1, 2])], [("a", "b", 0)])


def test_truncated_blob_names_the_tensor():
    text, blob = minimal_manifest()
    with pytest.raises(BlobError, match="conv.w"):
        parse_graph(text, blob[:40])
    with pytest.raises(BlobError, match="magic"):
        read_blob(b"NOPE" + blob[4:])


def test_blob_layout_matches_hand_encoding():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    blob = write_blob(ParamStore({"ab": arr}))
    header = MAGIC + struct.pack("<I", 1) + b"\0" * 8
    rec = struct.pack("<H", 2) + b"ab" + struct.pack("<B", 2) + struct.pack("<2I", 2, 3) + arr.astype("<f4").tobytes()
    rec += b"\0" * (-len(rec) % 16)
    assert blob == header + rec
    assert len(blob) % 16 == 0


def test_structural_rules():
    with pytest.raises(GraphError, match="no outgoing"):
        make_graph([v("a", "Input", shape=[1, 2]), v("r", "ReLU"), v("o", "Output")], [("a", "o", 0), ("a", "r", 0)])
    with pytest.raises(GraphError, match="dense"):
        make_graph([v("a", "Input", shape=[1, 2]), v("b", "Input", shape=[1, 2]), v("s", "Add"), v("o", "Output")],
                   [("a", "s", 0), ("b", "s", 2), ("s", "o", 0)])
    with pytest.raises(GraphError, match="missing attribute"):
        make_graph([v("a", "Input", shape=[1, 2]), v("l", "Linear", ["l.w"]), v("o", "Output")], [("a", "l", 0), ("l", "o", 0)])


def test_concat_axis_defaults_to_channels():
    assert OpKind("Concat", {})["axis"] == 1
    assert OpKind("Concat", {"axis": 2})["axis"] == 2


# -- topological order ------------------------------------------------------------------


def test_topo_chain_and_diamond():
    g = make_graph([v("a", "Input", shape=[1, 2]), v("b", "ReLU"), v("c", "Output")], [("a", "b", 0), ("b", "c", 0)])
    assert topological_order(g) == ["a", "b", "c"]
    g = make_graph(
        [v("a", "Input", shape=[1, 2]), v("c", "ReLU"), v("b", "ReLU"), v("d", "Add"), v("o", "Output")],
        [("a", "c", 0), ("a", "b", 0), ("b", "d", 0), ("c", "d", 1), ("d", "o", 0)],
    )
    assert topological_order(g) == ["a", "b", "c", "d", "o"]


def test_back_edge_is_a_cycle():
    with pytest.raises(CycleError):
        make_graph(
            [v("a", "Input", shape=[1, 2]), v("b", "Add"), v("c", "ReLU"), v("o", "Output")],
            [("a", "b", 0), ("c", "b", 1), ("b", "c", 0), ("c", "o", 0)],
        )


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_topo_order_respects_edges(seed):
    g = F.random_graph(seed)
    order = topological_order(g)
    assert len(order) == len(g) and len(set(order)) == len(g)
    pos = {vid: i for i, vid in enumerate(order)}
    assert all(pos[e.src] < pos[e.dst] for e in g.edges)


# -- shapes ---------------------------------------------------------------------------------


def test_demonet_shapes(demonet_full):
    g = demonet_full
    assert all(vx.out_shape is not None for vx in g.vertices.values())
    assert g.shape("Conv5") == g.shape("Conv6")
    assert g.shape("Input") == (1, 3, 32, 32)
    assert len(g) == 27


def test_add_conflict_and_concat_arithmetic():
    def two_inputs(tag, c1, c2):
        return make_graph(
            [v("a", "Input", shape=[1, c1, 4, 4]), v("b", "Input", shape=[1, c2, 4, 4]), v("j", tag), v("o", "Output")],
            [("a", "j", 0), ("b", "j", 1), ("j", "o", 0)],
        )

    with pytest.raises(ShapeConflictError):
        infer_shapes(two_inputs("Add", 8, 9))
    g = infer_shapes(two_inputs("Concat", 3, 5))
    assert g.shape("j") == (1, 8, 4, 4)
    assert concat_offsets(g, "j") == [("a", 0, 3), ("b", 3, 8)]


def test_pool_negative_size():
    g = make_graph([v("a", "Input", shape=[1, 1, 2, 2]), v("p", "MaxPool2d", kernel=3), v("o", "Output")], [("a", "p", 0), ("p", "o", 0)])
    with pytest.raises(ShapeConflictError, match="non-positive"):
        infer_shapes(g)


def test_conv_channel_mismatch():
    g = make_graph(
        [v("a", "Input", shape=[1, 2, 4, 4]), v("c", "Conv2d", ["w"], in_channels=3, out_channels=1, kernel=1, bias=False, stride=1, padding=0), v("o", "Output")],
        [("a", "c", 0), ("c", "o", 0)],
    )
    with pytest.raises(ShapeMismatchError):
        infer_shapes(g)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_infer_shapes_idempotent(seed):
    g = F.random_graph(seed)
    again = infer_shapes(g)
    assert {k: x.out_shape for k, x in again.vertices.items()} == {k: x.out_shape for k, x in g.vertices.items()}


# -- round trip -------------------------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2**31 - 1))
def test_roundtrip_graph_and_params(seed, pseed):
    g = F.random_graph(seed)
    p = random_params(g, np.random.default_rng(pseed), bn_stats=True)
    g2, p2 = parse_graph(serialize_graph(g), write_blob(p))
    assert serialize_graph(g2) == serialize_graph(g)
    assert {k: x.kind for k, x in g2.vertices.items()} == {k: x.kind for k, x in g.vertices.items()}
    assert g2.edges == g.edges
    assert p2.bit_equal(p)


def test_save_load_restores_shapes(tmp_path, demonet):
    p = random_params(demonet, np.random.default_rng(3))
    save_model(demonet, p, tmp_path / "m.json")
    g2, p2 = load_model(tmp_path / "m.json")
    assert g2.shape("Linear2") == demonet.shape("Linear2")
    assert p2.bit_equal(p)


# -- DOT --------------------------------------------------------------------------------------------


def _fill(dot, vid):
    line = next(ln for ln in dot.splitlines() if ln.strip().startswith(f'"{vid}" ['))
    return line.split('fillcolor="')[1].split('"')[0], line


def test_dot_pzig_colours(demonet):
    dot = export_dot(demonet, pruning_space(demonet))
    fills = {vid: _fill(dot, vid)[0] for vid in ("Conv5", "Conv6", "BN5", "Conv2")}
    assert fills["Conv5"] == fills["Conv6"] == fills["BN5"]
    assert fills["Conv2"] != fills["Conv5"]
    assert dot == export_dot(demonet, pruning_space(demonet))  # stable


def test_dot_plain_and_dashed(demonet):
    plain = export_dot(demonet)
    assert plain.startswith("digraph model {")
    assert {_fill(plain, vid)[0] for vid in demonet.vertices} == {"#ffffff"}
    eg = erasing_space(demonet).meta["erasing_graph"]
    dashed = export_dot(demonet, eg, {eg.owner["Conv8"]})
    assert "dashed" in _fill(dashed, "Conv8")[1]
    assert "dashed" not in _fill(dashed, "Conv7")[1]
    seg = export_segment_dot(eg, {eg.owner["Conv8"]})
    assert seg.count(" -> ") == len(eg.edges)
