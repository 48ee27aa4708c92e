import json

import numpy as np
import pytest

from zigcompress import fixtures as F
from zigcompress.erase_space import erasing_space
from zigcompress.graph import VertexRole
from zigcompress.params import random_params
from zigcompress.partition import GroupPartition, VariableGroup
from zigcompress.prune_space import pruning_space
from zigcompress.serialize import load_model, save_model
from zigcompress.subnet import (
    SurgeryError,
    construct_erased,
    construct_pruned,
    count_flops,
    count_params,
    surgery_report,
    verify_equivalence,
)


def params_for(g, seed=0):
    return random_params(g, np.random.default_rng(seed), bn_stats=True)


def zig_ids(part, pred):
    return [z.id for z in part.zig_groups if pred(z.structure)]


# -- pruning ---------------------------------------------------------------------


def test_chain_channel_removal_matches_np_delete():
    # the consumer loses input columns 1 and 2 although its own group is untouched
    g = F.chain()
    p = params_for(g)
    part = pruning_space(g)
    removed = zig_ids(part, lambda s: s["channel"] in (1, 2))
    pz = part.zeroed(p, removed)
    sub = construct_pruned(g, pz, part, removed)
    q = sub.params
    np.testing.assert_array_equal(q["ConvA.weight"], np.delete(p["ConvA.weight"], [1, 2], axis=0))
    np.testing.assert_array_equal(q["ConvA.bias"], np.delete(p["ConvA.bias"], [1, 2]))
    for n in ("BN.weight", "BN.bias", "BN.running_mean", "BN.running_var"):
        np.testing.assert_array_equal(q[n], np.delete(p[n], [1, 2]))
    np.testing.assert_array_equal(q["ConvB.weight"], np.delete(p["ConvB.weight"], [1, 2], axis=1))
    np.testing.assert_array_equal(q["ConvB.bias"], p["ConvB.bias"])
    assert sub.graph.vertices["ConvA"].kind["out_channels"] == 2
    assert sub.graph.vertices["ConvB"].kind["in_channels"] == 2
    assert sub.provenance["ConvB.weight"]["source"] == "ConvB.weight"
    # parameter count identity, worked out by hand: 2 rows of 3x3x3 plus bias,
    # 2 BN affine pairs and 2 input columns of ConvB (5 filters of 3x3)
    assert count_params(g) - count_params(sub.graph) == 2 * (27 + 1) + 2 * 2 + 2 * 5 * 9
    assert verify_equivalence(g, pz, sub)["max_abs_diff"] < 1e-5


def test_identity_surgery_is_bit_equal(demonet):
    p = params_for(demonet)
    for sub in (construct_pruned(demonet, p, pruning_space(demonet), []),
                construct_erased(demonet, p, erasing_space(demonet), erasing_space(demonet).meta["erasing_graph"], [])):
        assert sub.params.bit_equal(p)
        assert set(sub.graph.vertices) == set(demonet.vertices)
        assert verify_equivalence(demonet, p, sub)["max_abs_diff"] == 0.0


def test_add_group_rows_removed_together(demonet):
    p = params_for(demonet)
    part = pruning_space(demonet)
    ng = next(n for n in part.meta["node_groups"] if "Conv5" in n.members)
    (gid,) = zig_ids(part, lambda s: s["node_group"] == ng.id and s["channel"] == 2)
    pz = part.zeroed(p, [gid])
    sub = construct_pruned(demonet, pz, part, [gid])
    for conv in ("Conv5", "Conv6"):
        np.testing.assert_array_equal(sub.params[f"{conv}.weight"], np.delete(p[f"{conv}.weight"], 2, axis=0))
    assert sub.graph.shape("Add1")[1] == demonet.shape("Add1")[1] - 1
    assert verify_equivalence(demonet, pz, sub)["pass"]


def test_concat_offsets_followed_by_consumer(demonet):
    p = params_for(demonet)
    part = pruning_space(demonet)
    ng = next(n for n in part.meta["node_groups"] if "Conv3" in n.members)
    removed = zig_ids(part, lambda s: s["node_group"] == ng.id and s["channel"] == 0)
    pz = part.zeroed(p, removed)
    sub = construct_pruned(demonet, pz, part, removed)
    c2 = demonet.shape("BN2")[1]
    np.testing.assert_array_equal(sub.params["Conv6.weight"], np.delete(p["Conv6.weight"], c2, axis=1))
    np.testing.assert_array_equal(sub.params["BN6.weight"], np.delete(p["BN6.weight"], c2))
    assert verify_equivalence(demonet, pz, sub)["pass"]


def test_flatten_mapping_to_linear(demonet):
    p = params_for(demonet)
    part = pruning_space(demonet)
    ng = next(n for n in part.meta["node_groups"] if "Conv5" in n.members)
    removed = zig_ids(part, lambda s: s["node_group"] == ng.id and s["channel"] in (0, 3))
    pz = part.zeroed(p, removed)
    sub = construct_pruned(demonet, pz, part, removed)
    _, c, h, w = demonet.shape("Pool5")
    cols = [ch * h * w + i for ch in (0, 3) for i in range(h * w)]
    np.testing.assert_array_equal(sub.params["Linear1.weight"], np.delete(p["Linear1.weight"], cols, axis=1))
    assert verify_equivalence(demonet, pz, sub)["pass"]


def test_degenerate_layer_is_refused():
    g = F.chain()
    p = params_for(g)
    part = pruning_space(g)
    everything = [z.id for z in part.zig_groups]
    with pytest.raises(SurgeryError, match="degenerate layer"):
        construct_pruned(g, part.zeroed(p, everything), part, everything)


def test_nonzero_removal_is_a_consistency_error():
    g = F.chain()
    part = pruning_space(g)
    with pytest.raises(SurgeryError, match="not exactly zero"):
        construct_pruned(g, params_for(g), part, [0])
    with pytest.raises(SurgeryError, match="not a zero-invariant"):
        construct_pruned(g, params_for(g), part, [part.complement[0].id])


def test_non_zig_zeroing_fails_equivalence(demonet):
    # negative control: zero only the filter rows of a channel, leaving its
    # biases and BN scalars alive; surgery still removes the whole channel
    p = params_for(demonet)
    part = pruning_space(demonet)
    ng = next(n for n in part.meta["node_groups"] if "Conv5" in n.members)
    (gid,) = zig_ids(part, lambda s: s["node_group"] == ng.id and s["channel"] == 1)
    real = part[gid]
    partial = VariableGroup(gid, True, {n: ix for n, ix in real.indices.items() if n.endswith(".weight") and n.startswith("Conv")}, real.structure)
    fake = GroupPartition("prune", [partial if grp.id == gid else grp for grp in part.groups], part.names, part.shapes, part.meta)
    pz = fake.zeroed(p, [gid])
    sub = construct_pruned(demonet, pz, fake, [gid])
    rep = verify_equivalence(demonet, pz, sub)
    assert not rep["pass"] and rep["max_abs_diff"] > 1e-3


def test_pruning_fixed_point(demonet):
    p = params_for(demonet)
    part = pruning_space(demonet)
    removed = part.zig_groups[0].id, part.zig_groups[-1].id
    sub = construct_pruned(demonet, part.zeroed(p, removed), part, removed)
    again = construct_pruned(sub.graph, sub.params, pruning_space(sub.graph), [])
    assert again.params.bit_equal(sub.params)


# -- erasing ---------------------------------------------------------------------------


def _erase(g, p, heads):
    part = erasing_space(g)
    eg = part.meta["erasing_graph"]
    removed = [z.id for z in part.zig_groups if z.structure["members"][0] in heads]
    pz = part.zeroed(p, removed)
    return part, eg, pz, construct_erased(g, pz, part, eg, removed)


def test_erase_collapses_concat_and_add(demonet):
    p = params_for(demonet)
    part, eg, pz, sub = _erase(demonet, p, {"Conv2", "MaxPool", "Conv8"})
    gone = {"Conv2", "BN2", "MaxPool", "Conv3", "BN3", "Conv8", "Concat", "Add2"}
    assert gone.isdisjoint(sub.graph.vertices)
    assert sub.graph.predecessors("BN6") == ["BN4"]
    assert sub.graph.predecessors("ReLU7") == ["Conv7"]
    off = demonet.shape("BN2")[1] + demonet.shape("BN3")[1]
    np.testing.assert_array_equal(sub.params["Conv6.weight"], p["Conv6.weight"][:, off:])
    np.testing.assert_array_equal(sub.params["BN6.running_mean"], p["BN6.running_mean"][off:])
    assert any("single-input Concat" in n for n in sub.notes)
    rep = verify_equivalence(demonet, pz, sub)
    assert rep["pass"], rep
    # no isolated vertices or single-input joints remain
    for vid in sub.graph.vertices:
        if sub.graph.role(vid) != VertexRole.TERMINAL:
            assert sub.graph.in_edges(vid) and sub.graph.out_edges(vid)
        if sub.graph.vertices[vid].tag in ("Add", "Mul", "Concat"):
            assert len(sub.graph.in_edges(vid)) >= 2


def test_erase_param_identity_and_fixed_point(demonet):
    p = params_for(demonet)
    part, eg, pz, sub = _erase(demonet, p, {"Conv7"})
    # Conv7's whole segment goes; nothing downstream is resized
    assert count_params(demonet) - count_params(sub.graph) == part[[z.id for z in part.zig_groups if z.structure["members"][0] == "Conv7"][0]].size
    part2 = erasing_space(sub.graph)
    again = construct_erased(sub.graph, sub.params, part2, part2.meta["erasing_graph"], [])
    assert again.params.bit_equal(sub.params)
    assert verify_equivalence(demonet, pz, sub)["pass"]


def test_invalid_erasure_is_an_internal_error(demonet):
    p = params_for(demonet)
    with pytest.raises(SurgeryError, match="invalid graph"):
        _erase(demonet, p, {"Conv7", "Conv8"})


# -- reporting -----------------------------------------------------------------------------


def test_counts_and_report(demonet, tmp_path):
    g = F.chain()
    assert count_params(g) == 3 * 4 * 9 + 4 + 8 + 4 * 5 * 9 + 5
    assert count_flops(g) == 64 * (4 * 27 + 5 * 36)
    p = params_for(g)
    part = pruning_space(g)
    pz = part.zeroed(p, [0])
    sub = construct_pruned(g, pz, part, [0])
    text = surgery_report(g, sub, verify_equivalence(g, pz, sub))
    assert "params:" in text and "ConvA: out_channels 4->3" in text and "pass=True" in text
    prov = json.loads(sub.provenance_json())
    assert prov["removed_groups"] == [0]
    save_model(sub.graph, sub.params, tmp_path / "s.json")
    g2, p2 = load_model(tmp_path / "s.json")
    assert p2.bit_equal(sub.params) and count_params(g2) == count_params(sub.graph)


def test_verify_reports_arity_mismatch():
    g = F.chain()
    p = params_for(g)
    other = construct_pruned(F.twin_branch(), params_for(F.twin_branch()), pruning_space(F.twin_branch()), [])
    rep = verify_equivalence(g, p, other)
    assert not rep["pass"] and rep["reason"]
