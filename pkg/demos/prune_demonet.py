"""Channel pruning of DemoNet, end to end.

Builds the pruning search space, trains with flat redundant-group selection,
cuts the zero channels out of the network and checks that the smaller model
gives the same outputs as the zeroed full one.

    python demos/prune_demonet.py [--steps 300] [--target 0.5]
"""

import argparse

import numpy as np

from zigcompress import fixtures
from zigcompress.data import accuracy, gen_synthetic
from zigcompress.engine import predict
from zigcompress.params import random_params
from zigcompress.prune_space import pruning_space
from zigcompress.sparse_opt import OptimizerConfig
from zigcompress.subnet import construct_pruned, count_flops, count_params, verify_equivalence
from zigcompress.train import train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--target", type=float, default=0.5)
    args = ap.parse_args()

    g = fixtures.demonet(in_channels=1, image_size=16, width=8, classes=4)
    part = pruning_space(g)
    print(f"DemoNet: {len(g)} vertices, {count_params(g)} parameters")
    for ng in part.meta["node_groups"]:
        status = "prunable" if ng.prunable else f"kept ({ng.exclusion_reason.value})"
        print(f"  node group {ng.id}: {sorted(ng.members)} -> {status}")
    print(f"{len(part.zig_groups)} channel groups can be zeroed independently")

    data = gen_synthetic(4, 800, (1, 16, 16), seed=0, noise=2.0)
    train_set, test_set = data.split(0.2, 0)
    cfg = OptimizerConfig(variant="sgd_momentum", lr=0.02, steps=args.steps, batch_size=32, target=args.target)
    res = train(g, random_params(g, np.random.default_rng(0)), part, cfg, train_set)
    cls = res.classification
    print(f"\nmarked {len(cls.redundant)} groups redundant; {res.natural_zero} reached zero before the closing projection")
    for f in res.flags:
        print("  note:", f)

    sub = construct_pruned(g, res.params, part, sorted(cls.redundant))
    eq = verify_equivalence(g, res.params, sub)
    print(f"\nparams {count_params(g)} -> {count_params(sub.graph)}, MACs {count_flops(g)} -> {count_flops(sub.graph)}")
    for vid in ("Conv1", "Conv5", "Conv6", "Linear1"):
        a, b = g.vertices[vid].kind.attrs, sub.graph.vertices[vid].kind.attrs
        io = ("in_channels", "out_channels") if "in_channels" in a else ("in_features", "out_features")
        print(f"  {vid}: {a[io[0]]}x{a[io[1]]} -> {b[io[0]]}x{b[io[1]]}")
    print(f"equivalence: max abs diff {eq['max_abs_diff']:.1e} (pass={eq['pass']})")
    acc_full = accuracy(predict(g, res.params, test_set.images), test_set.labels)
    acc_sub = accuracy(predict(sub.graph, sub.params, test_set.images), test_set.labels)
    print(f"test accuracy: zeroed full {acc_full:.3f}, sub-network {acc_sub:.3f}")


if __name__ == "__main__":
    main()
