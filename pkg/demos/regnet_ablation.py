"""Why erasing needs the hierarchical search.

On a small stage-and-block toy network, asking for 90% of the erasable
segments with plain bottom-K selection removes blocks that carry the only
path to the output.  The hierarchical search takes the same ranking but
skips every removal that would break the graph.

    python demos/regnet_ablation.py [--seeds 3]
"""

import argparse

import numpy as np

from zigcompress import fixtures
from zigcompress.data import gen_synthetic
from zigcompress.erase_space import erasing_space, validity_problems
from zigcompress.params import random_params
from zigcompress.shapes import input_shapes_of
from zigcompress.sparse_opt import OptimizerConfig, resolve_target, select_redundant_flat
from zigcompress.subnet import construct_erased, verify_equivalence
from zigcompress.train import train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()

    g = fixtures.regnet_toy()
    part = erasing_space(g)
    eg = part.meta["erasing_graph"]
    (_, shape), = input_shapes_of(g).items()
    classes = g.shape(g.outputs[0])[1]
    k = resolve_target(0.9, len(part.zig_groups))
    print(f"{len(eg.segments)} segments, {len(part.zig_groups)} erasable, asking for K={k}")

    for seed in range(args.seeds):
        data = gen_synthetic(classes, 256, tuple(shape[1:]), seed)
        cfg = OptimizerConfig(variant="sgd_momentum", lr=0.02, steps=60, batch_size=16, target=0.9, seed=seed)
        res = train(g, random_params(g, np.random.default_rng(seed)), part, cfg, data, "h2spg", eg)
        flat = select_redundant_flat(res.report, k, part)
        flat_segs = sorted(part[gid].structure["segment"] for gid in flat.redundant)
        problems = validity_problems(eg, flat_segs)
        sub = construct_erased(g, res.params, part, eg, sorted(res.classification.redundant))
        eq = verify_equivalence(g, res.params, sub)
        print(f"\nseed {seed}")
        print(f"  flat:         remove {flat_segs} -> {'valid' if not problems else problems[0]}")
        print(f"  hierarchical: remove {sorted(part[gid].structure['segment'] for gid in res.classification.redundant)}"
              f" -> {len(sub.graph)} vertices, equivalence pass={eq['pass']}")


if __name__ == "__main__":
    main()
