"""Operator erasing on DemoNet.

Segments the network, trains with hierarchical selection so that every
removal keeps the graph connected, then deletes the zero segments and the
joints they leave with a single input.

    python demos/erase_demonet.py [--steps 300] [--target 0.5]
"""

import argparse

import numpy as np

from zigcompress import fixtures
from zigcompress.data import gen_synthetic
from zigcompress.erase_space import erasing_space
from zigcompress.params import random_params
from zigcompress.sparse_opt import OptimizerConfig
from zigcompress.subnet import construct_erased, surgery_report, verify_equivalence
from zigcompress.train import train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--target", type=float, default=0.5)
    args = ap.parse_args()

    g = fixtures.demonet(in_channels=1, image_size=16, width=8, classes=4)
    part = erasing_space(g)
    eg = part.meta["erasing_graph"]
    print("segments:")
    for sid in sorted(eg.segments):
        s = eg.segments[sid]
        print(f"  S{sid:<2} {' -> '.join(s.members):45s} {'erasable' if s.erasable else s.reason}")

    data = gen_synthetic(4, 800, (1, 16, 16), seed=0, noise=2.0)
    cfg = OptimizerConfig(variant="sgd_momentum", lr=0.02, steps=args.steps, batch_size=32, target=args.target)
    res = train(g, random_params(g, np.random.default_rng(0)), part, cfg, data, "h2spg", eg)
    cls = res.classification
    name = lambda gid: "/".join(part[gid].structure["members"])  # noqa: E731
    print("\naccepted, in order:", [name(gid) for gid in cls.order])
    if cls.rejected:
        print("rejected (would disconnect the graph):", [name(gid) for gid in cls.rejected])
    for f in res.flags:
        print("note:", f)

    sub = construct_erased(g, res.params, part, eg, sorted(cls.redundant))
    print()
    print(surgery_report(g, sub, verify_equivalence(g, res.params, sub)), end="")


if __name__ == "__main__":
    main()
