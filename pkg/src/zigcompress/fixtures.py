"""Graph builders: DemoNet, a RegNet-like toy, random valid graphs and small probes.

DemoNet layout (ids are the vertex ids used throughout the tests)::

    Input -> Conv1 -+-> Conv2 (s2) -> BN2 -------------------+
                    +-> MaxPool -> Conv3 -> BN3 -------------+-> Concat -> BN6 -> ReLU6 -> Conv6 (s2) -+
                    +-> AvgPool -+-> Conv4 -> BN4 -----------+                                        |
                                 +-> Conv7 -+                                                         +-> Add1 -> BN5 -> ReLU5
                                 +-> Conv8 -+-> Add2 -> ReLU7 -> Conv5 (s2) --------------------------+
    ReLU5 -> Pool5 -> Flatten -> Linear1 -> Linear2 -> Output
"""

from __future__ import annotations

import numpy as np

from .graph import Graph, OpKind, Vertex, make_graph
from .shapes import infer_shapes


class GraphBuilder:
    """Incremental graph construction with automatic parameter naming."""

    def __init__(self):
        self._vertices: list[Vertex] = []
        self._edges: list[tuple[str, str, int]] = []
        self._input_shapes: dict[str, tuple[int, ...]] = {}
        self._ids: set[str] = set()

    def add(self, vid: str, tag: str, inputs=(), params=(), **attrs) -> str:
        self._vertices.append(Vertex(vid, OpKind(tag, attrs), tuple(params)))
        self._ids.add(vid)
        for slot, src in enumerate(inputs):
            self._edges.append((src, vid, slot))
        return vid

    def fresh(self, prefix: str) -> str:
        i = 1
        while f"{prefix}{i}" in self._ids:
            i += 1
        return f"{prefix}{i}"

    def input(self, vid: str, shape) -> str:
        self._input_shapes[vid] = (1,) + tuple(shape)
        return self.add(vid, "Input", shape=list(shape))

    def conv(self, vid, src, cin, cout, k=3, s=1, p=None, bias=True) -> str:
        p = k // 2 if p is None else p
        params = [f"{vid}.weight"] + ([f"{vid}.bias"] if bias else [])
        return self.add(vid, "Conv2d", [src], params, in_channels=cin, out_channels=cout, kernel=k, stride=s, padding=p, bias=bias)

    def linear(self, vid, src, fin, fout, bias=True) -> str:
        params = [f"{vid}.weight"] + ([f"{vid}.bias"] if bias else [])
        return self.add(vid, "Linear", [src], params, in_features=fin, out_features=fout, bias=bias)

    def bn(self, vid, src, c) -> str:
        return self.add(vid, "BatchNorm2d", [src], [f"{vid}.{n}" for n in ("weight", "bias", "running_mean", "running_var")], num_features=c)

    def relu(self, vid, src) -> str:
        return self.add(vid, "ReLU", [src])

    def maxpool(self, vid, src, k, s=None, p=0) -> str:
        return self.add(vid, "MaxPool2d", [src], kernel=k, stride=k if s is None else s, padding=p)

    def avgpool(self, vid, src, k, s=None, p=0) -> str:
        return self.add(vid, "AvgPool2d", [src], kernel=k, stride=k if s is None else s, padding=p)

    def join(self, vid, tag, *srcs) -> str:
        return self.add(vid, tag, list(srcs))

    def flatten(self, vid, src) -> str:
        return self.add(vid, "Flatten", [src])

    def output(self, vid, src) -> str:
        return self.add(vid, "Output", [src])

    def build(self, shapes: bool = True) -> Graph:
        g = make_graph(self._vertices, self._edges)
        return infer_shapes(g, self._input_shapes) if shapes else g


def demonet(in_channels: int = 3, image_size: int = 32, width: int = 16, classes: int = 10, head_width: int | None = None) -> Graph:
    """A small branching network that exercises every grouping rule.

    Conv1 fans out into a strided conv, a max-pool branch and an avg-pool
    branch that meet in a Concat.  The avg-pool output also feeds two twin
    convs summed by an Add.  Both paths close in a residual Add ahead of
    the classifier head.  The twins give the erasing search an operator
    whose removal is only safe while its partner survives.
    """
    w = width
    c = head_width if head_width is not None else max(2, w // 2)
    b = GraphBuilder()
    b.input("Input", (in_channels, image_size, image_size))
    b.conv("Conv1", "Input", in_channels, w)
    b.conv("Conv2", "Conv1", w, w, s=2)
    b.bn("BN2", "Conv2", w)
    b.maxpool("MaxPool", "Conv1", 2)
    b.conv("Conv3", "MaxPool", w, w)
    b.bn("BN3", "Conv3", w)
    b.avgpool("AvgPool", "Conv1", 2)
    b.conv("Conv4", "AvgPool", w, w)
    b.bn("BN4", "Conv4", w)
    b.join("Concat", "Concat", "BN2", "BN3", "BN4")
    b.bn("BN6", "Concat", 3 * w)
    b.relu("ReLU6", "BN6")
    b.conv("Conv6", "ReLU6", 3 * w, c, s=2)
    b.conv("Conv7", "AvgPool", w, w)
    b.conv("Conv8", "AvgPool", w, w)
    b.join("Add2", "Add", "Conv7", "Conv8")
    b.relu("ReLU7", "Add2")
    b.conv("Conv5", "ReLU7", w, c, s=2)
    b.join("Add1", "Add", "Conv5", "Conv6")
    b.bn("BN5", "Add1", c)
    b.relu("ReLU5", "BN5")
    b.avgpool("Pool5", "ReLU5", 2)
    b.flatten("Flatten", "Pool5")
    spatial = ((image_size + 1) // 2 + 1) // 2 // 2
    b.linear("Linear1", "Flatten", c * spatial * spatial, 2 * w)
    b.linear("Linear2", "Linear1", 2 * w, classes)
    b.output("Output", "Linear2")
    return b.build()


def regnet_toy(in_channels: int = 3, image_size: int = 16, widths=(8, 16), depth: int = 2, classes: int = 4) -> Graph:
    """Residual stages; each stage opens with a projection block followed by identity blocks."""
    b = GraphBuilder()
    b.input("Input", (in_channels, image_size, image_size))
    b.conv("stem_conv", "Input", in_channels, widths[0])
    b.bn("stem_bn", "stem_conv", widths[0])
    cur = b.relu("stem_relu", "stem_bn")
    cin = widths[0]
    for si, cout in enumerate(widths):
        for bi in range(depth):
            p = f"s{si}b{bi}_"
            stride = 2 if (bi == 0 and si > 0) else 1
            x = b.conv(p + "conv_a", cur, cin, cout, s=stride)
            x = b.bn(p + "bn_a", x, cout)
            x = b.relu(p + "relu_a", x)
            x = b.conv(p + "conv_b", x, cout, cout)
            x = b.bn(p + "bn_b", x, cout)
            if bi == 0:
                sc = b.conv(p + "proj", cur, cin, cout, k=1, s=stride, p=0)
                sc = b.bn(p + "proj_bn", sc, cout)
            else:
                sc = cur
            y = b.join(p + "add", "Add", x, sc)
            cur = b.relu(p + "relu", y)
            cin = cout
    side = image_size // (2 ** (len(widths) - 1))
    b.avgpool("gap", cur, side)
    b.flatten("flatten", "gap")
    b.linear("fc", "flatten", cin, classes)
    b.output("Output", "fc")
    return b.build()


def random_graph(seed: int, n_ops: int = 8, in_channels: int = 3, size: int = 8, classes: int = 5) -> Graph:
    """A random valid graph mixing conv/BN/ReLU, pools, Add, Mul, Concat and Linear.

    The spatial size stays constant so any two tensors with equal channel
    counts can be joined.
    """
    rng = np.random.default_rng(seed)
    b = GraphBuilder()
    b.input("Input", (in_channels, size, size))
    tensors: list[tuple[str, int]] = []  # (vertex id, channels)
    consumed: set[str] = set()

    def conv_block(src, cin, cout):
        x = b.conv(b.fresh("conv"), src, cin, cout, k=int(rng.choice([1, 3])))
        consumed.add(src)
        if rng.random() < 0.8:
            x = b.bn(b.fresh("bn"), x, cout)
        if rng.random() < 0.7:
            x = b.relu(b.fresh("relu"), x)
        return x

    c0 = int(rng.choice([4, 6]))
    tensors.append((conv_block("Input", in_channels, c0), c0))
    ops = ["conv", "join", "join", "concat", "pool"]
    for _ in range(n_ops):
        op = ops[int(rng.integers(len(ops)))]
        src, c = tensors[int(rng.integers(len(tensors)))]
        if op == "conv":
            cout = int(rng.choice([4, 6, 8]))
            tensors.append((conv_block(src, c, cout), cout))
        elif op == "join":
            tag = "Add" if rng.random() < 0.6 else "Mul"
            donor, dc = tensors[int(rng.integers(len(tensors)))]
            other = conv_block(donor, dc, c)
            y = b.join(b.fresh(tag.lower()), tag, src, other)
            consumed.update((src, other))
            tensors.append((y, c))
        elif op == "concat":
            k = min(len(tensors), int(rng.integers(2, 4)))
            picks = sorted(set(int(i) for i in rng.choice(len(tensors), size=k, replace=False)))
            if len(picks) < 2:
                continue
            srcs = [tensors[i][0] for i in picks]
            y = b.join(b.fresh("cat"), "Concat", *srcs)
            consumed.update(srcs)
            tensors.append((y, sum(tensors[i][1] for i in picks)))
        else:
            if rng.random() < 0.5:
                y = b.maxpool(b.fresh("mpool"), src, 3, 1, 1)
            else:
                y = b.avgpool(b.fresh("apool"), src, 3, 1, 1)
            consumed.add(src)
            tensors.append((y, c))
    loose = [(t, c) for t, c in tensors if t not in consumed]
    if len(loose) > 1:
        head = b.join(b.fresh("cat"), "Concat", *[t for t, _ in loose])
        hc = sum(c for _, c in loose)
    else:
        head, hc = loose[0]
    x = b.bn(b.fresh("bn"), head, hc)
    x = b.relu(b.fresh("relu"), x)
    x = b.avgpool(b.fresh("apool"), x, size)
    x = b.flatten("flatten", x)
    x = b.linear("fc1", x, hc, 8)
    x = b.relu(b.fresh("relu"), x)
    x = b.linear("fc2", x, 8, classes)
    b.output("Output", x)
    return b.build()


def chain(in_channels: int = 3, size: int = 8, c1: int = 4, c2: int = 5) -> Graph:
    """Input -> Conv -> BN -> ReLU -> Conv -> Output."""
    b = GraphBuilder()
    b.input("Input", (in_channels, size, size))
    b.conv("ConvA", "Input", in_channels, c1)
    b.bn("BN", "ConvA", c1)
    b.relu("ReLU", "BN")
    b.conv("ConvB", "ReLU", c1, c2)
    b.output("Output", "ConvB")
    return b.build()


def twin_branch(in_channels: int = 3, size: int = 8, c: int = 4, classes: int = 3) -> Graph:
    """Two Conv branches joined by an Add, with a prunable stem in front."""
    b = GraphBuilder()
    b.input("Input", (in_channels, size, size))
    b.conv("ConvA", "Input", in_channels, c)
    b.relu("ReLU", "ConvA")
    b.conv("ConvL", "ReLU", c, c)
    b.conv("ConvR", "ReLU", c, c)
    b.join("Add", "Add", "ConvL", "ConvR")
    b.bn("BN", "Add", c)
    b.avgpool("Pool", "BN", size)
    b.flatten("Flatten", "Pool")
    b.linear("FC", "Flatten", c, classes)
    b.output("Output", "FC")
    return b.build()


def conv_chain(in_channels: int = 3, size: int = 8, c: int = 4, classes: int = 3) -> Graph:
    """Conv -> Conv on a single path feeding an Add with a skip connection."""
    b = GraphBuilder()
    b.input("Input", (in_channels, size, size))
    b.conv("ConvA", "Input", in_channels, c)
    b.conv("Conv1", "ConvA", c, c)
    b.conv("Conv2", "Conv1", c, c)
    b.join("Add", "Add", "Conv2", "ConvA")
    b.avgpool("Pool", "Add", size)
    b.flatten("Flatten", "Pool")
    b.linear("FC", "Flatten", c, classes)
    b.output("Output", "FC")
    return b.build()


def linreg(features: int = 5, targets: int = 1) -> Graph:
    b = GraphBuilder()
    b.input("Input", (features,))
    b.linear("Linear", "Input", features, targets)
    b.output("Output", "Linear")
    return b.build()


def minimal() -> Graph:
    """Input -> Conv2d -> Output."""
    b = GraphBuilder()
    b.input("Input", (1, 4, 4))
    b.conv("Conv", "Input", 1, 2)
    b.output("Output", "Conv")
    return b.build()


RANDOM_SEEDS = (105, 109, 113, 114, 119)


def fixture_suite(n_random: int = 5) -> dict[str, Graph]:
    """Every fixture used by the property and acceptance suites, by name."""
    out = {"demonet": demonet(in_channels=1, image_size=16, width=8, classes=4), "regnet_toy": regnet_toy()}
    # seeds picked so that every random graph has Add, Mul and Concat joints
    # and at least two erasable segments
    seeds = RANDOM_SEEDS[:n_random] if n_random <= len(RANDOM_SEEDS) else list(range(100, 100 + n_random))
    for i, seed in enumerate(seeds):
        out[f"random{i}"] = random_graph(seed=seed)
    return out
