"""Dense forward and reverse-mode execution of a :class:`~zigcompress.graph.Graph`.

Parameters and activations are held as float32 at the boundary; every kernel
computes in float64 and the public outputs/gradients are rounded back to
float32 once.  Gradient checking goes through :func:`run_forward` /
:func:`run_backward` directly so it can stay in float64 end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import kernels as K
from .graph import Graph, GraphError, ShapeMismatchError, topological_order
from .params import ParamStore


class EngineError(RuntimeError):
    pass


@dataclass
class ForwardCache:
    """Activations and kernel context of one forward pass."""

    mode: str
    values: dict[str, np.ndarray] = field(default_factory=dict)
    ctx: dict[str, object] = field(default_factory=dict)
    # BatchNorm vertex -> (batch mean, unbiased batch var); train mode only
    bn_stats: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    order: list[str] = field(default_factory=list)

    def kink_signature(self) -> dict[str, bytes]:
        """ReLU masks and max-pool argmaxes; differing signatures mean a kink was crossed."""
        sig = {}
        for vid, c in self.ctx.items():
            if isinstance(c, tuple) and isinstance(c[0], str) and c[0] == "relu":
                sig[vid] = np.packbits(c[1] > 0).tobytes()
            elif isinstance(c, tuple) and isinstance(c[0], str) and c[0] == "maxpool":
                sig[vid] = c[1].tobytes()
        return sig


def _as_f64(params) -> dict[str, np.ndarray]:
    tensors = params.tensors if isinstance(params, ParamStore) else params
    return {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}


def _normalise_inputs(g: Graph, inputs) -> dict[str, np.ndarray]:
    if isinstance(inputs, np.ndarray):
        if len(g.inputs) != 1:
            raise GraphError(f"graph has {len(g.inputs)} inputs; pass a mapping")
        inputs = {g.inputs[0]: inputs}
    missing = [vid for vid in g.inputs if vid not in inputs]
    if missing:
        raise GraphError(f"no value supplied for inputs {missing}")
    return {vid: np.asarray(inputs[vid], dtype=np.float64) for vid in g.inputs}


def run_forward(g: Graph, params: Mapping[str, np.ndarray], inputs: Mapping[str, np.ndarray], mode: str = "eval") -> ForwardCache:
    """Float64 forward pass.  ``params`` values must already be float64."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cache = ForwardCache(mode=mode, order=topological_order(g))
    vals = cache.values
    for vid in cache.order:
        v = g.vertices[vid]
        tag = v.tag
        a = v.kind
        xs = [vals[s] for s in g.predecessors(vid)]
        if tag == "Input":
            y = inputs[vid]
            if v.out_shape is not None and tuple(y.shape[1:]) != tuple(v.out_shape[1:]):
                raise ShapeMismatchError(f"shape mismatch at input {vid!r}: expected {v.out_shape[1:]}, got {y.shape[1:]}")
        elif tag == "Conv2d":
            w = params[v.params[0]]
            b = params[v.params[1]] if a["bias"] else None
            if xs[0].ndim != 4 or xs[0].shape[1] != w.shape[1]:
                raise ShapeMismatchError(f"shape mismatch at {vid!r}: input {xs[0].shape} vs filter {w.shape}")
            y = K.conv2d(xs[0], w, b, a["stride"], a["padding"])
        elif tag == "Linear":
            w = params[v.params[0]]
            b = params[v.params[1]] if a["bias"] else None
            if xs[0].ndim != 2 or xs[0].shape[1] != w.shape[1]:
                raise ShapeMismatchError(f"shape mismatch at {vid!r}: input {xs[0].shape} vs weight {w.shape}")
            y = K.linear(xs[0], w, b)
        elif tag == "BatchNorm2d":
            gamma, beta, rm, rv = (params[n] for n in v.params)
            if mode == "train":
                y, c = K.batchnorm2d_train(xs[0], gamma, beta, a["eps"])
                m = xs[0].shape[0] * xs[0].shape[2] * xs[0].shape[3]
                cache.bn_stats[vid] = (c[2], c[3] * (m / (m - 1) if m > 1 else 1.0))
                cache.ctx[vid] = c
            else:
                y, cache.ctx[vid] = K.batchnorm2d_eval(xs[0], gamma, beta, rm, rv, a["eps"])
        elif tag == "ReLU":
            y = K.relu(xs[0])
            cache.ctx[vid] = ("relu", xs[0])
        elif tag == "MaxPool2d":
            y, arg = K.maxpool2d(xs[0], a["kernel"], a["stride"], a["padding"])
            cache.ctx[vid] = ("maxpool", arg)
        elif tag == "AvgPool2d":
            y = K.avgpool2d(xs[0], a["kernel"], a["stride"], a["padding"])
        elif tag == "Add":
            _same_shapes(vid, xs)
            y = K.add(*xs)
        elif tag == "Mul":
            _same_shapes(vid, xs)
            y = K.mul(*xs)
        elif tag == "Concat":
            y = K.concat(xs, a["axis"])
        elif tag == "Flatten":
            y = K.flatten(xs[0])
        elif tag == "Output":
            y = xs[0]
        else:
            raise EngineError(f"no kernel for operator {tag!r} at vertex {vid!r}")
        if tag not in ("Input", "Output") and not np.isfinite(y).all():
            raise EngineError(f"non-finite activation produced at vertex {vid!r} ({tag})")
        vals[vid] = y
    return cache


def _same_shapes(vid, xs):
    if any(x.shape != xs[0].shape for x in xs[1:]):
        raise ShapeMismatchError(f"shape mismatch at joint {vid!r}: {[x.shape for x in xs]}")


def run_backward(g: Graph, params: Mapping[str, np.ndarray], cache: ForwardCache, loss_grad: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Float64 reverse pass; returns gradients for every trainable tensor."""
    grads = {name: np.zeros_like(params[name]) for vid in g.vertices for name in g.vertices[vid].trainable_params()}
    upstream: dict[str, np.ndarray] = {}
    for vid in g.outputs:
        if vid in loss_grad:
            upstream[vid] = np.asarray(loss_grad[vid], dtype=np.float64)

    def send(src, grad):
        if src in upstream:
            upstream[src] = upstream[src] + grad
        else:
            upstream[src] = grad

    vals = cache.values
    for vid in reversed(cache.order):
        if vid not in upstream:
            continue
        if vid not in vals:
            raise EngineError(f"forward cache has no entry for vertex {vid!r}")
        gy = upstream.pop(vid)
        v = g.vertices[vid]
        tag = v.tag
        a = v.kind
        preds = g.predecessors(vid)
        if tag == "Input":
            continue
        xs = [vals[s] for s in preds]
        if tag == "Conv2d":
            gx, gw, gb = K.conv2d_vjp(gy, xs[0], params[v.params[0]], a["stride"], a["padding"], a["bias"])
            grads[v.params[0]] += gw
            if a["bias"]:
                grads[v.params[1]] += gb
            gxs = [gx]
        elif tag == "Linear":
            gx, gw, gb = K.linear_vjp(gy, xs[0], params[v.params[0]], a["bias"])
            grads[v.params[0]] += gw
            if a["bias"]:
                grads[v.params[1]] += gb
            gxs = [gx]
        elif tag == "BatchNorm2d":
            gamma = params[v.params[0]]
            if cache.mode == "train":
                gx, gg, gbt = K.batchnorm2d_train_vjp(gy, gamma, cache.ctx[vid])
            else:
                gx, gg, gbt = K.batchnorm2d_eval_vjp(gy, gamma, cache.ctx[vid])
            grads[v.params[0]] += gg
            grads[v.params[1]] += gbt
            gxs = [gx]
        elif tag == "ReLU":
            gxs = [K.relu_vjp(gy, xs[0])]
        elif tag == "MaxPool2d":
            gxs = [K.maxpool2d_vjp(gy, xs[0].shape, cache.ctx[vid][1], a["kernel"], a["stride"], a["padding"])]
        elif tag == "AvgPool2d":
            gxs = [K.avgpool2d_vjp(gy, xs[0].shape, a["kernel"], a["stride"], a["padding"])]
        elif tag == "Add":
            gxs = K.add_vjp(gy, len(xs))
        elif tag == "Mul":
            gxs = K.mul_vjp(gy, xs)
        elif tag == "Concat":
            axis = a["axis"]
            gxs = K.concat_vjp(gy, [x.shape[axis] for x in xs], axis)
        elif tag == "Flatten":
            gxs = [K.flatten_vjp(gy, xs[0].shape)]
        elif tag == "Output":
            gxs = [gy]
        else:
            raise EngineError(f"no kernel for operator {tag!r} at vertex {vid!r}")
        for src, gx in zip(preds, gxs):
            send(src, gx)
    return grads


# -- public float32 API ---------------------------------------------------------


def forward(g: Graph, p, inputs, mode: str = "eval") -> tuple[dict[str, np.ndarray], ForwardCache]:
    """Run the graph; returns float32 outputs keyed by Output id plus the cache."""
    cache = run_forward(g, _as_f64(p), _normalise_inputs(g, inputs), mode)
    outs = {vid: cache.values[vid].astype(np.float32) for vid in g.outputs}
    return outs, cache


def backward(g: Graph, p, cache: ForwardCache, loss_grad: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Float32 gradient map whose keys are exactly the trainable tensor names."""
    grads = run_backward(g, _as_f64(p), cache, loss_grad)
    return {k: v.astype(np.float32) for k, v in grads.items()}


def predict(g: Graph, p, inputs, batch_size: int = 256) -> np.ndarray:
    """Eval-mode outputs of the first graph output, batched."""
    inputs = np.asarray(inputs)
    p64 = _as_f64(p)
    chunks = []
    for i in range(0, len(inputs), batch_size):
        cache = run_forward(g, p64, _normalise_inputs(g, inputs[i : i + batch_size]), "eval")
        chunks.append(cache.values[g.outputs[0]])
    return np.concatenate(chunks).astype(np.float32)


def updated_running_stats(g: Graph, p: ParamStore, cache: ForwardCache) -> ParamStore:
    """Copy of ``p`` with BatchNorm running statistics advanced by one train step."""
    out = p.copy()
    for vid, (mean, var) in cache.bn_stats.items():
        v = g.vertices[vid]
        mom = v.kind["momentum"]
        rm, rv = v.params[2], v.params[3]
        out[rm] = (1.0 - mom) * p[rm].astype(np.float64) + mom * mean
        out[rv] = (1.0 - mom) * p[rv].astype(np.float64) + mom * var
    return out


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    return K.softmax_cross_entropy(np.asarray(logits, dtype=np.float64), np.asarray(labels))


def loss_and_grad(g: Graph, p, x: np.ndarray, y: np.ndarray, mode: str = "train"):
    """Cross-entropy on the first output; returns (loss, f32 gradients, cache)."""
    p64 = _as_f64(p)
    cache = run_forward(g, p64, _normalise_inputs(g, x), mode)
    loss, gl = K.softmax_cross_entropy(cache.values[g.outputs[0]], y)
    if not np.isfinite(loss):
        raise EngineError(f"non-finite loss {loss}")
    grads = run_backward(g, p64, cache, {g.outputs[0]: gl})
    return loss, {k: v.astype(np.float32) for k, v in grads.items()}, cache


# -- gradient oracle -------------------------------------------------------------

LossFn = Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]]


def projection_loss(g: Graph, cache_values: Mapping[str, np.ndarray], seed: int = 0) -> LossFn:
    """Scalar loss sum_o <R_o, y_o> with fixed Gaussian R_o matching each output's shape."""
    rng = np.random.default_rng(seed)
    weights = {vid: rng.standard_normal(cache_values[vid].shape) for vid in g.outputs}

    def fn(outs):
        loss = float(sum(np.sum(weights[vid] * outs[vid]) for vid in g.outputs))
        return loss, dict(weights)

    return fn


def squared_loss(output_id: str, target: np.ndarray) -> LossFn:
    target = np.asarray(target, dtype=np.float64)

    def fn(outs):
        r = outs[output_id] - target
        return 0.5 * float(np.sum(r * r)) / len(r), {output_id: r / len(r)}

    return fn


def finite_diff_check(
    g: Graph,
    p,
    inputs,
    eps: float = 1e-3,
    *,
    n_coords: int = 200,
    seed: int = 0,
    mode: str = "train",
    loss: LossFn | None = None,
) -> float:
    """Max relative error between analytic gradients and central differences.

    Coordinates are sampled uniformly over all trainable scalars.  A coordinate
    whose +eps and -eps evaluations see different ReLU masks or max-pool
    winners straddles a kink and is skipped in favour of another sample.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p64 = _as_f64(p)
    xin = _normalise_inputs(g, inputs)
    base = run_forward(g, p64, xin, mode)
    if loss is None:
        loss = projection_loss(g, base.values, seed)
    _, seeds = loss({vid: base.values[vid] for vid in g.outputs})
    grads = run_backward(g, p64, base, seeds)

    names = g.trainable_names()
    sizes = np.array([p64[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    order = rng.permutation(int(offsets[-1]))
    worst = 0.0
    accepted = 0
    for flat in order:
        if accepted >= n_coords:
            break
        t = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, local = names[t], int(flat - offsets[t])
        arr = p64[name]
        orig = arr.flat[local]
        vals = []
        sigs = []
        for delta in (eps, -eps):
            arr.flat[local] = orig + delta
            c = run_forward(g, p64, xin, mode)
            vals.append(loss({vid: c.values[vid] for vid in g.outputs})[0])
            sigs.append(c.kink_signature())
        arr.flat[local] = orig
        if sigs[0] != sigs[1]:
            continue
        fd = (vals[0] - vals[1]) / (2 * eps)
        an = grads[name].flat[local]
        worst = max(worst, abs(an - fd) / max(1.0, abs(an)))
        accepted += 1
    return float(worst)
