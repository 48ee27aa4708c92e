"""Command-line pipeline: analyze -> train -> compress -> verify.

Every subcommand reads an optional JSON config (``--config``); explicit flags
override it.  A model is either a manifest path (``model.json`` beside
``model.bin``) or the name of a built-in fixture such as ``demonet``.

Exit codes: 0 success, 1 a check failed (equivalence, validity), 2 error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import fixtures
from .data import Dataset, DatasetError, accuracy, gen_synthetic, load_idx
from .dot import export_dot, export_segment_dot
from .engine import predict
from .erase_space import erasing_space
from .graph import Graph, GraphError
from .params import ParamStore, random_params
from .partition import GroupPartition, PartitionError
from .prune_space import pruning_space
from .serialize import load_model, save_model
from .shapes import input_shapes_of
from .sparse_opt import OptimizerConfig
from .subnet import Subnetwork, SurgeryError, construct_erased, construct_pruned, surgery_report, verify_equivalence
from .train import TrainingError, train, train_baseline

log = logging.getLogger("zigcompress")

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2
MODES = ("prune", "erase", "none")


class ConsistencyError(RuntimeError):
    """A checkpoint does not match the classification it claims."""


@dataclass
class RunConfig:
    model: str = "demonet"
    mode: str = "prune"
    dataset: str = "synthetic"
    out: str = "run"
    seed: int = 0
    epochs: int | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def _parse_target(text: str):
    return float(text) if any(c in text for c in ".eE") else int(text)


def build_config(args) -> RunConfig:
    raw: dict = {}
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text())
    opt_raw = dict(raw.pop("optimizer", {}))
    names = {f.name for f in fields(OptimizerConfig)}
    unknown = set(opt_raw) - names
    if unknown:
        raise ValueError(f"unknown optimizer settings {sorted(unknown)}")
    if "betas" in opt_raw:
        opt_raw["betas"] = tuple(opt_raw["betas"])
    cfg = RunConfig(**{k: v for k, v in raw.items() if k in {"model", "mode", "dataset", "out", "seed", "epochs"}}, optimizer=OptimizerConfig(**opt_raw))
    for key in ("model", "mode", "dataset", "out", "seed", "epochs"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    cfg.__post_init__()
    opt = cfg.optimizer
    overrides = {
        "variant": getattr(args, "optimizer", None),
        "steps": getattr(args, "steps", None),
        "warmup_steps": getattr(args, "warmup", None),
        "lr": getattr(args, "lr", None),
        "batch_size": getattr(args, "batch_size", None),
        "eps_hs": getattr(args, "eps_hs", None),
    }
    for k, v in overrides.items():
        if v is not None:
            setattr(opt, k, v)
    if getattr(args, "sparsity", None) is not None:
        opt.target = _parse_target(args.sparsity)
    if "seed" not in opt_raw:
        opt.seed = cfg.seed
    return cfg


# -- models and data ------------------------------------------------------------------


FIXTURES = {
    "demonet": lambda: fixtures.demonet(),
    "demonet_small": lambda: fixtures.demonet(in_channels=1, image_size=16, width=8, classes=4),
    "demonet_mnist": lambda: fixtures.demonet(in_channels=1, image_size=28, width=16, classes=10),
    "regnet_toy": lambda: fixtures.regnet_toy(),
    "chain": lambda: fixtures.chain(),
    "twin_branch": lambda: fixtures.twin_branch(),
}


def load_any_model(spec: str, seed: int = 0) -> tuple[Graph, ParamStore]:
    """A manifest path, a fixture name, or ``random<N>`` for a seeded random graph."""
    if spec in FIXTURES or (spec.startswith("random") and spec[6:].isdigit()):
        g = FIXTURES[spec]() if spec in FIXTURES else fixtures.random_graph(int(spec[6:]))
        return g, random_params(g, np.random.default_rng(seed))
    path = Path(spec)
    if not path.exists():
        raise FileNotFoundError(f"model {spec!r} is neither a manifest file nor a known fixture ({sorted(FIXTURES)})")
    return load_model(path)


def load_dataset(spec: str, g: Graph, seed: int) -> Dataset:
    """``synthetic[:n=...,noise=...,seed=...]`` or ``idx:IMAGES,LABELS``."""
    (inp, shape), = input_shapes_of(g).items()
    out_shape = g.shape(g.outputs[0])
    if len(out_shape) != 2:
        raise DatasetError(f"training needs class logits of shape (N, classes) at {g.outputs[0]!r}, got {out_shape}")
    classes = out_shape[1]
    kind, _, rest = spec.partition(":")
    if kind == "synthetic":
        opts = dict(kv.split("=", 1) for kv in rest.split(",") if kv)
        return gen_synthetic(
            int(opts.get("classes", classes)), int(opts.get("n", 1024)), tuple(shape[1:]),
            int(opts.get("seed", seed)), noise=float(opts.get("noise", 1.0)),
        )
    if kind == "idx":
        images, labels = rest.split(",")
        ds = load_idx(images, labels, classes)
        if ds.shape != tuple(shape[1:]):
            raise DatasetError(f"dataset images are {ds.shape} but model input {inp!r} expects {tuple(shape[1:])}")
        return ds
    raise DatasetError(f"unknown dataset spec {spec!r}")


def _space(g: Graph, mode: str) -> GroupPartition:
    return pruning_space(g) if mode == "prune" else erasing_space(g)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# -- subcommands ------------------------------------------------------------------------


def cmd_analyze(cfg: RunConfig) -> dict:
    g, _ = load_any_model(cfg.model, cfg.seed)
    out = Path(cfg.out)
    mode = "prune" if cfg.mode == "none" else cfg.mode
    part = _space(g, mode)
    _write(out / "partition.json", part.to_json())
    summary = {"mode": mode, "vertices": len(g), "zigs": len(part.zig_groups), "complement": len(part.complement)}
    if mode == "prune":
        ngs = part.meta["node_groups"]
        _write(out / "pruning_dependency.dot", export_dot(g, part))
        summary["node_groups"] = len(ngs)
        summary["excluded"] = {str(ng.id): ng.exclusion_reason.value for ng in ngs if not ng.prunable}
    else:
        eg = part.meta["erasing_graph"]
        _write(out / "erasing_dependency.dot", export_dot(g, eg))
        _write(out / "segments.dot", export_segment_dot(eg))
        _write(out / "erasing_graph.json", eg.to_json())
        summary["segments"] = len(eg.segments)
        summary["erasable"] = len(eg.erasable)
    print(json.dumps(summary, sort_keys=True))
    return summary


def cmd_train(cfg: RunConfig) -> dict:
    if cfg.epochs is None:
        cfg.optimizer.validate()  # fail on a bad budget before any data is built
    g, params = load_any_model(cfg.model, cfg.seed)
    data = load_dataset(cfg.dataset, g, cfg.seed)
    train_set, test_set = data.split(0.2, cfg.seed)
    opt = cfg.optimizer
    if cfg.epochs is not None:
        opt.steps = cfg.epochs * max(1, len(train_set) // opt.batch_size)
        opt.warmup_steps = opt.warmup_steps if opt.warmup_steps is not None else max(1, math.ceil(opt.steps / 10))
    opt.validate()
    out = Path(cfg.out)
    if cfg.mode == "none":
        result = train_baseline(g, params, opt, train_set)
        part = None
    else:
        part = _space(g, cfg.mode)
        eg = part.meta.get("erasing_graph") if cfg.mode == "erase" else None
        result = train(g, params, part, opt, train_set, "h2spg" if cfg.mode == "erase" else "dhspg", eg)
    save_model(g, result.params, out / "checkpoint.json")
    _write(out / "history.csv", result.history_csv())
    acc = accuracy(predict(g, result.params, test_set.images), test_set.labels)
    info = {
        "mode": cfg.mode,
        "model": cfg.model,
        "steps": opt.steps,
        "test_accuracy": acc,
        "flags": result.flags,
        "natural_zero": result.natural_zero,
        "optimizer": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(opt).items()},
    }
    if part is not None:
        info["classification"] = result.classification.to_dict()
        info["zero_groups"] = len(part.zero_groups(result.params, [z.id for z in part.zig_groups]))
        _write(out / "partition.json", part.to_json())
    _write(out / "classification.json", json.dumps(info, indent=1, sort_keys=True) + "\n")
    for f in result.flags:
        print(f"warning: {f}", file=sys.stderr)
    print(json.dumps({k: info[k] for k in ("mode", "steps", "test_accuracy") if k in info} | ({"zero_groups": info["zero_groups"]} if part else {}), sort_keys=True))
    return info


def _check_consistency(part: GroupPartition, params: ParamStore, redundant: list[int]) -> None:
    bad = [gid for gid in redundant if not part[gid].is_zero(params)]
    if bad:
        raise ConsistencyError(f"checkpoint inconsistent with classification: redundant groups {bad} are not zero")


def cmd_compress(cfg: RunConfig, checkpoint: str | None = None) -> dict:
    out = Path(cfg.out)
    ckpt = Path(checkpoint) if checkpoint else out / "checkpoint.json"
    g, params = load_model(ckpt)
    cls_path = ckpt.parent / "classification.json"
    info = json.loads(cls_path.read_text()) if cls_path.exists() else {}
    mode = info.get("mode", cfg.mode)
    if mode == "none":
        mode = cfg.mode if cfg.mode != "none" else "prune"
    part = _space(g, mode)
    redundant = info.get("classification", {}).get("redundant", [])
    _check_consistency(part, params, redundant)
    if mode == "prune":
        sub = construct_pruned(g, params, part, redundant)
    else:
        sub = construct_erased(g, params, part, part.meta["erasing_graph"], redundant)
    eq = verify_equivalence(g, params, sub)
    save_model(sub.graph, sub.params, out / "sub" / "model.json")
    _write(out / "sub" / "provenance.json", sub.provenance_json())
    report = surgery_report(g, sub, eq)
    _write(out / "sub" / "report.txt", report)
    print(report, end="")
    return {"equivalence": eq, "report": report}


def cmd_verify(full: str, sub: str, n: int = 16, tol: float = 1e-5, seed: int = 0) -> dict:
    fg, fp = load_model(full)
    sg, sp = load_model(sub)
    res = verify_equivalence(fg, fp, Subnetwork(sg, sp, {}, []), n=n, tol=tol, seed=seed)
    print(json.dumps(res, sort_keys=True))
    return res


# -- argument parsing ---------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override it")
    p.add_argument("--model", help="manifest path or fixture name (demonet, regnet_toy, random7, ...)")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="zigcompress", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="build the search space and write partition + DOT files")
    _common(p)

    p = sub.add_parser("train", help="train with structured sparsity and write a checkpoint")
    _common(p)
    p.add_argument("--dataset", help="synthetic[:n=..,noise=..,seed=..] or idx:IMAGES,LABELS")
    p.add_argument("--sparsity", help="target: group count (int) or fraction of ZIGs (float)")
    p.add_argument("--optimizer", help="sgd, sgd_momentum, adam or adamw")
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int, help="overrides --steps with whole passes over the training split")
    p.add_argument("--warmup", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--eps-hs", type=float, dest="eps_hs")

    p = sub.add_parser("compress", help="cut the zero groups out of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint manifest (default OUT/checkpoint.json)")

    p = sub.add_parser("verify", help="compare a full checkpoint with a sub-network")
    p.add_argument("full")
    p.add_argument("sub")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            return EXIT_OK if cmd_verify(args.full, args.sub, args.n, args.tol, args.seed)["pass"] else EXIT_FAIL
        cfg = build_config(args)
        if args.command == "analyze":
            cmd_analyze(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "compress":
            res = cmd_compress(cfg, args.checkpoint)
            if not res["equivalence"]["pass"]:
                print(f"error: equivalence check failed: {res['equivalence']['reason']}", file=sys.stderr)
                return EXIT_FAIL
        return EXIT_OK
    except SurgeryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL if "invalid" in str(exc) else EXIT_ERROR
    except (GraphError, PartitionError, DatasetError, TrainingError, ConsistencyError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
