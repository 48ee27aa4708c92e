"""First-order update rules over a flat float32 variable vector."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VARIANTS = ("sgd", "sgd_momentum", "adam", "adamw")
_ALIASES = {"sgd+momentum": "sgd_momentum", "momentum": "sgd_momentum"}


def canonical_variant(name: str) -> str:
    key = name.lower()
    key = _ALIASES.get(key, key)
    if key not in VARIANTS:
        raise ValueError(f"unknown optimizer variant {name!r}; choose from {VARIANTS}")
    return key


@dataclass
class Variant:
    """Stateful update rule; ``step`` returns the trial iterate without mutating ``x``."""

    name: str = "sgd"
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.name = canonical_variant(self.name)

    def step(self, x: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        lr = np.float32(lr)
        self.t += 1
        if self.name in ("sgd", "sgd_momentum", "adam") and self.weight_decay:
            grad = grad + np.float32(self.weight_decay) * x
        if self.name == "sgd":
            return x - lr * grad
        if self.name == "sgd_momentum":
            buf = self.buffers.get("v")
            buf = grad.copy() if buf is None else np.float32(self.momentum) * buf + grad
            self.buffers["v"] = buf
            return x - lr * buf
        b1, b2 = (np.float32(b) for b in self.betas)
        m = self.buffers.get("m", np.zeros_like(x))
        v = self.buffers.get("v", np.zeros_like(x))
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        self.buffers["m"], self.buffers["v"] = m, v
        mhat = m / (1 - b1**self.t)
        vhat = v / (1 - b2**self.t)
        out = x - lr * mhat / (np.sqrt(vhat) + np.float32(self.eps))
        if self.name == "adamw" and self.weight_decay:
            out = out - lr * np.float32(self.weight_decay) * x
        return out.astype(np.float32)


def lr_at(step: int, base: float, schedule: str = "constant", total: int = 1, gamma: float = 0.1, every: int = 0) -> float:
    """Learning rate at ``step`` (0-based) under a named decay schedule."""
    if schedule == "constant":
        return base
    if schedule == "step":
        if every <= 0:
            raise ValueError("step schedule needs a positive decay period")
        return base * gamma ** (step // every)
    if schedule == "cosine":
        return 0.5 * base * (1.0 + np.cos(np.pi * min(step, total) / max(total, 1)))
    if schedule == "linear":
        return base * max(0.0, 1.0 - step / max(total, 1))
    raise ValueError(f"unknown learning-rate schedule {schedule!r}")
