"""RMSprop and SGD with momentum over named parameter maps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

KINDS = ("rmsprop", "sgd_momentum")


@dataclass
class OptimizerState:
    kind: str
    lr: float
    rho: float = 0.9
    eps: float = 1e-8
    momentum: float = 0.5
    # RMSprop running mean square, or SGD velocity, per parameter name
    slots: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}")

    def hyper(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "rho": self.rho, "eps": self.eps,
                "momentum": self.momentum, "steps": self.steps}

    @classmethod
    def from_hyper(cls, hyper: dict, slots: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(hyper["kind"], hyper["lr"], hyper["rho"], hyper["eps"], hyper["momentum"],
                   dict(slots), hyper["steps"])


def rmsprop(lr: float = 0.001, rho: float = 0.9, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState("rmsprop", lr, rho=rho, eps=eps)


def sgd_momentum(lr: float = 0.01, momentum: float = 0.5) -> OptimizerState:
    return OptimizerState("sgd_momentum", lr, momentum=momentum)


def optimizer_step(params: dict[str, Tensor], state: OptimizerState,
                   grads: dict[str, np.ndarray] | None = None) -> None:
    """Update ``params`` in place from ``grads`` (default: each ``.grad``).

    rmsprop:       a <- rho a + (1 - rho) g^2 ;  theta <- theta - lr g / sqrt(a + eps)
    sgd_momentum:  v <- mu v - lr g          ;  theta <- theta + v
    Parameters without a gradient are left alone.
    """
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        slot = state.slots.get(name)
        if slot is None:
            slot = state.slots[name] = np.zeros_like(p.data)
        if state.kind == "rmsprop":
            slot *= state.rho
            slot += (1 - state.rho) * g * g
            p.data -= (state.lr * g / np.sqrt(slot + state.eps)).astype(p.dtype, copy=False)
        else:
            slot *= state.momentum
            slot -= state.lr * g
            p.data += slot.astype(p.dtype, copy=False)
    state.steps += 1


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
