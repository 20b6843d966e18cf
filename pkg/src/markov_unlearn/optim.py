"""AdamW with decoupled weight decay, plus an optional linear warm-up/decay schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


@dataclass
class OptimState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyper(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "weight_decay": self.weight_decay, "step": self.step}

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, hyper: dict, arrays: dict[str, np.ndarray]) -> "OptimState":
        state = cls(**hyper)
        for key, arr in arrays.items():
            kind, _, name = key.partition("/")
            if kind == "adam_m":
                state.m[name] = arr.copy()
            elif kind == "adam_v":
                state.v[name] = arr.copy()
        return state


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimState, lr: float | None = None) -> None:
    """One in-place AdamW update of every array in ``params``.

    ``lr`` overrides ``state.lr`` for this step (used by schedules).
    Weight decay multiplies parameters by ``1 - lr * weight_decay`` and never
    enters the moment estimates.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    lr = state.lr if lr is None else lr
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        denom = np.sqrt(v / bc2) + state.eps
        p -= (lr / bc1) * m / denom


def linear_schedule(step: int, total: int, base_lr: float, warmup: int = 0) -> float:
    """Linear warm-up for ``warmup`` steps, then linear decay to zero at ``total``."""
    if warmup and step < warmup:
        return base_lr * (step + 1) / warmup
    if total <= warmup:
        return base_lr
    return base_lr * max(0.0, (total - step) / (total - warmup))


def constant_schedule(step: int, total: int, base_lr: float, warmup: int = 0) -> float:
    return base_lr


def get_schedule(name: str):
    try:
        return {"constant": constant_schedule, "linear": linear_schedule}[name]
    except KeyError:
        raise ValueError(f"unknown schedule {name!r}") from None

