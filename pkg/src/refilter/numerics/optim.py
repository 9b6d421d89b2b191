"""Parameters and the AdamW optimizer with linear warmup.

The schedule is lr(t) = base_lr * min(1, t / warmup_steps) with
warmup_steps = warmup_frac * total_steps; after warmup the rate is
constant. Non-trainable parameters are never touched, not even by weight
decay.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingError
from .tensor import Tensor


@dataclass
class Parameter:
    """A named tensor; ``trainable=False`` means the optimizer skips it."""

    name: str
    tensor: Tensor
    trainable: bool = True

    def __post_init__(self):
        self.tensor.requires_grad = True

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data


def set_trainable(params: dict[str, Parameter], prefixes: tuple[str, ...], flag: bool) -> None:
    """Flip trainability (and graph recording) for params under any prefix."""
    for p in params.values():
        if any(p.name.startswith(pre) for pre in prefixes):
            p.trainable = flag
            p.tensor.requires_grad = flag


def zero_grads(params: dict[str, Parameter]) -> None:
    for p in params.values():
        p.tensor.zero_grad()


def clip_grad_norm(params: dict[str, Parameter], max_norm: float) -> float:
    """Scale all trainable gradients so their global L2 norm <= max_norm."""
    total = 0.0
    grads = []
    for p in params.values():
        if p.trainable and p.tensor.grad is not None:
            grads.append(p.tensor.grad)
            total += float((p.tensor.grad**2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


class AdamW:
    """AdamW with decoupled weight decay and linear warmup.

    State (first/second moments, step count) is exposed via
    ``state_dict``/``load_state_dict`` so checkpoints can resume exactly.
    """

    def __init__(
        self,
        params: dict[str, Parameter],
        lr: float,
        total_steps: int,
        warmup_frac: float = 0.05,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        decay_overrides: dict[str, tuple[float, float]] | None = None,
    ):
        self.params = params
        self.lr = lr
        self.total_steps = total_steps
        self.warmup_frac = warmup_frac
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        # name -> (rate, target): decoupled decay pulls the parameter toward
        # ``target`` instead of zero (used for multipliers initialized at 1).
        self.decay_overrides = dict(decay_overrides or {})
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        for name, p in params.items():
            if p.trainable:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def lr_at(self, step: int) -> float:
        """Effective rate at 1-based step ``step``."""
        warmup_steps = max(1.0, self.warmup_frac * self.total_steps)
        return self.lr * min(1.0, step / warmup_steps)

    def step(self) -> float:
        """Apply one update; returns the learning rate used."""
        self.step_count += 1
        t = self.step_count
        lr_t = self.lr_at(t)
        for name, p in self.params.items():
            if not p.trainable:
                continue
            g = p.tensor.grad
            if g is None:
                raise TrainingError(f"trainable parameter '{name}' has no gradient")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            arr = p.tensor.data
            rate, target = self.decay_overrides.get(name, (self.weight_decay, 0.0))
            if rate:
                arr -= lr_t * rate * (arr - target)
            arr -= lr_t * m_hat / (np.sqrt(v_hat) + self.eps)
        return lr_t

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "lr": self.lr,
            "total_steps": self.total_steps,
            "warmup_frac": self.warmup_frac,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        self.lr = float(state["lr"])
        self.total_steps = int(state["total_steps"])
        self.warmup_frac = float(state["warmup_frac"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.eps = float(state["eps"])
        self.weight_decay = float(state["weight_decay"])
        for k in self.m:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]
