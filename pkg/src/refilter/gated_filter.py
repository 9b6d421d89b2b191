"""Per-token importance: dynamic gates, learnable position mask, token weights.

The gate score for pool slot j of query b is sigmoid(w_g . [C_bj ; h_b] + a_g).
Internally the dot product is split into its two halves
(C_bj . w_c + h_b . w_h), which is the same sum in a different
association order. Weights W_t = mu * gamma are deliberately not
normalized: independent gating lets many evidence tokens contribute at
once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError
from .numerics import (
    Parameter,
    Tensor,
    concat,
    matmul,
    mean_tensor,
    reshape,
    sigmoid,
)
from .seeding import make_rng


GATE_BIAS_INIT = -2.0


class GateParams:
    """Learnable scorer (w_g, a_g) for one fusion layer.

    The bias starts negative so every gate opens from a low value: tokens
    earn weight only when they reduce the answer loss, and unexamined
    background tokens stay quiet instead of sitting at 0.5.
    """

    def __init__(self, d_m: int, seed: int = 0, prefix: str = "filter",
                 bias_init: float = GATE_BIAS_INIT):
        rng = make_rng("gate-init", seed, prefix)
        self.d_m = d_m
        self.w_g = Parameter(
            f"{prefix}.w_g",
            Tensor(rng.normal(0.0, 0.02, size=(2 * d_m,)), requires_grad=True),
        )
        self.a_g = Parameter(
            f"{prefix}.a_g", Tensor(np.asarray(bias_init), requires_grad=True)
        )
        self.params = {self.w_g.name: self.w_g, self.a_g.name: self.a_g}


class PositionMask:
    """Per-slot multiplier shared across queries, initialized to ones."""

    def __init__(self, n_slots: int, prefix: str = "filter"):
        self.n_slots = n_slots
        self.mu = Parameter(
            f"{prefix}.mu", Tensor(np.ones(n_slots), requires_grad=True)
        )
        self.params = {self.mu.name: self.mu}

    def for_pool(self, n: int) -> Tensor:
        """Mask view sized for an n-slot pool.

        Pools built with a larger k than the mask was trained for extend
        with the initialization value (ones); smaller pools use a prefix.
        """
        if n == self.n_slots:
            return self.mu.tensor
        if n < self.n_slots:
            return self.mu.tensor[:n]
        return concat([self.mu.tensor, Tensor(np.ones(n - self.n_slots))], axis=0)


@dataclass
class TokenWeights:
    """Diagnostic copies of one forward pass's gate state (numpy values)."""

    gamma: np.ndarray  # (B, N) dynamic gates, strictly inside (0, 1)
    mu: np.ndarray  # (N,) position mask values
    w_t: np.ndarray  # (B, N) mu * gamma exactly


def _gate_scores(C: Tensor, h: Tensor, gate: GateParams) -> Tensor:
    """Affine gate scores; h may be (B, d) or (B, M, d)."""
    d = gate.d_m
    if C.shape[-1] != d or h.shape[-1] != d:
        raise DimensionError(
            f"gate dimension {d} does not match C {C.shape} / h {h.shape}"
        )
    w_c = reshape(gate.w_g.tensor[:d], (d, 1))
    w_h = reshape(gate.w_g.tensor[d:], (d, 1))
    s_c = reshape(matmul(C, w_c), C.shape[:-1])  # (B, N)
    s_h = reshape(matmul(h, w_h), h.shape[:-1])  # (B,) leading shape of h
    if h.ndim == 2:
        s_h = reshape(s_h, (h.shape[0], 1))  # (B, 1) broadcasts over N
    elif h.ndim == 3:
        s_c = reshape(s_c, (C.shape[0], 1, C.shape[1]))  # (B, 1, N)
        s_h = reshape(s_h, (h.shape[0], h.shape[1], 1))  # (B, M, 1)
    else:
        raise DimensionError(f"decision state must be 2-d or 3-d, got {h.shape}")
    return s_c + s_h + gate.a_g.tensor


def dynamic_gate(C: Tensor, h: Tensor, gate: GateParams) -> Tensor:
    """gamma[b, j] = sigmoid(w_g . [C_bj ; h_b] + a_g), shape (B, N)."""
    return sigmoid(_gate_scores(C, h, gate))


def dynamic_gate_multi(C: Tensor, h: Tensor, gate: GateParams) -> Tensor:
    """Gates for several decision states per query: h (B, M, d) -> (B, M, N)."""
    return sigmoid(_gate_scores(C, h, gate))


def apply_mask(gamma: Tensor, mu: Tensor) -> Tensor:
    """W_t = mu * gamma, broadcasting mu (N,) over the leading axes."""
    if gamma.shape[-1] != mu.shape[-1]:
        raise DimensionError(
            f"mask length {mu.shape[-1]} does not match gates {gamma.shape}"
        )
    return gamma * mu


def weight_features(C: Tensor, w_t: Tensor) -> Tensor:
    """Scale each token vector by its scalar weight (broadcast over d_m).

    C is (B, N, d); w_t is (B, N) or (B, M, N), giving (B, N, d) or
    (B, M, N, d).
    """
    if w_t.ndim == 2:
        if w_t.shape != C.shape[:2]:
            raise DimensionError(f"weights {w_t.shape} do not match pool {C.shape}")
        return C * reshape(w_t, (*w_t.shape, 1))
    if w_t.ndim == 3:
        B, M, N = w_t.shape
        if (B, N) != C.shape[:2]:
            raise DimensionError(f"weights {w_t.shape} do not match pool {C.shape}")
        Ce = reshape(C, (B, 1, N, C.shape[2]))
        return Ce * reshape(w_t, (B, M, N, 1))
    raise DimensionError(f"weights must be 2-d or 3-d, got {w_t.shape}")


def gate_sparsity_loss(gamma: Tensor) -> Tensor:
    """Arithmetic mean of every gate; its gradient is uniformly positive."""
    return mean_tensor(gamma)


# -- weight-dump format --------------------------------------------------------
#
# One JSON record per pool slot:
#   {"slot", "chunk_id", "offset", "token", "gamma", "mu", "weight",
#    "is_pad", "is_noise"}  plus any extra marker fields the caller adds.


def write_weight_dump(path: str | Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_weight_dump(path: str | Path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records
