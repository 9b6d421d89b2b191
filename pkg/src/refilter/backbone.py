"""Toy decoder-only transformer exposing per-layer states and injection hooks.

The model is a standard pre-LN causal transformer. After each block's
output is computed, any hook targeting that layer may rewrite the hidden
vectors at chosen (batch, position) coordinates; recorded layers capture
the post-hook states. With no hooks the forward pass is bitwise identical
to the plain model.

Layer indices are 1-based throughout (1..L), matching the fusion config.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError
from .numerics import (
    Parameter,
    Tensor,
    embedding,
    gather_positions,
    gelu,
    layer_norm,
    matmul,
    no_grad,
    reshape,
    scatter_positions,
    softmax,
    transpose,
)
from .seeding import make_rng

ATTN_MASK_VALUE = -1e9


@dataclass
class BackboneConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    max_positions: int = 128
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")


@dataclass
class InjectionHook:
    """Rewrite hidden vectors at (b, positions[b, m]) after each target layer.

    ``callback(rows, layer)`` receives the gathered vectors with shape
    (B, M, d_model) and must return the same shape.
    """

    layers: tuple[int, ...]
    positions: np.ndarray  # (B, M), unique within each row
    callback: Callable[[Tensor, int], Tensor]


@dataclass
class HiddenStates:
    """Recorded post-hook activations, shape (B, P, L_sel, d_model)."""

    states: np.ndarray
    layers: tuple[int, ...]

    def decision_state(self, b: int, layer: int, pos: int) -> np.ndarray:
        """Copy of the hidden vector at (b, pos, layer)."""
        if layer not in self.layers:
            raise IndexError(f"layer {layer} was not recorded ({self.layers})")
        li = self.layers.index(layer)
        B, P = self.states.shape[:2]
        if not (0 <= b < B and 0 <= pos < P):
            raise IndexError(f"coordinates (b={b}, pos={pos}) out of range ({B}, {P})")
        return self.states[b, pos, li, :].copy()


class Backbone:
    """Decoder-only LM over the shared autodiff substrate."""

    def __init__(self, config: BackboneConfig, seed: int = 0, prefix: str = "backbone"):
        self.config = config
        self.prefix = prefix
        self.params: dict[str, Parameter] = {}
        rng = make_rng("backbone-init", seed)
        d, ff = config.d_model, config.d_ff

        def param(name: str, shape: tuple[int, ...], std: float = 0.02) -> Parameter:
            data = rng.normal(0.0, std, size=shape) if std else np.zeros(shape)
            p = Parameter(f"{prefix}.{name}", Tensor(data, requires_grad=True))
            self.params[p.name] = p
            return p

        self.tok_emb = param("tok_emb", (config.vocab_size, d))
        self.pos_emb = param("pos_emb", (config.max_positions, d))
        self.blocks = []
        for i in range(config.n_layers):
            blk = {
                "ln1_g": param(f"blocks.{i}.ln1_g", (d,), std=0.0),
                "ln1_b": param(f"blocks.{i}.ln1_b", (d,), std=0.0),
                "wq": param(f"blocks.{i}.wq", (d, d)),
                "wk": param(f"blocks.{i}.wk", (d, d)),
                "wv": param(f"blocks.{i}.wv", (d, d)),
                "wo": param(f"blocks.{i}.wo", (d, d)),
                "ln2_g": param(f"blocks.{i}.ln2_g", (d,), std=0.0),
                "ln2_b": param(f"blocks.{i}.ln2_b", (d,), std=0.0),
                "w1": param(f"blocks.{i}.w1", (d, ff)),
                "b1": param(f"blocks.{i}.b1", (ff,), std=0.0),
                "w2": param(f"blocks.{i}.w2", (ff, d)),
                "b2": param(f"blocks.{i}.b2", (d,), std=0.0),
            }
            blk["ln1_g"].data[...] = 1.0
            blk["ln2_g"].data[...] = 1.0
            self.blocks.append(blk)
        self.lnf_g = param("lnf_g", (d,), std=0.0)
        self.lnf_b = param("lnf_b", (d,), std=0.0)
        self.lnf_g.data[...] = 1.0
        self.lm_head = param("lm_head", (d, config.vocab_size))

    # -- forward ---------------------------------------------------------

    def _attention(self, x: Tensor, blk: dict, mask: np.ndarray) -> Tensor:
        B, P, d = x.shape
        H = self.config.n_heads
        hd = d // H
        q = matmul(x, blk["wq"].tensor)
        k = matmul(x, blk["wk"].tensor)
        v = matmul(x, blk["wv"].tensor)
        # (B, P, d) -> (B, H, P, hd)
        q = transpose(reshape(q, (B, P, H, hd)), (0, 2, 1, 3))
        k = transpose(reshape(k, (B, P, H, hd)), (0, 2, 1, 3))
        v = transpose(reshape(v, (B, P, H, hd)), (0, 2, 1, 3))
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(hd))
        scores = scores + Tensor(mask)
        attn = softmax(scores, axis=-1)
        ctx = matmul(attn, v)  # (B, H, P, hd)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, P, d))
        return matmul(ctx, blk["wo"].tensor)

    def trunk(
        self,
        tokens: np.ndarray,
        hooks: Sequence[InjectionHook] = (),
        record_layers: Sequence[int] = (),
    ) -> tuple[Tensor, HiddenStates | None]:
        """All blocks (with hooks applied); returns the pre-head residual
        stream (B, P, d) and any recorded states."""
        tokens = np.asarray(tokens, dtype=np.intp)
        if tokens.ndim != 2:
            raise DimensionError(f"tokens must be (B, P), got {tokens.shape}")
        B, P = tokens.shape
        if P > self.config.max_positions:
            raise DimensionError(
                f"sequence length {P} exceeds max_positions {self.config.max_positions}"
            )
        record = tuple(sorted(set(record_layers)))
        for layer in record:
            if not 1 <= layer <= self.config.n_layers:
                raise IndexError(f"record layer {layer} outside 1..{self.config.n_layers}")

        x = embedding(self.tok_emb.tensor, tokens) + embedding(
            self.pos_emb.tensor, np.arange(P)
        )
        # Upper-triangular additive mask: position t only sees <= t.
        mask = np.triu(np.full((P, P), ATTN_MASK_VALUE), k=1)[None, None, :, :]
        recorded: list[np.ndarray] = []
        for i, blk in enumerate(self.blocks):
            layer = i + 1
            a = layer_norm(x, blk["ln1_g"].tensor, blk["ln1_b"].tensor)
            x = x + self._attention(a, blk, mask)
            h = layer_norm(x, blk["ln2_g"].tensor, blk["ln2_b"].tensor)
            h = matmul(h, blk["w1"].tensor) + blk["b1"].tensor
            x = x + (matmul(gelu(h), blk["w2"].tensor) + blk["b2"].tensor)
            for hook in hooks:
                if layer in hook.layers:
                    rows = gather_positions(x, hook.positions)
                    new_rows = hook.callback(rows, layer)
                    x = scatter_positions(x, hook.positions, new_rows)
            if layer in record:
                recorded.append(x.data.copy())
        hidden = None
        if record:
            hidden = HiddenStates(states=np.stack(recorded, axis=2), layers=record)
        return x, hidden

    def head(self, x: Tensor) -> Tensor:
        """Final layer norm + LM head over the trailing feature axis.

        Both operate per position, so the head may be applied to a sliced
        subset of positions with identical results.
        """
        return matmul(
            layer_norm(x, self.lnf_g.tensor, self.lnf_b.tensor), self.lm_head.tensor
        )

    def forward(
        self,
        tokens: np.ndarray,
        hooks: Sequence[InjectionHook] = (),
        record_layers: Sequence[int] = (),
    ) -> tuple[Tensor, HiddenStates | None]:
        """Causal forward pass; returns logits (B, P, V) and recorded states."""
        x, hidden = self.trunk(tokens, hooks=hooks, record_layers=record_layers)
        return self.head(x), hidden

    # -- generation --------------------------------------------------------

    def generate(
        self,
        prompt: np.ndarray,
        max_new: int,
        eos_id: int | None = None,
        hook_factory: Callable[[int, int], Sequence[InjectionHook]] | None = None,
    ) -> list[list[int]]:
        """Greedy decoding; recomputes the prefix each step (no KV cache).

        ``hook_factory(seq_len, step)`` supplies the hooks for each step so
        injection positions can advance with generation. Returns the newly
        generated ids per batch row, truncated at eos.
        """
        prompt = np.asarray(prompt, dtype=np.intp)
        if prompt.ndim != 2 or prompt.shape[1] < 1:
            raise DimensionError(f"prompt must be (B, P>=1), got {prompt.shape}")
        B = prompt.shape[0]
        seq = prompt
        out: list[list[int]] = [[] for _ in range(B)]
        finished = np.zeros(B, dtype=bool)
        with no_grad():
            for step in range(max_new):
                hooks = hook_factory(seq.shape[1], step) if hook_factory else ()
                x, _ = self.trunk(seq, hooks=hooks)
                logits = self.head(x[:, -1:, :])  # head is per-position
                nxt = logits.data[:, -1, :].argmax(axis=-1)
                for b in range(B):
                    if not finished[b]:
                        out[b].append(int(nxt[b]))
                        if eos_id is not None and nxt[b] == eos_id:
                            finished[b] = True
                if finished.all():
                    break
                seq = np.concatenate([seq, nxt[:, None]], axis=1)
        if eos_id is not None:
            out = [
                row[: row.index(eos_id) + 1] if eos_id in row else row for row in out
            ]
        return out
