"""Evidence aggregation and hidden-state injection; the combined model.

Per fusion layer, the weighted token features are dropped out, summed
over the pool axis, and layer-normalized into one evidence vector r_b,
which is added to the hidden state at the decision position scaled by a
learnable alpha. The pool-axis sum is computed with a value-sorted
reduction, so with a uniform position mask and dropout disabled the
result is exactly invariant under any permutation of the pool slots.

With no pool supplied the model installs no hooks at all and the forward
pass is bitwise identical to the plain backbone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .backbone import Backbone, HiddenStates, InjectionHook
from .context_encoder import ContextEmbeddings, ContextEncoder, Projector
from .errors import ConfigError, DimensionError
from .gated_filter import (
    GateParams,
    PositionMask,
    TokenWeights,
    apply_mask,
    dynamic_gate_multi,
    gate_sparsity_loss,
    weight_features,
)
from .numerics import (
    Parameter,
    Tensor,
    dropout,
    layer_norm,
    mean_tensor,
    sorted_sum,
)
from .seeding import derive_seed, make_rng

ALPHA_INIT = 0.1


def resolve_fusion_layers(depth: int | Sequence[int], n_layers: int) -> tuple[int, ...]:
    """Either the last ``depth`` layers or an explicit 1-based layer set."""
    if isinstance(depth, int):
        if not 1 <= depth <= n_layers:
            raise ConfigError(f"fusion depth {depth} outside 1..{n_layers}")
        return tuple(range(n_layers - depth + 1, n_layers + 1))
    layers = tuple(sorted(set(int(x) for x in depth)))
    if not layers or layers[0] < 1 or layers[-1] > n_layers:
        raise ConfigError(f"fusion layers {layers} outside 1..{n_layers}")
    return layers


@dataclass
class FusionConfig:
    fusion_layers: tuple[int, ...]
    k: int = 3
    s: int = 16
    lambda_gate: float = 0.01
    dropout_p: float = 0.1
    recompute_each_step: bool = True  # False = freeze r_b after prefill

    def __post_init__(self):
        if self.lambda_gate < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lambda_gate}")


class FusionParams:
    """alpha plus aggregation layer-norm affine for one fusion layer."""

    def __init__(self, d_m: int, prefix: str):
        self.alpha = Parameter(
            f"{prefix}.alpha", Tensor(np.asarray(ALPHA_INIT), requires_grad=True)
        )
        self.ln_g = Parameter(f"{prefix}.ln_g", Tensor(np.ones(d_m), requires_grad=True))
        self.ln_b = Parameter(f"{prefix}.ln_b", Tensor(np.zeros(d_m), requires_grad=True))
        self.params = {p.name: p for p in (self.alpha, self.ln_g, self.ln_b)}


def aggregate(
    c_hat: Tensor, fp: FusionParams, training: bool, seed: int, dropout_p: float
) -> Tensor:
    """Dropout -> permutation-invariant sum over the pool axis -> LayerNorm.

    c_hat has shape (..., N, d_m); the result drops the N axis.
    """
    x = dropout(c_hat, dropout_p, training, seed)
    summed = sorted_sum(x, axis=-2)
    return layer_norm(summed, fp.ln_g.tensor, fp.ln_b.tensor)


def inject(rows: Tensor, r: Tensor, alpha: Tensor) -> Tensor:
    """Additive residual update: rows + alpha * r."""
    return rows + alpha * r


@dataclass
class FusionDiagnostics:
    """Graph handles and numpy copies collected during one fused forward."""

    gate_nodes: list[Tensor] = field(default_factory=list)  # (B, M, N) per layer
    weights: dict[int, TokenWeights] = field(default_factory=dict)
    r_norm: dict[int, float] = field(default_factory=dict)
    alpha: dict[int, float] = field(default_factory=dict)
    positions: np.ndarray | None = None

    def sparsity_loss(self) -> Tensor:
        """Mean over every gate computed in the pass (layers weighted equally)."""
        total = gate_sparsity_loss(self.gate_nodes[0])
        for g in self.gate_nodes[1:]:
            total = total + gate_sparsity_loss(g)
        return total * (1.0 / len(self.gate_nodes))

    def mean_gate(self) -> float:
        return float(np.mean([g.data.mean() for g in self.gate_nodes]))


class ReFilterModel:
    """Backbone + encoder + projector + per-layer gate/mask/fusion params."""

    def __init__(
        self,
        backbone: Backbone,
        encoder: ContextEncoder,
        projector: Projector,
        config: FusionConfig,
        seed: int = 0,
    ):
        self.backbone = backbone
        self.encoder = encoder
        self.projector = projector
        self.config = config
        d_m = backbone.config.d_model
        n_slots = config.k * config.s
        self.gates: dict[int, GateParams] = {}
        self.masks: dict[int, PositionMask] = {}
        self.fusions: dict[int, FusionParams] = {}
        for layer in config.fusion_layers:
            self.gates[layer] = GateParams(d_m, seed=seed, prefix=f"filter.layer{layer}")
            self.masks[layer] = PositionMask(n_slots, prefix=f"filter.layer{layer}")
            self.fusions[layer] = FusionParams(d_m, prefix=f"fusion.layer{layer}")
        self.params: dict[str, Parameter] = {}
        for source in (
            backbone.params,
            encoder.params,
            projector.params,
            *(g.params for g in self.gates.values()),
            *(m.params for m in self.masks.values()),
            *(f.params for f in self.fusions.values()),
        ):
            for name, p in source.items():
                if name in self.params:
                    raise ConfigError(f"duplicate parameter name '{name}'")
                self.params[name] = p

    # -- hook construction -------------------------------------------------

    def _make_hook(
        self,
        pool: ContextEmbeddings,
        positions: np.ndarray,
        training: bool,
        seed: int,
        diagnostics: FusionDiagnostics | None,
        fixed_r: dict[int, np.ndarray] | None = None,
    ) -> InjectionHook:
        n = pool.tensor.shape[1]

        def callback(rows: Tensor, layer: int) -> Tensor:
            fp = self.fusions[layer]
            if fixed_r is not None:
                r = Tensor(np.broadcast_to(fixed_r[layer][:, None, :], rows.shape))
                return inject(rows, r, fp.alpha.tensor)
            gamma = dynamic_gate_multi(pool.tensor, rows, self.gates[layer])
            mu = self.masks[layer].for_pool(n)
            w_t = apply_mask(gamma, mu)
            c_hat = weight_features(pool.tensor, w_t)  # (B, M, N, d)
            r = aggregate(
                c_hat,
                fp,
                training,
                derive_seed(seed, "fusion-dropout", layer),
                self.config.dropout_p,
            )
            if diagnostics is not None:
                diagnostics.gate_nodes.append(gamma)
                # Diagnostic copies use the first decision position (prefill).
                diagnostics.weights[layer] = TokenWeights(
                    gamma=gamma.data[:, 0, :].copy(),
                    mu=mu.data.copy(),
                    w_t=w_t.data[:, 0, :].copy(),
                )
                diagnostics.r_norm[layer] = float(
                    np.linalg.norm(r.data[:, 0, :], axis=-1).mean()
                )
                diagnostics.alpha[layer] = float(fp.alpha.data)
            return inject(rows, r, fp.alpha.tensor)

        return InjectionHook(
            layers=tuple(self.config.fusion_layers),
            positions=np.asarray(positions, dtype=np.intp),
            callback=callback,
        )

    # -- forward / generation ----------------------------------------------

    def fused_forward(
        self,
        tokens: np.ndarray,
        pool: ContextEmbeddings | None,
        positions: np.ndarray | None,
        training: bool = False,
        seed: int = 0,
        record_layers: Sequence[int] = (),
        logits_positions: np.ndarray | None = None,
    ) -> tuple[Tensor, HiddenStates | None, FusionDiagnostics | None]:
        """Backbone forward with the fusion hook wired at every fusion layer.

        ``positions`` (B, M) are the decision/injection positions. With no
        pool the hook is skipped entirely (bypass). When
        ``logits_positions`` is given, logits are computed only at those
        positions (the head is per-position, so values are unchanged).
        """
        from .numerics import gather_positions

        hooks: tuple[InjectionHook, ...] = ()
        diagnostics: FusionDiagnostics | None = None
        if pool is not None:
            if positions is None:
                raise DimensionError("positions are required when a pool is supplied")
            if pool.tensor.shape[1] != pool.k * pool.s:
                raise DimensionError(
                    f"pool has {pool.tensor.shape[1]} slots, expected k*s = "
                    f"{pool.k * pool.s}"
                )
            diagnostics = FusionDiagnostics(positions=np.asarray(positions))
            hooks = (self._make_hook(pool, positions, training, seed, diagnostics),)
        x, hidden = self.backbone.trunk(tokens, hooks=hooks, record_layers=record_layers)
        if logits_positions is not None:
            x = gather_positions(x, np.asarray(logits_positions, dtype=np.intp))
        logits = self.backbone.head(x)
        return logits, hidden, diagnostics

    def generate(
        self,
        prompt: np.ndarray,
        pool: ContextEmbeddings | None,
        max_new: int,
        eos_id: int | None = None,
        collect: FusionDiagnostics | None = None,
        seed: int = 0,
    ) -> list[list[int]]:
        """Greedy decoding with hooks re-fired each step.

        In recompute mode the injection set grows with generation (every
        answer position gets its own decision state, as in training). In
        freeze mode the prefill r_b is reused for all steps.
        """
        prompt = np.asarray(prompt, dtype=np.intp)
        if pool is None:
            return self.backbone.generate(prompt, max_new, eos_id=eos_id)
        B, p0 = prompt.shape
        start = p0 - 1
        fixed_r: dict[int, np.ndarray] | None = None
        if not self.config.recompute_each_step:
            # One prefill pass to capture r_b per fusion layer.
            captured: dict[int, np.ndarray] = {}
            diag = FusionDiagnostics()
            pos = np.full((B, 1), start, dtype=np.intp)
            hook = self._make_hook(pool, pos, False, seed, diag)

            def capturing(rows: Tensor, layer: int) -> Tensor:
                fp = self.fusions[layer]
                gamma = dynamic_gate_multi(pool.tensor, rows, self.gates[layer])
                mu = self.masks[layer].for_pool(pool.tensor.shape[1])
                w_t = apply_mask(gamma, mu)
                c_hat = weight_features(pool.tensor, w_t)
                r = aggregate(c_hat, fp, False, seed, self.config.dropout_p)
                captured[layer] = r.data[:, 0, :].copy()
                return inject(rows, r, fp.alpha.tensor)

            hook.callback = capturing
            self.backbone.forward(prompt, hooks=(hook,))
            fixed_r = captured

        def factory(seq_len: int, step: int) -> Sequence[InjectionHook]:
            positions = np.broadcast_to(
                np.arange(start, seq_len), (B, seq_len - start)
            )
            first = collect if (collect is not None and step == 0) else None
            return (
                self._make_hook(pool, positions, False, seed, first, fixed_r=fixed_r),
            )

        return self.backbone.generate(
            prompt, max_new, eos_id=eos_id, hook_factory=factory
        )
