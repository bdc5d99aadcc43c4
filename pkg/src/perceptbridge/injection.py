"""Feature injection: first-layer prepend, inner-layer schedules, gated cross-attention.

An InjectionPlan is the contract between mapping and the LM forward
pass: it says which token sequences (or cross-attention attachments)
each LM layer receives. Plans are immutable values built per forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Variable
from .blocks import Linear, Module, MultiHeadAttention, RMSNorm, TransformerEncoderLayer


class PlanError(ValueError):
    """Raised for invalid injection windows or empty plans."""


FIRST_LAYER = "first_layer"
INNER = "inner"
CROSS_ATTN = "cross_attn"


@dataclass
class InjectionPlan:
    mode: str
    # layer -> prefix tokens [B, n_i, d_llm]; first-layer mode populates only layer 0
    prefixes: dict[int, Tensor] = field(default_factory=dict)
    # layer -> (gate index, transformed feature level) for cross-attention mode
    cross_entries: dict[int, tuple[int, int]] = field(default_factory=dict)
    cross_block: "GatedCrossAttnBlock | None" = None
    cross_feats: list[Tensor] | None = None

    def max_layer(self) -> int:
        layers = list(self.prefixes) + list(self.cross_entries)
        return max(layers) if layers else -1


def empty_plan() -> InjectionPlan:
    return InjectionPlan(mode=FIRST_LAYER)


def plan_first_layer(mapped: Tensor) -> InjectionPlan:
    """All mapped tokens prepended before layer 0, kept through the stack."""
    if mapped.shape[-2] < 1:
        raise PlanError("first-layer plan requires at least one token")
    return InjectionPlan(mode=FIRST_LAYER, prefixes={0: mapped})


def assign_levels(k: int, n_llm: int, n_left: int, total_layers: int) -> dict[int, int]:
    """Map each injection-window layer to a feature level (0-indexed, shallow first).

    The window is the n_llm consecutive layers ending n_left below the
    top. Level i occupies window positions floor(i*n/k) .. floor((i+1)*n/k)-1,
    so deeper window positions receive deeper levels.
    """
    if n_llm < 1 or n_left < 0 or n_llm + n_left > total_layers:
        raise PlanError(
            f"injection window n_llm={n_llm}, n_left={n_left} does not fit "
            f"{total_layers} LM layers"
        )
    if not 1 <= k <= n_llm:
        raise PlanError(f"level count k={k} must be in [1, n_llm={n_llm}]")
    start = total_layers - n_llm - n_left
    mapping: dict[int, int] = {}
    for i in range(k):
        lo = (i * n_llm) // k
        hi = ((i + 1) * n_llm) // k
        for j in range(lo, hi):
            mapping[start + j] = i
    return mapping


def plan_inner_layers(
    mapped_levels: list[Tensor], n_llm: int, n_left: int, total_layers: int
) -> InjectionPlan:
    """Each populated layer gets its assigned level, for that layer only."""
    assignment = assign_levels(len(mapped_levels), n_llm, n_left, total_layers)
    return InjectionPlan(
        mode=INNER,
        prefixes={layer: mapped_levels[lvl] for layer, lvl in assignment.items()},
    )


class GatedCrossAttnBlock(Module):
    """Shared cross-attention reader with one tanh gate per insertion layer.

    Features: input projection then a single transformer layer. Text:
    two-layer GELU feed-forward into the latent width plus RMSNorm, used
    as queries over the feature keys/values. The output is projected
    back to the LM width, normalized, and added through tanh(gate) with
    gates initialized to zero, so attaching the block changes nothing
    until training moves the gates.
    """

    def __init__(
        self,
        d_feats: int,
        d_embed: int,
        d_llm: int,
        n_gates: int,
        rng,
        n_heads: int = 8,
        p_drop: float = 0.1,
        attn_out_proj: bool = True,
        dtype=np.float32,
    ):
        self.p_in = Linear(d_feats, d_embed, rng, dtype=dtype)
        self.feat_layer = TransformerEncoderLayer(
            d_embed, n_heads, d_embed, p_drop, rng, dtype=dtype
        )
        self.text_in = Linear(d_llm, d_embed, rng, dtype=dtype)
        self.text_hidden = Linear(d_embed, d_embed, rng, dtype=dtype)
        self.text_norm = RMSNorm(d_embed, dtype=dtype)
        self.cross = MultiHeadAttention(d_embed, n_heads, rng, dtype=dtype, out_proj=attn_out_proj)
        self.out_proj = Linear(d_embed, d_llm, rng, dtype=dtype)
        self.out_norm = RMSNorm(d_llm, dtype=dtype)
        self.gates = Variable(np.zeros(n_gates, dtype=dtype))

    def transform_features(self, levels, train=False, rng=None) -> list[Tensor]:
        """Project each extracted level and run the shared resampler layer."""
        return [
            self.feat_layer(self.p_in(lvl), train=train, rng=rng) for lvl in levels
        ]

    def apply(self, x: Tensor, feats: Tensor, gate_idx: int, train=False, rng=None) -> Tensor:
        """x + tanh(gate) * Delta, with text queries reading the feature tokens."""
        q = self.text_norm(self.text_hidden(ad.gelu(self.text_in(x))))
        attended = self.cross(q, feats, feats)
        delta = self.out_norm(self.out_proj(attended))
        gate = ad.tanh(ad.narrow(self.gates, 0, gate_idx, 1))
        return ad.add(x, ad.mul(delta, gate))


def plan_cross_attn(
    block: GatedCrossAttnBlock,
    levels,
    n_llm: int,
    n_left: int,
    total_layers: int,
    train: bool = False,
    rng=None,
) -> InjectionPlan:
    """Attach the shared block across the injection window, one gate per layer."""
    assignment = assign_levels(len(levels), n_llm, n_left, total_layers)
    start = total_layers - n_llm - n_left
    entries = {layer: (layer - start, lvl) for layer, lvl in assignment.items()}
    feats = block.transform_features(levels, train=train, rng=rng)
    return InjectionPlan(
        mode=CROSS_ATTN, cross_entries=entries, cross_block=block, cross_feats=feats
    )
