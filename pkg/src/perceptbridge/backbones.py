"""Toy frozen backbones: a ViT-style patch encoder and a causal LM.

Desk-scale stand-ins for the pretrained models the real adapters sit
between. They expose the same extraction/injection hooks: the encoder
returns every layer's token sequence so the last n_fl levels can be
extracted, and the LM forward accepts an InjectionPlan that prepends
(or cross-attends) perceptual tokens at the planned layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Variable
from .blocks import (
    CausalDecoderLayer,
    ConfigError,
    Linear,
    Module,
    RMSNorm,
    TransformerEncoderLayer,
    build_causal_mask,
)
from .injection import CROSS_ATTN, INNER, InjectionPlan, PlanError

BOS_ID = 0
EOS_ID = 1

CLS_MODES = ("cls", "mean", "all")


@dataclass
class FeatureStack:
    """Extracted perceptual tokens: n_fl levels, shallow to deep."""

    levels: list[Tensor]  # each [B, n_tok(+1), d_feats]; CLS first when present
    cls_only: bool
    grid_shape: tuple[int, ...]

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def tokens_per_level(self) -> int:
        return self.levels[0].shape[-2]


class ToyEncoder(Module):
    """Patch-embedding transformer encoder with a CLS token."""

    def __init__(self, d_patch, d_feats, grid, n_layers, n_heads, rng, dtype=np.float32):
        self.d_patch = d_patch
        self.d_feats = d_feats
        self.grid = grid
        self.patch_embed = Linear(d_patch, d_feats, rng, dtype=dtype)
        self.cls = Variable((rng.standard_normal(d_feats) * 0.02).astype(dtype))
        self.pos = Variable(
            (rng.standard_normal((1 + grid * grid, d_feats)) * 0.02).astype(dtype)
        )
        self.layers = [
            TransformerEncoderLayer(d_feats, n_heads, 4 * d_feats, 0.0, rng, dtype=dtype)
            for _ in range(n_layers)
        ]

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def forward(self, grids) -> list[Tensor]:
        """Return every layer's output, each [B, 1 + g*g, d_feats], CLS first."""
        grids = np.asarray(grids)
        b, g = grids.shape[0], self.grid
        if grids.shape[1:] != (g, g, self.d_patch):
            raise ConfigError(
                f"expected patch grid [B, {g}, {g}, {self.d_patch}], got {grids.shape}"
            )
        patches = self.patch_embed(Tensor(grids.reshape(b, g * g, self.d_patch)))
        cls = ad.reshape(self.cls, (1, 1, self.d_feats))
        cls = ad.add(cls, Tensor(np.zeros((b, 1, self.d_feats), dtype=grids.dtype)))
        x = ad.add(ad.concat([cls, patches], axis=1), self.pos)
        outputs = []
        for layer in self.layers:
            x = layer(x)
            outputs.append(x)
        return outputs


def extract_features(encoder: ToyEncoder, grids, n_fl: int, cls_mode: str) -> FeatureStack:
    """Outputs of the last n_fl encoder layers, filtered by token choice.

    cls_mode "cls" keeps only the CLS token per level, "mean" replaces it
    with the mean of the patch tokens, "all" keeps CLS plus patches.
    """
    if not 1 <= n_fl <= encoder.n_layers:
        raise ConfigError(
            f"n_fl={n_fl} outside [1, {encoder.n_layers}] encoder layers"
        )
    if cls_mode not in CLS_MODES:
        raise ConfigError(f"cls_mode must be one of {CLS_MODES}, got {cls_mode!r}")
    outputs = encoder.forward(grids)[-n_fl:]
    if cls_mode == "cls":
        levels = [ad.narrow(lvl, 1, 0, 1) for lvl in outputs]
    elif cls_mode == "mean":
        levels = [
            ad.reduce_mean(ad.narrow(lvl, 1, 1, lvl.shape[1] - 1), axis=1, keepdims=True)
            for lvl in outputs
        ]
    else:
        levels = outputs
    return FeatureStack(
        levels=levels,
        cls_only=cls_mode != "all",
        grid_shape=(encoder.grid, encoder.grid),
    )


class ToyCausalLM(Module):
    """Decoder-only LM: tied embedding head, learned positions, RMSNorm stack."""

    def __init__(self, vocab, d_model, n_layers, n_heads, max_len, rng, dtype=np.float32):
        self.vocab = vocab
        self.d_model = d_model
        self.max_len = max_len
        self.tok_emb = Variable((rng.standard_normal((vocab, d_model)) * 0.02).astype(dtype))
        self.pos_emb = Variable((rng.standard_normal((max_len, d_model)) * 0.02).astype(dtype))
        self.layers = [CausalDecoderLayer(d_model, n_heads, rng, dtype=dtype) for _ in range(n_layers)]
        self.final_norm = RMSNorm(d_model, dtype=dtype)

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def llm_forward(
    lm: ToyCausalLM,
    plan: InjectionPlan | None,
    text_ids,
    prompt: Variable | None = None,
    train: bool = False,
    rng=None,
) -> Tensor:
    """Run the LM with planned perceptual prefixes; logits cover text positions only.

    Text tokens get position embeddings exactly as in bare pretraining;
    prefixes and prompt tokens carry none. A single causal mask over the
    concatenated sequence makes the prefix visible to all later
    positions while text stays invisible to the prefix.
    """
    ids = np.asarray(text_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    b, t = ids.shape
    if t < 1:
        raise ConfigError("text must be non-empty")
    if t > lm.max_len:
        raise ConfigError(f"text length {t} exceeds max_len {lm.max_len}")
    if plan is not None and plan.max_layer() >= lm.n_layers:
        raise PlanError(
            f"plan references layer {plan.max_layer()} but the LM has {lm.n_layers} layers"
        )

    x = ad.add(ad.embedding(lm.tok_emb, ids), ad.narrow(lm.pos_emb, 0, 0, t))
    persistent = 0
    parts = []
    if plan is not None and plan.mode not in (INNER, CROSS_ATTN) and 0 in plan.prefixes:
        prefix0 = _batched(plan.prefixes[0], b)
        parts.append(prefix0)
        persistent += prefix0.shape[1]
    if prompt is not None and prompt.shape[0] > 0:
        prompt_tok = ad.reshape(prompt, (1,) + tuple(prompt.shape))
        prompt_tok = ad.add(
            prompt_tok, Tensor(np.zeros((b, 1, 1), dtype=prompt.dtype))
        )
        parts.append(prompt_tok)
        persistent += prompt.shape[0]
    if parts:
        x = ad.concat(parts + [x], axis=1)

    for j, layer in enumerate(lm.layers):
        if plan is not None and plan.mode == CROSS_ATTN and j in plan.cross_entries:
            gate_idx, lvl = plan.cross_entries[j]
            x = plan.cross_block.apply(
                x, plan.cross_feats[lvl], gate_idx, train=train, rng=rng
            )
        if plan is not None and plan.mode == INNER and j in plan.prefixes:
            prefix = _batched(plan.prefixes[j], b)
            n_j = prefix.shape[1]
            x = ad.concat([prefix, x], axis=1)
            x = layer(x, mask=build_causal_mask(x.shape[1]))
            x = ad.narrow(x, 1, n_j, x.shape[1] - n_j)
        else:
            x = layer(x, mask=build_causal_mask(x.shape[1]))

    if persistent:
        x = ad.narrow(x, 1, persistent, t)
    h = lm.final_norm(x)
    return ad.linear(h, lm.tok_emb)


def _batched(tokens: Tensor, b: int) -> Tensor:
    """Broadcast [n, d] mapped tokens to [B, n, d]; pass [B, n, d] through."""
    if tokens.ndim == 2:
        tokens = ad.reshape(tokens, (1,) + tuple(tokens.shape))
        tokens = ad.add(tokens, Tensor(np.zeros((b, 1, 1), dtype=tokens.dtype)))
    if tokens.shape[0] != b:
        raise ConfigError(
            f"prefix batch {tokens.shape[0]} does not match text batch {b}"
        )
    return tokens
