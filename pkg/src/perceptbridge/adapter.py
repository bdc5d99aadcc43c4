"""Assembly of one full adapter: frozen backbones + mapper + injection + prompt."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbones import ToyCausalLM, ToyEncoder, extract_features, llm_forward
from .blocks import ConfigError, Module
from .config import AdapterConfig
from .finetune import TrainableRegistry, freeze_backbones, make_prompt_tokens
from .injection import (
    GatedCrossAttnBlock,
    plan_cross_attn,
    plan_first_layer,
    plan_inner_layers,
)
from .mapping import BlockResampler, LinearMapper, QPMapper, RandLaw, RandSubsampler

ENC_HEADS = 4
QP_HEADS = 8
DEFAULT_D_PATCH = 16
DEFAULT_MAX_LEN = 32


def build_mapper(cfg: AdapterConfig, rng, dtype=np.float32):
    m, dims = cfg.mapping, cfg.model
    if m.kind == "linear":
        return LinearMapper(dims.d_feats, dims.d_llm, rng, dtype=dtype)
    if m.kind == "qpmapper":
        return QPMapper(
            dims.d_feats, m.d_embed, dims.d_llm, m.l_qp, m.n_q, rng,
            n_heads=QP_HEADS, dtype=dtype,
        )
    if m.kind in ("r-avgpool", "r-linear", "r-qp"):
        kind = m.kind.removeprefix("r-")
        l_qp = m.block.l_qp if m.block is not None else 4
        return BlockResampler(
            kind, dims.d_feats, m.d_embed, dims.d_llm, rng,
            l_qp=l_qp, n_heads=QP_HEADS, dtype=dtype,
        )
    if m.kind == "r-rand":
        r = m.rand
        law = RandLaw(r.f_min, r.f_max, r.f_mean, r.f_std, r.spike_p, r.eval_keep_all)
        return RandSubsampler(dims.d_feats, dims.d_llm, rng, law=law, dtype=dtype)
    if m.kind == "none":
        return None
    raise ConfigError(f"unknown mapping kind {m.kind!r}")


class AdapterModel(Module):
    """One configured point in the design space, ready to train or decode."""

    def __init__(
        self,
        config: AdapterConfig,
        rng=None,
        dtype=np.float32,
        d_patch: int = DEFAULT_D_PATCH,
        max_len: int = DEFAULT_MAX_LEN,
    ):
        if rng is None:
            rng = np.random.default_rng(config.train.seed)
        self.config = config
        dims = config.model
        self.encoder = ToyEncoder(
            d_patch, dims.d_feats, dims.grid, dims.enc_layers, ENC_HEADS, rng, dtype=dtype
        )
        self.lm = ToyCausalLM(
            dims.vocab, dims.d_llm, dims.llm_layers, dims.llm_heads, max_len, rng, dtype=dtype
        )
        self.mapper = build_mapper(config, rng, dtype=dtype)
        self.cross = None
        if config.injection.mode == "cross_attn":
            self.cross = GatedCrossAttnBlock(
                dims.d_feats, config.injection.d_embed, dims.d_llm,
                n_gates=config.injection.n_llm, rng=rng, n_heads=QP_HEADS,
                attn_out_proj=config.injection.attn_out_proj, dtype=dtype,
            )
        self.prompt = make_prompt_tokens(config.finetune.n_pt, dims.d_llm, rng, dtype=dtype)
        self.assign_names()
        self.registry: TrainableRegistry = freeze_backbones(
            self, bias_tuning=config.finetune.bias_tuning
        )

    def build_plan(self, grids, train: bool = False, rng=None):
        cfg = self.config
        stack = extract_features(self.encoder, grids, cfg.extraction.n_fl, cfg.extraction.cls_mode)
        mode = cfg.injection.mode
        if mode == "first_layer":
            if isinstance(self.mapper, (BlockResampler, RandSubsampler)):
                mapped = self.mapper(stack, train=train, rng=rng)
            else:
                mapped = self.mapper(stack.levels[-1], train=train, rng=rng)
            return plan_first_layer(mapped)
        if mode == "inner":
            levels = [self.mapper(lvl, train=train, rng=rng) for lvl in stack.levels]
            return plan_inner_layers(levels, cfg.injection.n_llm, cfg.injection.n_left, self.lm.n_layers)
        return plan_cross_attn(
            self.cross, stack.levels, cfg.injection.n_llm, cfg.injection.n_left,
            self.lm.n_layers, train=train, rng=rng,
        )

    def forward(self, grids, text_ids, train: bool = False, rng=None) -> Tensor:
        """Logits [B, t, vocab] over text positions."""
        plan = self.build_plan(grids, train=train, rng=rng)
        return llm_forward(self.lm, plan, text_ids, prompt=self.prompt, train=train, rng=rng)

    def loss(self, batch, train: bool = True, rng=None) -> Tensor:
        logits = self.forward(batch.grids, batch.input_ids, train=train, rng=rng)
        return ad.smoothed_cross_entropy(
            logits, batch.target_ids, self.config.train.label_smoothing, batch.loss_mask
        )

    def trainable_variables(self):
        return [v for _, v in self.variables() if v.trainable]

    def injected_prefix_tokens(self, batch_grids=None) -> int:
        """Token count prepended per populated LM layer (eval-time plan)."""
        grids = batch_grids
        if grids is None:
            g, dp = self.config.model.grid, self.encoder.d_patch
            grids = np.zeros((1, g, g, dp), dtype=np.float32)
        plan = self.build_plan(grids, train=False)
        if plan.prefixes:
            return int(next(iter(plan.prefixes.values())).shape[1])
        return 0
