"""Feature mapping: linear projection, query-pooling mapper, token resamplers.

Every mapper ends at the LM width. The query-pooling mapper compresses
any input length to a fixed n_q tokens; the block resamplers pool local
2x2 patches (length-4 groups in 1D); the random subsampler keeps a
drawn fraction of patch tokens during training and exactly half at eval.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Variable
from .backbones import FeatureStack
from .blocks import ConfigError, Linear, Module, RMSNorm, TransformerEncoderLayer


class LinearMapper(Module):
    """One shared linear layer applied independently per token."""

    def __init__(self, d_feats, d_llm, rng, dtype=np.float32):
        self.proj = Linear(d_feats, d_llm, rng, dtype=dtype)

    def __call__(self, tokens: Tensor, train: bool = False, rng=None) -> Tensor:
        return self.proj(tokens)


class QPMapper(Module):
    """Compress n tokens to n_q learnable-query outputs.

    Down-project, append the query tokens after the inputs, run l_qp
    encoder layers, keep the last n_q outputs, up-project to the LM
    width, RMS-normalize. No positional embedding is added, so outputs
    are invariant to input-token permutations.
    """

    def __init__(
        self,
        d_feats,
        d_embed,
        d_llm,
        l_qp,
        n_q,
        rng,
        n_heads=8,
        p_drop=0.1,
        dtype=np.float32,
    ):
        self.n_q = n_q
        self.down = Linear(d_feats, d_embed, rng, dtype=dtype)
        self.queries = Variable((rng.standard_normal((n_q, d_embed)) * 0.02).astype(dtype))
        self.layers = [
            TransformerEncoderLayer(d_embed, n_heads, d_embed, p_drop, rng, dtype=dtype)
            for _ in range(l_qp)
        ]
        self.up = Linear(d_embed, d_llm, rng, dtype=dtype)
        self.out_norm = RMSNorm(d_llm, dtype=dtype)

    def __call__(self, tokens: Tensor, train: bool = False, rng=None) -> Tensor:
        b = tokens.shape[0]
        x = self.down(tokens)
        q = ad.reshape(self.queries, (1,) + tuple(self.queries.shape))
        q = ad.add(q, Tensor(np.zeros((b, 1, 1), dtype=x.dtype)))
        x = ad.concat([x, q], axis=1)
        for layer in self.layers:
            x = layer(x, train=train, rng=rng)
        x = ad.narrow(x, 1, x.shape[1] - self.n_q, self.n_q)
        return self.out_norm(self.up(x))


def _group_blocks(patches: Tensor, grid_shape) -> Tensor:
    """Arrange patch tokens on their grid and group into blocks of 4.

    1D: 4 consecutive tokens; 2D: 2x2 spatial blocks; 3D: 2x2 spatial
    blocks per frame. Grids must tile exactly. Returns [B, n_blocks, 4, d].
    """
    b, n, d = patches.shape
    if len(grid_shape) == 1:
        if n % 4 != 0:
            raise ConfigError(f"1D sequence of {n} tokens does not tile into blocks of 4")
        return ad.reshape(patches, (b, n // 4, 4, d))
    if len(grid_shape) == 2:
        h, w = grid_shape
    elif len(grid_shape) == 3:
        f, h, w = grid_shape
    else:
        raise ConfigError(f"unsupported grid shape {grid_shape}")
    if int(np.prod(grid_shape)) != n:
        raise ConfigError(f"grid {grid_shape} does not hold {n} patch tokens")
    if h % 2 or w % 2:
        raise ConfigError(f"grid {grid_shape} does not tile into 2x2 blocks")
    frames = 1 if len(grid_shape) == 2 else grid_shape[0]
    x = ad.reshape(patches, (b, frames, h // 2, 2, w // 2, 2, d))
    x = ad.transpose(x, (0, 1, 2, 4, 3, 5, 6))
    return ad.reshape(x, (b, frames * (h // 2) * (w // 2), 4, d))


class BlockResampler(Module):
    """Pool local blocks of 4 embedded tokens into one token each.

    kind "avgpool" takes the block mean, "linear" projects the
    concatenated block (shared weights), "qp" runs a shared single-query
    QPMapper per block. The CLS token bypasses pooling and is prepended
    before the RMSNorm and the output projection.
    """

    def __init__(self, kind, d_feats, d_emb, d_llm, rng, l_qp=4, n_heads=8, dtype=np.float32):
        if kind not in ("avgpool", "linear", "qp"):
            raise ConfigError(f"unknown block resampler kind {kind!r}")
        self.kind = kind
        self.d_emb = d_emb
        self.embed = Linear(d_feats, d_emb, rng, dtype=dtype)
        if kind == "linear":
            self.pool_proj = Linear(4 * d_emb, d_emb, rng, dtype=dtype)
        elif kind == "qp":
            self.pool_qp = QPMapper(
                d_emb, d_emb, d_emb, l_qp, 1, rng, n_heads=n_heads, dtype=dtype
            )
        self.norm = RMSNorm(d_emb, dtype=dtype)
        self.out = Linear(d_emb, d_llm, rng, dtype=dtype)

    def __call__(self, stack: FeatureStack, train: bool = False, rng=None) -> Tensor:
        if stack.cls_only:
            raise ConfigError("block resamplers need all tokens, got a CLS-only stack")
        level = stack.levels[-1]
        x = self.embed(level)
        cls = ad.narrow(x, 1, 0, 1)
        patches = ad.narrow(x, 1, 1, x.shape[1] - 1)
        blocks = _group_blocks(patches, stack.grid_shape)
        b, n_blocks = blocks.shape[0], blocks.shape[1]
        if self.kind == "avgpool":
            pooled = ad.reduce_mean(blocks, axis=2)
        elif self.kind == "linear":
            flat = ad.reshape(blocks, (b, n_blocks, 4 * self.d_emb))
            pooled = self.pool_proj(flat)
        else:
            merged = ad.reshape(blocks, (b * n_blocks, 4, self.d_emb))
            pooled = self.pool_qp(merged, train=train, rng=rng)
            pooled = ad.reshape(pooled, (b, n_blocks, self.d_emb))
        tokens = ad.concat([cls, pooled], axis=1)
        return self.out(self.norm(tokens))


@dataclass
class RandLaw:
    """Sampling law for the kept-token fraction f."""

    f_min: float = 1.0 / 16.0
    f_max: float = 0.5
    f_mean: float = 0.25
    f_std: float = 0.2
    spike_p: float = 0.1
    eval_keep_all: bool = False  # main-text alternative; appendix rule by default


def sample_keep_fraction(law: RandLaw, rng: np.random.Generator) -> float:
    """Spike at f_max with probability spike_p, else a clamped normal draw."""
    if rng.random() < law.spike_p:
        return law.f_max
    f = rng.normal(law.f_mean, law.f_std)
    return min(max(f, law.f_min), law.f_max)


class RandSubsampler(Module):
    """Keep CLS plus a random subset of patch tokens, then project twice."""

    def __init__(self, d_feats, d_llm, rng, law: RandLaw | None = None, dtype=np.float32):
        self.law = law or RandLaw()
        self.proj1 = Linear(d_feats, d_llm, rng, dtype=dtype)
        self.norm = RMSNorm(d_llm, dtype=dtype)
        self.proj2 = Linear(d_llm, d_llm, rng, dtype=dtype)

    def __call__(self, stack: FeatureStack, train: bool = False, rng=None) -> Tensor:
        if stack.cls_only:
            raise ConfigError("random subsampler needs all tokens, got a CLS-only stack")
        level = stack.levels[-1]
        n_tok = level.shape[1] - 1
        if n_tok < 16:
            raise ConfigError(f"random subsampler needs >= 16 patch tokens, got {n_tok}")
        if train:
            if rng is None:
                raise ValueError("train-mode subsampling requires an explicit rng")
            f = sample_keep_fraction(self.law, rng)
            keep = int(np.floor(f * n_tok))
            chosen = rng.choice(n_tok, size=keep, replace=False)
            chosen.sort()  # kept tokens retain input order
        elif self.law.eval_keep_all:
            chosen = np.arange(n_tok)
        else:
            # deterministic eval at f = f_max: evenly spaced over the grid
            keep = int(np.floor(self.law.f_max * n_tok))
            chosen = np.round(np.linspace(0, n_tok - 1, keep)).astype(np.int64)
        idx = np.concatenate([[0], chosen + 1])
        tokens = ad.index_select(level, 1, idx)
        return self.proj2(self.norm(self.proj1(tokens)))
