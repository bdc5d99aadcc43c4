"""Reusable neural blocks: linear, multi-head attention, transformer layers.

Blocks are immutable during forward passes; train-time stochasticity
(dropout) is driven by an explicitly passed generator, never global
state. Encoder layers are post-norm with LayerNorm; decoder layers are
pre-norm with RMSNorm and a 4x feed-forward, mirroring the frozen
LM families these toys stand in for.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, Variable


class ConfigError(ValueError):
    """Raised when a block is constructed with inconsistent sizes."""


def build_causal_mask(s: int) -> np.ndarray:
    """Lower-triangular allow-mask (diagonal included) of shape [s, s]."""
    if s < 1:
        raise ConfigError(f"mask length must be >= 1, got {s}")
    return np.tril(np.ones((s, s), dtype=bool))


class Module:
    """Base for parameterized blocks; collects Variables recursively."""

    def variables(self):
        """Yield (dotted_name, Variable) in stable construction order."""
        yield from _walk(self, "")

    def assign_names(self, prefix: str = "") -> None:
        """Write dotted-path names onto every Variable (must be unique)."""
        seen = set()
        for name, var in _walk(self, prefix):
            if name in seen:
                raise ConfigError(f"duplicate variable name {name!r}")
            seen.add(name)
            var.name = name

    def num_params(self, trainable_only: bool = False) -> int:
        return sum(
            v.size for _, v in self.variables() if v.trainable or not trainable_only
        )


def _walk(obj, prefix):
    if isinstance(obj, Variable):
        yield prefix, obj
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from _walk(item, f"{prefix}.{i}" if prefix else str(i))
        return
    if isinstance(obj, Module):
        for key, val in vars(obj).items():
            if isinstance(val, (Variable, Module, list, tuple)):
                yield from _walk(val, f"{prefix}.{key}" if prefix else key)


class Linear(Module):
    """y = x W^T + b with weight stored as [d_out, d_in]."""

    def __init__(self, d_in, d_out, rng, bias=True, dtype=np.float32, init_scale=None):
        scale = init_scale if init_scale is not None else 1.0 / np.sqrt(d_in)
        self.weight = Variable(
            (rng.standard_normal((d_out, d_in)) * scale).astype(dtype)
        )
        self.bias = Variable(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class RMSNorm(Module):
    def __init__(self, d, dtype=np.float32, eps=1e-6):
        self.weight = Variable(np.ones(d, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.rms_norm(x, self.weight, self.eps)


class LayerNorm(Module):
    def __init__(self, d, dtype=np.float32, eps=1e-5):
        self.weight = Variable(np.ones(d, dtype=dtype))
        self.bias = Variable(np.zeros(d, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.weight, self.bias, self.eps)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head split and output projection.

    Queries/keys/values may differ (cross-attention); `mask` is a bool
    allow-mask broadcastable to [s_q, s_k]. Scaling is 1/sqrt(d_head).
    """

    def __init__(self, d_model, n_heads, rng, dtype=np.float32, out_proj=True):
        if d_model % n_heads != 0:
            raise ConfigError(
                f"d_model={d_model} not divisible by n_heads={n_heads}"
            )
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = Linear(d_model, d_model, rng, dtype=dtype)
        self.wk = Linear(d_model, d_model, rng, dtype=dtype)
        self.wv = Linear(d_model, d_model, rng, dtype=dtype)
        self.wo = Linear(d_model, d_model, rng, dtype=dtype) if out_proj else None

    def _split(self, x: Tensor, b: int, s: int) -> Tensor:
        x = ad.reshape(x, (b, s, self.n_heads, self.d_head))
        return ad.transpose(x, (0, 2, 1, 3))

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
        if q.shape[-1] != self.d_model or k.shape[-1] != self.d_model:
            raise ConfigError(
                f"attention width mismatch: got {q.shape[-1]}/{k.shape[-1]}, "
                f"configured d_model={self.d_model}"
            )
        b, s_q = q.shape[0], q.shape[1]
        s_k = k.shape[1]
        qh = self._split(self.wq(q), b, s_q)
        kh = self._split(self.wk(k), b, s_k)
        vh = self._split(self.wv(v), b, s_k)
        scale = np.asarray(1.0 / np.sqrt(self.d_head), dtype=q.dtype)
        scores = ad.mul(ad.matmul(qh, ad.transpose(kh, (0, 1, 3, 2))), Tensor(scale))
        probs = ad.softmax(scores, axis=-1, mask=mask)
        ctx = ad.matmul(probs, vh)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, s_q, self.d_model))
        return self.wo(ctx) if self.wo is not None else ctx


class FeedForward(Module):
    def __init__(self, d_model, d_ff, rng, dtype=np.float32):
        self.lin1 = Linear(d_model, d_ff, rng, dtype=dtype)
        self.lin2 = Linear(d_ff, d_model, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(ad.gelu(self.lin1(x)))


class TransformerEncoderLayer(Module):
    """Post-norm encoder layer: LN(x + attn), then LN(h + ffn)."""

    def __init__(self, d_model, n_heads, d_ff, p_drop, rng, dtype=np.float32):
        self.attn = MultiHeadAttention(d_model, n_heads, rng, dtype=dtype)
        self.ffn = FeedForward(d_model, d_ff, rng, dtype=dtype)
        self.norm1 = LayerNorm(d_model, dtype=dtype)
        self.norm2 = LayerNorm(d_model, dtype=dtype)
        self.p_drop = p_drop

    def __call__(self, x: Tensor, train: bool = False, rng=None, mask=None) -> Tensor:
        a = ad.dropout(self.attn(x, x, x, mask=mask), self.p_drop, rng, train)
        h = self.norm1(ad.add(x, a))
        f = ad.dropout(self.ffn(h), self.p_drop, rng, train)
        return self.norm2(ad.add(h, f))


class CausalDecoderLayer(Module):
    """Pre-norm decoder layer: x + attn(RMS(x)), x + ffn(RMS(x)); d_ff = 4d."""

    def __init__(self, d_model, n_heads, rng, dtype=np.float32):
        self.attn = MultiHeadAttention(d_model, n_heads, rng, dtype=dtype)
        self.ffn = FeedForward(d_model, 4 * d_model, rng, dtype=dtype)
        self.norm1 = RMSNorm(d_model, dtype=dtype)
        self.norm2 = RMSNorm(d_model, dtype=dtype)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        if mask is None:
            mask = build_causal_mask(x.shape[1])
        h = self.norm1(x)
        x = ad.add(x, self.attn(h, h, h, mask=mask))
        return ad.add(x, self.ffn(self.norm2(x)))
