"""Synthetic attribute-captioning task.

Each example has latent attributes (default 3 attributes x 8 values)
rendered into a patch grid by a fixed random linear map, plus Gaussian
noise. The caption is the deterministic token sequence naming the
attributes, so exact match has a chance level of 8^-3 ~ 0.2% and the
rendering is injective over attribute combinations at zero noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BOS_ID = 0
EOS_ID = 1
ATTR_BASE = 2  # attribute token ids start here


@dataclass(frozen=True)
class Sample:
    grid: np.ndarray  # [g, g, d_patch] float32
    prompt_ids: tuple[int, ...]
    captions: tuple[tuple[int, ...], ...]  # one or more target token sequences


@dataclass
class SyntheticTaskSpec:
    n_attributes: int = 3
    n_values: int = 8
    grid: int = 8
    d_patch: int = 16
    noise: float = 0.05
    render_seed: int = 1234
    vocab: int = 64
    prompt: tuple[int, ...] = field(default_factory=tuple)
    # LM-pretraining corpus: P(next value = previous value) above chance.
    # Content-dependent text teaches the frozen LM to route token content
    # (the circuits a prefix adapter later hijacks); the downstream
    # captions themselves stay independent and uniform.
    pretrain_copy_p: float = 0.6

    def __post_init__(self):
        needed = ATTR_BASE + self.n_attributes * self.n_values
        if self.vocab < needed:
            raise ValueError(
                f"vocab {self.vocab} too small for {self.n_attributes}x{self.n_values} "
                f"attribute tokens (+BOS/EOS); need >= {needed}"
            )
        # fixed random render: one patch-grid pattern per (attribute, value)
        rng = np.random.default_rng(self.render_seed)
        n_feats = self.grid * self.grid * self.d_patch
        self._render = rng.standard_normal(
            (self.n_attributes, self.n_values, n_feats)
        ).astype(np.float32) / math.sqrt(self.n_attributes)

    @property
    def caption_len(self) -> int:
        return self.n_attributes

    @property
    def chance_exact_match(self) -> float:
        return float(self.n_values) ** (-self.n_attributes)

    def attr_token(self, attribute: int, value: int) -> int:
        return ATTR_BASE + attribute * self.n_values + value

    def caption_tokens(self, values) -> tuple[int, ...]:
        return tuple(self.attr_token(i, v) for i, v in enumerate(values))

    def render(self, values, rng: np.random.Generator) -> np.ndarray:
        flat = sum(self._render[i, v] for i, v in enumerate(values))
        if self.noise > 0:
            flat = flat + self.noise * rng.standard_normal(flat.shape).astype(np.float32)
        return flat.reshape(self.grid, self.grid, self.d_patch).astype(np.float32)

    def sample(self, rng: np.random.Generator) -> Sample:
        values = rng.integers(0, self.n_values, size=self.n_attributes)
        return Sample(
            grid=self.render(values, rng),
            prompt_ids=self.prompt,
            captions=(self.caption_tokens(values),),
        )

    def make_samples(self, n: int, rng: np.random.Generator) -> list[Sample]:
        return [self.sample(rng) for _ in range(n)]

    def _to_rows(self, values: np.ndarray) -> np.ndarray:
        n = values.shape[0]
        toks = ATTR_BASE + np.arange(self.n_attributes) * self.n_values + values
        return np.concatenate(
            [
                np.full((n, 1), BOS_ID, dtype=np.int64),
                toks.astype(np.int64),
                np.full((n, 1), EOS_ID, dtype=np.int64),
            ],
            axis=1,
        )

    def caption_corpus(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Valid caption-format sequences [BOS ... EOS], attributes independent."""
        values = rng.integers(0, self.n_values, size=(n, self.n_attributes))
        return self._to_rows(values)

    def pretrain_corpus(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Caption-format text whose values repeat with probability pretrain_copy_p.

        Marginals stay uniform (the first value is uniform and the copy
        chain is symmetric), so the grammar matches the captions; only
        the conditionals carry signal.
        """
        values = np.empty((n, self.n_attributes), dtype=np.int64)
        values[:, 0] = rng.integers(0, self.n_values, size=n)
        for i in range(1, self.n_attributes):
            copy = rng.random(n) < self.pretrain_copy_p
            fresh = rng.integers(0, self.n_values, size=n)
            values[:, i] = np.where(copy, values[:, i - 1], fresh)
        return self._to_rows(values)

    def unigram_baseline(self) -> float:
        """Cross-entropy of the best unigram model of the label positions."""
        # labels per sequence: n_attributes uniform attribute tokens + EOS
        total = self.n_attributes + 1
        p_attr = (1.0 / total) * (1.0 / self.n_values)
        p_eos = 1.0 / total
        h = -self.n_attributes * self.n_values * p_attr * math.log(p_attr)
        h += -p_eos * math.log(p_eos)
        return h
