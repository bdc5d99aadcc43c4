"""Sklearn-style estimator facade over the adapter pipeline.

PerceptualCaptioner implements the scikit-learn estimator protocol
(get_params/set_params, fit, predict, score) without importing sklearn:
anything that clones via get_params works with it. X is an array of
patch grids [n, g, g, d_patch]; y is an integer array of captions
[n, caption_len]. fit() pretrains the frozen toy LM on the caption
corpus, then trains the configured adapter against the frozen pair.
"""

from __future__ import annotations

import numpy as np

from .adapter import AdapterModel
from .backbones import ToyCausalLM
from .checkpoint import load_state, state_dict
from .config import apply_overrides, expand_preset
from .task import EOS_ID, Sample
from .train import greedy_decode, pretrain_toy_lm, train as train_loop


class NotFittedError(RuntimeError):
    pass


def check_grids(X, grid: int, d_patch: int | None = None) -> np.ndarray:
    """Validate and coerce patch-grid input to float32 [n, g, g, d_patch].

    When d_patch is None the trailing width is taken from the data.
    """
    X = np.asarray(X, dtype=np.float32)
    want = (grid, grid) if d_patch is None else (grid, grid, d_patch)
    if X.ndim != 4 or X.shape[1:3] != (grid, grid) or (d_patch is not None and X.shape[3] != d_patch):
        raise ValueError(
            f"X must have shape [n, {grid}, {grid}, {d_patch or 'd_patch'}], got {X.shape}"
        )
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains non-finite values")
    return X


def check_captions(y, vocab: int) -> np.ndarray:
    """Validate integer caption array [n, caption_len]."""
    y = np.asarray(y)
    if y.ndim != 2 or not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"y must be an integer array [n, caption_len], got {y.dtype} {y.shape}")
    if (y < 0).any() or (y >= vocab).any():
        raise ValueError(f"caption token ids must be in [0, {vocab})")
    return y.astype(np.int64)


class PerceptualCaptioner:
    """Train a frozen-backbone adapter to caption patch grids.

    Parameters mirror the config surface: `preset` picks the adapter
    architecture, `overrides` are dotted-path config overrides, and the
    remaining knobs control the training loop.
    """

    def __init__(
        self,
        preset: str = "depalm-qp-l0",
        overrides: tuple[str, ...] = (),
        epochs: int | None = None,
        lr_max: float | None = None,
        seed: int = 0,
        pretrain_steps: int = 400,
        max_steps: int | None = None,
        early_stop_exact_match: float | None = None,
    ):
        self.preset = preset
        self.overrides = overrides
        self.epochs = epochs
        self.lr_max = lr_max
        self.seed = seed
        self.pretrain_steps = pretrain_steps
        self.max_steps = max_steps
        self.early_stop_exact_match = early_stop_exact_match

    # --- sklearn protocol -------------------------------------------------

    def get_params(self, deep: bool = True) -> dict:
        return {
            "preset": self.preset,
            "overrides": self.overrides,
            "epochs": self.epochs,
            "lr_max": self.lr_max,
            "seed": self.seed,
            "pretrain_steps": self.pretrain_steps,
            "max_steps": self.max_steps,
            "early_stop_exact_match": self.early_stop_exact_match,
        }

    def set_params(self, **params) -> "PerceptualCaptioner":
        for key, value in params.items():
            if key not in self.get_params():
                raise ValueError(f"unknown parameter {key!r}")
            setattr(self, key, value)
        return self

    # --- estimator surface ------------------------------------------------

    def _resolve_config(self):
        cfg = expand_preset(self.preset, "desk")
        items = list(self.overrides)
        items.append(f"train.seed={self.seed}")
        if self.epochs is not None:
            items.append(f"train.epochs={self.epochs}")
        if self.lr_max is not None:
            items.append(f"train.lr_max={self.lr_max}")
        return apply_overrides(cfg, items)

    def fit(self, X, y) -> "PerceptualCaptioner":
        cfg = self._resolve_config()
        X = check_grids(X, cfg.model.grid)
        y = check_captions(y, cfg.model.vocab)
        self.config_ = cfg
        self.d_patch_ = X.shape[3]
        self.model_ = AdapterModel(cfg, d_patch=self.d_patch_)

        lm = ToyCausalLM(
            cfg.model.vocab, cfg.model.d_llm, cfg.model.llm_layers,
            cfg.model.llm_heads, 32, np.random.default_rng(self.seed + 7919),
        )
        lm.assign_names("lm")
        corpus = _CaptionCorpus(y)
        pretrain_toy_lm(lm, corpus, steps=self.pretrain_steps, seed=self.seed + 13)
        load_state(self.model_.lm, state_dict(lm))

        samples = [Sample(grid=g, prompt_ids=(), captions=(tuple(map(int, c)),)) for g, c in zip(X, y)]
        task = _FixedDataset(samples, cfg.model.vocab)
        self.history_ = train_loop(
            self.model_,
            task,
            cfg.train,
            n_train=len(samples),
            n_eval=min(len(samples), 256),
            max_steps=self.max_steps,
            early_stop_exact_match=self.early_stop_exact_match,
        )
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit() before predict()/score()")

    def predict(self, X) -> list[list[int]]:
        """Greedy-decoded captions (EOS stripped) for each grid."""
        self._check_fitted()
        X = check_grids(X, self.config_.model.grid, self.d_patch_)
        decoded = greedy_decode(self.model_, X)
        return [row[:-1] if row and row[-1] == EOS_ID else row for row in decoded]

    def score(self, X, y) -> float:
        """Exact-match rate of decoded captions against y."""
        self._check_fitted()
        X = check_grids(X, self.config_.model.grid, self.d_patch_)
        y = check_captions(y, self.config_.model.vocab)
        preds = self.predict(X)
        return float(np.mean([tuple(p) == tuple(map(int, t)) for p, t in zip(preds, y)]))


class _FixedDataset:
    """Adapts provided (X, y) pairs to the task interface train() expects."""

    def __init__(self, samples: list[Sample], vocab: int):
        self._samples = samples
        self.vocab = vocab

    def make_samples(self, n: int, rng: np.random.Generator) -> list[Sample]:
        idx = rng.permutation(len(self._samples))[:n]
        return [self._samples[i] for i in idx]


class _CaptionCorpus:
    """Feeds user captions to the LM pretrainer as [BOS ... EOS] rows."""

    def __init__(self, y: np.ndarray):
        self._y = y

    def caption_corpus(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(0, len(self._y), size=n)
        rows = self._y[idx]
        bos = np.zeros((n, 1), dtype=np.int64)
        eos = np.ones((n, 1), dtype=np.int64)
        return np.concatenate([bos, rows, eos], axis=1)
