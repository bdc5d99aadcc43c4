"""Parameter-efficient fine-tuning: prompt tokens, bias tuning, the trainable registry.

The registry is the single source of truth for what "frozen" means: the
optimizer touches exactly the flagged set, and the accounting suite's
closed-form counts must agree with the registry's enumeration.
"""

from __future__ import annotations

import json
import warnings

import numpy as np

from .autodiff import Variable


def make_prompt_tokens(n_pt: int, d_llm: int, rng, dtype=np.float32) -> Variable | None:
    """n_pt learnable embedding vectors, Normal(0, 0.02); None when disabled."""
    if n_pt < 0:
        raise ValueError(f"n_pt must be >= 0, got {n_pt}")
    if n_pt == 0:
        return None
    return Variable(
        (rng.standard_normal((n_pt, d_llm)) * 0.02).astype(dtype), name="prompt.tokens"
    )


def apply_bias_tuning(encoder) -> int:
    """Make every bias vector inside the encoder trainable; returns the count."""
    n = 0
    for path, var in encoder.variables():
        if path.endswith(".bias"):
            var.set_trainable(True)
            n += var.size
    if n == 0:
        warnings.warn("bias tuning requested but the scope has no bias parameters")
    return n


def freeze_backbones(model, bias_tuning: bool = False) -> "TrainableRegistry":
    """Freeze encoder and LM weights; adapter / prompt (/ biases) stay trainable."""
    for _, var in model.encoder.variables():
        var.set_trainable(False)
    for _, var in model.lm.variables():
        var.set_trainable(False)
    if bias_tuning:
        apply_bias_tuning(model.encoder)
    return TrainableRegistry.from_model(model)


class TrainableRegistry:
    """Enumeration of every Variable with its trainable flag and totals."""

    def __init__(self, rows: list[tuple[str, tuple[int, ...], bool, int]]):
        self.rows = rows

    @classmethod
    def from_model(cls, model) -> "TrainableRegistry":
        rows = []
        for path, var in model.variables():
            name = var.name if var.name is not None else path
            rows.append((name, tuple(var.shape), var.trainable, var.size))
        return cls(rows)

    def trainable_names(self) -> list[str]:
        return [name for name, _, flag, _ in self.rows if flag]

    @property
    def total_trainable(self) -> int:
        return sum(size for _, _, flag, size in self.rows if flag)

    @property
    def total(self) -> int:
        return sum(size for _, _, _, size in self.rows)

    def totals_by_component(self) -> dict[str, int]:
        """Trainable parameter totals keyed by the top-level name segment."""
        out: dict[str, int] = {}
        for name, _, flag, size in self.rows:
            if flag:
                top = name.split(".", 1)[0]
                out[top] = out.get(top, 0) + size
        return out

    def to_report(self) -> dict:
        return {
            "total_trainable": self.total_trainable,
            "total": self.total,
            "by_component": self.totals_by_component(),
            "variables": [
                {"name": n, "shape": list(s), "trainable": f, "count": c}
                for n, s, f, c in self.rows
            ],
        }

    def dump_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_report(), f, indent=2)
