"""Training harness: schedule, AdamW, duplicate grouping, the loop, decoding.

The recipe: AdamW with decoupled weight decay, linear warmup over the
first 20% of steps from lr_max*1e-4 up to lr_max, then cosine back
down; global-norm gradient clipping; label-smoothed cross-entropy on
the target span only; training samples with identical inputs grouped,
with the target drawn uniformly per visit.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .autodiff import Tape, Variable
from .backbones import ToyCausalLM, llm_forward
from .checkpoint import save_checkpoint
from .config import TrainParams
from .task import BOS_ID, EOS_ID, Sample, SyntheticTaskSpec


class TrainingError(RuntimeError):
    """Divergence or non-finite values during training."""


def lr_at(step: int, total_steps: int, cfg: TrainParams) -> float:
    """Linear warmup from lr_min to lr_max, then cosine back to lr_min."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    lr_min = cfg.lr_max * cfg.min_lr_ratio
    warmup = math.floor(cfg.warmup_frac * total_steps)
    if step <= warmup:
        if warmup == 0:
            return cfg.lr_max
        return lr_min + (cfg.lr_max - lr_min) * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return lr_min + 0.5 * (cfg.lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))


def clip_gradients(variables: list[Variable], g_clip: float) -> float:
    """Scale all grads by g_clip/norm when the global L2 norm exceeds g_clip."""
    if g_clip <= 0:
        raise ValueError(f"g_clip must be positive, got {g_clip}")
    total = 0.0
    for v in variables:
        if v.grad is not None:
            total += float((v.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > g_clip:
        scale = g_clip / norm
        for v in variables:
            if v.grad is not None:
                v.grad *= scale
    return norm


class AdamW:
    """Decoupled weight decay applied before the bias-corrected Adam update."""

    def __init__(self, variables, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.variables = list(variables)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(v.data) for v in self.variables]
        self.v = [np.zeros_like(v.data) for v in self.variables]
        self._s1 = [np.empty_like(v.data) for v in self.variables]
        self._s2 = [np.empty_like(v.data) for v in self.variables]

    def zero_grad(self) -> None:
        for var in self.variables:
            var.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, var in enumerate(self.variables):
            g = var.grad
            if g is not None and not np.all(np.isfinite(g)):
                raise TrainingError(
                    f"non-finite gradient for parameter {var.name!r} at step {self.t}"
                )
            if self.weight_decay:
                var.data *= 1.0 - lr * self.weight_decay
            m, v, s1, s2 = self.m[i], self.v[i], self._s1[i], self._s2[i]
            m *= self.beta1
            v *= self.beta2
            if g is not None:
                np.multiply(g, 1.0 - self.beta1, out=s1)
                m += s1
                np.multiply(g, g, out=s1)
                s1 *= 1.0 - self.beta2
                v += s1
            # s2 = sqrt(v / c2) + eps; s1 = (lr / c1) * m / s2
            np.divide(v, c2, out=s2)
            np.sqrt(s2, out=s2)
            s2 += self.eps
            np.divide(m, s2, out=s1)
            s1 *= lr / c1
            var.data -= s1


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

@dataclass
class Group:
    """Training samples sharing the same perceptual and text input."""

    grid: np.ndarray
    prompt_ids: tuple[int, ...]
    captions: list[tuple[int, ...]]


@dataclass
class Batch:
    grids: np.ndarray       # [B, g, g, d_patch]
    input_ids: np.ndarray   # [B, s]
    target_ids: np.ndarray  # [B, s]
    loss_mask: np.ndarray   # [B, s] bool, True on the target span


def group_duplicates(samples: list[Sample]) -> list[Group]:
    """Merge samples whose (perceptual input, prompt) bytes coincide."""
    groups: dict[tuple, Group] = {}
    for s in samples:
        key = (s.grid.tobytes(), s.prompt_ids)
        if key in groups:
            groups[key].captions.extend(s.captions)
        else:
            groups[key] = Group(s.grid, s.prompt_ids, list(s.captions))
    return list(groups.values())


def sample_target(group: Group, rng: np.random.Generator) -> tuple[int, ...]:
    return group.captions[rng.integers(0, len(group.captions))]


def make_batch(groups: list[Group], rng: np.random.Generator | None) -> Batch:
    """Teacher-forcing batch; the target is drawn uniformly per group."""
    grids, inputs, targets, masks = [], [], [], []
    length = None
    for g in groups:
        caption = sample_target(g, rng) if rng is not None else g.captions[0]
        seq = [BOS_ID, *g.prompt_ids, *caption, EOS_ID]
        if length is None:
            length = len(seq)
        elif len(seq) != length:
            raise TrainingError("batch requires equal sequence lengths")
        grids.append(g.grid)
        inputs.append(seq[:-1])
        targets.append(seq[1:])
        mask = [False] * len(g.prompt_ids) + [True] * (len(caption) + 1)
        masks.append(mask)
    return Batch(
        grids=np.stack(grids),
        input_ids=np.asarray(inputs, dtype=np.int64),
        target_ids=np.asarray(targets, dtype=np.int64),
        loss_mask=np.asarray(masks, dtype=bool),
    )


# ---------------------------------------------------------------------------
# decoding and evaluation
# ---------------------------------------------------------------------------

def greedy_decode(model, grids, max_len: int = 8, prompt_ids: tuple[int, ...] = ()) -> list[list[int]]:
    """Argmax decoding from BOS until EOS or max_len; deterministic."""
    grids = np.asarray(grids)
    b = grids.shape[0]
    ids = np.tile(np.array([BOS_ID, *prompt_ids], dtype=np.int64), (b, 1))
    done = np.zeros(b, dtype=bool)
    for _ in range(max_len):
        logits = model.forward(grids, ids, train=False)
        nxt = logits.data[:, -1].argmax(axis=1)
        nxt = np.where(done, EOS_ID, nxt)
        ids = np.concatenate([ids, nxt[:, None]], axis=1)
        done |= nxt == EOS_ID
        if done.all():
            break
    outs = []
    start = 1 + len(prompt_ids)
    for row in ids[:, start:]:
        toks = []
        for t in row:
            toks.append(int(t))
            if t == EOS_ID:
                break
        outs.append(toks)
    return outs


def evaluate(model, samples: list[Sample], batch_size: int = 256, max_len: int = 8) -> dict:
    """Held-out exact match (decoded == caption+EOS) and teacher-forced accuracy."""
    exact = 0
    correct_tokens = 0
    total_tokens = 0
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        groups = [Group(s.grid, s.prompt_ids, list(s.captions)) for s in chunk]
        batch = make_batch(groups, rng=None)
        decoded = greedy_decode(model, batch.grids, max_len=max_len, prompt_ids=chunk[0].prompt_ids)
        for s, out in zip(chunk, decoded):
            if tuple(out) == (*s.captions[0], EOS_ID):
                exact += 1
        logits = model.forward(batch.grids, batch.input_ids, train=False)
        pred = logits.data.argmax(axis=-1)
        correct_tokens += int(((pred == batch.target_ids) & batch.loss_mask).sum())
        total_tokens += int(batch.loss_mask.sum())
    return {
        "exact_match": exact / len(samples),
        "token_accuracy": correct_tokens / total_tokens,
    }


# ---------------------------------------------------------------------------
# LM pretraining and adapter training
# ---------------------------------------------------------------------------

def pretrain_toy_lm(
    lm: ToyCausalLM,
    task: SyntheticTaskSpec,
    steps: int,
    seed: int = 0,
    batch: int = 64,
    lr_max: float = 1e-3,
) -> list[dict]:
    """Teach the bare LM the caption grammar on synthetic text only."""
    rng = np.random.default_rng(seed)
    params = [v for _, v in lm.variables()]
    opt = AdamW(params, weight_decay=0.0)
    cfg = TrainParams(lr_max=lr_max, weight_decay=0.0, batch=batch)
    corpus = getattr(task, "pretrain_corpus", None) or task.caption_corpus
    log = []
    with threadpool_limits(limits=1):
        for step in range(steps):
            seqs = corpus(batch, rng)
            with Tape() as tape:
                logits = llm_forward(lm, None, seqs[:, :-1])
                loss = ad.smoothed_cross_entropy(logits, seqs[:, 1:])
            if not np.isfinite(loss.data):
                raise TrainingError(f"LM pretraining diverged at step {step}")
            opt.zero_grad()
            tape.backward(loss)
            clip_gradients(params, 1.0)
            opt.step(lr_at(step, steps, cfg))
            if step % 100 == 0 or step == steps - 1:
                log.append({"step": step, "loss": float(loss.data)})
    return log


def held_out_lm_loss(lm: ToyCausalLM, task: SyntheticTaskSpec, n: int = 512, seed: int = 10_000) -> float:
    rng = np.random.default_rng(seed)
    seqs = task.caption_corpus(n, rng)
    logits = llm_forward(lm, None, seqs[:, :-1])
    return float(ad.smoothed_cross_entropy(logits, seqs[:, 1:]).data)


def train(
    model,
    task: SyntheticTaskSpec,
    cfg: TrainParams | None = None,
    n_train: int = 4096,
    n_eval: int = 512,
    eval_every: int | None = None,
    early_stop_exact_match: float | None = None,
    max_steps: int | None = None,
    run_dir=None,
) -> list[dict]:
    """Train the adapter; returns the metrics log (one dict per eval).

    Deterministic given cfg.seed. Frozen backbones are untouched; only
    registry-trainable Variables are optimized. NaN loss aborts with
    step diagnostics.
    """
    if cfg is None:
        cfg = model.config.train
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    data_rng = np.random.default_rng(seeds[0])
    order_rng = np.random.default_rng(seeds[1])
    drop_rng = np.random.default_rng(seeds[2])
    eval_rng = np.random.default_rng(seeds[3])

    groups = group_duplicates(task.make_samples(n_train, data_rng))
    eval_samples = task.make_samples(n_eval, eval_rng)
    steps_per_epoch = math.ceil(len(groups) / cfg.batch)
    total_steps = cfg.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    if eval_every is None:
        eval_every = max(1, steps_per_epoch)

    trainables = model.trainable_variables()
    opt = AdamW(trainables, weight_decay=cfg.weight_decay)
    metrics: list[dict] = []
    step = 0
    loss_acc, wall_acc, acc_n = 0.0, 0.0, 0

    def log_eval(step, lr):
        nonlocal loss_acc, wall_acc, acc_n
        scores = evaluate(model, eval_samples)
        row = {
            "step": step,
            "lr": lr,
            "train_loss": loss_acc / max(acc_n, 1),
            "exact_match": scores["exact_match"],
            "token_accuracy": scores["token_accuracy"],
            "wall_ms_per_step": 1000.0 * wall_acc / max(acc_n, 1),
        }
        metrics.append(row)
        if run_dir is not None:
            with open(run_dir / "metrics.jsonl", "a") as f:
                f.write(json.dumps(row) + "\n")
        loss_acc, wall_acc, acc_n = 0.0, 0.0, 0
        return row

    stop = False
    with threadpool_limits(limits=1):
        for _epoch in range(cfg.epochs):
            if stop:
                break
            order = order_rng.permutation(len(groups))
            for lo in range(0, len(groups), cfg.batch):
                if step >= total_steps:
                    stop = True
                    break
                chunk = [groups[i] for i in order[lo : lo + cfg.batch]]
                batch = make_batch(chunk, order_rng)
                lr = lr_at(step, total_steps, cfg)
                t0 = time.perf_counter()
                with Tape() as tape:
                    loss = model.loss(batch, train=True, rng=drop_rng)
                if not np.isfinite(loss.data):
                    raise TrainingError(
                        f"non-finite loss at step {step} (lr={lr:.3g}); aborting"
                    )
                opt.zero_grad()
                tape.backward(loss)
                clip_gradients(trainables, cfg.grad_clip)
                opt.step(lr)
                wall_acc += time.perf_counter() - t0
                loss_acc += float(loss.data)
                acc_n += 1
                step += 1
                if step % eval_every == 0 or step == total_steps:
                    row = log_eval(step, lr)
                    if (
                        early_stop_exact_match is not None
                        and row["exact_match"] >= early_stop_exact_match
                    ):
                        stop = True
                        break

    if not metrics or metrics[-1]["step"] != step:
        log_eval(step, lr_at(step, total_steps, cfg))
    if run_dir is not None:
        ckpt_dir = run_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        state = {v.name: v.data.copy() for v in trainables}
        save_checkpoint(ckpt_dir / "adapter.ckpt", state)
    return metrics
