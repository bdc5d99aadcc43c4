"""Trainable-parameter accounting, FLOP estimation, per-step benchmarking.

Parameter counts are closed-form mirrors of the builders and never
allocate weights, so full-scale accounting is instant. For any
desk-instantiable config the analytic total equals the trainable
registry's enumeration exactly (cross-checked in tests).

Cost-model conventions (documented constants):
  * every matmul is counted exactly as multiply-adds: attention
    projections 4*T*d^2 (q, k, v, out), attention scores plus weighted
    sum 2*T_q*T_k*d, feed-forward 2*T*d*d_ff, output head T*d*V;
  * elementwise work is folded in as equivalent multiply-adds under
    `overhead`: softmax 4 ops/element of the score tensor, norms
    4 ops/element, GELU 6 ops/element.
The instrumented oracle (autodiff.MacCounter) counts executed matmul
multiply-adds; estimates must land within 10% of it.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .adapter import DEFAULT_D_PATCH, AdapterModel
from .config import FULL_DIMS, AdapterConfig, expand_preset
from .task import SyntheticTaskSpec
from .train import AdamW, Tape, clip_gradients

FullScaleDims = FULL_DIMS

TOY_ENCODER_FF_FACTOR = 4  # ViT-shaped backbone feed-forward width
LM_FF_FACTOR = 4

SOFTMAX_OPS = 4
NORM_OPS = 4
GELU_OPS = 6


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------

def _linear(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_out * d_in + (d_out if bias else 0)


def _layer_norm(d: int) -> int:
    return 2 * d


def _rms(d: int) -> int:
    return d


def _mha(d: int, out_proj: bool = True) -> int:
    return (4 if out_proj else 3) * _linear(d, d)


def _enc_layer(d: int, d_ff: int) -> int:
    return _mha(d) + _linear(d, d_ff) + _linear(d_ff, d) + 2 * _layer_norm(d)


def _qpmapper(d_in: int, d_e: int, d_out: int, l_qp: int, n_q: int, ff_factor: int = 1) -> int:
    return (
        _linear(d_in, d_e)
        + n_q * d_e
        + l_qp * _enc_layer(d_e, ff_factor * d_e)
        + _linear(d_e, d_out)
        + _rms(d_out)
    )


def encoder_bias_count(d_feats: int, enc_layers: int) -> int:
    """Bias inventory of the patch encoder (what bias tuning unfreezes)."""
    per_layer = 4 * d_feats + (TOY_ENCODER_FF_FACTOR + 1) * d_feats + 2 * d_feats
    return d_feats + enc_layers * per_layer


@dataclass
class ParamReport:
    config: str
    dims: str
    blocks: dict[str, int]
    total: int = 0

    def __post_init__(self):
        self.total = sum(self.blocks.values())

    def to_dict(self) -> dict:
        return {"config": self.config, "dims": self.dims, "total": self.total, "blocks": self.blocks}

    def pretty(self) -> str:
        lines = [f"{self.config} ({self.dims}): {self.total:,} trainable parameters"]
        for name, n in self.blocks.items():
            lines.append(f"  {name:<24s} {n:>12,}")
        return "\n".join(lines)


def count_trainable(cfg: AdapterConfig, dims_label: str = "custom") -> ParamReport:
    """Closed-form trainable-parameter count for one configuration."""
    m, dims = cfg.mapping, cfg.model
    d_f, d_llm = dims.d_feats, dims.d_llm
    blocks: dict[str, int] = {}
    if m.kind == "linear":
        blocks["mapper.proj"] = _linear(d_f, d_llm)
    elif m.kind == "qpmapper":
        d_e = m.d_embed
        blocks["mapper.down"] = _linear(d_f, d_e)
        blocks["mapper.queries"] = m.n_q * d_e
        blocks["mapper.layers"] = m.l_qp * _enc_layer(d_e, d_e)
        blocks["mapper.up"] = _linear(d_e, d_llm)
        blocks["mapper.out_norm"] = _rms(d_llm)
    elif m.kind in ("r-avgpool", "r-linear", "r-qp"):
        d_e = m.d_embed
        blocks["mapper.embed"] = _linear(d_f, d_e)
        if m.kind == "r-linear":
            blocks["mapper.pool_proj"] = _linear(4 * d_e, d_e)
        elif m.kind == "r-qp":
            blocks["mapper.pool_qp"] = _qpmapper(d_e, d_e, d_e, m.block.l_qp, 1)
        blocks["mapper.norm"] = _rms(d_e)
        blocks["mapper.out"] = _linear(d_e, d_llm)
    elif m.kind == "r-rand":
        blocks["mapper.proj1"] = _linear(d_f, d_llm)
        blocks["mapper.norm"] = _rms(d_llm)
        blocks["mapper.proj2"] = _linear(d_llm, d_llm)
    elif m.kind == "none":
        pass
    else:
        raise ValueError(f"unknown mapping kind {m.kind!r}")

    if cfg.injection.mode == "cross_attn":
        d_e = cfg.injection.d_embed
        blocks["cross.p_in"] = _linear(d_f, d_e)
        blocks["cross.feat_layer"] = _enc_layer(d_e, d_e)
        blocks["cross.text_in"] = _linear(d_llm, d_e)
        blocks["cross.text_hidden"] = _linear(d_e, d_e)
        blocks["cross.text_norm"] = _rms(d_e)
        blocks["cross.attn"] = _mha(d_e, out_proj=cfg.injection.attn_out_proj)
        blocks["cross.out_proj"] = _linear(d_e, d_llm)
        blocks["cross.out_norm"] = _rms(d_llm)
        blocks["cross.gates"] = cfg.injection.n_llm

    if cfg.finetune.n_pt > 0:
        blocks["prompt.tokens"] = cfg.finetune.n_pt * d_llm
    if cfg.finetune.bias_tuning:
        blocks["encoder.biases"] = encoder_bias_count(d_f, dims.enc_layers)
    return ParamReport(config=cfg.name, dims=dims_label, blocks=blocks)


def mapl_dff_variants() -> dict[str, int]:
    """MAPL full-scale counts under both feed-forward-width readings."""
    cfg = expand_preset("mapl", "full")
    m, dims = cfg.mapping, cfg.model
    base = _linear(dims.d_feats, m.d_embed) + m.n_q * m.d_embed + _linear(m.d_embed, dims.d_llm) + _rms(dims.d_llm)
    return {
        "d_ff=d_embed": base + m.l_qp * _enc_layer(m.d_embed, m.d_embed),
        "d_ff=2*d_embed": base + m.l_qp * _enc_layer(m.d_embed, 2 * m.d_embed),
    }


# Table 1 reproduction targets (millions), with tolerance notes
TABLE1_TARGETS = {
    "ep-alm": (4.2e6, 0.10),
    "depalm-qp-l0": (17.9e6, 0.10),
    "depalm-qp-inner": (18.1e6, 0.10),
    "depalm-r-avgpool": (21e6, 0.10),
    "depalm-r-linear": (88e6, 0.10),
    "depalm-r-qp": (18e6, 0.10),
    "depalm-r-rand": (21e6, 0.10),
}
# published count not reproduced by any implemented sub-variant; reported, flagged
TABLE1_FLAGGED = {
    "depalm-c-attn": (17.9e6, 0.25),
}


def table1_report() -> list[dict]:
    """Full-scale counts for every preset, against the published column."""
    rows = []
    for name, (target, tol) in {**TABLE1_TARGETS, **TABLE1_FLAGGED}.items():
        got = count_trainable(expand_preset(name, "full"), "full").total
        rows.append(
            {
                "config": name,
                "computed": got,
                "published": target,
                "rel_err": abs(got - target) / target,
                "tolerance": tol,
                "flagged": name in TABLE1_FLAGGED,
            }
        )
    mapl = mapl_dff_variants()
    rows.append(
        {
            "config": "mapl",
            "computed": mapl["d_ff=d_embed"],
            "computed_dff2": mapl["d_ff=2*d_embed"],
            "published": 3.4e6,
            "note": "matched by d_ff=2*d_embed only; both reported, neither chosen as truth",
        }
    )
    limber = count_trainable(expand_preset("limber-all", "full"), "full").total
    rows.append(
        {
            "config": "limber-all",
            "computed": limber,
            "published": 12.5e6,
            "note": "published count uses a different backbone width; configured dims give this value",
        }
    )
    return rows


# ---------------------------------------------------------------------------
# FLOP estimation
# ---------------------------------------------------------------------------

@dataclass
class FlopReport:
    config: str
    prefix_tokens: int
    text_len: int
    batch: int
    matmul_macs: int
    overhead_macs: int
    breakdown: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.matmul_macs + self.overhead_macs

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "prefix_tokens": self.prefix_tokens,
            "text_len": self.text_len,
            "batch": self.batch,
            "matmul_macs": self.matmul_macs,
            "overhead_macs": self.overhead_macs,
            "total": self.total,
            "breakdown": self.breakdown,
        }


def _attn_macs(t_q: int, t_k: int, d: int) -> int:
    return 3 * t_k * d * d + t_q * d * d + 2 * t_q * t_k * d  # k,v over keys; q,out over queries


def _enc_layer_macs(t: int, d: int, d_ff: int) -> tuple[int, int]:
    macs = _attn_macs(t, t, d) + 2 * t * d * d_ff
    overhead = SOFTMAX_OPS * t * t + 2 * NORM_OPS * t * d + GELU_OPS * t * d_ff
    return macs, overhead


def injected_tokens(cfg: AdapterConfig) -> int:
    """Tokens prepended per populated LM layer at eval time."""
    g2 = cfg.model.grid * cfg.model.grid
    n_all = 1 + g2
    m = cfg.mapping
    if m.kind == "linear":
        return 1 if cfg.extraction.cls_mode != "all" else n_all
    if m.kind == "qpmapper":
        return m.n_q
    if m.kind in ("r-avgpool", "r-linear", "r-qp"):
        return 1 + g2 // 4
    if m.kind == "r-rand":
        return (1 + g2) if m.rand.eval_keep_all else 1 + int(m.rand.f_max * g2)
    return 0  # cross-attention prepends nothing


def estimate_flops(
    cfg: AdapterConfig,
    text_len: int,
    batch: int = 1,
    d_patch: int = DEFAULT_D_PATCH,
) -> FlopReport:
    """Forward-pass cost estimate per the documented conventions."""
    dims = cfg.model
    d_f, d_llm, g2 = dims.d_feats, dims.d_llm, dims.grid * dims.grid
    n_enc_tok = 1 + g2
    macs: dict[str, int] = {}
    over = 0

    macs["encoder.patch_embed"] = g2 * d_patch * d_f
    enc_m, enc_o = _enc_layer_macs(n_enc_tok, d_f, TOY_ENCODER_FF_FACTOR * d_f)
    macs["encoder.layers"] = dims.enc_layers * enc_m
    over += dims.enc_layers * enc_o

    m = cfg.mapping
    n_fl = cfg.extraction.n_fl
    n_in = 1 if cfg.extraction.cls_mode != "all" else n_enc_tok
    n_p = injected_tokens(cfg)
    if m.kind == "linear":
        macs["mapper"] = n_fl * n_in * d_f * d_llm
    elif m.kind == "qpmapper":
        d_e = m.d_embed
        t = n_in + m.n_q
        lay_m, lay_o = _enc_layer_macs(t, d_e, d_e)
        macs["mapper"] = n_fl * (n_in * d_f * d_e + m.l_qp * lay_m + m.n_q * d_e * d_llm)
        over += n_fl * (m.l_qp * lay_o + NORM_OPS * m.n_q * d_llm)
    elif m.kind in ("r-avgpool", "r-linear", "r-qp"):
        d_e = m.d_embed
        n_blocks = g2 // 4
        total = n_enc_tok * d_f * d_e + (1 + n_blocks) * d_e * d_llm
        if m.kind == "r-linear":
            total += n_blocks * 4 * d_e * d_e
        elif m.kind == "r-qp":
            lay_m, lay_o = _enc_layer_macs(5, d_e, d_e)
            total += n_blocks * (4 * d_e * d_e + m.block.l_qp * lay_m + d_e * d_e)
            over += n_blocks * m.block.l_qp * lay_o
        macs["mapper"] = total
        over += NORM_OPS * (1 + n_blocks) * d_e
    elif m.kind == "r-rand":
        kept = n_p
        macs["mapper"] = kept * d_f * d_llm + kept * d_llm * d_llm
        over += NORM_OPS * kept * d_llm

    inj = cfg.injection
    base = text_len + cfg.finetune.n_pt
    lm_macs = 0
    if inj.mode == "first_layer":
        per_layer = [base + n_p] * dims.llm_layers
    elif inj.mode == "inner":
        from .injection import assign_levels

        populated = assign_levels(n_fl, inj.n_llm, inj.n_left, dims.llm_layers)
        per_layer = [base + (n_p if j in populated else 0) for j in range(dims.llm_layers)]
    else:
        per_layer = [base] * dims.llm_layers
    for t in per_layer:
        lm_macs += _attn_macs(t, t, d_llm) + 2 * t * d_llm * LM_FF_FACTOR * d_llm
        over += SOFTMAX_OPS * t * t + 2 * NORM_OPS * t * d_llm + GELU_OPS * t * LM_FF_FACTOR * d_llm
    macs["lm.layers"] = lm_macs
    macs["lm.head"] = text_len * d_llm * dims.vocab
    over += NORM_OPS * text_len * d_llm

    if inj.mode == "cross_attn":
        d_e = inj.d_embed
        lay_m, lay_o = _enc_layer_macs(n_enc_tok, d_e, d_e)
        feat = n_fl * (n_enc_tok * d_f * d_e + lay_m)
        over += n_fl * lay_o
        per_entry = (
            base * (d_llm * d_e + d_e * d_e)  # text feed-forward
            + _attn_macs(base, n_enc_tok, d_e)
            - (0 if inj.attn_out_proj else base * d_e * d_e)
            + base * d_e * d_llm
        )
        macs["cross"] = feat + inj.n_llm * per_entry
        over += inj.n_llm * (SOFTMAX_OPS * base * n_enc_tok + 2 * NORM_OPS * base * d_e)

    scaled = {k: batch * v for k, v in macs.items()}
    return FlopReport(
        config=cfg.name,
        prefix_tokens=n_p,
        text_len=text_len,
        batch=batch,
        matmul_macs=sum(scaled.values()),
        overhead_macs=batch * over,
        breakdown=scaled,
    )


# ---------------------------------------------------------------------------
# wall-clock benchmarking
# ---------------------------------------------------------------------------

@dataclass
class BenchResult:
    config: str
    mean_ms: float
    std_ms: float
    trials: int
    warmup: int
    batch: int
    text_len: int
    prefix_tokens: int
    threads: int

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "mean_ms": self.mean_ms,
            "std_ms": self.std_ms,
            "trials": self.trials,
            "warmup": self.warmup,
            "batch": self.batch,
            "text_len": self.text_len,
            "prefix_tokens": self.prefix_tokens,
            "threads": self.threads,
        }


def bench_step(
    cfg: AdapterConfig,
    trials: int = 10,
    warmup: int = 3,
    batch: int = 16,
    text_len: int = 16,
    threads: int = 1,
    seed: int = 0,
) -> BenchResult:
    """Mean/stddev wall time of a full optimizer step (fwd+bwd+update)."""
    if trials < 10 or warmup < 3:
        raise ValueError("need >= 10 timed trials after >= 3 warmup steps")
    from .train import Batch

    rng = np.random.default_rng(seed)
    model = AdapterModel(cfg, rng=np.random.default_rng(seed))
    dims = cfg.model
    grids = rng.standard_normal(
        (batch, dims.grid, dims.grid, DEFAULT_D_PATCH)
    ).astype(np.float32)
    ids = rng.integers(2, dims.vocab, size=(batch, text_len + 1), dtype=np.int64)
    ids[:, 0] = 0
    fake = Batch(
        grids=grids,
        input_ids=ids[:, :-1],
        target_ids=ids[:, 1:],
        loss_mask=np.ones((batch, text_len), dtype=bool),
    )
    trainables = model.trainable_variables()
    opt = AdamW(trainables, weight_decay=cfg.train.weight_decay)
    drop_rng = np.random.default_rng(seed + 1)

    def one_step() -> float:
        t0 = time.perf_counter()
        with Tape() as tape:
            loss = model.loss(fake, train=True, rng=drop_rng)
        opt.zero_grad()
        tape.backward(loss)
        clip_gradients(trainables, cfg.train.grad_clip)
        opt.step(1e-4)
        return time.perf_counter() - t0

    times = []
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            one_step()
        # widen to groups of steps if a single step is near timer resolution
        reps = 1
        probe = one_step()
        while probe * reps < 5e-3:
            reps *= 2
        for _ in range(trials):
            acc = sum(one_step() for _ in range(reps))
            times.append(acc / reps)
    arr = 1000.0 * np.asarray(times)
    return BenchResult(
        config=cfg.name,
        mean_ms=float(arr.mean()),
        std_ms=float(arr.std(ddof=1)),
        trials=trials,
        warmup=warmup,
        batch=batch,
        text_len=text_len,
        prefix_tokens=injected_tokens(cfg),
        threads=threads,
    )


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

CSV_COLUMNS = ["config", "dims", "total_params", "prefix_tokens", "flops_fwd", "ms_per_step", "ms_std"]


def combine_row(
    params: ParamReport | None = None,
    flops: FlopReport | None = None,
    bench: BenchResult | None = None,
    config: str = "",
    dims: str = "",
) -> dict:
    """One emission row out of whichever reports were produced."""
    return {
        "config": config or (params.config if params else (flops.config if flops else bench.config)),
        "dims": dims or (params.dims if params else ""),
        "total_params": params.total if params else "",
        "prefix_tokens": (
            flops.prefix_tokens if flops else (bench.prefix_tokens if bench else "")
        ),
        "flops_fwd": flops.total if flops else "",
        "ms_per_step": bench.mean_ms if bench else "",
        "ms_std": bench.std_ms if bench else "",
    }


def emit_report(rows: list[dict], path, fmt: str = "csv") -> None:
    """Write rows as CSV (fixed column order) or JSON (same fields)."""
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row.get(k, "") for k in CSV_COLUMNS})
    elif fmt == "json":
        with open(path, "w") as f:
            json.dump([{k: row.get(k, "") for k in CSV_COLUMNS} for row in rows], f, indent=2)
    else:
        raise ValueError(f'format must be "csv" or "json", got {fmt!r}')
