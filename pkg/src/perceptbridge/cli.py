"""Command-line entry point: presets, counting, pretraining, training, bench, sweep.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime
failure (divergence, I/O). Every run writes into a fresh run directory:
config.json, metrics.jsonl, params.json, bench.csv, checkpoints/.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import accounting, checkpoint, config as cfgmod, train as trainmod
from .adapter import AdapterModel
from .backbones import ToyCausalLM
from .config import AdapterConfig, ConfigValidationError
from .task import SyntheticTaskSpec
from .train import TrainingError


def _resolve_config(args) -> AdapterConfig:
    if getattr(args, "preset", None) and getattr(args, "config", None):
        raise ConfigValidationError("preset", "give either --preset or --config, not both")
    if getattr(args, "preset", None):
        cfg = cfgmod.expand_preset(args.preset, getattr(args, "dims", "desk"))
    elif getattr(args, "config", None):
        cfg = cfgmod.from_json(args.config)
    else:
        raise ConfigValidationError("preset", "one of --preset or --config is required")
    overrides = getattr(args, "override", None) or []
    if overrides:
        cfg = cfgmod.apply_overrides(cfg, overrides)
    return cfg


def _make_run_dir(base: str, name: str) -> Path:
    root = Path(base)
    root.mkdir(parents=True, exist_ok=True)
    run = root / name
    if run.exists():
        stamp = time.strftime("%Y%m%d-%H%M%S") + f"-{int((time.time() % 1) * 1e6):06d}"
        run = root / f"{name}-{stamp}"
    run.mkdir()
    (run / "checkpoints").mkdir()
    return run


def _task_for(cfg: AdapterConfig) -> SyntheticTaskSpec:
    return SyntheticTaskSpec(grid=cfg.model.grid, vocab=cfg.model.vocab)


def _pretrained_lm_state(cfg: AdapterConfig, task, args) -> dict:
    if getattr(args, "lm_checkpoint", None):
        return checkpoint.load_checkpoint(args.lm_checkpoint)
    lm = ToyCausalLM(
        cfg.model.vocab, cfg.model.d_llm, cfg.model.llm_layers, cfg.model.llm_heads,
        32, np.random.default_rng(cfg.train.seed + 7919),
    )
    lm.assign_names("lm")
    steps = getattr(args, "pretrain_steps", 400)
    trainmod.pretrain_toy_lm(lm, task, steps=steps, seed=cfg.train.seed + 13)
    return checkpoint.state_dict(lm)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_list_presets(args) -> int:
    width = max(len(n) for n in cfgmod.preset_names())
    for name in cfgmod.preset_names():
        print(f"{name:<{width}s}  {cfgmod.preset_summary(name)}")
    return 0


def cmd_count_params(args) -> int:
    cfg = _resolve_config(args)
    dims_label = args.dims if args.preset else "custom"
    report = accounting.count_trainable(cfg, dims_label)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(report.pretty())
    if args.out:
        run = _make_run_dir(args.out, f"count-{cfg.name}")
        cfg.to_json(run / "config.json")
        with open(run / "params.json", "w") as f:
            json.dump(report.to_dict(), f, indent=2)
        print(f"written: {run}", file=sys.stderr)
    return 0


def cmd_pretrain_lm(args) -> int:
    cfg = _resolve_config(args)
    task = _task_for(cfg)
    run = _make_run_dir(args.out, f"pretrain-{cfg.name}")
    cfg.to_json(run / "config.json")
    lm = ToyCausalLM(
        cfg.model.vocab, cfg.model.d_llm, cfg.model.llm_layers, cfg.model.llm_heads,
        32, np.random.default_rng(cfg.train.seed + 7919),
    )
    lm.assign_names("lm")
    log = trainmod.pretrain_toy_lm(lm, task, steps=args.steps, seed=cfg.train.seed + 13)
    held = trainmod.held_out_lm_loss(lm, task)
    baseline = task.unigram_baseline()
    checkpoint.save_checkpoint(run / "checkpoints" / "lm.ckpt", checkpoint.state_dict(lm))
    with open(run / "metrics.jsonl", "w") as f:
        for row in log:
            f.write(json.dumps(row) + "\n")
    print(f"held-out loss {held:.4f} (unigram baseline {baseline:.4f})")
    print(f"checkpoint: {run / 'checkpoints' / 'lm.ckpt'}")
    if held >= baseline:
        print("warning: pretraining did not beat the unigram baseline", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    run = _make_run_dir(args.out, f"train-{cfg.name}")
    cfg.to_json(run / "config.json")
    task = _task_for(cfg)
    model = AdapterModel(cfg)
    checkpoint.load_state(model.lm, _pretrained_lm_state(cfg, task, args))
    model.registry.dump_json(run / "params.json")
    backbones = {}
    for prefix, module in (("encoder", model.encoder), ("lm", model.lm)):
        for name, var in module.variables():
            backbones[f"{prefix}.{name}"] = var.data.copy()
    checkpoint.save_checkpoint(run / "checkpoints" / "backbones.ckpt", backbones)
    metrics = trainmod.train(
        model,
        task,
        cfg.train,
        n_train=args.n_train,
        n_eval=args.n_eval,
        eval_every=args.eval_every,
        early_stop_exact_match=args.early_stop,
        max_steps=args.max_steps,
        run_dir=run,
    )
    final = metrics[-1]
    print(json.dumps(final))
    print(f"run directory: {run}", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run)
    cfg = cfgmod.from_json(run / "config.json")
    model = AdapterModel(cfg)
    back = checkpoint.load_checkpoint(run / "checkpoints" / "backbones.ckpt")
    own = {}
    for prefix, module in (("encoder", model.encoder), ("lm", model.lm)):
        for name, var in module.variables():
            own[f"{prefix}.{name}"] = var
    for name, arr in back.items():
        own[name].data = arr.copy()
    adapter_state = checkpoint.load_checkpoint(run / "checkpoints" / "adapter.ckpt")
    by_name = {v.name: v for v in model.trainable_variables()}
    for name, arr in adapter_state.items():
        by_name[name].data = arr.copy()
    task = _task_for(cfg)
    samples = task.make_samples(args.n, np.random.default_rng(args.seed))
    scores = trainmod.evaluate(model, samples)
    print(json.dumps(scores))
    return 0


def cmd_bench(args) -> int:
    rows = []
    for name in args.preset:
        cfg = cfgmod.expand_preset(name, "desk")
        if args.override:
            cfg = cfgmod.apply_overrides(cfg, args.override)
        params = accounting.count_trainable(cfg, "desk")
        flops = accounting.estimate_flops(cfg, text_len=args.text_len, batch=args.batch)
        bench = accounting.bench_step(
            cfg, trials=args.trials, batch=args.batch,
            text_len=args.text_len, threads=args.threads,
        )
        print(
            f"{name}: {bench.mean_ms:.1f} +- {bench.std_ms:.1f} ms/step "
            f"({bench.prefix_tokens} prefix tokens, {bench.threads} thread(s))"
        )
        rows.append(accounting.combine_row(params=params, flops=flops, bench=bench, dims="desk"))
    if args.out:
        run = _make_run_dir(args.out, "bench")
        accounting.emit_report(rows, run / "bench.csv", "csv")
        accounting.emit_report(rows, run / "bench.json", "json")
        print(f"written: {run}", file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    values = [float(v) for v in args.lr.split(",")]
    if not values:
        raise ConfigValidationError("lr", "sweep needs at least one value")
    run = _make_run_dir(args.out, "sweep")
    summary = []
    for lr in values:
        sub_args = argparse.Namespace(**vars(args))
        sub_args.override = (args.override or []) + [f"train.lr_max={lr}"]
        sub_args.out = str(run)
        try:
            cfg = _resolve_config(sub_args)
            sub = _make_run_dir(str(run), f"lr-{lr:g}")
            cfg.to_json(sub / "config.json")
            task = _task_for(cfg)
            model = AdapterModel(cfg)
            checkpoint.load_state(model.lm, _pretrained_lm_state(cfg, task, sub_args))
            metrics = trainmod.train(
                model, task, cfg.train,
                n_train=args.n_train, n_eval=args.n_eval,
                eval_every=args.eval_every, max_steps=args.max_steps,
                early_stop_exact_match=args.early_stop, run_dir=sub,
            )
            final = metrics[-1]
            summary.append(
                {"lr": lr, "status": "ok", "exact_match": final["exact_match"],
                 "train_loss": final["train_loss"], "steps": final["step"]}
            )
        except Exception as exc:  # record the failure, keep sweeping
            summary.append({"lr": lr, "status": f"failed: {exc}"})
    import csv as _csv

    with open(run / "summary.csv", "w", newline="") as f:
        writer = _csv.DictWriter(
            f, fieldnames=["lr", "status", "exact_match", "train_loss", "steps"]
        )
        writer.writeheader()
        for row in summary:
            writer.writerow(row)
    for row in summary:
        print(json.dumps(row))
    print(f"run directory: {run}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_config_args(p, dims=True):
    p.add_argument("--preset", help="preset name (see list-presets)")
    p.add_argument("--config", help="path to a config JSON file")
    p.add_argument(
        "--override", action="append", metavar="KEY=VALUE",
        help="dotted-path config override, e.g. train.seed=7",
    )
    if dims:
        p.add_argument("--dims", choices=("desk", "full"), default="desk")


def _add_train_args(p):
    p.add_argument("--out", default="runs", help="run-directory root")
    p.add_argument("--lm-checkpoint", help="pretrained LM checkpoint (else pretrain in-place)")
    p.add_argument("--pretrain-steps", type=int, default=400)
    p.add_argument("--n-train", type=int, default=4096)
    p.add_argument("--n-eval", type=int, default=512)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--early-stop", type=float, default=None, metavar="EXACT_MATCH")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="perceptbridge",
        description="Interfacing frozen perceptual encoders with frozen language models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("list-presets", help="catalog of configurations").set_defaults(fn=cmd_list_presets)

    p = sub.add_parser("count-params", help="analytic trainable-parameter report")
    _add_config_args(p)
    p.add_argument("--json", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_count_params)

    p = sub.add_parser("pretrain-lm", help="pretrain the toy LM on caption text")
    _add_config_args(p, dims=False)
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--out", default="runs")
    p.set_defaults(fn=cmd_pretrain_lm)

    p = sub.add_parser("train", help="train one adapter on the synthetic task")
    _add_config_args(p, dims=False)
    _add_train_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a finished run on fresh samples")
    p.add_argument("--run", required=True)
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--seed", type=int, default=99_991)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="wall-clock per-step timing")
    p.add_argument("--preset", action="append", required=True)
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--text-len", type=int, default=16)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("sweep", help="sequential learning-rate sweep")
    _add_config_args(p, dims=False)
    _add_train_args(p)
    p.add_argument("--lr", default="1e-3,8e-4,4e-4", help="comma-separated lr values")
    p.set_defaults(fn=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, checkpoint.CheckpointError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
