import json

import numpy as np
import pytest

from perceptbridge import cli
from perceptbridge import config as C


def test_preset_catalog_exact():
    assert C.preset_names() == [
        "limber-1", "limber-all", "mapl", "ep-alm",
        "depalm-qp-l0", "depalm-qp-inner", "depalm-r-avgpool",
        "depalm-r-linear", "depalm-r-qp", "depalm-r-rand", "depalm-c-attn",
    ]


# golden values: full-scale expansions pin the published configurations
GOLDEN_FULL = {
    "limber-1": {"extraction": (1, "cls"), "mapping": ("linear",), "injection": ("first_layer",), "n_pt": 0},
    "limber-all": {"extraction": (1, "all"), "mapping": ("linear",), "injection": ("first_layer",), "n_pt": 0},
    "mapl": {"extraction": (1, "all"), "mapping": ("qpmapper", 256, 4, 32), "injection": ("first_layer",), "n_pt": 0},
    "ep-alm": {"extraction": (6, "cls"), "mapping": ("linear",), "injection": ("inner", 12, 1), "n_pt": 0},
    "depalm-qp-l0": {"extraction": (1, "all"), "mapping": ("qpmapper", 1024, 2, 32), "injection": ("first_layer",), "n_pt": 1},
    "depalm-qp-inner": {"extraction": (4, "all"), "mapping": ("qpmapper", 1024, 2, 32), "injection": ("inner", 12, 3), "n_pt": 16},
    "depalm-r-avgpool": {"extraction": (1, "all"), "mapping": ("r-avgpool", 4096), "injection": ("first_layer",), "n_pt": 1},
    "depalm-r-linear": {"extraction": (1, "all"), "mapping": ("r-linear", 4096), "injection": ("first_layer",), "n_pt": 1},
    "depalm-r-qp": {"extraction": (1, "all"), "mapping": ("r-qp", 768), "injection": ("first_layer",), "n_pt": 1},
    "depalm-r-rand": {"extraction": (1, "all"), "mapping": ("r-rand",), "injection": ("first_layer",), "n_pt": 1},
    "depalm-c-attn": {"extraction": (4, "all"), "mapping": ("none",), "injection": ("cross_attn", 12, 3, 1024), "n_pt": 1},
}


@pytest.mark.parametrize("name", list(GOLDEN_FULL))
def test_preset_full_expansion_golden(name):
    cfg = C.expand_preset(name, "full")
    want = GOLDEN_FULL[name]
    assert (cfg.extraction.n_fl, cfg.extraction.cls_mode) == want["extraction"]
    m = want["mapping"]
    assert cfg.mapping.kind == m[0]
    if m[0] == "qpmapper":
        assert (cfg.mapping.d_embed, cfg.mapping.l_qp, cfg.mapping.n_q) == m[1:]
    elif m[0].startswith("r-") and len(m) > 1:
        assert cfg.mapping.d_embed == m[1]
    inj = want["injection"]
    assert cfg.injection.mode == inj[0]
    if inj[0] != "first_layer":
        assert (cfg.injection.n_llm, cfg.injection.n_left) == inj[1:3]
    if len(inj) == 4:
        assert cfg.injection.d_embed == inj[3]
    assert cfg.finetune.n_pt == want["n_pt"]
    assert cfg.model.d_llm == 4096 and cfg.model.d_feats == 1024


def test_rand_law_values_pinned():
    cfg = C.expand_preset("depalm-r-rand", "full")
    r = cfg.mapping.rand
    assert (r.f_min, r.f_max, r.f_mean, r.f_std, r.spike_p) == (1 / 16, 0.5, 0.25, 0.2, 0.1)


def test_desk_expansions_instantiable_windows():
    for name in C.preset_names():
        cfg = C.expand_preset(name, "desk")
        assert cfg.model.llm_layers == 4
        if cfg.injection.mode != "first_layer":
            assert cfg.injection.n_llm + cfg.injection.n_left <= cfg.model.llm_layers


def test_unknown_key_rejected():
    data = C.expand_preset("limber-all", "desk").to_dict()
    data["mapping"]["bogus"] = 1
    with pytest.raises(C.ConfigValidationError, match="mapping.bogus"):
        C.from_dict(data)


def test_missing_n_q_names_key():
    data = C.expand_preset("depalm-qp-l0", "desk").to_dict()
    del data["mapping"]["n_q"]
    with pytest.raises(C.ConfigValidationError, match="mapping.n_q"):
        C.from_dict(data)


def test_kind_inconsistent_fields_rejected():
    data = C.expand_preset("limber-all", "desk").to_dict()
    data["mapping"]["n_q"] = 32
    with pytest.raises(C.ConfigValidationError, match="mapping.n_q"):
        C.from_dict(data)


def test_window_must_fit():
    data = C.expand_preset("ep-alm", "desk").to_dict()
    data["injection"]["n_llm"] = 9
    with pytest.raises(C.ConfigValidationError, match="injection.n_llm"):
        C.from_dict(data)


def test_overrides_round_trip():
    cfg = C.expand_preset("depalm-qp-l0", "desk")
    out = C.apply_overrides(cfg, ["train.seed=7", "train.lr_max=0.002"])
    assert out.train.seed == 7 and out.train.lr_max == 0.002
    again = C.from_dict(out.to_dict())
    assert again.to_dict() == out.to_dict()


def test_json_file_round_trip(tmp_path):
    cfg = C.expand_preset("depalm-r-rand", "desk")
    path = tmp_path / "cfg.json"
    cfg.to_json(path)
    loaded = C.from_json(path)
    assert loaded.to_dict() == cfg.to_dict()


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def test_cli_list_presets(capsys):
    assert cli.main(["list-presets"]) == 0
    out = capsys.readouterr().out
    for name in C.preset_names():
        assert name in out


def test_cli_count_params_full(capsys):
    assert cli.main(["count-params", "--preset", "depalm-qp-l0", "--dims", "full"]) == 0
    out = capsys.readouterr().out
    assert "17,892,352" in out


def test_cli_count_params_validation_error(tmp_path, capsys):
    data = C.expand_preset("depalm-qp-l0", "desk").to_dict()
    del data["mapping"]["n_q"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(data))
    assert cli.main(["count-params", "--config", str(bad)]) == 1
    assert "mapping.n_q" in capsys.readouterr().err


TINY = [
    "--override", "model.grid=4", "--override", "model.d_feats=32",
    "--override", "model.d_llm=32", "--override", "model.llm_layers=2",
    "--override", "model.llm_heads=2", "--override", "model.vocab=32",
    "--override", "mapping.d_embed=16", "--override", "train.batch=8",
    "--override", "train.epochs=1",
]


def _tiny_train_args(tmp_path, extra=()):
    return [
        "train", "--preset", "depalm-qp-l0", *TINY,
        "--pretrain-steps", "20", "--n-train", "32", "--n-eval", "16",
        "--max-steps", "4", "--out", str(tmp_path), *extra,
    ]


def test_cli_train_run_directory(tmp_path, capsys):
    assert cli.main(_tiny_train_args(tmp_path)) == 0
    runs = list(tmp_path.iterdir())
    assert len(runs) == 1
    run = runs[0]
    assert (run / "config.json").exists()
    assert (run / "metrics.jsonl").exists()
    assert (run / "params.json").exists()
    assert (run / "checkpoints" / "adapter.ckpt").exists()
    # resolved config re-validates
    C.from_json(run / "config.json")
    # the override is echoed in the resolved config
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["model"]["grid"] == 4


def test_cli_train_seed_override_echoed(tmp_path):
    assert cli.main(_tiny_train_args(tmp_path, ("--override", "train.seed=7"))) == 0
    run = next(tmp_path.iterdir())
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["train"]["seed"] == 7


def test_cli_run_dirs_never_overwritten(tmp_path):
    assert cli.main(_tiny_train_args(tmp_path)) == 0
    assert cli.main(_tiny_train_args(tmp_path)) == 0
    assert len(list(tmp_path.iterdir())) == 2


def test_cli_self_reproducible(tmp_path, capsys):
    assert cli.main(_tiny_train_args(tmp_path / "a")) == 0
    out1 = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    run = next((tmp_path / "a").iterdir())
    assert cli.main([
        "train", "--config", str(run / "config.json"),
        "--pretrain-steps", "20", "--n-train", "32", "--n-eval", "16",
        "--max-steps", "4", "--out", str(tmp_path / "b"),
    ]) == 0
    out2 = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    for key in ("step", "lr", "train_loss", "exact_match", "token_accuracy"):
        assert out1[key] == out2[key]


def test_cli_eval_on_run(tmp_path, capsys):
    assert cli.main(_tiny_train_args(tmp_path)) == 0
    capsys.readouterr()
    run = next(tmp_path.iterdir())
    assert cli.main(["eval", "--run", str(run), "--n", "16"]) == 0
    scores = json.loads(capsys.readouterr().out)
    assert {"exact_match", "token_accuracy"} <= set(scores)


def test_cli_sweep_summary(tmp_path, capsys):
    args = [
        "sweep", "--preset", "depalm-qp-l0", *TINY,
        "--pretrain-steps", "10", "--n-train", "16", "--n-eval", "8",
        "--max-steps", "2", "--out", str(tmp_path), "--lr", "1e-3,8e-4",
    ]
    assert cli.main(args) == 0
    capsys.readouterr()
    sweep_dir = next(d for d in tmp_path.iterdir() if d.name.startswith("sweep"))
    lines = (sweep_dir / "summary.csv").read_text().strip().splitlines()
    assert len(lines) == 3  # header + one row per value


def test_cli_bench_writes_csv(tmp_path, capsys):
    args = [
        "bench", "--preset", "limber-all",
        "--override", "model.grid=4", "--override", "model.d_feats=16",
        "--override", "model.d_llm=16", "--override", "model.llm_layers=2",
        "--override", "model.llm_heads=2", "--override", "model.vocab=32",
        "--trials", "10", "--batch", "2", "--text-len", "4",
        "--out", str(tmp_path),
    ]
    assert cli.main(args) == 0
    capsys.readouterr()
    bench_dir = next(d for d in tmp_path.iterdir() if d.name.startswith("bench"))
    lines = (bench_dir / "bench.csv").read_text().strip().splitlines()
    assert lines[0] == "config,dims,total_params,prefix_tokens,flops_fwd,ms_per_step,ms_std"
    assert len(lines) == 2
    rows = json.loads((bench_dir / "bench.json").read_text())
    assert rows[0]["config"] == "limber-all"
