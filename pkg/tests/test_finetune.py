import numpy as np
import pytest

from perceptbridge import autodiff as ad
from perceptbridge.accounting import count_trainable, encoder_bias_count
from perceptbridge.adapter import AdapterModel
from perceptbridge.backbones import ToyEncoder
from perceptbridge.config import expand_preset
from perceptbridge.finetune import apply_bias_tuning, make_prompt_tokens
from perceptbridge.task import SyntheticTaskSpec
from perceptbridge.train import AdamW, Tape, clip_gradients, group_duplicates, make_batch


def test_prompt_tokens_shapes_and_disable():
    rng = np.random.default_rng(0)
    assert make_prompt_tokens(0, 16, rng) is None
    p = make_prompt_tokens(3, 16, rng)
    assert p.shape == (3, 16) and p.trainable


def test_prompt_parameter_delta():
    base = expand_preset("depalm-qp-l0", "desk")
    base.finetune.n_pt = 0
    with_prompt = expand_preset("depalm-qp-l0", "desk")
    d = count_trainable(with_prompt).total - count_trainable(base).total
    assert d == 1 * with_prompt.model.d_llm
    full = expand_preset("depalm-qp-inner", "full")
    assert count_trainable(full).blocks["prompt.tokens"] == 16 * 4096


def test_bias_tuning_registry_matches_analytic():
    rng = np.random.default_rng(1)
    enc = ToyEncoder(8, 64, 4, 4, 4, rng)
    enc.assign_names("encoder")
    for _, v in enc.variables():
        v.set_trainable(False)
    n = apply_bias_tuning(enc)
    enumerated = sum(v.size for _, v in enc.variables() if v.trainable)
    assert n == enumerated == encoder_bias_count(64, 4)


def test_bias_tuning_full_scale_near_half_million():
    n = encoder_bias_count(1024, 24)
    assert 0.5e6 * 0.5 <= n <= 0.5e6 * 1.5


def test_bias_tuning_disabled_zero_delta():
    cfg = expand_preset("depalm-qp-l0", "desk")
    base = count_trainable(cfg).total
    cfg.finetune.bias_tuning = True
    assert count_trainable(cfg).total - base == encoder_bias_count(64, 4)


def test_bias_tuning_warns_without_biases():
    class Empty:
        def variables(self):
            return iter(())

    with pytest.warns(UserWarning):
        apply_bias_tuning(Empty())


def test_freeze_trainable_set_is_mapper_and_prompt():
    model = AdapterModel(expand_preset("depalm-qp-l0", "desk"))
    tops = {name.split(".", 1)[0] for name in model.registry.trainable_names()}
    assert tops == {"mapper", "prompt"}


def test_freeze_with_bias_tuning_exposes_encoder_biases_only():
    cfg = expand_preset("depalm-qp-l0", "desk")
    cfg.finetune.bias_tuning = True
    model = AdapterModel(cfg)
    enc_trainable = [
        n for n in model.registry.trainable_names() if n.startswith("encoder.")
    ]
    assert enc_trainable and all(n.endswith(".bias") for n in enc_trainable)


def _train_steps(model, task, n_steps=3, seed=0):
    # several steps: zero-gated blocks need the gates to move before
    # gradients reach the parameters behind them
    rng = np.random.default_rng(seed)
    groups = group_duplicates(task.make_samples(8, rng))
    batch = make_batch(groups, rng)
    trainables = model.trainable_variables()
    opt = AdamW(trainables, weight_decay=0.1)
    for _ in range(n_steps):
        with Tape() as tape:
            loss = model.loss(batch, train=True, rng=rng)
        opt.zero_grad()
        tape.backward(loss)
        clip_gradients(trainables, 0.8)
        opt.step(1e-3)


@pytest.mark.parametrize("preset", ["depalm-qp-l0", "ep-alm", "depalm-c-attn"])
def test_registry_optimizer_agreement(preset):
    cfg = expand_preset(preset, "desk")
    model = AdapterModel(cfg)
    task = SyntheticTaskSpec(grid=cfg.model.grid, vocab=cfg.model.vocab)
    before = {v.name: v.data.tobytes() for _, v in model.variables()}
    _train_steps(model, task)
    changed = {
        v.name for _, v in model.variables() if v.data.tobytes() != before[v.name]
    }
    assert changed == set(model.registry.trainable_names())


def test_registry_json_report(tmp_path):
    model = AdapterModel(expand_preset("depalm-qp-l0", "desk"))
    path = tmp_path / "registry.json"
    model.registry.dump_json(path)
    import json

    data = json.loads(path.read_text())
    assert data["total_trainable"] == 65216
    assert {"name", "shape", "trainable", "count"} <= set(data["variables"][0])


def test_prompt_reaches_first_text_position():
    # prompt sits before the text, so even the BOS-position logits see it
    cfg = expand_preset("depalm-qp-l0", "desk")
    model = AdapterModel(cfg)
    grids = np.random.default_rng(3).standard_normal((1, 8, 8, 16)).astype(np.float32)
    ids = np.array([[0, 2, 3]])
    base = model.forward(grids, ids, train=False).data
    model.prompt.data = model.prompt.data + 1.0
    moved = model.forward(grids, ids, train=False).data
    assert not np.allclose(base[0, 0], moved[0, 0])
