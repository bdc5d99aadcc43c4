import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from perceptbridge import autodiff as ad
from perceptbridge import blocks
from gradcheck import finite_difference_grad, relative_error


def rng64(seed=0):
    return np.random.default_rng(seed)


def test_causal_mask_small_cases():
    m1 = blocks.build_causal_mask(1)
    assert m1.shape == (1, 1) and m1[0, 0]
    m3 = blocks.build_causal_mask(3)
    assert list(m3[2]) == [True, True, True]
    assert list(m3[0]) == [True, False, False]


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=40))
def test_causal_mask_allowed_pair_count(s):
    assert blocks.build_causal_mask(s).sum() == s * (s + 1) // 2


def test_attention_single_key_is_projected_value():
    rng = rng64(1)
    mha = blocks.MultiHeadAttention(8, 2, rng, dtype=np.float64)
    q = ad.Tensor(rng.standard_normal((1, 5, 8)))
    kv = ad.Tensor(rng.standard_normal((1, 1, 8)))
    out = mha(q, kv, kv)
    # softmax over one key is 1, so every query row sees wo(wv(kv))
    expected = mha.wo(mha.wv(kv)).data
    np.testing.assert_allclose(out.data, np.repeat(expected, 5, axis=1), atol=1e-12)


def test_attention_hand_evaluated_two_by_two():
    rng = rng64(2)
    mha = blocks.MultiHeadAttention(2, 1, rng, dtype=np.float64)
    # identity projections, no biases
    eye = np.eye(2)
    for lin in (mha.wq, mha.wk, mha.wv, mha.wo):
        lin.weight.data = eye.copy()
        lin.bias.data = np.zeros(2)
    q = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    out = mha(ad.Tensor(q), ad.Tensor(q), ad.Tensor(q))
    scale = 1 / np.sqrt(2)
    scores = q[0] @ q[0].T * scale
    w = np.exp(scores) / np.exp(scores).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(out.data[0], w @ q[0], atol=1e-12)


def test_attention_causal_prefix_unchanged_bitwise():
    rng = rng64(3)
    mha = blocks.MultiHeadAttention(8, 2, rng, dtype=np.float64)
    x = rng.standard_normal((1, 6, 8))
    mask = blocks.build_causal_mask(6)
    base = mha(ad.Tensor(x), ad.Tensor(x), ad.Tensor(x), mask=mask).data
    pert = x.copy()
    pert[0, 4] += 1.0
    out = mha(ad.Tensor(pert), ad.Tensor(pert), ad.Tensor(pert), mask=mask).data
    assert out[0, :4].tobytes() == base[0, :4].tobytes()


def test_attention_head_divisibility_error():
    with pytest.raises(blocks.ConfigError):
        blocks.MultiHeadAttention(10, 3, rng64())


def test_encoder_layer_eval_deterministic():
    rng = rng64(4)
    layer = blocks.TransformerEncoderLayer(8, 2, 8, 0.1, rng)
    x = ad.Tensor(rng.standard_normal((2, 5, 8)).astype(np.float32))
    a = layer(x, train=False).data
    b = layer(x, train=False).data
    assert a.tobytes() == b.tobytes()


def test_encoder_layer_zeroed_projections_is_norm_only():
    rng = rng64(5)
    layer = blocks.TransformerEncoderLayer(8, 2, 8, 0.0, rng, dtype=np.float64)
    layer.attn.wo.weight.data[:] = 0.0
    layer.attn.wo.bias.data[:] = 0.0
    layer.ffn.lin2.weight.data[:] = 0.0
    layer.ffn.lin2.bias.data[:] = 0.0
    x = rng.standard_normal((1, 4, 8))
    out = layer(ad.Tensor(x)).data
    expected = layer.norm2(layer.norm1(ad.Tensor(x))).data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_encoder_layer_shape_preserved_any_length():
    rng = rng64(6)
    layer = blocks.TransformerEncoderLayer(8, 2, 8, 0.0, rng)
    for s in (1, 3, 9):
        x = ad.Tensor(rng.standard_normal((2, s, 8)).astype(np.float32))
        assert layer(x).shape == (2, s, 8)


def test_encoder_layer_permutation_equivariant():
    rng = rng64(7)
    layer = blocks.TransformerEncoderLayer(8, 2, 8, 0.0, rng, dtype=np.float64)
    x = rng.standard_normal((1, 6, 8))
    perm = rng.permutation(6)
    out_perm = layer(ad.Tensor(x[:, perm])).data
    out_base = layer(ad.Tensor(x)).data
    np.testing.assert_allclose(out_perm, out_base[:, perm], atol=1e-10)


def test_encoder_layer_gradcheck():
    rng = rng64(8)
    layer = blocks.TransformerEncoderLayer(6, 2, 6, 0.0, rng, dtype=np.float64)
    layer.assign_names("layer")
    x = rng.standard_normal((1, 4, 6))
    params = [v for _, v in layer.variables()]

    def forward(arrays):
        for p, a in zip(params, arrays):
            p.data = a
        return ad.reduce_sum(ad.mul(layer(ad.Tensor(x)), ad.Tensor(x))).item()

    arrays = [p.data.copy() for p in params]
    with ad.Tape() as tape:
        loss = ad.reduce_sum(ad.mul(layer(ad.Tensor(x)), ad.Tensor(x)))
    tape.backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    fd = finite_difference_grad(forward, arrays, h=1e-6, max_coords=60)
    assert relative_error(analytic, fd) < 1e-4


def test_decoder_layer_causality_exact():
    rng = rng64(9)
    layer = blocks.CausalDecoderLayer(8, 2, rng, dtype=np.float64)
    x = rng.standard_normal((1, 5, 8))
    base = layer(ad.Tensor(x)).data
    pert = x.copy()
    pert[0, 3] += 0.5
    out = layer(ad.Tensor(pert)).data
    assert out[0, :3].tobytes() == base[0, :3].tobytes()
    assert not np.allclose(out[0, 3:], base[0, 3:])


def test_module_variable_names_unique_and_stable():
    rng = rng64(10)
    layer = blocks.TransformerEncoderLayer(8, 2, 8, 0.0, rng)
    layer.assign_names("enc")
    names = [n for n, _ in layer.variables()]
    assert len(names) == len(set(names))
    assert "attn.wq.weight" in names
    assert "norm1.bias" in names
    stored = [v.name for _, v in layer.variables()]
    assert "enc.attn.wq.weight" in stored
