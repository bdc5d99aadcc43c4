import math

import numpy as np
import pytest

from perceptbridge import autodiff as ad
from perceptbridge.backbones import FeatureStack
from perceptbridge.blocks import ConfigError
from perceptbridge.mapping import (
    BlockResampler,
    LinearMapper,
    QPMapper,
    RandLaw,
    RandSubsampler,
    sample_keep_fraction,
)
from gradcheck import finite_difference_grad, relative_error

D_FEATS = 12
D_LLM = 20


def stack_of(tokens, grid_shape=(8, 8), cls_only=False):
    return FeatureStack(levels=[ad.Tensor(tokens)], cls_only=cls_only, grid_shape=grid_shape)


def random_stack(seed, n_patches=64, grid_shape=(8, 8), dtype=np.float32):
    rng = np.random.default_rng(seed)
    toks = rng.standard_normal((2, 1 + n_patches, D_FEATS)).astype(dtype)
    return stack_of(toks, grid_shape)


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------

def test_linear_map_single_cls_token():
    rng = np.random.default_rng(0)
    m = LinearMapper(D_FEATS, D_LLM, rng)
    out = m(ad.Tensor(rng.standard_normal((1, 1, D_FEATS)).astype(np.float32)))
    assert out.shape == (1, 1, D_LLM)


def test_linear_map_zero_weights_zero_output():
    rng = np.random.default_rng(1)
    m = LinearMapper(D_FEATS, D_LLM, rng)
    m.proj.weight.data[:] = 0.0
    m.proj.bias.data[:] = 0.0
    out = m(ad.Tensor(np.ones((1, 5, D_FEATS), dtype=np.float32)))
    assert np.all(out.data == 0.0)


def test_linear_map_preserves_count():
    rng = np.random.default_rng(2)
    m = LinearMapper(D_FEATS, D_LLM, rng)
    out = m(ad.Tensor(rng.standard_normal((1, 65, D_FEATS)).astype(np.float32)))
    assert out.shape == (1, 65, D_LLM)


# ---------------------------------------------------------------------------
# query pooling
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 65, 257])
def test_qpmapper_emits_exactly_n_q_tokens(n):
    rng = np.random.default_rng(3)
    m = QPMapper(D_FEATS, 16, D_LLM, l_qp=2, n_q=32, rng=rng)
    out = m(ad.Tensor(rng.standard_normal((1, n, D_FEATS)).astype(np.float32)))
    assert out.shape == (1, 32, D_LLM)


def test_qpmapper_eval_deterministic():
    rng = np.random.default_rng(4)
    m = QPMapper(D_FEATS, 16, D_LLM, l_qp=2, n_q=4, rng=rng)
    x = ad.Tensor(rng.standard_normal((1, 9, D_FEATS)).astype(np.float32))
    assert m(x).data.tobytes() == m(x).data.tobytes()


def test_qpmapper_permutation_invariant():
    rng = np.random.default_rng(5)
    m = QPMapper(D_FEATS, 16, D_LLM, l_qp=2, n_q=4, rng=rng, dtype=np.float64)
    x = rng.standard_normal((1, 7, D_FEATS))
    perm = rng.permutation(7)
    out = m(ad.Tensor(x)).data
    out_perm = m(ad.Tensor(x[:, perm])).data
    np.testing.assert_allclose(out_perm, out, atol=1e-10)


def test_qpmapper_gradcheck():
    rng = np.random.default_rng(6)
    m = QPMapper(6, 8, 10, l_qp=1, n_q=3, rng=rng, n_heads=2, p_drop=0.0, dtype=np.float64)
    m.assign_names("qp")
    x = rng.standard_normal((1, 5, 6))
    params = [v for _, v in m.variables()]

    def forward(arrays):
        for p, a in zip(params, arrays):
            p.data = a
        out = m(ad.Tensor(x))
        return ad.reduce_sum(ad.mul(out, out)).item()

    arrays = [p.data.copy() for p in params]
    with ad.Tape() as tape:
        out = m(ad.Tensor(x))
        loss = ad.reduce_sum(ad.mul(out, out))
    tape.backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    fd = finite_difference_grad(forward, arrays, h=1e-6, max_coords=50)
    assert relative_error(analytic, fd) < 1e-4


# ---------------------------------------------------------------------------
# block resamplers
# ---------------------------------------------------------------------------

def test_avgpool_constant_grid():
    rng = np.random.default_rng(7)
    r = BlockResampler("avgpool", D_FEATS, 16, D_LLM, rng, dtype=np.float64)
    v = rng.standard_normal(D_FEATS)
    toks = np.broadcast_to(v, (1, 65, D_FEATS)).copy()
    out = r(stack_of(toks), train=False)
    # all pooled tokens identical: every block is the same constant
    assert out.shape == (1, 17, D_LLM)
    for i in range(2, 17):
        np.testing.assert_allclose(out.data[0, i], out.data[0, 1], atol=1e-12)


def test_avgpool_matches_brute_force_2x2_means():
    rng = np.random.default_rng(8)
    r = BlockResampler("avgpool", D_FEATS, 16, D_LLM, rng, dtype=np.float64)
    toks = rng.standard_normal((1, 65, D_FEATS))
    out = r(stack_of(toks), train=False)

    # independent pipeline: embed, brute-force 2x2 means, cls, norm, out
    W, b = r.embed.weight.data, r.embed.bias.data
    emb = toks @ W.T + b
    grid = emb[0, 1:].reshape(8, 8, 16)
    pooled = np.zeros((4, 4, 16))
    for i in range(4):
        for j in range(4):
            pooled[i, j] = grid[2 * i : 2 * i + 2, 2 * j : 2 * j + 2].reshape(4, 16).mean(axis=0)
    seq = np.concatenate([emb[0, :1], pooled.reshape(16, 16)], axis=0)
    normed = seq / np.sqrt((seq**2).mean(axis=-1, keepdims=True) + 1e-6) * r.norm.weight.data
    expected = normed @ r.out.weight.data.T + r.out.bias.data
    np.testing.assert_allclose(out.data[0], expected, atol=1e-10)


@pytest.mark.parametrize("grid,expected", [(8, 17), (16, 65)])
def test_block_resampler_token_counts(grid, expected):
    rng = np.random.default_rng(9)
    r = BlockResampler("avgpool", D_FEATS, 16, D_LLM, rng)
    toks = rng.standard_normal((1, 1 + grid * grid, D_FEATS)).astype(np.float32)
    out = r(stack_of(toks, grid_shape=(grid, grid)), train=False)
    assert out.shape == (1, expected, D_LLM)


def test_block_resampler_1d_sequences():
    rng = np.random.default_rng(10)
    r = BlockResampler("linear", D_FEATS, 16, D_LLM, rng)
    toks = rng.standard_normal((1, 1 + 32, D_FEATS)).astype(np.float32)
    out = r(stack_of(toks, grid_shape=(32,)), train=False)
    assert out.shape == (1, 1 + 8, D_LLM)


def test_block_resampler_rejects_non_tiling_grid():
    rng = np.random.default_rng(11)
    r = BlockResampler("avgpool", D_FEATS, 16, D_LLM, rng)
    toks = np.zeros((1, 1 + 9, D_FEATS), dtype=np.float32)
    with pytest.raises(ConfigError):
        r(stack_of(toks, grid_shape=(3, 3)), train=False)


@pytest.mark.parametrize("kind", ["linear", "qp"])
def test_shared_weights_block_permutation(kind):
    rng = np.random.default_rng(12)
    r = BlockResampler(kind, D_FEATS, 8, D_LLM, rng, l_qp=1, n_heads=2, dtype=np.float64)
    toks = rng.standard_normal((1, 17, D_FEATS))  # 4x4 grid -> 4 blocks
    out = r(stack_of(toks, grid_shape=(4, 4)), train=False)

    # swap block (0,0) with block (1,1) in the input grid
    grid = toks[0, 1:].reshape(4, 4, D_FEATS).copy()
    a = grid[0:2, 0:2].copy()
    grid[0:2, 0:2] = grid[2:4, 2:4]
    grid[2:4, 2:4] = a
    swapped = np.concatenate([toks[0, :1], grid.reshape(16, D_FEATS)], axis=0)[None]
    out_swapped = r(stack_of(swapped, grid_shape=(4, 4)), train=False)

    # block outputs travel with their contents: pooled tokens 0<->3 swap
    np.testing.assert_allclose(out_swapped.data[0, 1], out.data[0, 4], atol=1e-12)
    np.testing.assert_allclose(out_swapped.data[0, 4], out.data[0, 1], atol=1e-12)
    np.testing.assert_allclose(out_swapped.data[0, 2], out.data[0, 2], atol=1e-12)


# ---------------------------------------------------------------------------
# random subsampler
# ---------------------------------------------------------------------------

def test_rand_eval_token_count_256():
    rng = np.random.default_rng(13)
    r = RandSubsampler(D_FEATS, D_LLM, rng)
    toks = rng.standard_normal((1, 257, D_FEATS)).astype(np.float32)
    for _ in range(3):
        out = r(stack_of(toks, grid_shape=(16, 16)), train=False)
        assert out.shape == (1, 1 + 128, D_LLM)


def test_rand_train_token_count_follows_f():
    rng = np.random.default_rng(14)
    r = RandSubsampler(D_FEATS, D_LLM, rng)
    toks = rng.standard_normal((1, 65, D_FEATS)).astype(np.float32)
    draw = np.random.default_rng(99)
    out = r(stack_of(toks), train=True, rng=draw)
    assert 1 + int(np.floor(r.law.f_min * 64)) <= out.shape[1] <= 1 + 32


def test_rand_eval_keep_all_switch():
    rng = np.random.default_rng(15)
    r = RandSubsampler(D_FEATS, D_LLM, rng, law=RandLaw(eval_keep_all=True))
    toks = rng.standard_normal((1, 65, D_FEATS)).astype(np.float32)
    out = r(stack_of(toks), train=False)
    assert out.shape == (1, 65, D_LLM)


def test_rand_rejects_small_inputs():
    rng = np.random.default_rng(16)
    r = RandSubsampler(D_FEATS, D_LLM, rng)
    toks = np.zeros((1, 9, D_FEATS), dtype=np.float32)
    with pytest.raises(ConfigError):
        r(stack_of(toks, grid_shape=(8,)), train=False)


def test_keep_fraction_law_statistics():
    law = RandLaw()
    rng = np.random.default_rng(17)
    n = 100_000
    draws = np.array([sample_keep_fraction(law, rng) for _ in range(n)])
    assert draws.min() >= law.f_min and draws.max() <= law.f_max

    # P(f == f_max) = spike + (1 - spike) * P(N(mean, std) >= f_max)
    z = (law.f_max - law.f_mean) / law.f_std
    p_top = 0.5 * math.erfc(z / math.sqrt(2.0))
    p = law.spike_p + (1 - law.spike_p) * p_top
    observed = (draws == law.f_max).mean()
    sigma = math.sqrt(p * (1 - p) / n)
    assert abs(observed - p) < 3 * sigma


def test_rand_keeps_input_order():
    rng = np.random.default_rng(18)
    r = RandSubsampler(D_FEATS, D_LLM, rng, dtype=np.float64)
    # make proj1 the identity-ish to observe ordering: project to first dims
    toks = np.arange(65, dtype=np.float64)[None, :, None] * np.ones((1, 65, D_FEATS))
    r.proj1.weight.data[:] = 0.0
    r.proj1.weight.data[0, 0] = 1.0
    r.proj1.bias.data[:] = 0.0
    r.proj2.weight.data = np.eye(D_LLM)
    r.proj2.bias.data[:] = 0.0
    out = r(stack_of(toks), train=True, rng=np.random.default_rng(5))
    first_channel = out.data[0, 1:, 0]
    assert np.all(np.diff(np.sign(first_channel) * np.abs(first_channel)) > 0)


# ---------------------------------------------------------------------------
# gradient flow
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("build", [
    lambda rng: ("tokens", LinearMapper(D_FEATS, D_LLM, rng)),
    lambda rng: ("tokens", QPMapper(D_FEATS, 8, D_LLM, 1, 4, rng, n_heads=2, p_drop=0.0)),
    lambda rng: ("stack", BlockResampler("avgpool", D_FEATS, 8, D_LLM, rng)),
    lambda rng: ("stack", BlockResampler("linear", D_FEATS, 8, D_LLM, rng)),
    lambda rng: ("stack", BlockResampler("qp", D_FEATS, 8, D_LLM, rng, l_qp=1, n_heads=2)),
    lambda rng: ("stack", RandSubsampler(D_FEATS, D_LLM, rng)),
])
def test_every_mapper_variable_gets_gradient(build):
    rng = np.random.default_rng(19)
    arg_kind, mapper = build(rng)
    mapper.assign_names("m")
    toks = rng.standard_normal((2, 65, D_FEATS)).astype(np.float32)
    with ad.Tape() as tape:
        if arg_kind == "tokens":
            out = mapper(ad.Tensor(toks), train=False)
        else:
            out = mapper(stack_of(toks), train=False)
        loss = ad.reduce_sum(ad.mul(out, out))
    tape.backward(loss)
    zero_grads = [
        v.name for _, v in mapper.variables()
        if v.grad is None or np.abs(v.grad).sum() == 0
    ]
    assert zero_grads == []
