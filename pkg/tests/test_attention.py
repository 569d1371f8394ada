import numpy as np
import pytest

from nucleus import tensorcore as tc
from nucleus.attention import (AttentionConfig, AttentionError, FullAttention, NeighborhoodAttention,
                               TemporalAttention, attention_cost, make_spatial, mirrored_offsets,
                               neighbor_table)
from nucleus.tensorcore import Tensor


def randomize(module, rng, scale=0.3):
    for _, p in module.named_parameters():
        p.data = rng.normal(0.0, scale, size=p.shape).astype(p.dtype)


def dense_oracle(att, x, mask=None, bias=None, qk=None):
    """Plain numpy multi-head attention over tokens x (n, D) with an optional (n, n) mask."""
    x = np.asarray(x, np.float64)
    qk = x if qk is None else np.asarray(qk, np.float64)
    D, h = att.dim, att.heads
    hd = D // h
    w = att.qkv.weight.data.astype(np.float64)
    q = qk @ w[:, :D] + att.q_bias.data
    k = qk @ w[:, D:2 * D]
    v = x @ w[:, 2 * D:] + att.v_bias.data
    out = np.zeros_like(x)
    for head in range(h):
        s = slice(head * hd, (head + 1) * hd)
        logits = q[:, s] @ k[:, s].T / np.sqrt(hd)
        if bias is not None:
            logits = logits + bias[head]
        if mask is not None:
            logits = np.where(mask, logits, -np.inf)
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        out[:, s] = p @ v[:, s]
    return out @ att.proj.weight.data + att.proj.bias.data


def grid_tokens(rng, Hp, Wp, D, lead=()):
    return rng.normal(size=lead + (Hp, Wp, D)).astype(np.float32)


def test_radius_zero_is_projected_values():
    rng = np.random.default_rng(0)
    att = NeighborhoodAttention(8, 2, 0, rng)
    randomize(att, rng)
    att.pos_bias.data[:] = 0
    x = grid_tokens(rng, 3, 4, 8)
    v = x @ att.qkv.weight.data[:, 16:] + att.v_bias.data
    expected = v @ att.proj.weight.data + att.proj.bias.data
    np.testing.assert_allclose(att(Tensor(x)).data, expected, atol=1e-5)


@pytest.mark.parametrize("seed", range(10))
def test_saturated_radius_equals_full(seed):
    rng = np.random.default_rng(seed)
    nb = NeighborhoodAttention(8, 2, 3, rng)
    randomize(nb, rng)
    nb.pos_bias.data[:] = 0
    full = FullAttention(8, 2)
    full.load_state_dict({k: v for k, v in nb.state_dict().items() if k != "pos_bias"})
    x = Tensor(grid_tokens(rng, 4, 3, 8, (2,)))
    np.testing.assert_allclose(nb(x).data, full(x).data, atol=1e-5)


def test_neighborhood_matches_masked_oracle():
    rng = np.random.default_rng(1)
    att = NeighborhoodAttention(6, 3, 1, rng)
    randomize(att, rng)
    x = grid_tokens(rng, 3, 3, 6)
    rows, cols = np.divmod(np.arange(9), 3)
    mask = (np.abs(rows[:, None] - rows[None]) <= 1) & (np.abs(cols[:, None] - cols[None]) <= 1)
    # bias lookup by relative offset, row-major over (di, dj)
    off = (rows[None] - rows[:, None] + 1) * 3 + (cols[None] - cols[:, None] + 1)
    bias = att.pos_bias.data[:, np.clip(off, 0, 8)]
    expected = dense_oracle(att, x.reshape(9, 6), mask, bias)
    np.testing.assert_allclose(att(Tensor(x)).data.reshape(9, 6), expected, atol=1e-5)


def test_full_matches_dense_oracle_and_single_token():
    rng = np.random.default_rng(2)
    att = FullAttention(8, 4, rng)
    randomize(att, rng)
    x = grid_tokens(rng, 2, 2, 8)
    np.testing.assert_allclose(att(Tensor(x)).data.reshape(4, 8), dense_oracle(att, x.reshape(4, 8)), atol=1e-5)
    one = grid_tokens(rng, 1, 1, 8)
    v = one @ att.qkv.weight.data[:, 16:] + att.v_bias.data
    np.testing.assert_allclose(att(Tensor(one)).data, v @ att.proj.weight.data + att.proj.bias.data, atol=1e-5)


def test_full_attention_permutation_equivariant():
    rng = np.random.default_rng(3)
    att = FullAttention(8, 2, rng)
    randomize(att, rng)
    x = grid_tokens(rng, 1, 6, 8)
    perm = rng.permutation(6)
    out = att(Tensor(x)).data
    out_perm = att(Tensor(x[:, perm])).data
    np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-5)


def test_temporal_matches_oracle_and_identical_frames():
    rng = np.random.default_rng(4)
    att = TemporalAttention(8, 2, 2, rng)
    randomize(att, rng)
    x = grid_tokens(rng, 2, 2, 8, (2,))       # (F, Hp, Wp, D)
    out = att(Tensor(x)).data
    emb = att.frame_embed.data
    for i in range(2):
        for j in range(2):
            seq = x[:, i, j]
            np.testing.assert_allclose(out[:, i, j], dense_oracle(att, seq, qk=seq + emb), atol=1e-5)
    same = np.repeat(x[:1], 3, axis=0)
    att3 = TemporalAttention(8, 2, 3, rng)
    randomize(att3, rng)
    out3 = att3(Tensor(same)).data
    np.testing.assert_allclose(out3[0], out3[1], atol=1e-6)
    np.testing.assert_allclose(out3[0], out3[2], atol=1e-6)


def test_temporal_single_frame():
    rng = np.random.default_rng(5)
    att = TemporalAttention(4, 1, 1, rng)
    randomize(att, rng)
    x = grid_tokens(rng, 2, 2, 4, (1,))
    v = x @ att.qkv.weight.data[:, 8:] + att.v_bias.data
    np.testing.assert_allclose(att(Tensor(x)).data, v @ att.proj.weight.data + att.proj.bias.data, atol=1e-5)


def test_too_many_frames_rejected():
    att = TemporalAttention(4, 1, 2, np.random.default_rng(0))
    with pytest.raises(AttentionError):
        att(Tensor(np.zeros((3, 1, 1, 4))))


@pytest.mark.parametrize("radius", [0, 1, 2])
def test_locality(radius):
    rng = np.random.default_rng(6)
    att = NeighborhoodAttention(8, 2, radius, rng)
    randomize(att, rng)
    x = grid_tokens(rng, 7, 8, 8)
    base = att(Tensor(x)).data
    x2 = x.copy()
    x2[3, 5] += 1.0
    changed = np.abs(att(Tensor(x2)).data - base).max(axis=-1) > 0
    rows, cols = np.meshgrid(np.arange(7), np.arange(8), indexing="ij")
    inside = np.maximum(np.abs(rows - 3), np.abs(cols - 5)) <= radius
    assert not changed[~inside].any()
    assert changed[inside].all()


def test_flip_equivariance_with_mirrored_bias():
    rng = np.random.default_rng(7)
    att = NeighborhoodAttention(8, 2, 2, rng)
    randomize(att, rng)
    x = grid_tokens(rng, 5, 6, 8)
    out = att(Tensor(x)).data
    att.pos_bias.data = att.pos_bias.data[:, mirrored_offsets(2)]
    mirrored = att(Tensor(x[:, ::-1].copy())).data
    np.testing.assert_allclose(mirrored[:, ::-1], out, atol=1e-5)


def test_neighbor_table_clamps_edges():
    idx, valid, offsets = neighbor_table(4, 5, 1)
    assert idx.shape == (20, 9)
    assert valid[0].sum() == 4 and valid[6].sum() == 9 and valid[4].sum() == 4
    assert offsets.shape == (9, 2)
    with pytest.raises(AttentionError):
        neighbor_table(2, 2, -1)


def test_config_validation():
    with pytest.raises(AttentionError):
        AttentionConfig(heads=3).validate(8)
    with pytest.raises(AttentionError):
        AttentionConfig(radius=-1).validate(8)
    with pytest.raises(AttentionError):
        make_spatial(8, AttentionConfig(heads=2, mode="axial"))
    assert isinstance(make_spatial(8, AttentionConfig(heads=2, mode="full")), FullAttention)


@pytest.mark.parametrize("kind", ["neighborhood", "full", "temporal"])
def test_attention_grad_check(kind):
    rng = np.random.default_rng(8)
    if kind == "neighborhood":
        att, x = NeighborhoodAttention(8, 2, 1, rng), grid_tokens(rng, 3, 4, 8)
    elif kind == "full":
        att, x = FullAttention(8, 2, rng), grid_tokens(rng, 3, 3, 8)
    else:
        att, x = TemporalAttention(8, 2, 3, rng), grid_tokens(rng, 2, 2, 8, (3,))
    randomize(att, rng)
    w = rng.normal(size=x.shape)
    for name, p in att.named_parameters():
        report = tc.grad_check(lambda _: (att(Tensor(x)) * w).sum(), p, n_samples=12, rng=0)
        assert report.max_rel_err < 1e-3, name


def test_cost_scaling():
    small = attention_cost(32, 32, 64, 4, 3, "full")
    big = attention_cost(64, 64, 64, 4, 3, "full")
    nsmall = attention_cost(32, 32, 64, 4, 3, "neighborhood")
    nbig = attention_cost(64, 64, 64, 4, 3, "neighborhood")
    assert big["score_flops"] == 16 * small["score_flops"]
    assert nbig["score_flops"] == 4 * nsmall["score_flops"]
    ratio = lambda hp, wp: attention_cost(hp, wp, 64, 4, 3, "full")["score_flops"] / \
        attention_cost(hp, wp, 64, 4, 3, "neighborhood")["score_flops"]
    # the ratio is N / (2r+1)^2: doubling the token count doubles it, doubling both sides quadruples it
    assert ratio(32, 64) == pytest.approx(2 * ratio(32, 32), rel=1e-12)
    assert ratio(64, 64) == pytest.approx(4 * ratio(32, 32), rel=1e-12)
    r2048 = attention_cost(256, 256, 384, 6, 3, "full")["score_flops"] / \
        attention_cost(256, 256, 384, 6, 3, "neighborhood")["score_flops"]
    assert r2048 == pytest.approx(256 * 256 / 49)
    assert r2048 > 5


def test_saturated_clamped_count_equals_full():
    full = attention_cost(5, 4, 8, 2, 0, "full")
    clamped = attention_cost(5, 4, 8, 2, 4, "neighborhood", clamped=True)
    assert clamped["score_flops"] == full["score_flops"]
    assert attention_cost(5, 4, 8, 2, 4, "neighborhood")["score_flops"] >= full["score_flops"]
