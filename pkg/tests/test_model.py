import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saghog.autodiff import Tensor, no_grad
from saghog.autodiff.gradcheck import check_gradients
from saghog.model import (
    Encoder,
    MaskedAutoencoder,
    NetRVLAD,
    ViTConfig,
    WriterNet,
    count_parameters,
    mask_count,
    patchify,
    plan_mask,
    to_input,
    token_dropout,
    token_dropout_mask,
)

TINY = dict(dim=16, depth=2, heads=2, decoder_dim=16, decoder_depth=1, decoder_heads=2, mlp_ratio=2.0, clusters=3)


def tiny(**kw):
    return ViTConfig(**{**TINY, **kw})


# -- tokens and embeddings -----------------------------------------------------------


def test_token_count():
    cfg = ViTConfig()
    assert cfg.num_tokens == 64
    enc = Encoder(tiny(), np.random.default_rng(0))
    x = np.zeros((1, 32, 32, 3), np.float32)
    assert enc.embed(x).shape == (1, 65, 16)


def test_zero_patch_gives_positional_embeddings():
    enc = Encoder(tiny(), np.random.default_rng(1))
    enc.patch_embed.bias.data[:] = 0
    t = enc.embed(np.zeros((1, 32, 32, 3), np.float32)).data[0]
    assert np.allclose(t[1:], enc.pos_embed.data[1:])
    assert np.allclose(t[0], enc.cls_token.data[0, 0] + enc.pos_embed.data[0])


def test_block_swap_permutes_tokens():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 32, 32, 3))
    y = x.copy()
    # token 0 = rows 0-3, cols 0-3; token 9 = rows 4-7, cols 4-7
    y[0, 0:4, 0:4], y[0, 4:8, 4:8] = x[0, 4:8, 4:8], x[0, 0:4, 0:4]
    px, py = patchify(x, 4), patchify(y, 4)
    assert np.array_equal(px[0, 0], py[0, 9]) and np.array_equal(px[0, 9], py[0, 0])
    others = [i for i in range(64) if i not in (0, 9)]
    assert np.array_equal(px[0, others], py[0, others])


def test_to_input_conventions():
    b = np.zeros((2, 32, 32), bool)
    b[0, 0, 0] = True
    x = to_input(b, 3)
    assert x.shape == (2, 32, 32, 3) and x[0, 0, 0, 0] == -1 and x[0, 1, 1, 0] == 1
    g = np.full((1, 32, 32), 255, np.uint8)
    assert np.all(to_input(g, 1) == 1)


# -- masking -------------------------------------------------------------------------


def test_mask_counts():
    assert mask_count(0.75) == 48
    assert mask_count(0.90) == 58


def test_plan_partition_and_counts():
    plan = plan_mask(np.random.default_rng(3), 0.75, batch=50)
    assert plan.masked.shape == (50, 48) and plan.visible.shape == (50, 16)
    for v, m in zip(plan.visible, plan.masked):
        assert sorted(np.concatenate([v, m]).tolist()) == list(range(64))


@given(st.floats(0.05, 0.95), st.integers(1, 8), st.integers(0, 2**31))
def test_plan_partition_property(ratio, batch, seed):
    plan = plan_mask(np.random.default_rng(seed), ratio, batch=batch)
    both = np.concatenate([plan.visible, plan.masked], axis=1)
    assert plan.masked.shape[1] == mask_count(ratio)
    assert np.array_equal(np.sort(both, axis=1), np.tile(np.arange(64), (batch, 1)))


def test_mask_frequency_uniform():
    plan = plan_mask(np.random.default_rng(4), 0.75, batch=100_000)
    freq = np.bincount(plan.masked.ravel(), minlength=64) / 100_000
    assert np.all(np.abs(freq - 0.75) <= 0.01)


def test_token_dropout_contract():
    rng = np.random.default_rng(5)
    seq = rng.normal(size=(65, 4))
    assert np.array_equal(token_dropout(seq, 0.0, rng), seq)
    keep = token_dropout_mask(100_000, 64, 0.1, rng)
    assert keep[:, 0].all()
    assert abs(keep[:, 1:].sum(1).mean() - 64 * 0.9) <= 0.01 * 64 * 0.9


# -- encoder / decoder ---------------------------------------------------------------------


def test_depth_zero_encoder_is_normed_embedding():
    enc = Encoder(tiny(depth=0), np.random.default_rng(6))
    x = np.random.default_rng(7).normal(size=(2, 32, 32, 3)).astype(np.float32)
    assert np.allclose(enc(x).data, enc.norm(enc.embed(x)).data)


def test_attention_rows_sum_to_one():
    enc = Encoder(tiny(), np.random.default_rng(8))
    h = enc.embed(np.random.default_rng(9).normal(size=(2, 32, 32, 3)).astype(np.float32))
    _, att = enc.blocks[0].attn(enc.blocks[0].norm1(h), return_attn=True)
    assert np.allclose(att.sum(-1), 1.0, atol=1e-5)


def test_decoder_output_shape_and_bias_only():
    rng = np.random.default_rng(10)
    mae = MaskedAutoencoder(tiny(), rng)
    plan = plan_mask(rng, 0.75, batch=2)
    x = rng.normal(size=(2, 32, 32, 3)).astype(np.float32)
    assert mae(x, plan).shape == (2, 48, 9)
    for p in mae.decoder.parameters():
        p.data[:] = 0
    b = np.arange(9, dtype=np.float32)
    mae.decoder.pred.bias.data[:] = b
    assert np.allclose(mae(x, plan).data, b)


def test_masked_prediction_invariant_to_permuting_other_masked_positions():
    rng = np.random.default_rng(11)
    cfg = tiny()
    mae = MaskedAutoencoder(cfg, rng).to(np.float64)
    plan = plan_mask(rng, 0.75, batch=1)
    x = rng.normal(size=(1, 32, 32, 3))
    latent = mae.encoder(x, plan.visible)
    toks = rng.normal(size=(1, 48, cfg.decoder_dim))
    # swap two other masked slots, each token travelling with its position
    order = np.arange(48)
    order[[1, 2]] = [2, 1]
    swapped = type(plan)(plan.visible, plan.masked[:, order], plan.ratio)
    a = mae.decoder(latent, plan, Tensor(toks, dtype=np.float64)).data
    b = mae.decoder(latent, swapped, Tensor(toks[:, order], dtype=np.float64)).data
    assert np.allclose(a[0, 0], b[0, 0], atol=1e-10)
    assert np.allclose(a[0, order], b[0], atol=1e-10)
    # with the shared mask token the contents of masked slots are identical anyway
    c = mae.decoder(latent, swapped).data
    assert np.allclose(mae.decoder(latent, plan).data[0, order], c[0], atol=1e-10)


def test_parameter_count_pure_in_config():
    a = count_parameters(MaskedAutoencoder(tiny(), np.random.default_rng(0)))
    b = count_parameters(MaskedAutoencoder(tiny(), np.random.default_rng(1)))
    assert a == b
    e1 = count_parameters(MaskedAutoencoder(tiny(decoder_depth=1), np.random.default_rng(0)).encoder)
    e2 = count_parameters(MaskedAutoencoder(tiny(decoder_depth=3), np.random.default_rng(0)).encoder)
    assert e1 == e2


def test_vit_config_validation():
    with pytest.raises(ValueError):
        ViTConfig(patch_size=5)
    with pytest.raises(ValueError):
        ViTConfig(netrvlad_mode="mean")


# -- NetRVLAD ---------------------------------------------------------------------------


def test_netrvlad_hand_case():
    head = NetRVLAD(2, 2, np.random.default_rng(0))
    head.weight.data[:] = np.array([[100.0, 0.0], [0.0, 0.0]], np.float32)
    x = np.array([[[3.0, 4.0]]], np.float32)
    out = head(Tensor(x)).data[0]
    # assignment (1, 0): V_1 = x / |x|, V_2 = 0, then global norm keeps it
    assert np.allclose(out, [0.6, 0.8, 0.0, 0.0], atol=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31))
def test_netrvlad_unit_norm_and_permutation(n, seed):
    rng = np.random.default_rng(seed)
    head = NetRVLAD(8, 4, rng).to(np.float64)
    x = rng.normal(size=(2, n, 8))
    out = head(Tensor(x, dtype=np.float64)).data
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0)
    perm = rng.permutation(n)
    assert np.allclose(head(Tensor(x[:, perm], dtype=np.float64)).data, out)


def test_netrvlad_single_descriptor_scale_direction():
    rng = np.random.default_rng(12)
    head = NetRVLAD(8, 4, rng).to(np.float64)
    x = rng.normal(size=(1, 1, 8))
    a = head(Tensor(x, dtype=np.float64)).data.reshape(4, 8)
    b = head(Tensor(3.0 * x, dtype=np.float64)).data.reshape(4, 8)
    for k in range(4):
        na, nb = np.linalg.norm(a[k]), np.linalg.norm(b[k])
        assert np.allclose(a[k] / na, b[k] / nb)


def test_netrvlad_token_mask_ignores_dropped():
    rng = np.random.default_rng(13)
    head = NetRVLAD(8, 4, rng).to(np.float64)
    x = rng.normal(size=(1, 5, 8))
    keep = np.array([[True, False, True, True, False]])
    a = head(Tensor(x, dtype=np.float64), keep).data
    b = head(Tensor(x[:, keep[0]], dtype=np.float64)).data
    assert np.allclose(a, b)


# -- full pipeline -------------------------------------------------------------------------


def test_writer_net_gradient_check():
    rng = np.random.default_rng(14)
    net = WriterNet(tiny(netrvlad_mode="tokens"), rng).to(np.float64)
    x = rng.normal(size=(2, 32, 32, 3))
    w = rng.normal(size=(2, net.out_dim))
    fn = lambda: (net(x) * w).sum()
    assert check_gradients(fn, net.parameters(), n_points=3, rng=rng) < 1e-4


def test_mae_gradient_check():
    rng = np.random.default_rng(15)
    mae = MaskedAutoencoder(tiny(), rng).to(np.float64)
    plan = plan_mask(rng, 0.75, batch=2)
    x = rng.normal(size=(2, 32, 32, 3))
    w = rng.normal(size=(2, 48, 9))
    fn = lambda: (mae(x, plan) * w).sum()
    assert check_gradients(fn, mae.parameters(), n_points=3, rng=rng) < 1e-4


def test_class_token_present_and_output_norm():
    rng = np.random.default_rng(16)
    net = WriterNet(tiny(), rng)
    keep = token_dropout_mask(3, 64, 0.5, rng)
    with no_grad():
        out = net(rng.normal(size=(3, 32, 32, 3)).astype(np.float32), keep).data
    assert out.shape == (3, 16 * 3)
    assert np.allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-5)
