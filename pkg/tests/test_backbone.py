import math

import numpy as np
import pytest
import torch

from sdmae.backbone import MaskedAutoencoderViT, count_parameters, sincos_pos_embed
from sdmae.config import ModelConfig, desk_model, tiny_model, vit_small
from sdmae.errors import ConfigError, DimensionError, NumericError
from sdmae.patching import PatchSequence, full_plan, gather_patches, patchify, random_mask


def sincos_oracle(width, g):
    q = width // 4
    table = np.zeros((g * g + 1, width))
    for i in range(g):
        for j in range(g):
            row = table[1 + i * g + j]
            for k in range(q):
                omega = 10000.0 ** (-k / q)
                row[k], row[q + k] = math.sin(i * omega), math.cos(i * omega)
                row[2 * q + k], row[3 * q + k] = math.sin(j * omega), math.cos(j * omega)
    return table


@pytest.mark.parametrize("width,g", [(8, 2), (16, 3), (64, 8)])
def test_sincos_table(width, g):
    table = sincos_pos_embed(width, g)
    assert table.shape == (g * g + 1, width)
    np.testing.assert_array_equal(table[0], 0.0)
    np.testing.assert_allclose(table, sincos_oracle(width, g), atol=1e-12)


def test_sincos_rejects_width():
    with pytest.raises(DimensionError):
        sincos_pos_embed(6, 2)


def test_vit_small_encoder_size():
    model = MaskedAutoencoderViT(vit_small())
    n = count_parameters(p for _, p in model.encoder_parameters())
    assert abs(n - 21e6) / 21e6 < 0.10
    assert model.cfg.num_patches == 196 and model.cfg.patch_dim == 768


def _model(cfg=None, seed=0):
    torch.manual_seed(seed)
    return MaskedAutoencoderViT(cfg or desk_model())


def test_forward_shapes(rng):
    cfg = desk_model()
    model = _model(cfg)
    seq = patchify(rng.random((3, 32, 32, 3)).astype(np.float32), cfg.patch_size)
    plan = random_mask(seq, 0.6, 0)
    out = model(seq, plan)
    N, D, V, M = 64, 48, 26, 38
    assert out.z_v.shape == (3, V, cfg.enc_width) and out.f_v.shape == (3, V, cfg.enc_width)
    assert out.cls.shape == (3, cfg.enc_width)
    assert out.y.shape == (3, N, D) and out.y_m.shape == (3, M, D) and out.y_v.shape == (3, V, D)
    assert out.h.shape == (3, N, cfg.dec_width) and out.h_v.shape == (3, V, cfg.dec_width)
    torch.testing.assert_close(out.y_m, gather_patches(out.y, plan.masked_idx))
    torch.testing.assert_close(out.h_v, gather_patches(out.h, plan.visible_idx))


def test_encoder_ignores_masked_content(rng):
    cfg = desk_model()
    model = _model(cfg).eval()
    img = rng.random((2, 32, 32, 3)).astype(np.float32)
    seq = patchify(img, cfg.patch_size)
    plan = random_mask(seq, 0.6, 5)
    other = seq.patches.clone()
    for b in range(2):
        other[b, plan.masked_idx[b]] = torch.rand(plan.num_masked, 48)
    a = model(seq, plan)
    b = model(PatchSequence(other, 4, 3), plan)
    torch.testing.assert_close(a.f_v, b.f_v)
    torch.testing.assert_close(a.y, b.y)


def test_decoder_input_layout(rng):
    cfg = desk_model()
    model = _model(cfg)
    f_v = torch.randn(2, 10, cfg.enc_width)
    seq = PatchSequence(torch.zeros(2, 64, 48), 4, 3)
    plan = random_mask(seq, 54 / 64, 1)
    x = model.decoder_input(f_v, plan)
    pos = model.decoder_pos_embed[0, 1:]
    embedded = model.decoder_embed(f_v)
    for b in range(2):
        for j, n in enumerate(plan.visible_idx[b]):
            torch.testing.assert_close(x[b, n], embedded[b, j] + pos[n])
        for n in plan.masked_idx[b]:
            torch.testing.assert_close(x[b, n], model.mask_token[0, 0] + pos[n])


def test_mask_token_is_shared():
    model = _model()
    assert model.mask_token.shape == (1, 1, model.cfg.dec_width)


def test_geometry_mismatch_raises():
    model = _model()
    seq = PatchSequence(torch.zeros(1, 16, 48), 4, 3)
    with pytest.raises(DimensionError):
        model(seq, full_plan(1, 16))
    seq = patchify(torch.zeros(1, 32, 32, 3), 4)
    plan = random_mask(seq, 0.5, 0)
    with pytest.raises(DimensionError):
        model.decoder_input(torch.zeros(1, 3, model.cfg.enc_width), plan)


def test_non_finite_activation_raises():
    model = _model()
    img = torch.zeros(1, 32, 32, 3)
    img[0, 0, 0, 0] = float("nan")
    seq = patchify(img, 4)
    with pytest.raises(NumericError, match="encoder block 0"):
        model(seq, full_plan(1, 64))


def test_features_pooling(rng):
    model = _model().eval()
    img = rng.random((2, 32, 32, 3)).astype(np.float32)
    with torch.no_grad():
        cls = model.features(img, "cls")
        mean = model.features(img, "mean")
        both = model.features(img, "cls+mean")
    assert cls.shape == (2, 64) and mean.shape == (2, 64)
    torch.testing.assert_close(both, torch.cat([cls, mean], dim=1))


def test_attention_maps_normalized(rng):
    model = _model().eval()
    with torch.no_grad():
        maps = model.attention_maps(rng.random((2, 32, 32, 3)).astype(np.float32))
    assert maps.shape == (2, 4, 8, 8)
    torch.testing.assert_close(maps.sum(dim=(-1, -2)), torch.ones(2, 4))
    assert (maps >= 0).all()


def test_constant_image_attention_near_uniform():
    model = _model().eval()
    with torch.no_grad():
        maps = model.attention_maps(torch.full((1, 32, 32, 3), 0.5))
    spread = (maps.amax(dim=(-1, -2)) - maps.amin(dim=(-1, -2))).max()
    assert float(spread) < 0.1


def test_learned_positions_are_parameters():
    model = _model(desk_model(pos_embed="learned"))
    names = {n for n, _ in model.named_parameters()}
    assert "pos_embed" in names and "decoder_pos_embed" in names
    sincos = _model()
    assert "pos_embed" not in {n for n, _ in sincos.named_parameters()}


@pytest.mark.parametrize(
    "kwargs",
    [dict(img_size=30), dict(enc_heads=3), dict(pos_embed="rope"), dict(enc_width=18, enc_heads=2), dict(input_std=(1.0, 0.0, 1.0))],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        MaskedAutoencoderViT(desk_model(**kwargs))


def test_tiny_config_geometry():
    cfg = tiny_model()
    assert (cfg.img_size, cfg.patch_size, cfg.enc_depth, cfg.enc_width, cfg.dec_depth, cfg.dec_width, cfg.head.out_dim) == (
        8, 4, 2, 16, 1, 8, 7,
    )


# -- straight-line numpy reference -------------------------------------------------
_erf = np.vectorize(math.erf)


def _np(t):
    return t.detach().double().numpy()


def _ln(x, mod):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-6) * _np(mod.weight) + _np(mod.bias)


def _lin(x, mod):
    return x @ _np(mod.weight).T + _np(mod.bias)


def _block(x, blk):
    L, C = x.shape
    h = blk.attn.num_heads
    d = C // h
    qkv = _lin(_ln(x, blk.norm1), blk.attn.qkv)
    q, k, v = qkv[:, :C], qkv[:, C : 2 * C], qkv[:, 2 * C :]
    heads = []
    for i in range(h):
        s = q[:, i * d : (i + 1) * d] @ k[:, i * d : (i + 1) * d].T / math.sqrt(d)
        a = np.exp(s - s.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        heads.append(a @ v[:, i * d : (i + 1) * d])
    x = x + _lin(np.concatenate(heads, axis=1), blk.attn.proj)
    m = _lin(_ln(x, blk.norm2), blk.mlp.fc1)
    m = 0.5 * m * (1 + _erf(m / math.sqrt(2)))
    return x + _lin(m, blk.mlp.fc2)


def reference_forward(model, patches, vis):
    """Single image: patches (N, D), vis list of visible indices -> (F_v, Y)."""
    cfg = model.cfg
    N = patches.shape[0]
    x_v = (patches[vis] - _np(model.input_mean)) / _np(model.input_std)
    pos = _np(model.pos_embed)[0]
    z = _lin(x_v, model.patch_embed) + pos[1:][vis]
    cls = _np(model.cls_token)[0, 0] + pos[0]
    x = np.concatenate([cls[None], z], axis=0)
    for blk in model.blocks:
        x = _block(x, blk)
    f = _ln(x, model.norm)[1:]
    dpos = _np(model.decoder_pos_embed)[0, 1:]
    full = np.tile(_np(model.mask_token)[0, 0], (N, 1))
    full[vis] = _lin(f, model.decoder_embed)
    x = full + dpos
    for blk in model.decoder_blocks:
        x = _block(x, blk)
    return f, _lin(_ln(x, model.decoder_norm), model.decoder_pred)


def test_forward_matches_straight_line_oracle(rng):
    model = _model(tiny_model()).double()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.1 * torch.randn_like(p))
    img = rng.random((2, 8, 8, 3))
    seq = patchify(img, 4)
    plan = random_mask(seq, 0.5, 9)
    out = model(seq, plan)
    for b in range(2):
        vis = plan.visible_idx[b].tolist()
        f_ref, y_ref = reference_forward(model, seq.patches[b].numpy(), vis)
        np.testing.assert_allclose(_np(out.f_v[b]), f_ref, atol=1e-5)
        np.testing.assert_allclose(_np(out.y[b]), y_ref, atol=1e-5)


def test_embed_visible_matmul_oracle(rng):
    cfg = desk_model(img_size=8, patch_size=4)
    model = _model(cfg).double()
    seq = patchify(rng.random((1, 8, 8, 3)), 4)
    plan = random_mask(seq, 0.5, 2)
    z = model.embed_visible(seq, plan)
    W, b = _np(model.patch_embed.weight), _np(model.patch_embed.bias)
    pos = _np(model.pos_embed)[0, 1:]
    for i, n in enumerate(plan.visible_idx[0].tolist()):
        x = (seq.patches[0, n].numpy() - _np(model.input_mean)) / _np(model.input_std)
        np.testing.assert_allclose(_np(z[0, i]), W @ x + b + pos[n], atol=1e-12)


def test_embed_visible_zero_projection_gives_positions(rng):
    model = _model()
    with torch.no_grad():
        model.patch_embed.weight.zero_()
        model.patch_embed.bias.zero_()
    seq = patchify(torch.rand(1, 32, 32, 3), 4)
    plan = random_mask(seq, 0.6, 0)
    z = model.embed_visible(seq, plan)
    torch.testing.assert_close(z[0], model.pos_embed[0, 1:][plan.visible_idx[0]])


def test_depth_zero_encoder_is_identity():
    model = _model(desk_model(enc_depth=0))
    z = torch.randn(2, 5, 64)
    f, _ = model.encode(z)
    torch.testing.assert_close(f, z)


def test_single_token_block_closed_form():
    from sdmae.backbone import Block

    torch.manual_seed(0)
    blk = Block(8, 1).double()
    x = torch.randn(1, 1, 8, dtype=torch.float64)
    ln1 = torch.nn.functional.layer_norm(x, (8,), blk.norm1.weight, blk.norm1.bias, 1e-6)
    v = ln1 @ blk.attn.qkv.weight[16:].T + blk.attn.qkv.bias[16:]
    x1 = x + blk.attn.proj(v)
    expected = x1 + blk.mlp(blk.norm2(x1))
    torch.testing.assert_close(blk(x), expected)


def test_encoder_permutation_equivariance():
    model = _model().double().eval()
    z = torch.randn(1, 6, 64, dtype=torch.float64)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    f, cls = model.encode(z)
    f_p, cls_p = model.encode(z[:, perm])
    torch.testing.assert_close(f_p, f[:, perm])
    torch.testing.assert_close(cls_p, cls)


def test_hand_set_single_head_attention():
    from sdmae.backbone import Attention

    attn = Attention(2, 1).double()
    with torch.no_grad():
        attn.qkv.weight.copy_(torch.eye(2, dtype=torch.float64).repeat(3, 1))
        attn.qkv.bias.zero_()
    x = torch.tensor([[[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]]], dtype=torch.float64)
    _, a = attn(x, return_attention=True)
    s = x[0].numpy() @ x[0].numpy().T / math.sqrt(2)
    ref = np.exp(s) / np.exp(s).sum(1, keepdims=True)
    np.testing.assert_allclose(a[0, 0].detach().numpy(), ref, atol=1e-12)


def test_encoder_sequence_length_is_visible_plus_one():
    model = _model()
    lengths = []
    hook = model.blocks[0].register_forward_pre_hook(lambda m, args: lengths.append(args[0].shape[1]))
    seq = patchify(torch.rand(1, 32, 32, 3), 4)
    plan = random_mask(seq, 0.75, 0)
    model(seq, plan)
    hook.remove()
    assert lengths == [plan.num_visible + 1]


def test_zero_mask_ratio_decodes_all_visible():
    model = _model()
    seq = patchify(torch.rand(2, 32, 32, 3), 4)
    out = model(seq, random_mask(seq, 0.0, 0))
    assert out.y_m.shape[1] == 0 and out.y_v.shape[1] == 64
    torch.testing.assert_close(out.y_v, out.y)


def test_duplicate_images_same_attention():
    model = _model().eval()
    img = torch.rand(1, 32, 32, 3).repeat(2, 1, 1, 1)
    with torch.no_grad():
        maps = model.attention_maps(img)
    torch.testing.assert_close(maps[0], maps[1])


def test_forward_deterministic(rng):
    model = _model()
    seq = patchify(rng.random((2, 32, 32, 3)).astype(np.float32), 4)
    plan = random_mask(seq, 0.6, 3)
    assert torch.equal(model(seq, plan).y, model(seq, plan).y)
