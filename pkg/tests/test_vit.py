import numpy as np
import pytest

from implicit_agg import tensor as T
from implicit_agg.errors import ContractError, DimensionError
from implicit_agg.tensor import Tape, Tensor
from implicit_agg.vit import (
    BackboneConfig, ViT, encoder_block, forward_to_block, mhsa, mlp, patch_embed, run_blocks,
)

from oracles import attention_loop

RNG = np.random.default_rng(99)


def toy_image(seed=0, cfg=None):
    cfg = cfg or BackboneConfig.toy()
    return np.random.default_rng(seed).uniform(-1, 1, (cfg.channels, cfg.image_h, cfg.image_w))


def rand_block(D, scale=0.3):
    H = 4 * D
    p = {
        "ln1.w": RNG.normal(1, 0.1, D), "ln1.b": RNG.normal(0, 0.1, D),
        "qkv.w": RNG.normal(0, scale, (D, 3 * D)), "qkv.b": RNG.normal(0, 0.1, 3 * D),
        "proj.w": RNG.normal(0, scale, (D, D)), "proj.b": RNG.normal(0, 0.1, D),
        "ln2.w": RNG.normal(1, 0.1, D), "ln2.b": RNG.normal(0, 0.1, D),
        "fc1.w": RNG.normal(0, scale, (D, H)), "fc1.b": RNG.normal(0, 0.1, H),
        "fc2.w": RNG.normal(0, scale, (H, D)), "fc2.b": RNG.normal(0, 0.1, D),
    }
    return {k: Tensor(v) for k, v in p.items()}


def test_config_arithmetic():
    assert BackboneConfig(image_h=224, image_w=224, patch_size=14).num_patches == 256
    cfg = BackboneConfig.toy()
    assert cfg.num_patches == 4 and cfg.head_dim == 8 and cfg.trainable_suffix == 4
    seq = patch_embed(toy_image(), ViT(cfg))
    assert seq.tokens.shape == (5, 32) and seq.num_patches == 4


@pytest.mark.parametrize("kw", [dict(image_h=30), dict(num_heads=5), dict(frozen_prefix=7)])
def test_config_rejects_inconsistent_shapes(kw):
    with pytest.raises(ContractError):
        BackboneConfig(**kw)


def test_patch_embed_size_mismatch():
    with pytest.raises(DimensionError):
        patch_embed(np.zeros((3, 14, 28)), ViT(BackboneConfig.toy()))


def test_zero_image_zero_projection_gives_positional_embeddings():
    vit = ViT(BackboneConfig.toy())
    vit.params["embed.w"].data[:] = 0.0
    seq = patch_embed(np.zeros((3, 28, 28)), vit)
    assert np.array_equal(seq.patch_segment().data, vit.params["pos"].data[1:])
    cls = vit.params["cls"].data + vit.params["pos"].data[0]
    assert np.array_equal(seq.class_segment().data[0], cls)


def test_mhsa_single_token():
    p = rand_block(8)
    x = RNG.normal(size=(1, 8))
    out, attn = mhsa(Tensor(x), p, 2, record_attention=True)
    v = x @ p["qkv.w"].data[:, 16:] + p["qkv.b"].data[16:]
    assert np.allclose(out.data, v @ p["proj.w"].data + p["proj.b"].data, atol=1e-14)
    assert np.array_equal(attn, np.ones((2, 1, 1)))


def test_mhsa_identical_tokens_identical_rows():
    p = rand_block(8)
    row = RNG.normal(size=8)
    out, _ = mhsa(Tensor(np.stack([row, row])), p, 2)
    assert np.array_equal(out.data[0], out.data[1])


@pytest.mark.parametrize("seed", range(5))
def test_mhsa_matches_scalar_loop(seed):
    global RNG
    RNG = np.random.default_rng(seed)
    D = 6
    p = rand_block(D, scale=0.8)
    x = RNG.normal(size=(3, D))
    out, attn = mhsa(Tensor(x), p, 2, record_attention=True)
    ref_out, ref_attn = attention_loop(
        x.tolist(), p["qkv.w"].data.tolist(), p["qkv.b"].data.tolist(),
        p["proj.w"].data.tolist(), p["proj.b"].data.tolist(), 2,
    )
    assert np.max(np.abs(out.data - ref_out)) < 1e-10
    assert np.max(np.abs(attn - ref_attn)) < 1e-10


def test_block_is_identity_with_zeroed_residual_branches():
    vit = ViT(BackboneConfig.toy(frozen_prefix=0))
    for name in ("proj.w", "proj.b", "fc2.w", "fc2.b"):
        vit.params[f"block0.{name}"].data[:] = 0.0
    seq = patch_embed(toy_image(), vit)
    out, _ = encoder_block(seq, vit, 0)
    assert np.array_equal(out.tokens.data, seq.tokens.data)


def test_block_equals_manual_composition():
    cfg = BackboneConfig.toy()
    vit = ViT(cfg)
    seq = patch_embed(toy_image(), vit)
    out, _ = encoder_block(seq, vit, 3)
    p = vit.block(3)
    x = seq.tokens
    h = T.layer_norm(x, p["ln1.w"], p["ln1.b"], cfg.ln_eps)
    x = T.add(x, mhsa(h, p, cfg.num_heads)[0])
    x = T.add(x, mlp(T.layer_norm(x, p["ln2.w"], p["ln2.b"], cfg.ln_eps), p))
    assert np.array_equal(out.tokens.data, x.data)


def test_block_preserves_shape_for_any_length():
    vit = ViT(BackboneConfig.toy())
    for n in (1, 2, 9):
        seq = patch_embed(toy_image(), vit)
        seq = seq.with_tokens(Tensor(RNG.normal(size=(n, 32))))
        out, _ = encoder_block(seq, vit, 0)
        assert out.tokens.shape == (n, 32)


def test_forward_to_block_composition_and_bounds():
    vit = ViT(BackboneConfig.toy())
    img = toy_image()
    zero = forward_to_block(img, vit, 0)
    assert np.array_equal(zero.tokens.data, patch_embed(img, vit).tokens.data)
    full = forward_to_block(img, vit, 6)
    resumed = run_blocks(forward_to_block(img, vit, 2), vit, 2, 6)
    assert np.array_equal(full.tokens.data, resumed.tokens.data)
    with pytest.raises(ContractError):
        forward_to_block(img, vit, 7)


def test_frozen_prefix_adds_no_tape_nodes():
    vit = ViT(BackboneConfig.toy())
    with Tape() as tape:
        forward_to_block(toy_image(), vit, vit.cfg.frozen_prefix)
        assert len(tape) == 0
        forward_to_block(toy_image(), vit, 6)
        assert len(tape) > 0
        assert not tape.nodes_in_scope("block0") and not tape.nodes_in_scope("block1")


def test_freezing_changes_gradients_never_values():
    img = toy_image()
    frozen = ViT(BackboneConfig.toy())
    free = ViT(BackboneConfig.toy(frozen_prefix=0))
    a = forward_to_block(img, frozen, 6).tokens.data
    b = forward_to_block(img, free, 6).tokens.data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_attention_rows_sum_to_one():
    vit = ViT(BackboneConfig.toy())
    maps = []
    forward_to_block(toy_image(), vit, 6, maps=maps)
    for attn in maps:
        assert np.all(np.abs(attn.sum(axis=-1) - 1.0) <= 1e-12)


def test_patch_permutation_equivariance():
    vit = ViT(BackboneConfig.toy())
    img = toy_image()
    seq = patch_embed(img, vit)
    perm = np.array([0, 3, 1, 4, 2])  # class token stays first
    permuted = seq.with_tokens(Tensor(seq.tokens.data[perm]))
    a = run_blocks(seq, vit, 0, 6).tokens.data
    b = run_blocks(permuted, vit, 0, 6).tokens.data
    assert np.allclose(a[perm], b, atol=1e-12)


def test_batched_forward_matches_single():
    vit = ViT(BackboneConfig.toy())
    imgs = np.stack([toy_image(s) for s in range(3)])
    batch = forward_to_block(imgs, vit, 6).tokens.data
    for i in range(3):
        single = forward_to_block(imgs[i], vit, 6).tokens.data
        assert np.allclose(batch[i], single, atol=1e-13)


def test_canonical_parameter_names_and_state_round_trip():
    vit = ViT(BackboneConfig.toy())
    names = set(vit.params)
    for part in ("ln1", "qkv", "proj", "ln2", "fc1", "fc2"):
        assert {f"block5.{part}.w", f"block5.{part}.b"} <= names
    assert {"embed.w", "embed.b", "pos", "cls"} <= names
    other = ViT(BackboneConfig.toy(model_seed=5))
    other.load_state_dict(vit.state_dict())
    assert all(np.array_equal(other.params[k].data, vit.params[k].data) for k in names)
    with pytest.raises(KeyError):
        other.load_state_dict({"cls": np.zeros(32)})


def test_frozen_block_tensors_do_not_require_grad():
    vit = ViT(BackboneConfig.toy())
    for i in range(6):
        flags = {t.requires_grad for t in vit.block(i).values()}
        assert flags == ({False} if i < 2 else {True})
