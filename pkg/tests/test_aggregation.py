import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_agg import tensor as T
from implicit_agg.aggregation import (
    STRATEGIES, AggConfig, ImAge, class_token_descriptor, decompose_attention,
    attention_decomposition, dump_attention_maps, extract_descriptors, forward_image,
    forward_tokens, insert_tokens, mean_pool_descriptor, readout,
)
from implicit_agg.errors import ContractError
from implicit_agg.pnm import read_pnm
from implicit_agg.tensor import Tape, Tensor
from implicit_agg.vit import BackboneConfig, embed, final_norm, forward_to_block, run_blocks

from oracles import block_split_loop

TOY = BackboneConfig.toy()


def image(seed=0, cfg=TOY):
    return np.random.default_rng(seed).uniform(-1, 1, (cfg.channels, cfg.image_h, cfg.image_w))


def model(M=2, strategy="B_junction", backbone=TOY, seed=3, **kw):
    cfg = AggConfig(num_tokens=M, strategy=strategy, **kw)
    agg = np.random.default_rng(seed).normal(0, 0.5, (M, backbone.embed_dim)) if M else None
    return ImAge.build(backbone, cfg, agg)


# ---------------------------------------------------------------- schedules


def test_insertion_schedules_desk():
    L, L1 = 8, 4
    sched = {s: AggConfig(num_tokens=8, strategy=s).insertion_blocks(L, L1) for s in STRATEGIES}
    assert sched["A_frozen"] == sched["A_hat_all_trainable"] == [(0, 8)]
    assert sched["B_junction"] == [(4, 8)]
    assert sched["C_deep"] == [(6, 8)]
    assert sched["D_progressive"] == [(4, 2), (5, 2), (6, 2), (7, 2)]


@settings(max_examples=80, deadline=None)
@given(st.sampled_from(STRATEGIES), st.integers(1, 70), st.integers(4, 12), st.data())
def test_schedule_places_every_token(strategy, M, L, data):
    L1 = data.draw(st.integers(0, L - 1))
    sched = AggConfig(num_tokens=M, strategy=strategy).insertion_blocks(L, L1)
    assert sum(c for _, c in sched) == M
    assert all(0 <= b < L for b, _ in sched)
    assert [b for b, _ in sched] == sorted(b for b, _ in sched)


def test_strategy_aliases_and_unknown():
    assert AggConfig(strategy="b").strategy == "B_junction"
    assert AggConfig(strategy="ahat").strategy == "A_hat_all_trainable"
    with pytest.raises(ContractError):
        AggConfig(strategy="z")


# ---------------------------------------------------------------- insertion


def test_insert_tokens_contracts():
    m = model(M=3)
    seq = embed(image(), m.vit)
    assert insert_tokens(seq, m.agg, 0) is seq
    two = insert_tokens(seq, m.agg, 2)
    assert two.tokens.shape == (2 + 1 + 4, 32) and two.agg_count == 2
    assert np.array_equal(two.agg_segment().data, m.agg.values.data[:2])
    assert np.array_equal(two.tokens.data[2:], seq.tokens.data)
    three = insert_tokens(two, m.agg, 1)
    assert np.array_equal(three.agg_segment().data[0], m.agg.values.data[2])
    with pytest.raises(ContractError):
        insert_tokens(three, m.agg, 1)


def test_desk_insertion_length():
    desk = BackboneConfig.desk()
    m = model(M=8, backbone=desk)
    seq = forward_to_block(image(cfg=desk), m.vit, desk.frozen_prefix)
    assert insert_tokens(seq, m.agg, 8).tokens.shape[0] == 8 + 1 + 49


def test_drop_class_switch():
    m = model(M=2, keep_class=False)
    _, seq = forward_image(image(), m)
    assert not seq.has_class and seq.tokens.shape[0] == 2 + 4


# ---------------------------------------------------------------- descriptors


@pytest.mark.parametrize("M", [1, 4, 8, 16, 32, 64])
def test_descriptor_length_and_norm(M):
    desc, _ = forward_image(image(), model(M=M))
    assert desc.shape == (M * 32,)
    assert abs(np.linalg.norm(desc.data) - 1.0) <= 1e-12


def test_descriptor_length_at_full_width():
    wide = BackboneConfig(image_h=14, image_w=14, patch_size=14, embed_dim=768,
                          num_blocks=2, num_heads=12, frozen_prefix=1)
    desc, _ = forward_image(image(cfg=wide), model(M=8, backbone=wide))
    assert desc.shape == (6144,)
    assert abs(np.linalg.norm(desc.data) - 1.0) <= 1e-12


def test_strategy_b_equals_manual_composition():
    m = model(M=2)
    img = image()
    desc, _ = forward_image(img, m)
    seq = forward_to_block(img, m.vit, 2)
    seq = insert_tokens(seq, m.agg, 2)
    seq = final_norm(run_blocks(seq, m.vit, 2, 6), m.vit)
    manual = T.l2_normalize(T.reshape(seq.agg_segment(), (64,)))
    assert np.max(np.abs(desc.data - manual.data)) <= 1e-12


def test_freezing_does_not_change_descriptor_values():
    m = model(M=2)
    img = image()
    a = forward_image(img, m)[0].data
    m.vit.unfreeze_all()
    b = forward_image(img, m)[0].data
    assert np.max(np.abs(a - b)) <= 1e-12


def test_class_token_descriptor_matches_cls_readout():
    m = model(M=0, readout="cls")
    img = image()
    desc = class_token_descriptor(img, m.vit).data
    via = forward_image(img, m)[0].data
    assert desc.shape == (32,) and abs(np.linalg.norm(desc) - 1) <= 1e-12
    assert np.array_equal(desc, via)


def test_mean_pool_descriptor():
    single = BackboneConfig(image_h=14, image_w=14, patch_size=14, frozen_prefix=0)
    m = model(M=0, backbone=single, readout="mean")
    img = image(cfg=single)
    seq = final_norm(forward_to_block(img, m.vit, 6), m.vit)
    patch = seq.patch_segment().data[0]
    assert np.allclose(mean_pool_descriptor(img, m.vit).data, patch / np.linalg.norm(patch), atol=1e-15)
    vit = model(M=0, readout="mean").vit
    rows = final_norm(forward_to_block(image(), vit, 6), vit).patch_segment().data
    ref = np.array([sum(rows[i][c] for i in range(4)) / 4 for c in range(32)])
    ref = ref / np.linalg.norm(ref)
    out = mean_pool_descriptor(image(), vit).data
    assert np.allclose(out, ref, atol=1e-14)
    assert abs(np.linalg.norm(out) - 1) <= 1e-12


def test_progressive_descriptor_order_and_monotone_insertion():
    m = model(M=8, strategy="D_progressive")
    maps = []
    seq = forward_tokens(image(), m, maps=maps)
    # blocks 2..5 each add 2 tokens; earlier blocks see only class + patches
    widths = [a.shape[-1] for a in maps]
    assert widths == [5, 5, 7, 9, 11, 13]
    desc = readout(seq, "agg").data.reshape(8, 32)
    seg = seq.agg_segment().data
    flat = np.concatenate([seg[6:8], seg[4:6], seg[2:4], seg[0:2]])
    assert np.allclose(desc, flat / np.linalg.norm(flat), atol=1e-15)


# ---------------------------------------------------------------- tape inspection


def test_strategy_b_tape_has_no_prefix_nodes_and_agg_stays_out():
    m = model(M=2)
    agg_id = id(m.agg.values)
    with Tape() as tape:
        desc, _ = forward_image(np.stack([image(0), image(1)]), m)
        T.tsum(desc)
    for i in range(2):
        assert tape.nodes_in_scope(f"block{i}") == []
    prefix = [n for n in tape.nodes if n.scope in ("block0", "block1", "embed")]
    assert all(agg_id not in map(id, n.inputs) for n in prefix)
    assert tape.nodes_in_scope("block2")


def test_strategy_a_records_every_block():
    m = model(M=2, strategy="A_frozen")
    with Tape() as tape:
        forward_image(image(), m)
    assert all(tape.nodes_in_scope(f"block{i}") for i in range(6))


# ---------------------------------------------------------------- decomposition


def test_decomposition_exact_on_integer_instances():
    rng = np.random.default_rng(0)
    for _ in range(20):
        M, n, d = rng.integers(1, 4), rng.integers(5, 9), rng.integers(2, 6)
        q, k, v = (rng.integers(-5, 6, (n, d)).astype(float) for _ in range(3))
        rep = decompose_attention(q, k, v, int(M))
        assert rep.exact
        assert np.array_equal(rep.joint_agg_rows, rep.agg_agg + rep.agg_patch)


def test_decomposition_zero_patch_values():
    rng = np.random.default_rng(1)
    q, k, v = rng.normal(size=(3, 5, 4))
    v[2:] = 0.0
    rep = decompose_attention(q, k, v, 2)
    assert np.array_equal(rep.agg_patch, np.zeros((2, 4)))


def test_decomposition_matches_scalar_loop():
    rng = np.random.default_rng(2)
    M, N = 2, 3
    q, k, v = rng.normal(size=(3, M + N, 4))
    rep = decompose_attention(q, k, v, M)
    joint, aa, ap = block_split_loop(q.tolist(), k.tolist(), v.tolist(), M)
    assert np.allclose(rep.joint_agg_rows, joint, atol=1e-13)
    assert np.allclose(rep.agg_agg, aa, atol=1e-13)
    assert np.allclose(rep.agg_patch, ap, atol=1e-13)
    assert rep.agg_agg_norm == pytest.approx(np.linalg.norm(aa))


def test_attention_decomposition_on_model():
    m = model(M=2)
    _, seq = forward_image(image(), m)
    rep = attention_decomposition(seq, m.vit, 5)
    assert rep.residual < 1e-12
    assert np.all((rep.softmax_patch_mass > 0) & (rep.softmax_patch_mass < 1))
    plain = forward_to_block(image(), m.vit, 2)
    with pytest.raises(ContractError):
        attention_decomposition(plain, m.vit, 2)


# ---------------------------------------------------------------- attention maps


def test_dump_attention_maps(tmp_path):
    m = model(M=3)
    res = dump_attention_maps(image(), m, tmp_path, per_head=True)
    gh, gw = TOY.grid
    for k in range(3):
        img = read_pnm(tmp_path / f"agg{k:02d}.pgm")
        assert img.shape == (gh, gw)
        assert (tmp_path / f"agg{k:02d}_head0.pgm").exists()
    assert read_pnm(tmp_path / "merged.pgm").shape == (gh, gw)
    maps = res["maps"]
    assert np.all((maps >= 0) & (maps <= 1))
    assert np.all(np.abs(res["rows"].sum(axis=1) - 1.0) <= 1e-9)
    assert np.all(res["merged"][None] >= maps)
    with open(tmp_path / "weights.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["token_index", "patch_row", "patch_col", "weight"]
    assert len(rows) == 1 + 3 * gh * gw


# ---------------------------------------------------------------- extraction


def test_extract_descriptors_threads_and_order():
    m = model(M=2)
    imgs = np.stack([image(s) for s in range(7)])
    one = extract_descriptors(m, imgs, batch_size=3, threads=1)
    many = extract_descriptors(m, imgs, batch_size=2, threads=3)
    assert np.allclose(one, many, atol=1e-13)
    for i in (0, 6):
        assert np.allclose(one[i], forward_image(imgs[i], m)[0].data, atol=1e-13)


def test_model_state_round_trip():
    a, b = model(M=2, seed=3), model(M=2, seed=4)
    b.load_state_dict(a.state_dict())
    assert np.array_equal(forward_image(image(), a)[0].data, forward_image(image(), b)[0].data)
    with pytest.raises(ContractError):
        a.set_agg(np.zeros((3, 32)))
