import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_agg.aggregation import AggConfig, ImAge
from implicit_agg.errors import DataError
from implicit_agg.tensor import inference_mode
from implicit_agg.token_init import (
    NORMAL_STD, collect_patch_tokens, init_agg_tokens, kmeans, kmeans_plusplus, l2_normalize_rows,
)
from implicit_agg.vit import BackboneConfig, forward_to_block

from oracles import lloyd_loop

TOY = BackboneConfig.toy()


def images(n, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, (n, 3, 28, 28))


def build(M=3, init="centers_l2n", strategy="B_junction"):
    return ImAge.build(TOY, AggConfig(num_tokens=M, init_method=init, strategy=strategy))


def test_k_equals_points():
    pts = np.random.default_rng(0).normal(size=(4, 3))
    res = kmeans(pts, 4, seed=1)
    assert res.inertia == 0.0
    assert sorted(map(tuple, res.centers)) == sorted(map(tuple, pts))


def test_identical_points_reseed_policy():
    pts = np.ones((6, 2)) * 2.5
    res = kmeans(pts, 3, seed=0)
    assert np.array_equal(res.centers, np.full((3, 2), 2.5))
    assert res.inertia == 0.0


def test_too_few_points():
    with pytest.raises(DataError):
        kmeans(np.zeros((2, 3)), 3)


@pytest.mark.parametrize("seed", range(10))
def test_matches_scalar_lloyd_from_same_seeds(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(20, 2))
    seeds = kmeans_plusplus(pts, 3, np.random.default_rng(seed))
    res = kmeans(pts, 3, seed=seed)
    ref_c, ref_a, ref_inertia = lloyd_loop(pts, seeds, 100, 1e-6)
    assert abs(res.inertia - ref_inertia) < 1e-9
    assert np.array_equal(res.assignments, ref_a)
    assert np.allclose(res.centers, ref_c, atol=1e-12)


def test_empty_cluster_repair_matches_oracle():
    pts = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 0.0], [10.1, 0.0], [5.0, 5.0]])
    init = np.array([[0.0, 0.0], [100.0, 100.0], [10.0, 0.0]])
    res = kmeans(pts, 3, init_centers=init)
    ref_c, ref_a, ref_inertia = lloyd_loop(pts, init, 100, 1e-6)
    assert np.array_equal(res.assignments, ref_a)
    assert abs(res.inertia - ref_inertia) < 1e-12
    assert len(set(res.assignments.tolist())) == 3


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(5, 40), st.integers(1, 5), st.integers(1, 4))
def test_lloyd_inertia_never_increases(seed, S, k, D):
    k = min(k, S)
    pts = np.random.default_rng(seed).normal(size=(S, D))
    hist = kmeans(pts, k, seed=seed).inertia_history
    assert all(b <= a + 1e-12 * max(1.0, a) for a, b in zip(hist, hist[1:]))


def test_permutation_changes_only_center_order():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(30, 3))
    seeds = pts[[3, 17, 25]]
    a = kmeans(pts, 3, init_centers=seeds)
    perm = rng.permutation(30)
    b = kmeans(pts[perm], 3, init_centers=seeds[::-1])
    key = lambda c: tuple(np.round(c, 9))
    assert sorted(map(key, a.centers)) == sorted(map(key, b.centers))
    assert abs(a.inertia - b.inertia) < 1e-9


def test_kmeans_deterministic():
    pts = np.random.default_rng(0).normal(size=(50, 4))
    a, b = kmeans(pts, 5, seed=9), kmeans(pts, 5, seed=9)
    assert np.array_equal(a.centers, b.centers) and np.array_equal(a.assignments, b.assignments)


def test_l2_normalize_rows_leaves_zero_rows():
    x = np.array([[3.0, 4.0], [0.0, 0.0]])
    out, bad = l2_normalize_rows(x)
    assert np.allclose(out, [[0.6, 0.8], [0.0, 0.0]]) and bad == 1


def test_collect_patch_tokens():
    m = build()
    one = collect_patch_tokens(images(1), m, sample_count=1)
    assert one.shape == (4, 32)
    imgs = images(10)
    a = collect_patch_tokens(imgs, m, sample_count=5, seed=3)
    b = collect_patch_tokens(imgs, m, sample_count=5, seed=3)
    assert a.shape == (20, 32) and np.array_equal(a, b)
    picks = np.sort(np.random.default_rng(3).choice(10, size=5, replace=False))
    with inference_mode():
        manual = forward_to_block(imgs[picks], m.vit, TOY.frozen_prefix).patch_segment().data
    assert np.array_equal(a, manual.reshape(-1, 32))
    with pytest.raises(DataError):
        collect_patch_tokens(np.zeros((0, 3, 28, 28)), m)


def test_collect_uses_first_insertion_block():
    m = build(strategy="C_deep")
    a = collect_patch_tokens(images(3), m, sample_count=3)
    with inference_mode():
        ref = forward_to_block(images(3), m.vit, 4).patch_segment().data.reshape(-1, 32)
    assert np.array_equal(a, ref)


def test_init_variants():
    imgs = images(8)
    m = build(M=3)
    zero = init_agg_tokens(m, AggConfig(num_tokens=3, init_method="zero"), imgs)
    assert np.array_equal(zero.values.data, np.zeros((3, 32)))
    normal = init_agg_tokens(m, AggConfig(num_tokens=3, init_method="normal"), imgs, seed=1)
    assert normal.values.shape == (3, 32)
    assert np.array_equal(normal.values.data, np.random.default_rng(1).normal(0, NORMAL_STD, (3, 32)))
    raw = init_agg_tokens(m, AggConfig(num_tokens=3, init_method="centers"), imgs, sample_count=8)
    l2n = init_agg_tokens(m, AggConfig(num_tokens=3, init_method="centers_l2n"), imgs, sample_count=8)
    norms = np.linalg.norm(l2n.values.data, axis=1)
    assert np.all(np.abs(norms - 1.0) <= 1e-9)
    scale = np.linalg.norm(raw.values.data, axis=1, keepdims=True)
    assert np.allclose(l2n.values.data * scale, raw.values.data, atol=1e-12)


def test_centers_need_images():
    with pytest.raises(DataError):
        init_agg_tokens(build(), AggConfig(num_tokens=3, init_method="centers"), None)
