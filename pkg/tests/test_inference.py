import warnings

import numpy as np
import pytest
from scipy.special import expit

from safire.core import PointPrompt
from safire.inference import (ClusterAssignment, InferOptions, combine_binary, combine_softmax, dbscan,
                              grid_prompts, infer, kmeans, representative_feature, select_confident)
from safire.net import decode, encode_image, encode_prompt, init_params


def test_grid_prompts():
    pts = grid_prompts(256, 256, 16)
    assert len(pts) == 256 and pts[0] == (8, 8) and pts[1] == (8, 24) and pts[16] == (24, 8)
    assert grid_prompts(40, 24, 1) == [PointPrompt(20, 12)]
    for h, w, g in [(16, 16, 16), (17, 33, 5), (64, 8, 8)]:
        assert all(0 <= p.row < h and 0 <= p.col < w for p in grid_prompts(h, w, g))


def test_representative_feature():
    grid = np.random.default_rng(0).normal(size=(4, 3, 3))
    x = np.full((24, 24), -5.0)
    x[8:16, 16:24] = 5.0
    f, fb = representative_feature(grid, x)
    # bilinear downsampling leaks a little into neighbours but stays below 0 there
    np.testing.assert_allclose(f, grid[:, 1, 2])
    assert not fb
    f, _ = representative_feature(grid, np.ones((24, 24)))
    np.testing.assert_allclose(f, grid.reshape(4, -1).mean(1))
    f, fb = representative_feature(grid, -np.ones((24, 24)), PointPrompt(20, 3))
    assert fb and np.array_equal(f, grid[:, 2, 0])
    with pytest.raises(ValueError):
        representative_feature(grid, -np.ones((24, 24)))


def test_kmeans_blobs_and_degenerate():
    g = np.random.default_rng(1)
    a = g.normal(0, 0.1, (30, 3))
    b = g.normal(5, 0.1, (20, 3))
    idx = g.permutation(50)
    feats = np.concatenate([a, b])[idx]
    truth = (idx >= 30).astype(int)
    res = kmeans(feats, 2, seed=0)
    assert res.m == 2 and res.method == "kmeans"
    assert np.array_equal(res.labels, truth) or np.array_equal(res.labels, 1 - truth)
    assert np.array_equal(kmeans(feats, 2, seed=0).labels, res.labels)
    with pytest.warns(RuntimeWarning):
        r = kmeans(np.ones((5, 2)), 2)
    assert r.m == 1 and np.all(r.labels == 0)
    assert np.all(kmeans(feats, 1).labels == 0)
    with pytest.raises(ValueError):
        kmeans(np.empty((0, 2)), 1)


def test_kmeans_every_cluster_nonempty():
    g = np.random.default_rng(2)
    for k in range(2, 6):
        res = kmeans(g.normal(size=(12, 2)), k, seed=k)
        assert sorted(set(res.labels.tolist())) == list(range(res.m))


def test_dbscan():
    g = np.random.default_rng(3)
    a = np.array([1, 0, 0]) + g.normal(0, 0.01, (10, 3))
    b = np.array([0, 1, 0]) + g.normal(0, 0.01, (10, 3))
    assert dbscan(np.concatenate([a, b])).m == 2
    assert dbscan(a).m == 1
    assert dbscan(np.concatenate([a, b]), eps=10.0).m == 1
    # everything noise -> one cluster
    assert dbscan(np.eye(3), eps=0.1, min_pts=2).m == 1
    # a stray point joins its nearest core point's cluster
    res = dbscan(np.concatenate([a, b, [[0.9, 0.45, 0]]]))
    assert res.m == 2 and res.labels[-1] == res.labels[0]


def test_select_confident():
    one = ClusterAssignment(np.zeros(2, int), 1, "kmeans")
    assert select_confident(one, [0.2, 0.9]) == [1]
    assert select_confident(one, [0.5, 0.5]) == [0]
    two = ClusterAssignment(np.array([0, 1, 1, 0]), 2, "kmeans")
    sel = select_confident(two, [0.1, 0.3, 0.2, 0.4])
    assert sel == [3, 1]


def test_combine_binary():
    g = np.random.default_rng(4)
    xa, xb = g.normal(size=(2, 8, 8)) * 3
    np.testing.assert_array_equal(combine_binary(xa, -xa), expit(xa))
    assert np.all(combine_binary(np.zeros(3), np.zeros(3)) == 0.5)
    out = combine_binary(xa, xb)
    assert out.min() >= 0 and out.max() <= 1
    np.testing.assert_allclose(out + combine_binary(xb, xa), 1.0, rtol=0, atol=2e-16)


def test_combine_softmax():
    hard, soft = combine_softmax([np.full((1, 1), 5.0), np.full((1, 1), -5.0)])
    assert hard[0, 0] == 0 and soft[0, 0, 0] == pytest.approx(0.99995, abs=1e-5)
    hard, soft = combine_softmax(np.zeros((3, 2, 2)))
    assert np.all(hard == 0) and np.allclose(soft, 1 / 3)
    maps = np.random.default_rng(5).normal(size=(3, 4, 4))
    perm = [2, 0, 1]
    h1, _ = combine_softmax(maps)
    h2, _ = combine_softmax(maps[perm])
    np.testing.assert_array_equal(np.array(perm)[h2], h1)
    with pytest.raises(ValueError):
        combine_softmax(maps[:1])


@pytest.fixture(scope="module")
def toy():
    params = init_params(4)
    img = np.random.default_rng(6).random((64, 64, 3))
    return params, img


def test_infer_binary_deterministic_and_batched(toy):
    params, img = toy
    a = infer(params, img, InferOptions(grid=4, seed=1))
    b = infer(params, img, InferOptions(grid=4, seed=1))
    assert a.heatmap.tobytes() == b.heatmap.tobytes()
    assert a.heatmap.shape == (64, 64) and len(a.confidences) == 16
    # reference: one decode call per prompt
    grid = encode_image(params, img)
    ref = [decode(params, grid, [encode_prompt(params, p, 64, 64)])[0][1] for p in grid_prompts(64, 64, 4)]
    assert a.confidences == ref


def test_infer_multi_labels_nonempty(toy):
    params, img = toy
    res = infer(params, img, InferOptions(grid=4, mode="multi", m=3))
    labels = np.unique(res.partition)
    assert labels.tolist() == list(range(labels.size)) and labels.size <= res.m <= 3
    side = infer(params, img, InferOptions(grid=4, mode="multi", cluster="dbscan"))
    assert side.m >= 1 and side.sidecar()["M"] == side.m


def test_infer_rejects_bad_dims(toy):
    params, img = toy
    with pytest.raises(ValueError, match="multiples"):
        infer(params, img[:60])


def test_infer_orientation_convention(toy):
    # swapping which selected map is called forged only complements the thresholded output
    params, img = toy
    res = infer(params, img, InferOptions(grid=4))
    if res.m == 2:
        grid = encode_image(params, img)
        pts = grid_prompts(64, 64, 4)
        a, b = [decode(params, grid, [encode_prompt(params, pts[i], 64, 64)])[0][0] for i in res.selected]
        np.testing.assert_array_equal(combine_binary(a, b) > 0.5, ~(combine_binary(b, a) >= 0.5))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        infer(params, np.zeros((64, 64, 3)), InferOptions(grid=4))
