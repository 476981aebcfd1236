import numpy as np
import pytest
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import pdist

from vlmq.calib import (
    CalibrationSample,
    TokenRole,
    cluster_count,
    generate_batch,
    split_modality,
    vision_mask,
)
from vlmq.errors import InvalidRatio, ShapeMismatch

JITTER = 0.01


def vision_tokens(sample):
    return sample.embeddings[:, vision_mask(sample.roles)]


def single_linkage_clusters(points, threshold):
    if points.shape[1] < 2:
        return points.shape[1]
    z = linkage(points.T, method="single")
    return int(fcluster(z, t=threshold, criterion="distance").max())


def test_redundancy_zero_distinct():
    s = generate_batch(16, 1, 6, 50, redundancy=0.0, seed=1).samples[0]
    d = pdist(vision_tokens(s).T)
    assert d.min() > 10 * JITTER


def test_redundancy_one_single_cluster():
    s = generate_batch(16, 1, 6, 64, redundancy=1.0, seed=2).samples[0]
    v = vision_tokens(s)
    centre = v.mean(axis=1, keepdims=True)
    assert np.max(np.linalg.norm(v - centre, axis=0)) < 10 * JITTER * np.sqrt(16)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cluster_count_single_linkage(seed):
    s = generate_batch(16, 1, 6, 100, redundancy=0.75, seed=seed).samples[0]
    # intra-cluster spread ~ JITTER * sqrt(2d); centres are O(sqrt(2d)) apart
    assert single_linkage_clusters(vision_tokens(s), threshold=0.5) == 25


@pytest.mark.parametrize("r,n,k", [(0.0, 10, 10), (1.0, 10, 1), (0.75, 100, 25), (0.9, 40, 4), (0.99, 10, 1)])
def test_cluster_count_formula(r, n, k):
    assert cluster_count(r, n) == k


def test_layout_and_roles():
    s = generate_batch(8, 1, 7, 5, redundancy=0.5).samples[0]
    assert s.roles.tolist() == [0, 0, 1, 1, 1, 1, 1, 2, 2, 3, 3, 3]
    assert (s.n_text, s.n_vision, s.n_tokens) == (7, 5, 12)


def test_deterministic():
    a = generate_batch(8, 3, 4, 6, 0.5, seed=11)
    b = generate_batch(8, 3, 4, 6, 0.5, seed=11)
    for sa, sb in zip(a.samples, b.samples):
        assert np.array_equal(sa.embeddings, sb.embeddings)


def test_invalid_redundancy():
    with pytest.raises(InvalidRatio):
        generate_batch(8, 1, 4, 4, redundancy=1.5)


def test_split_all_text():
    x = np.arange(6.0).reshape(2, 3)
    xt, xv = split_modality(x, [TokenRole.SYS, TokenRole.INS, TokenRole.ANS])
    assert xv.shape == (2, 0) and np.array_equal(xt, x)


def test_split_direct_indexing():
    x = np.arange(8.0).reshape(2, 4)
    xt, xv = split_modality(x, [0, 1, 1, 3])
    assert np.array_equal(xt, x[:, [0, 3]])
    assert np.array_equal(xv, x[:, [1, 2]])


def test_split_partition_identity(toy_batch):
    s = toy_batch.samples[0]
    xt, xv = split_modality(s.embeddings, s.roles)
    vis = vision_mask(s.roles)
    order = np.concatenate([np.flatnonzero(~vis), np.flatnonzero(vis)])
    rebuilt = np.empty_like(s.embeddings)
    rebuilt[:, order] = np.concatenate([xt, xv], axis=1)
    assert np.array_equal(rebuilt, s.embeddings)


def test_sample_shape_check():
    with pytest.raises(ShapeMismatch):
        CalibrationSample(np.zeros((4, 3)), [0, 1])
