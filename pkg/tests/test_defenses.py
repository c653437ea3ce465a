import numpy as np
import pytest
from collections import Counter

from bullseye.defenses import apply_filter, deep_knn_filter, l2_centroid_filter, removal_count, score_defense
from bullseye.errors import InputError
from bullseye.images import LabeledImages
import torch


def brute_knn(X, y, ids, k):
    removed = set()
    for i in range(len(X)):
        others = sorted((float(np.linalg.norm(X[i] - X[j])), int(ids[j]), j) for j in range(len(X)) if j != i)
        votes = Counter(int(y[j]) for _, _, j in others[:k])
        top = max(votes.values())
        if votes.get(int(y[i]), 0) < top:
            removed.add(int(ids[i]))
    return removed


def brute_centroid(X, y, ids, mu):
    removed = set()
    for c in set(y.tolist()):
        rows = [i for i in range(len(X)) if y[i] == c]
        n_drop = int(np.floor(mu * len(rows) + 1e-9))
        mean = X[rows].mean(axis=0)
        ranked = sorted(rows, key=lambda i: (-float(np.linalg.norm(X[i] - mean)), int(ids[i])))
        removed |= {int(ids[i]) for i in ranked[:n_drop]}
    return removed


def random_dataset(rng):
    n = int(rng.integers(5, 60))
    X = rng.normal(size=(n, int(rng.integers(1, 5))))
    if rng.random() < 0.3:
        X = np.round(X)  # force distance ties
    y = rng.integers(0, 3, n)
    ids = rng.permutation(10 * n)[:n]
    return X, y, ids


def test_knn_matches_brute_force(rng):
    for _ in range(40):
        X, y, ids = random_dataset(rng)
        k = int(rng.integers(1, len(X)))
        assert deep_knn_filter(X, y, ids, k).removed_ids == brute_knn(X, y, ids, k)


def test_centroid_matches_brute_force(rng):
    for _ in range(40):
        X, y, ids = random_dataset(rng)
        mu = float(rng.choice([0.0, 0.1, 0.25, 0.5, 1.0]))
        assert l2_centroid_filter(X, y, ids, mu).removed_ids == brute_centroid(X, y, ids, mu)


def test_knn_tie_keeps_point():
    # neighbours of point 0 split 1:1 between its own label and another: it survives
    X = np.array([[0.0], [1.0], [-1.0], [10.0]])
    y = np.array([0, 0, 1, 1])
    assert 0 not in deep_knn_filter(X, y, np.arange(4), 2).removed_ids


def test_knn_order_invariant(rng):
    X, y, ids = random_dataset(rng)
    perm = rng.permutation(len(X))
    assert deep_knn_filter(X, y, ids, 3).removed_ids == deep_knn_filter(X[perm], y[perm], ids[perm], 3).removed_ids


def test_knn_bounds():
    X = np.zeros((4, 2))
    for k in (0, 4):
        with pytest.raises(InputError):
            deep_knn_filter(X, np.zeros(4), np.arange(4), k)
    with pytest.raises(InputError):
        deep_knn_filter(X, np.zeros(4), np.array([0, 0, 1, 2]), 1)


def test_removal_count():
    assert removal_count(0.1, 50) == 5
    assert removal_count(0.29, 100) == 29
    assert removal_count(0.0, 10) == 0
    assert removal_count(1.0, 7) == 7


def test_centroid_mu_extremes(rng):
    X, y, ids = random_dataset(rng)
    assert l2_centroid_filter(X, y, ids, 0.0).removed_ids == frozenset()
    assert l2_centroid_filter(X, y, ids, 1.0).removed_ids == frozenset(int(i) for i in ids)
    with pytest.raises(InputError):
        l2_centroid_filter(X, y, ids, 1.5)


def test_scoring_and_filtering():
    X = np.array([[0.0], [0.1], [5.0], [0.2]])
    y = np.array([0, 0, 0, 1])
    rep = score_defense(deep_knn_filter(X, y, np.arange(4), 1), [3])
    assert rep.poisons_removed == 1 and rep.total_poisons == 1 and rep.recall == 1.0
    assert rep.precision == 1 / len(rep.removed_ids)
    assert score_defense(rep, []).recall == 0.0
    imgs = LabeledImages(torch.zeros(4, 1, 2, 2), y, np.arange(4))
    kept = apply_filter(imgs, rep)
    assert set(kept.source_ids) == set(range(4)) - rep.removed_ids
