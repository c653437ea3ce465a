"""Feature-space sanitization: Deep k-NN and l2-norm centroid filtering.

Both filters work on a labeled feature matrix.  Distance ties are broken by
ascending source id so results never depend on input order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from bullseye.errors import InputError


@dataclass(frozen=True)
class DefenseReport:
    removed_ids: frozenset
    parameter_name: str
    parameter: float
    poisons_removed: int = 0
    cleans_removed: int = 0
    total_poisons: int = 0
    precision: float = 0.0
    recall: float = 0.0

    def to_json(self) -> dict:
        return {
            "removed_ids": sorted(int(i) for i in self.removed_ids),
            "parameter_name": self.parameter_name,
            "parameter": self.parameter,
            "poisons_removed": self.poisons_removed,
            "cleans_removed": self.cleans_removed,
            "total_poisons": self.total_poisons,
            "precision": self.precision,
            "recall": self.recall,
        }


def _check(features, labels, source_ids):
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    ids = np.asarray(source_ids)
    if X.ndim != 2 or not (len(X) == len(y) == len(ids)):
        raise InputError("features must be (N, d) with one label and one source id per row")
    if len(np.unique(ids)) != len(ids):
        raise InputError("source ids must be unique")
    return X, y, ids


def pairwise_distances(X) -> np.ndarray:
    diff = X[:, None, :] - X[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def deep_knn_filter(features, labels, source_ids, k_nn: int) -> DefenseReport:
    """Drop every point whose label is not a plurality label of its k nearest neighbours.

    Single pass against the original set; the query point is not its own
    neighbour.  A point whose label ties for the plurality survives.
    """
    X, y, ids = _check(features, labels, source_ids)
    n = len(X)
    if k_nn < 1 or k_nn >= n:
        raise InputError(f"k_nn must be in [1, {n - 1}] for {n} points, got {k_nn}")
    D = pairwise_distances(X)
    removed = []
    for i in range(n):
        order = np.lexsort((ids, D[i]))
        neigh = order[order != i][:k_nn]
        values, counts = np.unique(y[neigh], return_counts=True)
        modes = values[counts == counts.max()]
        if y[i] not in modes:
            removed.append(ids[i])
    return DefenseReport(frozenset(int(r) for r in removed), "k_nn", int(k_nn))


def removal_count(mu: float, class_size: int) -> int:
    # guard against 0.29 * 100 == 28.999999999999996
    return int(math.floor(mu * class_size + 1e-9))


def l2_centroid_filter(features, labels, source_ids, mu: float) -> DefenseReport:
    """Per class, drop the floor(mu * size) points farthest from the class mean."""
    if not 0.0 <= mu <= 1.0:
        raise InputError(f"mu must be in [0, 1], got {mu}")
    X, y, ids = _check(features, labels, source_ids)
    removed = []
    for c in np.unique(y):
        rows = np.nonzero(y == c)[0]
        n_drop = removal_count(mu, len(rows))
        if n_drop == 0:
            continue
        centroid = X[rows].mean(axis=0)
        dist = np.sqrt(((X[rows] - centroid) ** 2).sum(axis=1))
        order = np.lexsort((ids[rows], -dist))
        removed.extend(ids[rows[order[:n_drop]]])
    return DefenseReport(frozenset(int(r) for r in removed), "mu", float(mu))


def score_defense(report: DefenseReport, ground_truth_poison_ids) -> DefenseReport:
    poisons = set(int(i) for i in ground_truth_poison_ids)
    hit = len(report.removed_ids & poisons)
    return replace(
        report,
        poisons_removed=hit,
        cleans_removed=len(report.removed_ids) - hit,
        total_poisons=len(poisons),
        precision=hit / max(1, len(report.removed_ids)),
        recall=hit / len(poisons) if poisons else 0.0,
    )


def defense_features(classifier, images, batch_size=512) -> np.ndarray:
    """Penultimate-layer embeddings used as the defenses' feature space."""
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(classifier.features(images.pixels[i:i + batch_size]).double().numpy())
    return np.concatenate(out)


def apply_filter(images, report: DefenseReport):
    keep = np.array([int(s) not in report.removed_ids for s in images.source_ids], dtype=bool)
    return images.subset(np.nonzero(keep)[0])
