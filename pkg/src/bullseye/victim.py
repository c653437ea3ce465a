"""Victim side: poisoned fine-tuning sets, transfer learning, and attack metrics."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import nn

from bullseye.errors import InputError, TrainingDivergenceError
from bullseye.images import ImageTensor, LabeledImages
from bullseye.zoo import Classifier

log = logging.getLogger(__name__)


class FineTuneMode(str, Enum):
    LINEAR = "LINEAR"
    END_TO_END = "END_TO_END"


DEFAULT_LR = {FineTuneMode.LINEAR: 0.1, FineTuneMode.END_TO_END: 1e-4}


@dataclass
class FineTuneSpec:
    mode: FineTuneMode = FineTuneMode.LINEAR
    epochs: int = 60
    learning_rate: float | None = None
    batch_size: int = 32
    seed: int = 0
    victim_network: str = ""

    def __post_init__(self):
        self.mode = FineTuneMode(self.mode)
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LR[self.mode]
        if self.epochs < 0:
            raise InputError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class AttackReport:
    victim_id: str
    poison_label: int
    success: list[bool]
    attack_success_rate: float
    baseline_test_accuracy: float
    poison_accuracy: float
    target_ids: list[int] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "victim_id": self.victim_id,
            "poison_label": int(self.poison_label),
            "success": [bool(s) for s in self.success],
            "attack_success_rate": self.attack_success_rate,
            "baseline_test_accuracy": self.baseline_test_accuracy,
            "poison_accuracy": self.poison_accuracy,
            "target_ids": [int(t) for t in self.target_ids],
            "metadata": self.metadata,
        }


def assemble_poisoned_set(clean_set: LabeledImages, poison_set=None, seed: int = 0) -> LabeledImages:
    """Append the poisons, under their bases' labels, to the clean set and shuffle.

    ``poison_set`` may be a ``PoisonSet``, an already-labeled batch of
    poisons, or None.
    """
    if poison_set is None:
        return clean_set
    poisons = poison_set.as_labeled() if hasattr(poison_set, "as_labeled") else poison_set
    if len(poisons) == 0:
        return clean_set
    missing = set(int(c) for c in poisons.labels) - clean_set.classes
    if missing:
        raise InputError(f"poison label(s) {sorted(missing)} not among the clean set's classes")
    if hasattr(poison_set, "poison_label") and np.any(poisons.labels != poison_set.poison_label):
        raise InputError("poison labels must equal the bases' true labels")
    shared = set(clean_set.source_ids.tolist()) & set(poisons.source_ids.tolist())
    if shared:
        raise InputError(f"poison bases overlap the clean set (source ids {sorted(shared)[:10]})")
    poisons = LabeledImages(poisons.pixels.to(clean_set.pixels.dtype), poisons.labels, poisons.source_ids,
                            np.ones(len(poisons), dtype=bool))
    merged = LabeledImages.concat([clean_set, poisons])
    order = np.random.default_rng(seed).permutation(len(merged))
    return merged.subset(order)


def _train(params, forward, n, labels, spec: FineTuneSpec):
    g = torch.Generator().manual_seed(int(spec.seed))
    opt = torch.optim.Adam(params, lr=spec.learning_rate)
    y = torch.as_tensor(labels)
    for epoch in range(spec.epochs):
        order = torch.randperm(n, generator=g)
        for start in range(0, n, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            loss = nn.functional.cross_entropy(forward(idx), y[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(epoch, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()


def fine_tune(spec: FineTuneSpec, victim: Classifier, dataset: LabeledImages, n_classes: int | None = None):
    """Return a fine-tuned copy of ``victim``; the argument is left untouched.

    Both modes put a freshly initialized ``n_classes``-way head on the
    extractor.  LINEAR trains only that head on frozen penultimate features;
    END_TO_END updates every parameter.
    """
    if len(dataset) == 0:
        raise InputError("cannot fine-tune on an empty dataset")
    n_classes = victim.n_classes if n_classes is None else n_classes
    if dataset.labels.min() < 0 or dataset.labels.max() >= n_classes:
        raise InputError(f"labels outside [0, {n_classes})")
    model = copy.deepcopy(victim)
    model.eval()
    torch.manual_seed(int(spec.seed))
    model.head = nn.Linear(model.head.in_features, n_classes).to(model.extractor.dtype)
    model.n_classes = int(n_classes)
    if spec.mode is FineTuneMode.LINEAR:
        for p in model.extractor.parameters():
            p.requires_grad_(False)
        with torch.no_grad():
            feats = model.features(dataset.pixels.to(model.extractor.dtype))
        _train(list(model.head.parameters()), lambda idx: model.head(feats[idx]), len(dataset), dataset.labels, spec)
    else:
        for p in model.parameters():
            p.requires_grad_(True)
        px = dataset.pixels.to(model.extractor.dtype)
        _train(list(model.parameters()), lambda idx: model(px[idx]), len(dataset), dataset.labels, spec)
        for p in model.parameters():
            p.requires_grad_(False)
    model.eval()
    return model


def fine_tune_with_fallback(spec: FineTuneSpec, victim, dataset, retries=2):
    """``fine_tune``, dividing the learning rate by 10 after each divergence.

    Returns (model, learning_rate_used, divergences).
    """
    divergences = []
    for _ in range(retries + 1):
        try:
            return fine_tune(spec, victim, dataset), spec.learning_rate, divergences
        except TrainingDivergenceError as exc:
            divergences.append({"epoch": exc.epoch, "learning_rate": spec.learning_rate})
            log.warning("fine-tuning diverged at epoch %d (lr=%g); retrying with lr/10", exc.epoch,
                        spec.learning_rate)
            spec = FineTuneSpec(spec.mode, spec.epochs, spec.learning_rate * 0.1, spec.batch_size, spec.seed,
                                spec.victim_network)
    raise TrainingDivergenceError(divergences[-1]["epoch"], float("nan"))


def _pixels(x):
    if isinstance(x, LabeledImages):
        return x.pixels
    if isinstance(x, torch.Tensor):
        return x
    return torch.stack([im.pixels for im in x])


def evaluate(classifier: Classifier, targets, poison_label: int, test_set: LabeledImages | None = None,
             poisons=None, victim_id: str = "", metadata: dict | None = None) -> AttackReport:
    targets = list(targets)
    if not targets:
        raise InputError("evaluate needs at least one target")
    dtype = classifier.extractor.dtype
    pred_t = classifier.predict(_pixels(targets).to(dtype))
    success = [bool(p == poison_label) for p in pred_t]
    if test_set is not None and len(test_set):
        base_acc = float(np.mean(classifier.predict(test_set.pixels.to(dtype)) == test_set.labels))
    else:
        base_acc = float("nan")
    if poisons is not None and len(_pixels(poisons)):
        poison_acc = float(np.mean(classifier.predict(_pixels(poisons).to(dtype)) == poison_label))
    else:
        poison_acc = float("nan")
    return AttackReport(
        victim_id=victim_id,
        poison_label=int(poison_label),
        success=success,
        attack_success_rate=float(np.mean(success)),
        baseline_test_accuracy=base_acc,
        poison_accuracy=poison_acc,
        target_ids=[int(t.source_id) if isinstance(t, ImageTensor) else -1 for t in targets],
        metadata=dict(metadata or {}),
    )


def append_record(path, record: dict):
    """Append one JSON line; records are never rewritten."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_records(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
