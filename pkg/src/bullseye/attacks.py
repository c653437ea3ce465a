"""Poison crafting: Bullseye Polytope, Convex Polytope, ensemble Feature
Collision and fixed-coefficient Bullseye variants.

Features are passed around as one dict per network mapping a layer tag to a
tensor: ``(d,)`` for a target embedding and ``(k, d)`` for the poisons.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

import bullseye
from bullseye.ensemble import EmbeddingEnsemble, mean_target_embedding
from bullseye.errors import ConfigurationError, DegenerateEmbeddingError, InputError
from bullseye.images import ImageTensor, LabeledImages
from bullseye.simplex import check_simplex, optimize_coefficients

log = logging.getLogger(__name__)


class AttackKind(str, Enum):
    BP = "BP"
    CP = "CP"
    FC = "FC"
    BP_FIXED = "BP_FIXED"


class LayerMode(str, Enum):
    SINGLE = "SINGLE"
    MULTI = "MULTI"


@dataclass
class AttackConfig:
    attack_kind: AttackKind = AttackKind.BP
    epsilon: float = 0.1
    k: int = 5
    iterations: int = 800
    multidraw_R: int = 1
    layer_mode: LayerMode = LayerMode.SINGLE
    targets: list[ImageTensor] = field(default_factory=list)
    step_size: float = 0.01
    crafting_seed: int = 0
    fixed_coefficients: Sequence[float] | None = None
    step_decay: float = 0.5
    step_decay_every: int = 1000
    coeff_max_steps: int = 200
    coeff_tolerance: float = 1e-10
    optimizer: str = "gd"

    def __post_init__(self):
        self.attack_kind = AttackKind(self.attack_kind)
        self.layer_mode = LayerMode(self.layer_mode)
        problems = []
        if not self.epsilon > 0:
            problems.append(f"epsilon must be > 0 (got {self.epsilon})")
        if self.k < 1:
            problems.append(f"k must be >= 1 (got {self.k})")
        if self.iterations < 0:
            problems.append(f"iterations must be >= 0 (got {self.iterations})")
        if self.multidraw_R < 1:
            problems.append(f"multidraw_R must be >= 1 (got {self.multidraw_R})")
        if self.optimizer not in ("gd", "adam"):
            problems.append(f"optimizer must be 'gd' or 'adam' (got {self.optimizer!r})")
        if not self.step_size > 0:
            problems.append(f"step_size must be > 0 (got {self.step_size})")
        if self.attack_kind is AttackKind.BP_FIXED:
            if self.fixed_coefficients is None:
                problems.append("BP_FIXED requires fixed_coefficients")
            else:
                c = np.asarray(self.fixed_coefficients, dtype=np.float64)
                if c.shape != (self.k,):
                    problems.append(f"fixed_coefficients must have length k={self.k}")
                else:
                    try:
                        check_simplex(c)
                    except InputError as exc:
                        problems.append(f"fixed_coefficients: {exc}")
        if problems:
            raise ConfigurationError("; ".join(problems))

    def to_json(self) -> dict:
        d = asdict(self)
        d["attack_kind"] = self.attack_kind.value
        d["layer_mode"] = self.layer_mode.value
        d["targets"] = [int(t.source_id) for t in self.targets]
        if self.fixed_coefficients is not None:
            d["fixed_coefficients"] = [float(c) for c in self.fixed_coefficients]
        return d


# ---------------------------------------------------------------- objectives

def _weighted_mean(poisons: torch.Tensor, weights: torch.Tensor | None) -> torch.Tensor:
    k = poisons.shape[0]
    if weights is None:
        weights = torch.full((k,), 1.0 / k, dtype=poisons.dtype)
    return weights.to(poisons.dtype) @ poisons


def polytope_objective(targets, poisons, weights=None) -> torch.Tensor:
    """(1/2m) sum_i sum_layer ||t - sum_j w_j p_j||^2 / ||t||^2.

    ``weights`` is None (uniform 1/k, the Bullseye objective), one vector
    shared by all networks, or a list with one vector per network.
    """
    m = len(targets)
    if m == 0 or len(poisons) != m:
        raise InputError("targets and poisons need one feature dict per network")
    total = 0.0
    for i in range(m):
        w = weights[i] if isinstance(weights, (list, tuple)) else weights
        if w is not None and not isinstance(w, torch.Tensor):
            w = torch.as_tensor(np.asarray(w))
        for tag, t in targets[i].items():
            p = poisons[i][tag]
            if p.dim() != 2 or p.shape[0] == 0:
                raise InputError("poison features must be a non-empty (k, d) tensor")
            if p.shape[1] != t.shape[0]:
                raise InputError(f"layer {tag}: target dim {t.shape[0]} != poison dim {p.shape[1]}")
            denom = t @ t
            if denom <= 0:
                raise DegenerateEmbeddingError(f"network {i} layer {tag}: target embedding has zero norm")
            r = t - _weighted_mean(p, w)
            total = total + (r @ r) / denom
    return total / (2 * m)


def fc_objective(targets, poisons) -> torch.Tensor:
    """sum_i sum_layer sum_j ||p_j - t||^2 / ||t||^2, decoupled over poisons."""
    if len(targets) == 0 or len(poisons) != len(targets):
        raise InputError("targets and poisons need one feature dict per network")
    total = 0.0
    for i, tdict in enumerate(targets):
        for tag, t in tdict.items():
            p = poisons[i][tag]
            if p.dim() != 2 or p.shape[0] == 0:
                raise InputError("poison features must be a non-empty (k, d) tensor")
            if p.shape[1] != t.shape[0]:
                raise InputError(f"layer {tag}: target dim {t.shape[0]} != poison dim {p.shape[1]}")
            denom = t @ t
            if denom <= 0:
                raise DegenerateEmbeddingError(f"network {i} layer {tag}: target embedding has zero norm")
            total = total + ((p - t) ** 2).sum() / denom
    return total


def solve_cp_coefficients(targets, poisons, prior=None, max_steps=200, tolerance=1e-10) -> list[np.ndarray]:
    """Per-network simplex coefficients minimizing that network's CP term.

    Layers of one network share coefficients: each layer is scaled by
    1/||t_layer|| and the layers are stacked, which reproduces the summed
    normalized objective exactly.
    """
    coeffs = []
    for i, tdict in enumerate(targets):
        t_parts, p_parts = [], []
        for tag, t in tdict.items():
            t64 = t.detach().double().numpy()
            scale = np.sqrt(t64 @ t64)
            if scale <= 0:
                raise DegenerateEmbeddingError(f"network {i} layer {tag}: target embedding has zero norm")
            t_parts.append(t64 / scale)
            p_parts.append(poisons[i][tag].detach().double().numpy() / scale)
        init = None if prior is None else prior[i]
        coeffs.append(optimize_coefficients(np.concatenate(t_parts), np.concatenate(p_parts, axis=1),
                                            max_steps, tolerance, init))
    return coeffs


# ---------------------------------------------------------- ensemble wrappers

def select_tags(ensemble: EmbeddingEnsemble, layer_mode) -> list[tuple[str, ...]]:
    if LayerMode(layer_mode) is LayerMode.MULTI:
        return [tuple(t) for t in ensemble.layer_taps]
    return [(t[-1],) for t in ensemble.layer_taps]


def target_embeddings(ensemble: EmbeddingEnsemble, targets: Sequence[ImageTensor], layer_mode=LayerMode.SINGLE):
    """Mean target embedding per network and tapped layer, computed without dropout."""
    det = ensemble.with_mode(False)
    out = []
    for i, tags in enumerate(select_tags(ensemble, layer_mode)):
        d = {}
        for tag in tags:
            v = mean_target_embedding(det, targets, i, tag).values.detach()
            if float(v @ v) <= 0:
                raise DegenerateEmbeddingError(
                    f"network {i} ({ensemble.networks[i].arch}) layer {tag}: target embedding is all zeros"
                )
            d[tag] = v
        out.append(d)
    return out


def poison_features(ensemble: EmbeddingEnsemble, poisons: torch.Tensor, tags, *, draws=1, generator=None):
    return [ensemble.batch_features(poisons, i, tags[i], draws=draws, generator=generator)
            for i in range(len(ensemble))]


def _tags_of(target_embs):
    return [tuple(d) for d in target_embs]


def bullseye_loss(ensemble, target_embs, poisons, *, draws=1, generator=None) -> torch.Tensor:
    feats = poison_features(ensemble, poisons, _tags_of(target_embs), draws=draws, generator=generator)
    return polytope_objective(target_embs, feats)


def fc_loss(ensemble, target_embs, poisons, *, draws=1, generator=None) -> torch.Tensor:
    feats = poison_features(ensemble, poisons, _tags_of(target_embs), draws=draws, generator=generator)
    return fc_objective(target_embs, feats)


def cp_loss_and_coefficients(ensemble, target_embs, poisons, prior_coeffs=None, *, draws=1, generator=None,
                             max_steps=200, tolerance=1e-10):
    feats = poison_features(ensemble, poisons, _tags_of(target_embs), draws=draws, generator=generator)
    coeffs = solve_cp_coefficients(target_embs, feats, prior_coeffs, max_steps, tolerance)
    return polytope_objective(target_embs, feats, [torch.from_numpy(c) for c in coeffs]), coeffs


# ------------------------------------------------------------------- crafting

@dataclass
class PoisonSet:
    poisons: torch.Tensor
    bases: LabeledImages
    poison_label: int
    config: AttackConfig
    final_loss: float
    loss_trace: list[float]
    coefficient_trace: np.ndarray | None = None
    seconds_per_iteration: float = float("nan")

    def as_labeled(self) -> LabeledImages:
        """The poisons under their bases' (true) labels and source ids."""
        return LabeledImages(self.poisons.detach().clone(), self.bases.labels.copy(),
                             self.bases.source_ids.copy(), np.ones(len(self.bases), dtype=bool))

    @property
    def final_coefficients(self):
        return None if self.coefficient_trace is None or len(self.coefficient_trace) == 0 \
            else self.coefficient_trace[-1]


class _AdamDirection:
    """Bias-corrected Adam moment ratio; the caller scales it by the step size."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def direction(self, grad):
        if self.m is None:
            self.m, self.v = torch.zeros_like(grad), torch.zeros_like(grad)
        self.t += 1
        self.m.mul_(self.beta1).add_(grad, alpha=1 - self.beta1)
        self.v.mul_(self.beta2).addcmul_(grad, grad, value=1 - self.beta2)
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return m_hat / (v_hat.sqrt() + self.eps)


def project_linf_box(x: torch.Tensor, bases: torch.Tensor, epsilon: float) -> torch.Tensor:
    return torch.clamp(torch.min(torch.max(x, bases - epsilon), bases + epsilon), 0.0, 1.0)


def craft(config: AttackConfig, ensemble: EmbeddingEnsemble, bases: LabeledImages,
          callback: Callable[[int, torch.Tensor], None] | None = None) -> PoisonSet:
    """Projected gradient descent on the chosen poisoning objective.

    Each iteration: (CP only) re-solve the simplex coefficients warm-started
    from the previous ones, take one gradient step on all poison pixels, then
    project onto the l-infinity ball around the bases intersected with [0, 1].
    ``callback(iteration, poisons)`` sees the poisons after every projection.
    """
    if len(bases) != config.k:
        raise InputError(f"expected k={config.k} base images, got {len(bases)}")
    labels = set(int(c) for c in bases.labels)
    if len(labels) != 1:
        raise InputError(f"all bases must share the poison label, got labels {sorted(labels)}")
    if not config.targets:
        raise InputError("config.targets is empty")
    poison_label = labels.pop()

    base_px = bases.pixels.detach().clone()
    base_px = base_px.to(ensemble.networks[0].dtype)

    t_embs = target_embeddings(ensemble, config.targets, config.layer_mode)
    tags = _tags_of(t_embs)
    gen = torch.Generator().manual_seed(int(config.crafting_seed))
    draws = config.multidraw_R if ensemble.stochastic_mode else 1

    kind = config.attack_kind
    fixed = None
    if kind is AttackKind.BP:
        fixed = torch.full((config.k,), 1.0 / config.k, dtype=torch.float64)
    elif kind is AttackKind.BP_FIXED:
        fixed = torch.as_tensor(np.asarray(config.fixed_coefficients, dtype=np.float64))

    adam = _AdamDirection() if config.optimizer == "adam" else None
    x = base_px.clone()
    trace: list[float] = []
    coeff_hist = []
    coeffs = None
    started = time.perf_counter()
    for it in range(config.iterations):
        step = config.step_size * config.step_decay ** (it // config.step_decay_every)
        x.requires_grad_(True)
        feats = poison_features(ensemble, x, tags, draws=draws, generator=gen)
        if kind is AttackKind.FC:
            loss = fc_objective(t_embs, feats)
        elif kind is AttackKind.CP:
            coeffs = solve_cp_coefficients(t_embs, feats, coeffs, config.coeff_max_steps, config.coeff_tolerance)
            coeff_hist.append(np.stack(coeffs))
            loss = polytope_objective(t_embs, feats, [torch.from_numpy(c) for c in coeffs])
        else:
            loss = polytope_objective(t_embs, feats, fixed)
        (grad,) = torch.autograd.grad(loss, x)
        trace.append(loss.item())
        with torch.no_grad():
            if adam is not None:
                grad = adam.direction(grad)
            x = project_linf_box(x - step * grad, base_px, config.epsilon)
        if callback is not None:
            callback(it, x)
    elapsed = time.perf_counter() - started

    with torch.no_grad():
        feats = poison_features(ensemble.with_mode(False), x, tags)
        if kind is AttackKind.FC:
            final = fc_objective(t_embs, feats)
        elif kind is AttackKind.CP:
            final = polytope_objective(t_embs, feats, [torch.from_numpy(c) for c in
                                                        solve_cp_coefficients(t_embs, feats, coeffs)])
        else:
            final = polytope_objective(t_embs, feats, fixed)
    return PoisonSet(
        poisons=x.detach().to(bases.pixels.dtype),
        bases=bases,
        poison_label=poison_label,
        config=config,
        final_loss=float(final),
        loss_trace=trace,
        coefficient_trace=np.stack(coeff_hist) if coeff_hist else None,
        seconds_per_iteration=elapsed / config.iterations if config.iterations else float("nan"),
    )


# ---------------------------------------------------------------- persistence

def save_poison_set(ps: PoisonSet, path, manifest_hash: str = "") -> Path:
    cfg = ps.config
    arrays = {
        "poisons": ps.poisons.detach().cpu().numpy(),
        "base_pixels": ps.bases.pixels.cpu().numpy(),
        "base_labels": ps.bases.labels,
        "base_source_ids": ps.bases.source_ids,
        "target_pixels": torch.stack([t.pixels for t in cfg.targets]).cpu().numpy(),
        "target_labels": np.array([t.label for t in cfg.targets]),
        "target_source_ids": np.array([t.source_id for t in cfg.targets]),
        "loss_trace": np.asarray(ps.loss_trace, dtype=np.float64),
    }
    if ps.coefficient_trace is not None:
        arrays["coefficient_trace"] = ps.coefficient_trace
    meta = {
        "config": cfg.to_json(),
        "poison_label": int(ps.poison_label),
        "final_loss": ps.final_loss,
        "seconds_per_iteration": ps.seconds_per_iteration,
        "tool_version": bullseye.__version__,
        "manifest_hash": manifest_hash,
    }
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def load_poison_set(path) -> tuple[PoisonSet, dict]:
    with np.load(path, allow_pickle=False) as a:
        meta = json.loads(str(a["__meta__"]))
        targets = [ImageTensor(torch.from_numpy(px.copy()), int(lbl), int(sid))
                   for px, lbl, sid in zip(a["target_pixels"], a["target_labels"], a["target_source_ids"])]
        bases = LabeledImages(torch.from_numpy(a["base_pixels"].copy()), a["base_labels"], a["base_source_ids"])
        poisons = torch.from_numpy(a["poisons"].copy())
        trace = a["loss_trace"].tolist()
        coeffs = a["coefficient_trace"].copy() if "coefficient_trace" in a.files else None
    cfg_d = dict(meta["config"])
    cfg_d["targets"] = targets
    cfg = AttackConfig(**cfg_d)
    ps = PoisonSet(poisons, bases, meta["poison_label"], cfg, meta["final_loss"], trace, coeffs,
                   meta.get("seconds_per_iteration", float("nan")))
    return ps, meta
