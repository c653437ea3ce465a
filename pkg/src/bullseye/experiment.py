"""Manifest-driven orchestration: zoo -> poisons -> victims -> defenses -> reports.

Artifact layout under the output directory::

    manifest.yaml            validated manifest, as run
    models/                  weight archives (one per network)
    poisons/<KIND>/target-NNN.npz
    reports/attack_outcomes.jsonl   one record per (victim, attack, target)
    reports/attack_reports.jsonl    one aggregated AttackReport per (victim, attack)
    reports/defenses.jsonl          one record per (victim, attack, target, defense parameter)
    reports/timings.jsonl           wall-clock per crafting iteration (not reproducible)
    series/*.tsv                    plot-ready data series
    summary.tsv                     success-rate table

Every random draw comes from a seed derived from the manifest seeds and the
cell coordinates, so the worker count never changes a result.
"""

from __future__ import annotations

import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from bullseye import data, zoo
from bullseye.attacks import AttackConfig, AttackKind, LayerMode, PoisonSet, craft, load_poison_set, save_poison_set
from bullseye.defenses import apply_filter, deep_knn_filter, defense_features, l2_centroid_filter, score_defense
from bullseye.ensemble import EmbeddingEnsemble
from bullseye.errors import InputError, ManifestError
from bullseye.images import ImageTensor, LabeledImages
from bullseye.manifest import Manifest, dump_manifest, load_manifest
from bullseye.simplex import coefficient_entropy
from bullseye.victim import AttackReport, FineTuneSpec, append_record, assemble_poisoned_set, evaluate, fine_tune

log = logging.getLogger(__name__)

WORKERS_ENV = "BULLSEYE_WORKERS"
CONTROL = "NONE"

# source-id ranges keep every split disjoint
ID_FINE_TUNE, ID_TEST, ID_TARGETS, ID_BASES, ID_VIEWS = (10**6 * i for i in range(1, 6))


def derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


@dataclass
class TargetCase:
    index: int
    train_views: list[ImageTensor]
    eval_views: list[ImageTensor]


@dataclass
class Splits:
    pretrain: LabeledImages
    fine_tune: LabeledImages
    test: LabeledImages
    bases: LabeledImages
    targets: list[TargetCase]


def build_splits(m: Manifest) -> Splits:
    ds = m.dataset
    size = ds.image_size
    pretrain = data.shapes(ds.pretrain_per_class, derive_seed(ds.seed, 1), size, 0, ds.pretrain_classes)
    fine = data.shapes(ds.fine_tune_per_class, derive_seed(ds.seed, 2), size, ID_FINE_TUNE, ds.task_classes)
    test = data.shapes(ds.test_per_class, derive_seed(ds.seed, 3), size, ID_TEST, ds.task_classes)
    bases = data.shapes_of_class(ds.poison_class, m.attack.k, derive_seed(ds.seed, 5), size, ID_BASES)
    if ds.multiview is None:
        pool = data.shapes_of_class(ds.target_class, ds.n_targets, derive_seed(ds.seed, 4), size, ID_TARGETS)
        targets = [TargetCase(i, [pool.image(i)], [pool.image(i)]) for i in range(ds.n_targets)]
    else:
        mv = ds.multiview
        targets = []
        for i in range(ds.n_targets):
            obj_seed = derive_seed(ds.seed, 6, i)
            base_id = ID_VIEWS + 1000 * i
            train = data.rotating_views(ds.target_class, mv.views, obj_seed, size, source_id=base_id)
            # unseen views: offset by half the training step so no angle repeats
            held = data.rotating_views(ds.target_class, mv.held_out_views, obj_seed, size,
                                       phase=np.pi / mv.views, source_id=base_id + 500)
            targets.append(TargetCase(i, train, held))
    return Splits(pretrain, fine, test, bases, targets)


def worker_count(m: Manifest) -> int:
    if m.workers:
        return m.workers
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def _map(fn, items, workers):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


class Experiment:
    def __init__(self, manifest: Manifest, output_dir=None):
        self.m = manifest
        self.out = Path(output_dir or manifest.output_dir)
        self.hash = manifest.hash()
        self.workers = worker_count(manifest)
        self._splits = None
        self._models = {}

    # -- setup
    @property
    def splits(self) -> Splits:
        if self._splits is None:
            self._splits = build_splits(self.m)
        return self._splits

    def model(self, spec) -> zoo.Classifier:
        if spec.key not in self._models:
            ds = self.m.dataset
            pt = self.m.pretrain
            tag = f"p{ds.pretrain_classes}x{ds.pretrain_per_class}-s{ds.seed}-e{pt.epochs}"
            if pt.weight_decay:
                tag += f"-wd{pt.weight_decay:g}"
            self._models[spec.key] = zoo.get_or_train(
                self.out / "models", spec.arch, spec.seed, spec.dropout, self.splits.pretrain, tag,
                ds.pretrain_classes, epochs=pt.epochs, lr=pt.learning_rate, feature_dim=spec.feature_dim,
                weight_decay=pt.weight_decay)
        return self._models[spec.key]

    def ensemble(self) -> EmbeddingEnsemble:
        nets = [self.model(s).extractor for s in self.m.substitutes]
        if self.m.attack.layer_mode is LayerMode.MULTI:
            return EmbeddingEnsemble.all_layers(nets, stochastic_mode=self.m.attack.stochastic)
        return EmbeddingEnsemble(nets, stochastic_mode=self.m.attack.stochastic)

    def attack_config(self, kind: AttackKind, case: TargetCase) -> AttackConfig:
        a = self.m.attack
        return AttackConfig(
            attack_kind=kind, epsilon=a.epsilon, k=a.k, iterations=a.iterations, multidraw_R=a.multidraw_R,
            layer_mode=a.layer_mode, targets=case.train_views, step_size=a.step_size,
            crafting_seed=derive_seed(self.m.seeds.crafting, case.index, list(AttackKind).index(kind)),
            fixed_coefficients=a.fixed_coefficients, step_decay=a.step_decay,
            step_decay_every=a.step_decay_every, optimizer=a.optimizer,
        )

    def poison_path(self, kind, case) -> Path:
        return self.out / "poisons" / kind.value / f"target-{case.index:03d}.npz"

    # -- stages
    def prepare(self, fresh: bool):
        # a pre-seeded models/ cache alone does not count as a previous run
        if fresh and self.out.exists() and any(p.name != "models" for p in self.out.iterdir()):
            raise InputError(f"output directory {self.out} is not empty; use resume or choose another directory")
        self.out.mkdir(parents=True, exist_ok=True)
        stored = self.out / "manifest.yaml"
        if stored.exists():
            previous = load_manifest(stored)
            if previous.hash() != self.hash:
                raise ManifestError([f"output directory holds a run of manifest {previous.hash()}, "
                                     f"not {self.hash}"])
        dump_manifest(self.m, stored)
        (self.out / "manifest_hash.txt").write_text(self.hash + "\n")

    def craft_all(self) -> dict:
        ens = self.ensemble()
        cells = [(kind, case) for kind in self.m.attack.kinds for case in self.splits.targets]

        def run_cell(cell):
            kind, case = cell
            path = self.poison_path(kind, case)
            if path.exists():
                ps, meta = load_poison_set(path)
                if meta.get("manifest_hash") == self.hash:
                    return cell, ps
            ps = craft(self.attack_config(kind, case), ens, self.splits.bases)
            save_poison_set(ps, path, self.hash)
            log.info("crafted %s target %d: loss %.4g", kind.value, case.index, ps.final_loss)
            return cell, ps

        return {(k.value, c.index): ps for (k, c), ps in _map(run_cell, cells, self.workers)}

    def fine_tune_spec(self, *coords) -> FineTuneSpec:
        ft = self.m.fine_tune
        return FineTuneSpec(ft.mode, ft.epochs, ft.learning_rate, ft.batch_size,
                            derive_seed(self.m.seeds.fine_tune, *coords))

    def evaluate_all(self, poisons: dict) -> list[dict]:
        sp = self.splits
        ds = self.m.dataset
        cells = []
        for vi, vspec in enumerate(self.m.victims):
            cells.append((vi, CONTROL, None))
            for kind in self.m.attack.kinds:
                for case in sp.targets:
                    cells.append((vi, kind.value, case))

        def run_cell(cell):
            vi, kind, case = cell
            vspec = self.m.victims[vi]
            victim = self.model(vspec)
            common = {"experiment_id": self.m.experiment_id, "manifest_hash": self.hash,
                      "victim": vspec.key, "scenario": self.m.victim_scenario(vspec), "attack_kind": kind}
            if case is None:
                clf = fine_tune(self.fine_tune_spec(vi, 0, 0), victim, sp.fine_tune, ds.task_classes)
                rows = []
                for c in sp.targets:
                    rep = evaluate(clf, c.eval_views, ds.poison_class, sp.test)
                    rows.append({**common, "target_index": c.index, "success": rep.success,
                                 "baseline_test_accuracy": rep.baseline_test_accuracy,
                                 "poison_accuracy": None, "final_loss": None})
                return rows
            ps = poisons[(kind, case.index)]
            kind_index = list(AttackKind).index(AttackKind(kind)) + 1
            poisoned = assemble_poisoned_set(sp.fine_tune, ps, derive_seed(self.m.seeds.fine_tune, case.index))
            clf = fine_tune(self.fine_tune_spec(vi, kind_index, case.index + 1), victim, poisoned, ds.task_classes)
            rep = evaluate(clf, case.eval_views, ps.poison_label, sp.test, ps.poisons)
            return [{**common, "target_index": case.index, "success": rep.success,
                     "baseline_test_accuracy": rep.baseline_test_accuracy,
                     "poison_accuracy": rep.poison_accuracy, "final_loss": ps.final_loss}]

        return [row for rows in _map(run_cell, cells, self.workers) for row in rows]

    def defend_all(self, poisons: dict) -> list[dict]:
        d = self.m.defense
        if not d.k_nn and not d.mu:
            return []
        sp = self.splits
        ds = self.m.dataset
        cells = [(vi, kind.value, case) for vi in range(len(self.m.victims))
                 for kind in self.m.attack.kinds for case in sp.targets]

        def run_cell(cell):
            vi, kind, case = cell
            vspec = self.m.victims[vi]
            victim = self.model(vspec)
            ps = poisons[(kind, case.index)]
            poisoned = assemble_poisoned_set(sp.fine_tune, ps, derive_seed(self.m.seeds.fine_tune, case.index))
            feats = defense_features(victim, poisoned)
            truth = ps.bases.source_ids.tolist()
            rows = []
            params = [("k_nn", k) for k in d.k_nn if k < len(poisoned)] + [("mu", mu) for mu in d.mu]
            for j, (name, value) in enumerate(params):
                if name == "k_nn":
                    rep = deep_knn_filter(feats, poisoned.labels, poisoned.source_ids, value)
                else:
                    rep = l2_centroid_filter(feats, poisoned.labels, poisoned.source_ids, value)
                rep = score_defense(rep, truth)
                kept = apply_filter(poisoned, rep)
                clf = fine_tune(self.fine_tune_spec(vi, 100 + j, case.index + 1), victim, kept, ds.task_classes)
                after = evaluate(clf, case.eval_views, ps.poison_label)
                rec = rep.to_json()
                rec.pop("removed_ids")
                rows.append({"experiment_id": self.m.experiment_id, "manifest_hash": self.hash,
                             "victim": vspec.key, "scenario": self.m.victim_scenario(vspec),
                             "attack_kind": kind, "target_index": case.index, **rec,
                             "success_after_defense": after.success})
            return rows

        return [row for rows in _map(run_cell, cells, self.workers) for row in rows]

    def write_reports(self, outcomes, defenses, poisons):
        reports = self.out / "reports"
        if reports.exists():
            shutil.rmtree(reports)
        for row in outcomes:
            append_record(reports / "attack_outcomes.jsonl", row)
        for (victim, scenario, kind), rows in _group(outcomes, ("victim", "scenario", "attack_kind")).items():
            success = [s for r in rows for s in r["success"]]
            acc = [r["baseline_test_accuracy"] for r in rows]
            pacc = [r["poison_accuracy"] for r in rows if r["poison_accuracy"] is not None]
            rep = AttackReport(victim, self.m.dataset.poison_class, success, float(np.mean(success)),
                               float(np.mean(acc)), float(np.mean(pacc)) if pacc else float("nan"),
                               metadata={"scenario": scenario, "attack_kind": kind,
                                         "n_targets": len(rows)})
            append_record(reports / "attack_reports.jsonl",
                          {"experiment_id": self.m.experiment_id, "manifest_hash": self.hash, **rep.to_json()})
        for row in defenses:
            append_record(reports / "defenses.jsonl", row)
        for (kind, index), ps in sorted(poisons.items()):
            append_record(reports / "timings.jsonl",
                          {"manifest_hash": self.hash, "attack_kind": kind, "target_index": index,
                           "seconds_per_iteration": ps.seconds_per_iteration})


def _group(rows, keys):
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    return groups


def run_experiment(manifest: Manifest, output_dir=None, *, resume=False, defenses_only=False) -> Path:
    """Run every stage and return the artifact directory."""
    from bullseye.summary import summarize

    exp = Experiment(manifest, output_dir)
    exp.prepare(fresh=not resume)
    poisons = exp.craft_all()
    if defenses_only:
        existing = exp.out / "reports" / "attack_outcomes.jsonl"
        from bullseye.victim import read_records
        outcomes = read_records(existing) if existing.exists() else exp.evaluate_all(poisons)
    else:
        outcomes = exp.evaluate_all(poisons)
    defenses = exp.defend_all(poisons)
    exp.write_reports(outcomes, defenses, poisons)
    summarize(exp.out)
    return exp.out


def coefficient_entropies(ps: PoisonSet) -> list[float]:
    c = ps.final_coefficients
    return [] if c is None else [coefficient_entropy(row) for row in c]
