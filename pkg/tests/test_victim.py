import numpy as np
import pytest
import torch

from bullseye import data, zoo
from bullseye.attacks import AttackConfig, craft
from bullseye.ensemble import EmbeddingEnsemble
from bullseye.errors import InputError, TrainingDivergenceError
from bullseye.images import LabeledImages
from bullseye.victim import (FineTuneMode, FineTuneSpec, append_record, assemble_poisoned_set, evaluate, fine_tune,
                             fine_tune_with_fallback, read_records)


@pytest.fixture(scope="module")
def small_world():
    pre = data.shapes(30, seed=0, size=16, n_classes=4)
    model = zoo.build_classifier("convnet2", 0, 4, feature_dim=16)
    zoo.pretrain(model, pre, epochs=2)
    clean = data.shapes(6, seed=1, id_offset=1000)
    return model, clean


def test_assemble(small_world):
    model, clean = small_world
    bases = data.shapes_of_class(1, 2, seed=3, id_offset=5000)
    ens = EmbeddingEnsemble([model.extractor])
    ps = craft(AttackConfig(k=2, iterations=2, targets=[data.shapes_of_class(0, 1, 4, id_offset=9000).image(0)]),
               ens, bases)
    merged = assemble_poisoned_set(clean, ps, seed=1)
    assert len(merged) == len(clean) + 2
    assert merged.poison.sum() == 2
    assert set(merged.source_ids[merged.poison]) == {5000, 5001}
    assert assemble_poisoned_set(clean, None) is clean
    with pytest.raises(InputError):
        assemble_poisoned_set(clean, clean)
    foreign = LabeledImages(bases.pixels, np.array([7, 7]), bases.source_ids)
    with pytest.raises(InputError):
        assemble_poisoned_set(clean, foreign)


@pytest.mark.parametrize("mode", list(FineTuneMode))
def test_fine_tune_leaves_victim_untouched(small_world, mode):
    model, clean = small_world
    before = {k: v.clone() for k, v in model.state_dict().items()}
    tuned = fine_tune(FineTuneSpec(mode, epochs=3), model, clean, n_classes=3)
    for k, v in model.state_dict().items():
        torch.testing.assert_close(v, before[k])
    assert tuned.n_classes == 3
    if mode is FineTuneMode.LINEAR:
        torch.testing.assert_close(tuned.extractor.fc.weight, model.extractor.fc.weight)


def test_fine_tune_deterministic(small_world):
    model, clean = small_world
    spec = FineTuneSpec(epochs=5, seed=3)
    a = fine_tune(spec, model, clean, 3)
    b = fine_tune(spec, model, clean, 3)
    torch.testing.assert_close(a.head.weight, b.head.weight)


def test_fine_tune_errors(small_world):
    model, clean = small_world
    with pytest.raises(InputError):
        fine_tune(FineTuneSpec(), model, clean.subset([]), 3)
    with pytest.raises(InputError):
        fine_tune(FineTuneSpec(epochs=1), model, clean, 2)
    with pytest.raises(InputError):
        FineTuneSpec(epochs=-1)


def test_divergence_fallback(small_world):
    model, clean = small_world
    with pytest.raises(TrainingDivergenceError):
        fine_tune(FineTuneSpec(epochs=2, learning_rate=float("inf")), model, clean, 3)
    bad = LabeledImages(clean.pixels * float("nan"), clean.labels, clean.source_ids)
    with pytest.raises(TrainingDivergenceError):
        fine_tune_with_fallback(FineTuneSpec(epochs=1), model, bad, retries=1)


def test_evaluate_and_records(small_world, tmp_path):
    model, clean = small_world
    tuned = fine_tune(FineTuneSpec(epochs=3), model, clean, 3)
    rep = evaluate(tuned, [clean.image(0), clean.image(1)], 1, clean, victim_id="v")
    assert len(rep.success) == 2
    assert 0 <= rep.baseline_test_accuracy <= 1
    assert np.isnan(rep.poison_accuracy)
    with pytest.raises(InputError):
        evaluate(tuned, [], 1)
    append_record(tmp_path / "r.jsonl", rep.to_json())
    append_record(tmp_path / "r.jsonl", rep.to_json())
    assert read_records(tmp_path / "r.jsonl")[1]["victim_id"] == "v"


def test_zoo_round_trip(small_world, tmp_path):
    model, clean = small_world
    zoo.save_classifier(model, tmp_path / "m.npz")
    back, _ = zoo.load_classifier(tmp_path / "m.npz")
    np.testing.assert_array_equal(back.predict(clean.pixels), model.predict(clean.pixels))
