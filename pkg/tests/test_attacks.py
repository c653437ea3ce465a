import numpy as np
import pytest
import torch

from bullseye.attacks import (AttackConfig, AttackKind, LayerMode, bullseye_loss, cp_loss_and_coefficients, craft,
                              fc_loss, fc_objective, load_poison_set, polytope_objective, save_poison_set,
                              target_embeddings)
from bullseye.ensemble import ConvNet, EmbeddingEnsemble, IdentityExtractor
from bullseye.errors import ConfigurationError, DegenerateEmbeddingError, InputError
from bullseye.images import ImageTensor, LabeledImages

from conftest import SHAPE, rand_bases, rand_image


def test_hand_values():
    t = [{"f": torch.tensor([1.0, 0.0])}]
    p = [{"f": torch.tensor([[1.0, 1.0], [1.0, -1.0]])}]
    assert float(polytope_objective(t, p)) == pytest.approx(0.0)
    assert float(fc_objective(t, p)) == pytest.approx(2.0)
    p2 = [{"f": torch.tensor([[0.0, 0.0], [0.0, 0.0]])}]
    assert float(polytope_objective(t, p2)) == pytest.approx(0.5)


def test_weighted_objective():
    t = [{"f": torch.tensor([1.0, 0.0])}]
    p = [{"f": torch.tensor([[1.0, 0.0], [0.0, 0.0]])}]
    assert float(polytope_objective(t, p, [np.array([1.0, 0.0])])) == pytest.approx(0.0)
    assert float(polytope_objective(t, p, np.array([0.0, 1.0]))) == pytest.approx(0.5)


def test_degenerate_target():
    t = [{"f": torch.zeros(2)}]
    p = [{"f": torch.ones(1, 2)}]
    with pytest.raises(DegenerateEmbeddingError):
        polytope_objective(t, p)
    with pytest.raises(DegenerateEmbeddingError):
        fc_objective(t, p)
    ens = EmbeddingEnsemble([IdentityExtractor(SHAPE)])
    with pytest.raises(DegenerateEmbeddingError):
        target_embeddings(ens, [ImageTensor(torch.zeros(SHAPE, dtype=torch.float64), 0)])


def test_loss_ordering(rng, linear_ensemble):
    for _ in range(20):
        t_embs = target_embeddings(linear_ensemble, [rand_image(rng)])
        x = rand_bases(rng, 4).pixels
        bp = float(bullseye_loss(linear_ensemble, t_embs, x))
        fc = float(fc_loss(linear_ensemble, t_embs, x))
        cp, _ = cp_loss_and_coefficients(linear_ensemble, t_embs, x, max_steps=500)
        assert float(cp) <= bp + 1e-9
        assert bp <= fc / (2 * len(linear_ensemble)) + 1e-9


def test_config_validation():
    with pytest.raises(ConfigurationError):
        AttackConfig(epsilon=0)
    with pytest.raises(ConfigurationError):
        AttackConfig(attack_kind="BP_FIXED", k=2, fixed_coefficients=[0.2, 0.2])
    with pytest.raises(ValueError):
        AttackConfig(attack_kind="XX")
    AttackConfig(attack_kind="BP_FIXED", k=2, fixed_coefficients=[0.25, 0.75])


def test_craft_input_checks(rng, linear_ensemble):
    cfg = AttackConfig(k=3, iterations=1, targets=[rand_image(rng)])
    with pytest.raises(InputError):
        craft(cfg, linear_ensemble, rand_bases(rng, 2))
    mixed = rand_bases(rng, 3)
    mixed.labels[0] = 2
    with pytest.raises(InputError):
        craft(cfg, linear_ensemble, mixed)
    with pytest.raises(InputError):
        craft(AttackConfig(k=3, iterations=1), linear_ensemble, rand_bases(rng, 3))


@pytest.mark.parametrize("kind", list(AttackKind))
def test_craft_respects_budget_and_lowers_loss(rng, linear_ensemble, kind):
    bases = rand_bases(rng, 3)
    fixed = [0.5, 0.3, 0.2] if kind is AttackKind.BP_FIXED else None
    cfg = AttackConfig(kind, epsilon=0.05, k=3, iterations=60, targets=[rand_image(rng)], step_size=0.01,
                       fixed_coefficients=fixed)

    def check(it, x):
        assert float((x - bases.pixels).abs().max()) <= 0.05 + 1e-6
        assert float(x.min()) >= 0 and float(x.max()) <= 1

    craft(cfg, linear_ensemble.with_mode(True), bases, check)
    ps = craft(cfg, linear_ensemble, bases, check)
    assert ps.loss_trace[-1] < ps.loss_trace[0]
    assert np.array_equal(ps.as_labeled().labels, bases.labels)
    assert ps.poison_label == 1
    if kind is AttackKind.CP:
        assert ps.coefficient_trace.shape == (60, 2, 3)
        np.testing.assert_allclose(ps.final_coefficients.sum(axis=1), 1.0)


def test_zero_iterations_returns_bases(rng, linear_ensemble):
    bases = rand_bases(rng, 2)
    ps = craft(AttackConfig(k=2, iterations=0, targets=[rand_image(rng)]), linear_ensemble, bases)
    torch.testing.assert_close(ps.poisons, bases.pixels)


def test_bp_equals_bp_fixed_uniform(rng, linear_ensemble):
    bases = rand_bases(rng, 4)
    t = [rand_image(rng)]
    a = craft(AttackConfig("BP", k=4, iterations=20, targets=t), linear_ensemble, bases)
    b = craft(AttackConfig("BP_FIXED", k=4, iterations=20, targets=t, fixed_coefficients=[0.25] * 4),
              linear_ensemble, bases)
    torch.testing.assert_close(a.poisons, b.poisons)


def test_craft_is_reproducible(rng, linear_ensemble):
    bases = rand_bases(rng, 3)
    cfg = AttackConfig("BP", k=3, iterations=15, multidraw_R=2, targets=[rand_image(rng)], optimizer="adam",
                       crafting_seed=5)
    ens = linear_ensemble.with_mode(True)
    torch.testing.assert_close(craft(cfg, ens, bases).poisons, craft(cfg, ens, bases).poisons)


def test_multi_layer_sums_layers(rng):
    net = ConvNet("convnet2", (1, 8, 8), feature_dim=6).double()
    ens = EmbeddingEnsemble.all_layers([net])
    target = ImageTensor(torch.rand(1, 8, 8, dtype=torch.float64), 0)
    x = torch.rand(3, 1, 8, 8, dtype=torch.float64)
    multi = target_embeddings(ens, [target], LayerMode.MULTI)
    assert list(multi[0]) == ["pool1", "pool2", "feature"]
    total = float(bullseye_loss(ens, multi, x))
    parts = sum(float(bullseye_loss(ens, [{tag: v}], x)) for tag, v in multi[0].items())
    assert total == pytest.approx(parts)


def test_persistence_round_trip(rng, linear_ensemble, tmp_path):
    cfg = AttackConfig("CP", k=3, iterations=5, targets=[rand_image(rng, sid=9)])
    ps = craft(cfg, linear_ensemble, rand_bases(rng, 3))
    path = save_poison_set(ps, tmp_path / "p.npz", "abc")
    back, meta = load_poison_set(path)
    assert meta["manifest_hash"] == "abc"
    torch.testing.assert_close(back.poisons, ps.poisons)
    np.testing.assert_array_equal(back.coefficient_trace, ps.coefficient_trace)
    assert back.config.to_json() == ps.config.to_json()
    assert back.loss_trace == ps.loss_trace
