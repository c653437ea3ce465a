import numpy as np
import pytest
import torch

from bullseye.ensemble import (ConvNet, EmbeddingEnsemble, IdentityExtractor, LinearExtractor, embed, embed_multidraw,
                               mean_target_embedding, random_linear)
from bullseye.errors import ConfigurationError, InputError
from bullseye.images import ImageTensor

from conftest import SHAPE, rand_image


def test_linear_matches_matmul(rng):
    net = random_linear(SHAPE, 4, seed=3)
    ens = EmbeddingEnsemble([net])
    img = rand_image(rng)
    expected = net.weight @ img.pixels.flatten()
    torch.testing.assert_close(embed(ens, img, 0, "linear").values, expected)


def test_identity_and_mean(rng):
    ens = EmbeddingEnsemble([IdentityExtractor(SHAPE)])
    a, b = rand_image(rng), rand_image(rng, sid=1)
    v = mean_target_embedding(ens, [a, b], 0, "linear").values
    torch.testing.assert_close(v, (a.pixels.flatten() + b.pixels.flatten()) / 2)
    with pytest.raises(InputError):
        mean_target_embedding(ens, [], 0, "linear")


def test_errors(rng):
    ens = EmbeddingEnsemble([IdentityExtractor(SHAPE)])
    with pytest.raises(InputError):
        embed(ens, rand_image(rng), 1, "linear")
    with pytest.raises(ConfigurationError):
        embed(ens, rand_image(rng), 0, "pool1")
    with pytest.raises(InputError):
        embed(ens, ImageTensor(torch.zeros(1, 4, 4, dtype=torch.float64), 0), 0, "linear")
    with pytest.raises(ConfigurationError):
        EmbeddingEnsemble([])
    with pytest.raises(ConfigurationError):
        ConvNet("convnet9")
    with pytest.raises(ConfigurationError):
        LinearExtractor(SHAPE, torch.zeros(3, 5))
    with pytest.raises(InputError):
        embed_multidraw(ens, rand_image(rng), 0, "linear", 0)


def test_multidraw_deterministic_without_dropout_mode(rng):
    ens = EmbeddingEnsemble([random_linear(SHAPE, 4, seed=1, dropout_rate=0.5)])
    img = rand_image(rng)
    torch.testing.assert_close(embed_multidraw(ens, img, 0, "linear", 5).values, embed(ens, img, 0, "linear").values)


def test_dropout_is_seeded(rng):
    ens = EmbeddingEnsemble([random_linear(SHAPE, 4, seed=1, dropout_rate=0.5)], stochastic_mode=True)
    img = rand_image(rng)
    a = embed(ens, img, 0, "linear", torch.Generator().manual_seed(7)).values
    b = embed(ens, img, 0, "linear", torch.Generator().manual_seed(7)).values
    torch.testing.assert_close(a, b)
    # inverted dropout keeps the mean
    g = torch.Generator().manual_seed(0)
    mean = torch.stack([embed(ens, img, 0, "linear", g).values for _ in range(4000)]).mean(0)
    torch.testing.assert_close(mean, embed(ens.with_mode(False), img, 0, "linear").values, atol=0.05, rtol=0)


def test_convnet_taps():
    net = ConvNet("convnet3", (3, 16, 16), feature_dim=10)
    x = torch.rand(2, 3, 16, 16)
    out = net.taps(x)
    assert list(out) == ["pool1", "pool2", "pool3", "feature"]
    assert out["pool1"].shape == (2, 16 * 8 * 8)
    assert out["feature"].shape == (2, 10)
    ens = EmbeddingEnsemble.all_layers([net])
    assert ens.layer_taps[0] == net.layer_tags
