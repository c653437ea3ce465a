import numpy as np
import pytest
import torch

from bullseye.ensemble import EmbeddingEnsemble, IdentityExtractor, random_linear
from bullseye.images import ImageTensor, LabeledImages

torch.set_num_threads(1)

SHAPE = (1, 3, 3)


def rand_image(rng, label=0, sid=0, shape=SHAPE):
    return ImageTensor(torch.tensor(rng.uniform(0.05, 0.95, shape)), label, sid)


def rand_bases(rng, k, label=1, shape=SHAPE, offset=100):
    px = torch.tensor(rng.uniform(0.05, 0.95, (k, *shape)))
    return LabeledImages(px, np.full(k, label), np.arange(offset, offset + k))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def linear_ensemble():
    nets = [random_linear(SHAPE, 6, seed=s, dropout_rate=0.2) for s in (1, 2)]
    return EmbeddingEnsemble(nets)


@pytest.fixture
def identity_ensemble():
    return EmbeddingEnsemble([IdentityExtractor(SHAPE)])


ACCEPTANCE = {}


def record(criterion: int, passed: bool, detail: str):
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
