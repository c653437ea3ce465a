import numpy as np
import pytest

from bullseye import data
from bullseye.errors import InputError


def test_shapes_layout():
    ds = data.shapes(4, seed=0, n_classes=3, id_offset=50)
    assert len(ds) == 12
    assert list(ds.labels[:3]) == [0, 1, 2]
    assert list(ds.source_ids) == list(range(50, 62))
    assert ds.pixels.shape == (12, 3, 16, 16)
    assert float(ds.pixels.min()) >= 0 and float(ds.pixels.max()) <= 1


def test_shapes_seeded():
    a, b = data.shapes(3, seed=7), data.shapes(3, seed=7)
    assert (a.pixels == b.pixels).all()
    assert not (a.pixels == data.shapes(3, seed=8).pixels).all()


def test_every_class_renders():
    ds = data.shapes(1, seed=0, n_classes=len(data.CLASS_NAMES))
    # each image has a visible foreground: not a flat background
    assert all(float(img.std()) > 0.03 for img in ds.pixels)


def test_rotating_views():
    train = data.rotating_views(2, 4, seed=3, source_id=10)
    held = data.rotating_views(2, 4, seed=3, phase=np.pi / 4, source_id=20)
    assert len(train) == 4 and all(v.label == 2 for v in train)
    # same object, different angles: no held-out view repeats a training view
    for h in held:
        assert all(float((h.pixels - t.pixels).abs().max()) > 0.05 for t in train)
    with pytest.raises(InputError):
        data.rotating_views(0, 0, seed=1)
