"""Image containers shared by the attack, victim and defense code."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from bullseye.errors import InputError


@dataclass(frozen=True)
class ImageTensor:
    """A single (channels, height, width) image with pixels in [0, 1]."""

    pixels: torch.Tensor
    label: int
    source_id: int = -1

    def __post_init__(self):
        if self.pixels.dim() != 3:
            raise InputError(f"expected (C, H, W) pixels, got shape {tuple(self.pixels.shape)}")
        lo, hi = float(self.pixels.min()), float(self.pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise InputError(f"pixel values must lie in [0, 1], got range [{lo}, {hi}]")

    @property
    def shape(self):
        return tuple(self.pixels.shape)


def stack_pixels(images: Sequence[ImageTensor]) -> torch.Tensor:
    if len(images) == 0:
        raise InputError("no images to stack")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise InputError(f"images have mixed shapes: {sorted(shapes)}")
    return torch.stack([im.pixels for im in images])


@dataclass
class LabeledImages:
    """A batch of labeled images with provenance.

    ``poison`` marks rows that were injected by an attacker; the defenses and
    reports use it as ground truth, the victim never sees it.
    """

    pixels: torch.Tensor
    labels: np.ndarray
    source_ids: np.ndarray
    poison: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.pixels.shape[0]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.source_ids = np.asarray(self.source_ids, dtype=np.int64)
        if self.poison is None:
            self.poison = np.zeros(n, dtype=bool)
        self.poison = np.asarray(self.poison, dtype=bool)
        if not (len(self.labels) == len(self.source_ids) == len(self.poison) == n):
            raise InputError("pixels, labels, source_ids and poison flags disagree in length")

    def __len__(self):
        return self.pixels.shape[0]

    @property
    def classes(self) -> set[int]:
        return set(int(c) for c in np.unique(self.labels))

    def subset(self, index) -> LabeledImages:
        index = np.asarray(index)
        if index.dtype != bool:
            index = index.astype(np.int64)
        t_index = torch.as_tensor(index)
        return LabeledImages(
            self.pixels[t_index], self.labels[index], self.source_ids[index], self.poison[index]
        )

    def image(self, i: int) -> ImageTensor:
        return ImageTensor(self.pixels[i], int(self.labels[i]), int(self.source_ids[i]))

    def images(self) -> list[ImageTensor]:
        return [self.image(i) for i in range(len(self))]

    @classmethod
    def from_images(cls, images: Iterable[ImageTensor], poison=None) -> LabeledImages:
        images = list(images)
        return cls(
            stack_pixels(images),
            np.array([im.label for im in images]),
            np.array([im.source_id for im in images]),
            poison,
        )

    @classmethod
    def concat(cls, parts: Sequence[LabeledImages]) -> LabeledImages:
        return cls(
            torch.cat([p.pixels for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.source_ids for p in parts]),
            np.concatenate([p.poison for p in parts]),
        )
