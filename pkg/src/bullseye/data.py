"""Synthetic image datasets for desk-scale experiments.

``shapes`` renders one of up to eight shape classes (disk, square, triangle,
plus, ring, bar, half-disk, corner) with random colour, size, position and
rotation over a noisy background.  Experiments pretrain on all eight and
fine-tune on the first three.
``rotating_views`` renders one fixed object at evenly spaced in-plane angles,
standing in for a multi-view photo set.
"""

from __future__ import annotations

import numpy as np
import torch

from bullseye.errors import InputError
from bullseye.images import ImageTensor, LabeledImages

CLASS_NAMES = ("disk", "square", "triangle", "plus", "ring", "bar", "half-disk", "corner")


def _shape_mask(kind, size, cx, cy, angle, radius):
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xs - cx, ys - cy
    c, s = np.cos(angle), np.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == 0:
        dist = np.hypot(u, v) - radius
    elif kind == 1:
        half = radius * 0.85
        dist = np.maximum(np.abs(u), np.abs(v)) - half
    elif kind == 2:
        # equilateral triangle as intersection of three half-planes
        normals = [(0.0, -1.0), (np.sqrt(3) / 2, 0.5), (-np.sqrt(3) / 2, 0.5)]
        dist = np.max([nx * u + ny * v for nx, ny in normals], axis=0) - radius * 0.6
    elif kind == 3:  # plus sign
        arm = radius * 0.3
        dist = np.minimum(np.maximum(np.abs(u) - radius, np.abs(v) - arm),
                          np.maximum(np.abs(v) - radius, np.abs(u) - arm))
    elif kind == 4:  # ring
        dist = np.abs(np.hypot(u, v) - radius * 0.75) - radius * 0.28
    elif kind == 5:  # bar
        dist = np.maximum(np.abs(u) - radius * 1.1, np.abs(v) - radius * 0.35)
    elif kind == 6:  # half disk
        dist = np.maximum(np.hypot(u, v) - radius, -v)
    elif kind == 7:  # L corner
        w = radius * 0.35
        leg1 = np.maximum(np.abs(u + radius * 0.3) - w, np.abs(v) - radius)
        leg2 = np.maximum(np.abs(v - radius * 0.65) - w, np.abs(u) - radius)
        dist = np.minimum(leg1, leg2)
    else:
        raise InputError(f"unknown shape class {kind}")
    return 1.0 / (1.0 + np.exp(dist * 4.0))


def render(kind, rng, size=16, *, angle=None, fg=None, bg=None, radius=None, center=None, noise=0.04,
           contrast=(0.2, 0.35)):
    if bg is None:
        bg = rng.uniform(0.25, 0.75, 3)
    if fg is None:
        sign = rng.choice([-1.0, 1.0])
        fg = np.clip(bg + sign * rng.uniform(*contrast, 3), 0.0, 1.0)
    if radius is None:
        radius = rng.uniform(0.22, 0.34) * size
    if center is None:
        center = rng.uniform(0.38, 0.62, 2) * size
    if angle is None:
        angle = rng.uniform(0, 2 * np.pi)
    mask = _shape_mask(kind, size, center[0], center[1], angle, radius)
    img = bg[:, None, None] * (1 - mask) + fg[:, None, None] * mask
    img = img + rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def shapes(n_per_class, seed, size=16, id_offset=0, n_classes=3) -> LabeledImages:
    """``n_per_class`` images per class, interleaved by class, with unique source ids."""
    rng = np.random.default_rng(seed)
    imgs, labels = [], []
    for _ in range(n_per_class):
        for kind in range(n_classes):
            imgs.append(render(kind, rng, size))
            labels.append(kind)
    pixels = torch.tensor(np.stack(imgs), dtype=torch.float32)
    ids = np.arange(id_offset, id_offset + len(labels))
    return LabeledImages(pixels, np.array(labels), ids)


def shapes_of_class(kind, n, seed, size=16, id_offset=0) -> LabeledImages:
    rng = np.random.default_rng(seed)
    pixels = torch.tensor(np.stack([render(kind, rng, size) for _ in range(n)]), dtype=torch.float32)
    return LabeledImages(pixels, np.full(n, kind), np.arange(id_offset, id_offset + n))


def rotating_views(kind, n_views, seed, size=16, *, phase=0.0, source_id=0) -> list[ImageTensor]:
    """One object rendered every 360/n_views degrees, starting at ``phase`` radians.

    Colour, size and position come from ``seed`` so different ``phase`` values
    give unseen views of the same object.
    """
    if n_views < 1:
        raise InputError("n_views must be >= 1")
    rng = np.random.default_rng(seed)
    bg = rng.uniform(0.25, 0.75, 3)
    fg = np.clip(bg + rng.choice([-1.0, 1.0]) * rng.uniform(0.2, 0.35, 3), 0.0, 1.0)
    radius = rng.uniform(0.24, 0.34) * size
    center = rng.uniform(0.42, 0.58, 2) * size
    noise_seed = int(rng.integers(2**31))
    views = []
    for v in range(n_views):
        angle = phase + 2 * np.pi * v / n_views
        img = render(kind, np.random.default_rng(noise_seed + v), size, angle=angle, fg=fg, bg=bg,
                     radius=radius, center=center)
        views.append(ImageTensor(torch.tensor(img, dtype=torch.float32), kind, source_id + v))
    return views
