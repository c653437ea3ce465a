"""Differentiable feature extractors and the substitute ensemble.

Every extractor maps a batch of images ``(B, C, H, W)`` to a dict of flattened
feature tensors, one per layer tag.  Dropout is implemented with an explicit
``torch.Generator`` so stochastic evaluations are reproducible and two attacks
sharing one ensemble never share random state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from bullseye.errors import ConfigurationError, InputError
from bullseye.images import ImageTensor


def dropout_mask(shape, rate: float, generator: torch.Generator | None, dtype) -> torch.Tensor:
    """Inverted-dropout mask: entries are 0 or 1/(1-rate)."""
    keep = torch.rand(shape, generator=generator, dtype=dtype) >= rate
    return keep.to(dtype) / (1.0 - rate)


class FeatureExtractor(nn.Module):
    """Base class; subclasses fill in ``layer_tags`` and ``_taps``."""

    arch = "abstract"
    layer_tags: tuple[str, ...] = ()
    penultimate = ""

    def __init__(self, input_shape, dropout_rate=0.0):
        super().__init__()
        self.input_shape = tuple(int(s) for s in input_shape)
        if not 0.0 <= dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        self.dropout_rate = float(dropout_rate)

    def hparams(self) -> dict:
        return {"arch": self.arch, "input_shape": list(self.input_shape), "dropout_rate": self.dropout_rate}

    @property
    def dtype(self) -> torch.dtype:
        for t in self.parameters():
            return t.dtype
        for t in self.buffers():
            return t.dtype
        return torch.get_default_dtype()

    def check_input(self, x: torch.Tensor):
        if x.dim() != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise InputError(
                f"{self.arch} expects images of shape {self.input_shape}, got {tuple(x.shape[1:])}"
            )

    def taps(self, x, tags=None, *, stochastic=False, rate=None, generator=None, draws=1):
        """Return ``{tag: (B, d) features}``, averaging ``draws`` dropout draws."""
        self.check_input(x)
        tags = tuple(self.layer_tags if tags is None else tags)
        unknown = [t for t in tags if t not in self.layer_tags]
        if unknown:
            raise ConfigurationError(f"{self.arch} has no layer tags {unknown}; known: {self.layer_tags}")
        if draws < 1:
            raise InputError(f"number of draws must be >= 1, got {draws}")
        rate = self.dropout_rate if rate is None else rate
        if not stochastic or rate == 0.0:
            draws, rate = 1, 0.0
        return self._taps(x, tags, rate, generator, draws)

    def _taps(self, x, tags, rate, generator, draws):
        raise NotImplementedError

    def forward(self, x):
        return self.taps(x, (self.penultimate,))[self.penultimate]


class LinearExtractor(FeatureExtractor):
    """phi(x) = W @ dropout(flatten(x)); the identity map when W is None."""

    arch = "linear"
    layer_tags = ("linear",)
    penultimate = "linear"

    def __init__(self, input_shape, weight=None, dropout_rate=0.0):
        super().__init__(input_shape, dropout_rate)
        if weight is not None:
            weight = torch.as_tensor(weight)
            if weight.dim() != 2 or weight.shape[1] != math.prod(self.input_shape):
                raise ConfigurationError(
                    f"weight must be (d, {math.prod(self.input_shape)}), got {tuple(weight.shape)}"
                )
            self.register_buffer("weight", weight.clone())
        else:
            self.weight = None

    def hparams(self):
        hp = super().hparams()
        hp["identity"] = self.weight is None
        return hp

    @property
    def dtype(self):
        # the identity map has no weights; keep it exact
        return torch.float64 if self.weight is None else self.weight.dtype

    def _taps(self, x, tags, rate, generator, draws):
        flat = x.flatten(1)
        if rate == 0.0:
            out = flat if self.weight is None else flat @ self.weight.T
            return {"linear": out}
        acc = 0.0
        for _ in range(draws):
            z = flat * dropout_mask(flat.shape, rate, generator, flat.dtype)
            acc = acc + (z if self.weight is None else z @ self.weight.T)
        return {"linear": acc / draws}


class IdentityExtractor(LinearExtractor):
    arch = "identity"

    def __init__(self, input_shape, dropout_rate=0.0):
        super().__init__(input_shape, None, dropout_rate)


def random_linear(input_shape, out_dim, seed, dropout_rate=0.0, dtype=torch.float64):
    """Fixed random projection with N(0, 1/D) entries."""
    g = torch.Generator().manual_seed(int(seed))
    d_in = math.prod(input_shape)
    w = torch.randn(out_dim, d_in, generator=g, dtype=dtype) / math.sqrt(d_in)
    return LinearExtractor(input_shape, w, dropout_rate)


# conv widths per architecture variant; each conv is followed by ReLU + 2x2 max-pool
CONV_VARIANTS = {
    "convnet2": (16, 32),
    "convnet3": (16, 32, 48),
    "convnet4": (16, 24, 32, 48),
}


class ConvNet(FeatureExtractor):
    """Small CNN: conv blocks with pooling, dropout, then a ReLU feature layer.

    Layer tags are ``pool1 .. poolN`` followed by ``feature`` (penultimate).
    Dropout sits only in front of the feature layer.
    """

    penultimate = "feature"

    def __init__(self, arch, input_shape=(3, 16, 16), feature_dim=64, dropout_rate=0.0):
        if arch not in CONV_VARIANTS:
            raise ConfigurationError(f"unknown conv architecture {arch!r}; known: {sorted(CONV_VARIANTS)}")
        super().__init__(input_shape, dropout_rate)
        self.arch = arch
        self.feature_dim = int(feature_dim)
        widths = CONV_VARIANTS[arch]
        c, h, w = self.input_shape
        convs = []
        for width in widths:
            convs.append(nn.Conv2d(c, width, 3, padding=1))
            c, h, w = width, max(h // 2, 1), max(w // 2, 1)
        self.convs = nn.ModuleList(convs)
        self.fc = nn.Linear(c * h * w, self.feature_dim)
        self.layer_tags = tuple(f"pool{i + 1}" for i in range(len(widths))) + ("feature",)

    def hparams(self):
        hp = super().hparams()
        hp["feature_dim"] = self.feature_dim
        return hp

    def _taps(self, x, tags, rate, generator, draws):
        out = {}
        h = x
        for i, conv in enumerate(self.convs):
            h = nn.functional.relu(conv(h))
            if h.shape[-1] >= 2:
                h = nn.functional.max_pool2d(h, 2)
            tag = f"pool{i + 1}"
            if tag in tags:
                out[tag] = h.flatten(1)
        if "feature" in tags:
            flat = h.flatten(1)
            if rate == 0.0:
                out["feature"] = nn.functional.relu(self.fc(flat))
            else:
                acc = 0.0
                for _ in range(draws):
                    z = flat * dropout_mask(flat.shape, rate, generator, flat.dtype)
                    acc = acc + nn.functional.relu(self.fc(z))
                out["feature"] = acc / draws
        return out


@dataclass(frozen=True)
class FeatureVector:
    values: torch.Tensor
    network_index: int
    layer_tag: str

    def __len__(self):
        return self.values.shape[0]


class EmbeddingEnsemble:
    """m substitute feature extractors with per-network layer taps.

    ``networks[i]`` is addressed by a 0-based ``network_index``.  The
    ensemble holds no random state; callers pass a generator when
    ``stochastic_mode`` is on.  ``dropout_rate=None`` means each network uses
    the rate it was built with.
    """

    def __init__(self, networks: Sequence[FeatureExtractor], layer_taps=None, stochastic_mode=False,
                 dropout_rate=None):
        networks = list(networks)
        if not networks:
            raise ConfigurationError("an ensemble needs at least one network")
        if dropout_rate is not None and not 0.0 <= dropout_rate < 1.0:
            raise ConfigurationError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        if layer_taps is None:
            layer_taps = [(net.penultimate,) for net in networks]
        layer_taps = [tuple(t) for t in layer_taps]
        if len(layer_taps) != len(networks):
            raise ConfigurationError("need one layer-tap list per network")
        for net, tags in zip(networks, layer_taps):
            if not tags:
                raise ConfigurationError(f"network {net.arch} has an empty tap list")
            unknown = [t for t in tags if t not in net.layer_tags]
            if unknown:
                raise ConfigurationError(f"{net.arch} has no layer tags {unknown}")
            net.eval()
            for p in net.parameters():
                p.requires_grad_(False)
        self.networks = tuple(networks)
        self.layer_taps = tuple(layer_taps)
        self.stochastic_mode = bool(stochastic_mode)
        self.dropout_rate = dropout_rate

    @classmethod
    def all_layers(cls, networks, **kwargs):
        return cls(networks, [net.layer_tags for net in networks], **kwargs)

    def __len__(self):
        return len(self.networks)

    @property
    def input_shape(self):
        return self.networks[0].input_shape

    def with_mode(self, stochastic_mode: bool) -> EmbeddingEnsemble:
        return EmbeddingEnsemble(self.networks, self.layer_taps, stochastic_mode, self.dropout_rate)

    def _network(self, network_index):
        if not 0 <= network_index < len(self.networks):
            raise InputError(f"network_index {network_index} outside [0, {len(self.networks)})")
        return self.networks[network_index]

    def batch_features(self, pixels, network_index, tags=None, *, draws=1, generator=None, stochastic=None):
        """Differentiable ``{tag: (B, d)}`` features of a pixel batch."""
        net = self._network(network_index)
        tags = self.layer_taps[network_index] if tags is None else tags
        unknown = [t for t in tags if t not in self.layer_taps[network_index]]
        if unknown:
            raise ConfigurationError(f"layer tags {unknown} not registered for network {network_index}")
        stochastic = self.stochastic_mode if stochastic is None else stochastic
        return net.taps(pixels.to(net.dtype), tags, stochastic=stochastic, rate=self.dropout_rate,
                        generator=generator, draws=draws)


def _as_batch(image):
    if isinstance(image, ImageTensor):
        return image.pixels.unsqueeze(0)
    if isinstance(image, torch.Tensor) and image.dim() == 3:
        return image.unsqueeze(0)
    raise InputError(f"expected an ImageTensor or a (C, H, W) tensor, got {type(image).__name__}")


def embed(ensemble: EmbeddingEnsemble, image, network_index: int, layer_tag: str,
          generator: torch.Generator | None = None) -> FeatureVector:
    x = _as_batch(image)
    feats = ensemble.batch_features(x, network_index, (layer_tag,), generator=generator)
    return FeatureVector(feats[layer_tag][0], network_index, layer_tag)


def embed_multidraw(ensemble: EmbeddingEnsemble, image, network_index: int, layer_tag: str, R: int,
                    generator: torch.Generator | None = None) -> FeatureVector:
    """Mean of R independent stochastic evaluations; equals ``embed`` in deterministic mode."""
    if int(R) != R or R < 1:
        raise InputError(f"R must be a positive integer, got {R}")
    x = _as_batch(image)
    feats = ensemble.batch_features(x, network_index, (layer_tag,), draws=int(R), generator=generator)
    return FeatureVector(feats[layer_tag][0], network_index, layer_tag)


def mean_target_embedding(ensemble: EmbeddingEnsemble, targets, network_index: int, layer_tag: str,
                          generator: torch.Generator | None = None) -> FeatureVector:
    targets = list(targets)
    if not targets:
        raise InputError("mean_target_embedding needs at least one target")
    x = torch.cat([_as_batch(t) for t in targets])
    feats = ensemble.batch_features(x, network_index, (layer_tag,), generator=generator)[layer_tag]
    if len(targets) == 1:
        return FeatureVector(feats[0], network_index, layer_tag)
    return FeatureVector(feats.mean(0), network_index, layer_tag)
