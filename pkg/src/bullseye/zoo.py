"""Model zoo: construction by (architecture, seed), pretraining, weight archives."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch
from torch import nn

from bullseye.ensemble import CONV_VARIANTS, ConvNet, FeatureExtractor, IdentityExtractor, LinearExtractor
from bullseye.errors import ConfigurationError, TrainingDivergenceError
from bullseye.images import LabeledImages

log = logging.getLogger(__name__)

ARCHITECTURES = tuple(sorted(CONV_VARIANTS))


class Classifier(nn.Module):
    """Feature extractor followed by a linear head over its penultimate features."""

    def __init__(self, extractor: FeatureExtractor, n_classes: int, feature_dim: int | None = None):
        super().__init__()
        self.extractor = extractor
        self.n_classes = int(n_classes)
        if feature_dim is None:
            with torch.no_grad():
                probe = torch.zeros((1,) + extractor.input_shape)
                feature_dim = extractor(probe).shape[1]
        self.head = nn.Linear(int(feature_dim), self.n_classes)

    def features(self, x, *, stochastic=False, generator=None):
        tag = self.extractor.penultimate
        return self.extractor.taps(x, (tag,), stochastic=stochastic, generator=generator)[tag]

    def forward(self, x):
        return self.head(self.features(x))

    @torch.no_grad()
    def predict(self, x, batch_size=512):
        out = [self(x[i:i + batch_size]).argmax(1) for i in range(0, x.shape[0], batch_size)]
        return torch.cat(out).numpy()


def build_extractor(arch: str, seed: int, input_shape=(3, 16, 16), dropout_rate=0.0, feature_dim=64):
    torch.manual_seed(int(seed))
    if arch in CONV_VARIANTS:
        return ConvNet(arch, input_shape, feature_dim, dropout_rate)
    if arch == "identity":
        return IdentityExtractor(input_shape, dropout_rate)
    raise ConfigurationError(f"unknown architecture {arch!r}; known: {ARCHITECTURES + ('identity',)}")


def build_classifier(arch, seed, n_classes, input_shape=(3, 16, 16), dropout_rate=0.0, feature_dim=64):
    ext = build_extractor(arch, seed, input_shape, dropout_rate, feature_dim)
    torch.manual_seed(int(seed) + 7919)
    return Classifier(ext, n_classes)


def pretrain(model: Classifier, data: LabeledImages, *, epochs=8, lr=2e-3, batch_size=64, seed=0,
             weight_decay=0.0):
    """Supervised training of the whole classifier with AdamW and dropout on."""
    g = torch.Generator().manual_seed(int(seed))
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    labels = torch.as_tensor(data.labels)
    model.train()
    for epoch in range(epochs):
        order = torch.randperm(len(data), generator=g)
        total = 0.0
        for start in range(0, len(data), batch_size):
            idx = order[start:start + batch_size]
            logits = model.head(model.features(data.pixels[idx], stochastic=True, generator=g))
            loss = nn.functional.cross_entropy(logits, labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergenceError(epoch, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.debug("pretrain %s epoch %d loss %.4f", model.extractor.arch, epoch, total / len(data))
    model.eval()
    return model


def accuracy(model: Classifier, data: LabeledImages) -> float:
    return float(np.mean(model.predict(data.pixels) == data.labels))


def save_classifier(model: Classifier, path, extra: dict | None = None):
    """One ``.npz`` holding every named parameter plus a JSON manifest."""
    manifest = {"extractor": model.extractor.hparams(), "n_classes": model.n_classes}
    if extra:
        manifest.update(extra)
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    arrays["__manifest__"] = np.array(json.dumps(manifest, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_classifier(path) -> tuple[Classifier, dict]:
    with np.load(path, allow_pickle=False) as archive:
        manifest = json.loads(str(archive["__manifest__"]))
        state = {k: torch.from_numpy(archive[k].copy()) for k in archive.files if k != "__manifest__"}
    hp = manifest["extractor"]
    if hp["arch"] == "linear":
        ext = LinearExtractor(hp["input_shape"], state["extractor.weight"], hp["dropout_rate"])
    else:
        ext = build_extractor(hp["arch"], 0, tuple(hp["input_shape"]), hp["dropout_rate"],
                              hp.get("feature_dim", 64))
    model = Classifier(ext, manifest["n_classes"])
    model.load_state_dict(state)
    model.eval()
    return model, manifest


def zoo_key(arch, seed, dropout_rate, data_tag, feature_dim=64):
    return f"{arch}-s{seed}-d{dropout_rate:g}-f{feature_dim}-{data_tag}"


def get_or_train(cache_dir, arch, seed, dropout_rate, data: LabeledImages, data_tag: str, n_classes: int,
                 *, epochs=8, lr=2e-3, feature_dim=64, weight_decay=0.0):
    """Load ``arch``/``seed`` from the weight cache, training it first if absent."""
    path = Path(cache_dir) / f"{zoo_key(arch, seed, dropout_rate, data_tag, feature_dim)}.npz"
    if path.exists():
        return load_classifier(path)[0]
    model = build_classifier(arch, seed, n_classes, tuple(data.pixels.shape[1:]), dropout_rate, feature_dim)
    pretrain(model, data, epochs=epochs, lr=lr, seed=seed, weight_decay=weight_decay)
    save_classifier(model, path, {"seed": int(seed), "data_tag": data_tag, "epochs": epochs, "lr": lr,
                                  "weight_decay": weight_decay})
    log.info("trained %s (acc %.3f on pretraining data) -> %s", path.stem, accuracy(model, data), path)
    return model
