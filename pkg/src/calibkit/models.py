"""Small classifiers with the dropout-between-feature-and-head contract.

Each model is a feature extractor ``f``, a single (inverted) dropout site
on the penultimate features, and a linear-or-deeper head ``g``. Dropout is
the only stochastic layer, so MC passes can reuse the features.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field

import torch
import torch.nn as nn

ARCHS = ("mlp-small", "cnn-small", "resnet-tiny")


class _TinyResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(x + self.conv2(self.act(self.conv1(x))))


class CalibratableModel(nn.Module):
    """Feature extractor + penultimate dropout site + classifier head."""

    def __init__(self, feature_extractor, classifier, meta):
        super().__init__()
        self.feature_extractor = feature_extractor
        self.classifier = classifier
        self.meta = dict(meta)  # arch, num_classes, dropout_rate, seed, input_shape

    @property
    def dropout_rate(self) -> float:
        return self.meta["dropout_rate"]

    @property
    def num_classes(self) -> int:
        return self.meta["num_classes"]

    def features(self, inputs: torch.Tensor) -> torch.Tensor:
        return self.feature_extractor(inputs)

    def classify(self, features: torch.Tensor) -> torch.Tensor:
        return self.classifier(features)

    def forward_deterministic(self, inputs: torch.Tensor) -> torch.Tensor:
        """Dropout disabled (identity); pure function of inputs and parameters."""
        logits = self.classifier(self.feature_extractor(inputs))
        if torch.any(~torch.isfinite(logits)):
            raise ValueError("non-finite logits")
        return logits

    def forward(self, inputs):
        return self.forward_deterministic(inputs)

    def stochastic_forward(self, inputs, generator=None, mask=None):
        """One dropout pass: standard training path when MC is disabled."""
        feats = self.feature_extractor(inputs)
        if mask is None:
            keep = 1.0 - self.dropout_rate
            mask = torch.empty_like(feats).bernoulli_(keep, generator=generator) / keep
        return self.classifier(feats * mask)

    def parameter_checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()


def build(arch: str, num_classes: int, dropout_rate: float, seed: int,
          input_shape=(10,)) -> CalibratableModel:
    """Reproducibly initialized model; same arguments -> identical parameters."""
    if arch not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}; choose from {ARCHS}")
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError("dropout_rate must lie in [0, 1)")
    input_shape = tuple(int(s) for s in input_shape)

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        if arch == "mlp-small":
            (in_dim,) = input_shape
            feat_dim = 128
            f = nn.Sequential(
                nn.Linear(in_dim, 128), nn.ReLU(),
                nn.Linear(128, feat_dim), nn.ReLU(),
            )
        elif arch == "cnn-small":
            c, h, w = input_shape
            feat_dim = 128
            f = nn.Sequential(
                nn.Conv2d(c, 16, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
                nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
                nn.Flatten(),
                nn.Linear(32 * (h // 4) * (w // 4), feat_dim), nn.ReLU(),
            )
        else:  # resnet-tiny
            c, h, w = input_shape
            feat_dim = 64
            f = nn.Sequential(
                nn.Conv2d(c, 32, 3, padding=1), nn.ReLU(),
                _TinyResBlock(32),
                nn.MaxPool2d(2),
                nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(),
                _TinyResBlock(64),
                nn.AdaptiveAvgPool2d(1),
                nn.Flatten(),
            )
        g = nn.Linear(feat_dim, num_classes)

    meta = {
        "arch": arch,
        "num_classes": num_classes,
        "dropout_rate": float(dropout_rate),
        "seed": int(seed),
        "input_shape": list(input_shape),
    }
    return CalibratableModel(f, g, meta)


def save_checkpoint(model: CalibratableModel, path, extra_meta=None):
    """Single archive: parameter arrays keyed by layer name + metadata record."""
    meta = dict(model.meta)
    if extra_meta:
        meta.update(extra_meta)
    meta["checksum"] = model.parameter_checksum()
    torch.save({"params": model.state_dict(), "meta": meta}, path)


def load_checkpoint(path) -> CalibratableModel:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    meta = blob["meta"]
    model = build(meta["arch"], meta["num_classes"], meta["dropout_rate"],
                  meta["seed"], meta["input_shape"])
    model.load_state_dict(blob["params"])
    model.meta = dict(meta)
    return model
