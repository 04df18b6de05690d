"""Dataset loading, deterministic splits, corruption shift, logits dumps.

Three dataset ids are supported:

* ``blobs-synthetic`` — Gaussian clusters in the unit cube, generated
  from a seed, no files needed.
* ``cifar10-binary-subset`` — CIFAR-style binary records (1 label byte +
  3072 pixel bytes) read from ``*.bin`` files under the root.
* ``folder-per-class`` — one subdirectory per class containing images.

The logits-dump file format is little-endian regardless of host: a magic,
a length-prefixed JSON header, then per example K float64 logits followed
by an int32 label (8K + 4 bytes per record).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d

DUMP_MAGIC = b"CKLD"
DATASET_IDS = ("blobs-synthetic", "cifar10-binary-subset", "folder-per-class")

CORRUPTION_KINDS = ("gaussian-noise", "gaussian-blur", "pixel-dropout")
_NOISE_STD = {1: 0.04, 2: 0.08, 3: 0.12, 4: 0.18, 5: 0.26}
_BLUR_SIGMA = {1: 0.4, 2: 0.6, 3: 0.9, 4: 1.3, 5: 1.8}
_DROP_FRAC = {1: 0.05, 2: 0.10, 3: 0.20, 4: 0.30, 5: 0.40}


class FormatError(ValueError):
    """Malformed on-disk data (bad record layout, length mismatch, ...)."""


@dataclass
class DatasetSplit:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    seed: int
    class_histogram: np.ndarray = field(init=False)

    def __post_init__(self):
        labels = np.concatenate([self.y_train, self.y_val, self.y_test])
        self.class_histogram = np.bincount(labels, minlength=self.num_classes)

    @property
    def imbalance_factor(self) -> float:
        counts = self.class_histogram
        return float(counts.max() / counts.min())


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError("severity must be in 1..5")

    @classmethod
    def parse(cls, text: str) -> "CorruptionSpec":
        """Parse CLI form kind:severity[:seed]."""
        parts = text.split(":")
        if len(parts) not in (2, 3):
            raise ValueError(f"corruption spec must be kind:severity[:seed], got {text!r}")
        seed = int(parts[2]) if len(parts) == 3 else 0
        return cls(parts[0], int(parts[1]), seed)


@dataclass
class LogitsDump:
    dataset_id: str
    logits: np.ndarray   # [n, K] float64
    labels: np.ndarray   # [n] int32
    model_checksum: str = ""
    temperature: float | None = None

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype="<f8")
        self.labels = np.asarray(self.labels, dtype="<i4")
        if self.logits.ndim != 2 or self.labels.shape != (self.logits.shape[0],):
            raise ValueError("logits must be [n, K] with one label per row")


def make_blobs(n=3000, num_classes=3, dim=10, seed=7, cluster_std=0.16):
    """Gaussian clusters with centers in the unit cube, clipped to [0, 1]."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.25, 0.75, size=(num_classes, dim))
    labels = rng.integers(0, num_classes, size=n)
    x = centers[labels] + rng.normal(0.0, cluster_std, size=(n, dim))
    return np.clip(x, 0.0, 1.0).astype(np.float32), labels.astype(np.int64)


def stratified_split(x, y, fractions=(0.7, 0.15, 0.15), seed=0, num_classes=None):
    """Deterministic, disjoint, per-class-proportional three-way split."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    if num_classes is None:
        num_classes = int(y.max()) + 1
    rng = np.random.default_rng(seed)
    idx_train, idx_val, idx_test = [], [], []
    for c in range(num_classes):
        idx = np.flatnonzero(y == c)
        rng.shuffle(idx)
        n_train = int(round(fractions[0] * len(idx)))
        n_val = int(round(fractions[1] * len(idx)))
        idx_train.append(idx[:n_train])
        idx_val.append(idx[n_train:n_train + n_val])
        idx_test.append(idx[n_train + n_val:])
    tr = np.concatenate(idx_train)
    va = np.concatenate(idx_val)
    te = np.concatenate(idx_test)
    return DatasetSplit(x[tr], y[tr], x[va], y[va], x[te], y[te], num_classes, seed)


def _load_cifar_binary(root):
    paths = sorted(
        os.path.join(root, f) for f in os.listdir(root) if f.endswith(".bin")
    )
    if not paths:
        raise IOError(f"no .bin files under {root}")
    record = 1 + 3072
    xs, ys = [], []
    for path in paths:
        raw = np.fromfile(path, dtype=np.uint8)
        if len(raw) % record != 0:
            offset = (len(raw) // record) * record
            raise FormatError(
                f"{path}: truncated record at byte offset {offset} "
                f"({len(raw) - offset} trailing bytes)"
            )
        rows = raw.reshape(-1, record)
        ys.append(rows[:, 0].astype(np.int64))
        xs.append(rows[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    if y.max() > 9:
        raise FormatError(f"label {y.max()} out of range for cifar10 layout")
    return x, y


def _load_folder_per_class(root):
    from PIL import Image

    classes = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
    )
    if not classes:
        raise IOError(f"no class directories under {root}")
    xs, ys = [], []
    for label, name in enumerate(classes):
        cdir = os.path.join(root, name)
        for fname in sorted(os.listdir(cdir)):
            with Image.open(os.path.join(cdir, fname)) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
            xs.append(arr.transpose(2, 0, 1))
            ys.append(label)
    if not xs:
        raise IOError(f"no images under {root}")
    shapes = {a.shape for a in xs}
    if len(shapes) > 1:
        raise FormatError(f"inconsistent image shapes: {sorted(shapes)}")
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


def load_dataset(dataset_id, root=None, seed=7, fractions=(0.7, 0.15, 0.15),
                 params=None) -> DatasetSplit:
    """Load a dataset and return its deterministic stratified split."""
    params = dict(params or {})
    if dataset_id == "blobs-synthetic":
        x, y = make_blobs(
            n=int(params.get("n", 3000)),
            num_classes=int(params.get("num_classes", 3)),
            dim=int(params.get("dim", 10)),
            seed=int(params.get("data_seed", seed)),
            cluster_std=float(params.get("cluster_std", 0.16)),
        )
    elif dataset_id == "cifar10-binary-subset":
        if root is None:
            raise IOError("cifar10-binary-subset needs a dataset root")
        x, y = _load_cifar_binary(root)
        limit = params.get("limit")
        if limit:
            x, y = x[: int(limit)], y[: int(limit)]
    elif dataset_id == "folder-per-class":
        if root is None:
            raise IOError("folder-per-class needs a dataset root")
        x, y = _load_folder_per_class(root)
    else:
        raise IOError(f"unknown dataset id {dataset_id!r}")
    return stratified_split(x, y, fractions, seed, num_classes=int(y.max()) + 1)


def corrupt(x: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Corrupted copy of the inputs; labels never change, values stay in [0, 1]."""
    rng = np.random.default_rng(spec.seed)
    x = np.asarray(x, dtype=np.float32)
    if spec.kind == "gaussian-noise":
        out = x + rng.normal(0.0, _NOISE_STD[spec.severity], size=x.shape)
    elif spec.kind == "gaussian-blur":
        # blur over the trailing spatial axes (or the feature axis of flat data)
        out = x.astype(np.float64)
        axes = range(2, x.ndim) if x.ndim >= 3 else [x.ndim - 1]
        for axis in axes:
            out = gaussian_filter1d(out, _BLUR_SIGMA[spec.severity], axis=axis, mode="nearest")
    else:  # pixel-dropout
        mask = rng.random(x.shape) < _DROP_FRAC[spec.severity]
        out = np.where(mask, 0.0, x)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def noise_std(severity: int) -> float:
    return _NOISE_STD[severity]


def write_dump(path, dump: LogitsDump):
    n, k = dump.logits.shape
    header = {
        "dataset_id": dump.dataset_id,
        "num_classes": int(k),
        "count": int(n),
        "model_checksum": dump.model_checksum,
        "temperature": dump.temperature,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = bytearray()
    for i in range(n):
        body += dump.logits[i].astype("<f8").tobytes()
        body += struct.pack("<i", int(dump.labels[i]))
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(bytes(body))


def read_dump(path) -> LogitsDump:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != DUMP_MAGIC:
        raise FormatError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen].decode())
    n, k = header["count"], header["num_classes"]
    body = raw[8 + hlen:]
    expected = n * (8 * k + 4)
    if len(body) != expected:
        raise FormatError(
            f"{path}: body length {len(body)} != {expected} for n={n}, K={k}"
        )
    logits = np.empty((n, k), dtype="<f8")
    labels = np.empty(n, dtype="<i4")
    stride = 8 * k + 4
    for i in range(n):
        rec = body[i * stride:(i + 1) * stride]
        logits[i] = np.frombuffer(rec[: 8 * k], dtype="<f8")
        (labels[i],) = struct.unpack("<i", rec[8 * k:])
    return LogitsDump(header["dataset_id"], logits, labels,
                      header.get("model_checksum", ""), header.get("temperature"))
