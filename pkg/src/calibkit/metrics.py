"""Binned calibration and discrimination metrics.

All functions here are pure and operate on a :class:`PredictionBatch`.
Binning is equal-width over [0, 1], left-closed / right-open, with 1.0
folded into the last bin. Empty bins contribute zero to ECE/SCE and are
excluded from the MCE max.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


@dataclass
class PredictionBatch:
    """Per-example logits, row-stochastic confidences and labels."""

    logits: np.ndarray          # [n, K]
    confidences: np.ndarray     # [n, K], rows sum to 1
    labels: np.ndarray          # [n], ints in {0..K-1}
    predicted: np.ndarray = field(init=False)

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.confidences = np.asarray(self.confidences, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.confidences.ndim != 2:
            raise ValueError("confidences must be a 2-D array")
        n, k = self.confidences.shape
        if self.logits.shape != (n, k):
            raise ValueError("logits and confidences shapes differ")
        if self.labels.shape != (n,):
            raise ValueError("labels must be a vector of length n")
        if np.any((self.confidences < -1e-9) | (self.confidences > 1 + 1e-9)):
            raise ValueError("confidence entries must lie in [0, 1]")
        if np.any(np.abs(self.confidences.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("confidence rows must sum to 1 within 1e-6")
        if n and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ValueError("labels out of range")
        # np.argmax breaks ties toward the lowest index
        self.predicted = np.argmax(self.confidences, axis=1)

    @classmethod
    def from_logits(cls, logits, labels) -> "PredictionBatch":
        logits = np.asarray(logits, dtype=np.float64)
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return cls(logits, e / e.sum(axis=1, keepdims=True), labels)

    @property
    def n_examples(self) -> int:
        return self.confidences.shape[0]

    @property
    def n_classes(self) -> int:
        return self.confidences.shape[1]

    @property
    def max_confidence(self) -> np.ndarray:
        return self.confidences[np.arange(self.n_examples), self.predicted]

    @property
    def correct(self) -> np.ndarray:
        return self.predicted == self.labels

    @property
    def accuracy(self) -> float:
        if self.n_examples == 0:
            raise ValueError("empty batch")
        return float(self.correct.mean())


@dataclass
class BinLedger:
    """Per-bin counts and accuracy/confidence sums.

    ``mode`` is either ``"max-class"`` (cells indexed by bin) or
    ``"class-wise"`` (cells indexed by bin x class). Not safe for
    concurrent mutation; accumulate per worker and :meth:`merge`.
    """

    n_bins: int
    mode: str = "max-class"
    counts: np.ndarray = None
    acc_sums: np.ndarray = None
    conf_sums: np.ndarray = None

    def __post_init__(self):
        if self.n_bins < 1:
            raise ValueError("n_bins must be positive")
        if self.mode not in ("max-class", "class-wise"):
            raise ValueError(f"unknown ledger mode {self.mode!r}")
        if self.counts is None:
            shape = (self.n_bins,)
            self.counts = np.zeros(shape, dtype=np.int64)
            self.acc_sums = np.zeros(shape, dtype=np.float64)
            self.conf_sums = np.zeros(shape, dtype=np.float64)

    def add(self, confidences, hits):
        """Accumulate scalar confidences with 0/1 correctness indicators."""
        confidences = np.asarray(confidences, dtype=np.float64)
        hits = np.asarray(hits, dtype=np.float64)
        idx = bin_assign_array(confidences, self.n_bins)
        np.add.at(self.counts, idx, 1)
        np.add.at(self.acc_sums, idx, hits)
        np.add.at(self.conf_sums, idx, confidences)

    def merge(self, other: "BinLedger") -> "BinLedger":
        if (self.n_bins, self.mode) != (other.n_bins, other.mode):
            raise ValueError("incompatible ledgers")
        return BinLedger(
            self.n_bins, self.mode,
            self.counts + other.counts,
            self.acc_sums + other.acc_sums,
            self.conf_sums + other.conf_sums,
        )

    def bin_accuracy(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(self.counts > 0, self.acc_sums / np.maximum(self.counts, 1), 0.0)

    def bin_confidence(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(self.counts > 0, self.conf_sums / np.maximum(self.counts, 1), 0.0)

    def to_dict(self) -> dict:
        return {
            "n_bins": int(self.n_bins),
            "mode": self.mode,
            "counts": self.counts.tolist(),
            "accuracy": self.bin_accuracy().tolist(),
            "confidence": self.bin_confidence().tolist(),
        }


@dataclass
class CalibrationReport:
    """All metrics for one evaluation batch, plus bin data for plotting."""

    ece: float
    sce: float
    mce: float
    auroc: float
    accuracy: float
    classwise_ece: np.ndarray
    bins: BinLedger

    def __post_init__(self):
        # max dominates the weighted mean over the same bins
        if self.mce < self.ece - 1e-12:
            raise ValueError("MCE must dominate ECE")

    def to_dict(self) -> dict:
        return {
            "ece": float(self.ece),
            "sce": float(self.sce),
            "mce": float(self.mce),
            "auroc": self.auroc if self.auroc is None else float(self.auroc),
            "accuracy": float(self.accuracy),
            "classwise_ece": [float(v) for v in self.classwise_ece],
            "bins": self.bins.to_dict(),
        }


def bin_assign(confidence: float, n_bins: int) -> int:
    """Map a confidence in [0, 1] to its equal-width bin index.

    Bins are [0, 1/M), [1/M, 2/M), ..., [(M-1)/M, 1]; 1.0 folds into the
    last bin.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be positive")
    if not np.isfinite(confidence) or confidence < 0.0 or confidence > 1.0:
        raise ValueError(f"confidence {confidence} outside [0, 1]")
    return min(int(np.floor(confidence * n_bins)), n_bins - 1)


def bin_assign_array(confidences: np.ndarray, n_bins: int) -> np.ndarray:
    """Vectorized :func:`bin_assign`."""
    if n_bins < 1:
        raise ValueError("n_bins must be positive")
    c = np.asarray(confidences, dtype=np.float64)
    if np.any(~np.isfinite(c)) or np.any((c < 0.0) | (c > 1.0)):
        raise ValueError("confidence outside [0, 1]")
    return np.minimum(np.floor(c * n_bins).astype(np.int64), n_bins - 1)


def _require_nonempty(batch: PredictionBatch):
    if batch.n_examples == 0:
        raise ValueError("empty batch")


def max_class_ledger(batch: PredictionBatch, n_bins: int) -> BinLedger:
    _require_nonempty(batch)
    ledger = BinLedger(n_bins, "max-class")
    ledger.add(batch.max_confidence, batch.correct)
    return ledger


def compute_ece(batch: PredictionBatch, n_bins: int) -> float:
    """Expected calibration error over max-class confidences."""
    ledger = max_class_ledger(batch, n_bins)
    w = ledger.counts / batch.n_examples
    return float(np.sum(w * np.abs(ledger.bin_accuracy() - ledger.bin_confidence())))


def compute_mce(batch: PredictionBatch, n_bins: int) -> float:
    """Maximum per-bin accuracy/confidence gap over non-empty bins."""
    ledger = max_class_ledger(batch, n_bins)
    gaps = np.abs(ledger.bin_accuracy() - ledger.bin_confidence())
    nonempty = ledger.counts > 0
    return float(gaps[nonempty].max())


def classwise_ledger(batch: PredictionBatch, n_bins: int) -> BinLedger:
    """Ledger over every class confidence with indicator (class == label)."""
    _require_nonempty(batch)
    n, k = batch.confidences.shape
    idx = bin_assign_array(batch.confidences, n_bins)  # [n, K]
    counts = np.zeros((n_bins, k), dtype=np.int64)
    acc = np.zeros((n_bins, k), dtype=np.float64)
    conf = np.zeros((n_bins, k), dtype=np.float64)
    cols = np.broadcast_to(np.arange(k), (n, k))
    hits = (batch.labels[:, None] == cols).astype(np.float64)
    np.add.at(counts, (idx, cols), 1)
    np.add.at(acc, (idx, cols), hits)
    np.add.at(conf, (idx, cols), batch.confidences)
    return BinLedger(n_bins, "class-wise", counts, acc, conf)


def classwise_ece(batch: PredictionBatch, n_bins: int) -> np.ndarray:
    """Per-class ECE over that class's confidence entries."""
    ledger = classwise_ledger(batch, n_bins)
    w = ledger.counts / batch.n_examples
    gaps = np.abs(ledger.bin_accuracy() - ledger.bin_confidence())
    return np.sum(w * gaps, axis=0)


def compute_sce(batch: PredictionBatch, n_bins: int) -> float:
    """Static calibration error: class-wise ECE averaged over classes."""
    if batch.n_classes < 2:
        raise ValueError("SCE needs at least two classes")
    return float(classwise_ece(batch, n_bins).mean())


def compute_auroc(batch: PredictionBatch) -> float:
    """Misclassification-detection AUROC.

    Score is the max-class confidence, positive class is a correct
    prediction; ties handled by midrank.
    """
    _require_nonempty(batch)
    correct = batch.correct
    n_pos = int(correct.sum())
    n_neg = batch.n_examples - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC undefined: all predictions equally correct/incorrect")
    ranks = rankdata(batch.max_confidence, method="average")
    pos_rank_sum = ranks[correct].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def histogram_data(batch: PredictionBatch, n_bins: int, which: str = "all") -> BinLedger:
    """Bin data behind reliability diagrams and confidence histograms.

    ``which="incorrect-only"`` keeps examples with predicted != label; an
    all-correct batch then yields an empty ledger.
    """
    _require_nonempty(batch)
    if which not in ("all", "incorrect-only"):
        raise ValueError(f"unknown filter {which!r}")
    keep = np.ones(batch.n_examples, dtype=bool)
    if which == "incorrect-only":
        keep = ~batch.correct
    ledger = BinLedger(n_bins, "max-class")
    ledger.add(batch.max_confidence[keep], batch.correct[keep])
    return ledger


def build_report(batch: PredictionBatch, n_bins: int = 15) -> CalibrationReport:
    """Compute every metric in one pass; AUROC is None when undefined."""
    try:
        auroc = compute_auroc(batch)
    except ValueError:
        auroc = None
    return CalibrationReport(
        ece=compute_ece(batch, n_bins),
        sce=compute_sce(batch, n_bins),
        mce=compute_mce(batch, n_bins),
        auroc=auroc,
        accuracy=batch.accuracy,
        classwise_ece=classwise_ece(batch, n_bins),
        bins=max_class_ledger(batch, n_bins),
    )
