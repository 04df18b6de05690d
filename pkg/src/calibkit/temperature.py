"""Post-hoc temperature scaling fitted by hold-out NLL grid search.

The grid is T in {0.1, 0.2, ..., 10.0}; T = 0 is excluded (softmax
undefined) and NLL ties break toward the smaller temperature.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from calibkit.metrics import PredictionBatch

GRID = np.round(np.arange(1, 101) * 0.1, 1)


@dataclass
class TemperatureFit:
    temperature: float
    grid: np.ndarray
    nll: np.ndarray  # hold-out NLL at each grid point

    def save(self, path):
        with open(path, "w") as fh:
            json.dump({
                "temperature": float(self.temperature),
                "grid": self.grid.tolist(),
                "nll": self.nll.tolist(),
            }, fh, indent=2)

    @classmethod
    def load(cls, path) -> "TemperatureFit":
        with open(path) as fh:
            blob = json.load(fh)
        return cls(blob["temperature"], np.asarray(blob["grid"]), np.asarray(blob["nll"]))


def nll_at_temperature(logits, labels, t):
    """Mean negative log-likelihood of softmax(logits / t)."""
    z = np.asarray(logits, dtype=np.float64) / t
    lse = logsumexp(z, axis=1)
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def fit_temperature(logits, labels) -> TemperatureFit:
    """Grid-search the temperature minimizing hold-out NLL."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("empty hold-out set")
    nll = np.array([nll_at_temperature(logits, labels, t) for t in GRID])
    best = int(np.argmin(nll))  # argmin picks the first, i.e. smallest T, on ties
    return TemperatureFit(float(GRID[best]), GRID.copy(), nll)


def apply_temperature(logits, labels, temperature) -> PredictionBatch:
    """Scale logits by 1/T; argmax and hence accuracy are unchanged."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    return PredictionBatch.from_logits(logits / temperature, labels)
