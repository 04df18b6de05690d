"""Task losses, the confidence/certainty alignment auxiliary loss, and
their composition into a single training objective.

Every loss takes row-stochastic confidences (not logits) so the same code
path serves both single-pass softmax outputs and MC-dropout mean
confidences. Log probabilities are clamped below at 1e-12.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import torch

from calibkit.mc_dropout import McEstimate

LOG_CLAMP = 1e-12


@dataclass
class LossValue:
    """Composed objective: total = task_term + beta * aux_term."""

    total: torch.Tensor
    task_term: float
    aux_term: float
    beta: float

    def __post_init__(self):
        t = float(self.total.detach()) if torch.is_tensor(self.total) else float(self.total)
        if not all(math.isfinite(v) for v in (t, self.task_term, self.aux_term, self.beta)):
            raise ValueError("non-finite loss component")
        if abs(t - (self.task_term + self.beta * self.aux_term)) > 1e-9:
            raise ValueError("total != task + beta * aux")


@dataclass
class TaskLossSpec:
    """One of the composable task losses: ce, ls{alpha}, fl{gamma}, flsd, brier."""

    kind: str
    alpha: float = 0.0
    gamma: float = 0.0

    _KINDS = ("ce", "ls", "fl", "flsd", "brier")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise ValueError(f"unknown task loss {self.kind!r}")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.gamma < 0.0:
            raise ValueError("gamma must be nonnegative")

    @classmethod
    def parse(cls, text: str) -> "TaskLossSpec":
        """Parse compact config names: 'ce', 'ls0.05', 'fl3', 'flsd', 'brier'."""
        m = re.fullmatch(r"(ce|flsd|fl|ls|brier)((?:\d+\.?\d*)?)", text.strip())
        if not m:
            raise ValueError(f"cannot parse task loss {text!r}")
        kind, num = m.group(1), m.group(2)
        if kind == "ls":
            return cls("ls", alpha=float(num) if num else 0.1)
        if kind == "fl":
            return cls("fl", gamma=float(num) if num else 3.0)
        if num:
            raise ValueError(f"{kind} takes no parameter: {text!r}")
        return cls(kind)

    def name(self) -> str:
        if self.kind == "ls":
            return f"ls{self.alpha:g}"
        if self.kind == "fl":
            return f"fl{self.gamma:g}"
        return self.kind

    def evaluate(self, confidences: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        if self.kind == "ce":
            return cross_entropy(confidences, labels)
        if self.kind == "ls":
            return label_smoothing_loss(confidences, labels, self.alpha)
        if self.kind == "fl":
            return focal_loss(confidences, labels, self.gamma)
        if self.kind == "flsd":
            return flsd_loss(confidences, labels)
        return brier_loss(confidences, labels)


def _label_probs(confidences, labels):
    if labels.min() < 0 or labels.max() >= confidences.shape[1]:
        raise ValueError("labels out of range")
    return confidences.gather(1, labels.view(-1, 1)).squeeze(1)


def cross_entropy(confidences, labels):
    """Mean -log p[label], clamped below at 1e-12."""
    p = _label_probs(confidences, labels)
    return -torch.log(p.clamp_min(LOG_CLAMP)).mean()


def label_smoothing_loss(confidences, labels, alpha):
    """Cross entropy against (1-alpha)*onehot + alpha/K * ones."""
    if not 0.0 <= alpha < 1.0:
        raise ValueError("alpha must lie in [0, 1)")
    k = confidences.shape[1]
    logp = torch.log(confidences.clamp_min(LOG_CLAMP))
    onehot = torch.nn.functional.one_hot(labels, k).to(confidences.dtype)
    target = (1.0 - alpha) * onehot + alpha / k
    return -(target * logp).sum(dim=1).mean()


def focal_loss(confidences, labels, gamma):
    """Mean -(1 - p[label])^gamma * log p[label]."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    p = _label_probs(confidences, labels)
    return (-((1.0 - p) ** gamma) * torch.log(p.clamp_min(LOG_CLAMP))).mean()


def flsd_loss(confidences, labels):
    """Focal loss with a confidence-scheduled gamma.

    gamma = 5 when the correct-class confidence is below 0.2, else 3;
    the 0.2 boundary itself takes the gamma = 3 regime.
    """
    p = _label_probs(confidences, labels)
    gamma = torch.where(p < 0.2, 5.0, 3.0)
    return (-((1.0 - p) ** gamma) * torch.log(p.clamp_min(LOG_CLAMP))).mean()


def brier_loss(confidences, labels):
    """Mean squared gap to the one-hot target, summed over classes."""
    onehot = torch.nn.functional.one_hot(labels, confidences.shape[1]).to(confidences.dtype)
    return ((confidences - onehot) ** 2).sum(dim=1).mean()


def alignment_loss(mean_confidence: torch.Tensor, certainty: torch.Tensor) -> torch.Tensor:
    """Class-averaged absolute gap between the minibatch means of
    predictive mean confidence and predictive certainty.

    Value lies in [0, 1]; zero iff the per-class batch means coincide.
    """
    if mean_confidence.shape != certainty.shape:
        raise ValueError("mean confidence and certainty shapes differ")
    return (mean_confidence.mean(dim=0) - certainty.mean(dim=0)).abs().mean()


def compose_total(task: TaskLossSpec, estimate: McEstimate, labels, beta: float) -> LossValue:
    """Total objective; the task loss consumes the predictive MEAN confidence."""
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    # compose in float64 so the decomposition identity holds to 1e-9
    mean_conf = estimate.mean_confidence.double()
    task_term = task.evaluate(mean_conf, labels)
    aux_term = alignment_loss(mean_conf, estimate.certainty.double())
    return LossValue(
        total=task_term + beta * aux_term,
        task_term=float(task_term.detach()),
        aux_term=float(aux_term.detach()),
        beta=float(beta),
    )
