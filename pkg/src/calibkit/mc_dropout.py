"""Predictive mean confidence and certainty via efficient MC dropout.

The feature extractor runs once; only the dropout + classifier pair is
repeated for the stochastic passes. All returned quantities stay on the
autograd graph, so gradients flow through every pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

SATURATION_U = 20.0  # tanh(u) == 1.0 in float64 beyond this; certainty pinned to 0


@dataclass
class McConfig:
    n_passes: int = 10
    dropout_rate: float = 0.3
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_passes < 2:
            raise ValueError("n_passes must be >= 2 (variance needs two samples)")
        if not 0.0 < self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in (0, 1)")


@dataclass
class McEstimate:
    """Per-example per-class statistics from N stochastic passes."""

    mean_logits: torch.Tensor       # [n, K]
    mean_confidence: torch.Tensor   # [n, K], softmax of mean_logits
    uncertainty: torch.Tensor       # [n, K], Bessel-corrected variance, >= 0
    certainty: torch.Tensor         # [n, K], 1 - tanh(uncertainty), in (0, 1]

    def detach_numpy(self):
        return (
            self.mean_logits.detach().cpu().numpy(),
            self.mean_confidence.detach().cpu().numpy(),
            self.uncertainty.detach().cpu().numpy(),
            self.certainty.detach().cpu().numpy(),
        )


def certainty_from_uncertainty(u):
    """Map nonnegative logit variance to a certainty in (0, 1].

    c = 1 - tanh(u); saturates smoothly to 0 for large u and is pinned to
    exactly 0 beyond the float64 tanh saturation point.
    """
    if isinstance(u, torch.Tensor):
        if torch.any(~torch.isfinite(u)) or torch.any(u < 0):
            raise ValueError("uncertainty must be finite and nonnegative")
        c = 1.0 - torch.tanh(u)
        return torch.where(u > SATURATION_U, torch.zeros_like(c), c)
    uf = float(u)
    if not math.isfinite(uf) or uf < 0:
        raise ValueError("uncertainty must be finite and nonnegative")
    return 0.0 if uf > SATURATION_U else 1.0 - math.tanh(uf)


def draw_masks(shape, dropout_rate, n_passes, generator=None, device=None):
    """Inverted-dropout masks: kept units scaled by 1/(1-p)."""
    keep = 1.0 - dropout_rate
    masks = torch.empty((n_passes, *shape), device=device)
    masks.bernoulli_(keep, generator=generator)
    return masks / keep


def stats_from_passes(pass_logits: torch.Tensor) -> McEstimate:
    """Reduce a [n_passes, n, K] logit stack to an McEstimate."""
    if pass_logits.dim() != 3 or pass_logits.shape[0] < 2:
        raise ValueError("need a [n_passes >= 2, n, K] stack of logits")
    if torch.any(~torch.isfinite(pass_logits)):
        raise ValueError("non-finite logits in MC pass stack")
    mean_logits = pass_logits.mean(dim=0)
    uncertainty = pass_logits.var(dim=0, unbiased=True)
    return McEstimate(
        mean_logits=mean_logits,
        mean_confidence=torch.softmax(mean_logits, dim=-1),
        uncertainty=uncertainty,
        certainty=certainty_from_uncertainty(uncertainty),
    )


def estimate(features: torch.Tensor, classifier, cfg: McConfig, masks=None) -> McEstimate:
    """Efficient scheme: one feature pass, ``cfg.n_passes`` head passes.

    ``masks`` may be injected (shape [n_passes, *features.shape]) for
    deterministic tests; otherwise they are drawn from a generator seeded
    with ``cfg.rng_seed``.
    """
    if masks is None:
        gen = torch.Generator(device=features.device).manual_seed(cfg.rng_seed)
        masks = draw_masks(features.shape, cfg.dropout_rate, cfg.n_passes, gen, features.device)
    elif masks.shape != (cfg.n_passes, *features.shape):
        raise ValueError("mask stack shape mismatch")
    pass_logits = torch.stack([classifier(features * masks[m]) for m in range(cfg.n_passes)])
    return stats_from_passes(pass_logits)


def estimate_conventional(inputs, model, cfg: McConfig, masks=None) -> McEstimate:
    """Baseline scheme: the whole network runs once per pass.

    Statistically identical to :func:`estimate` because the only
    stochastic layer sits after the feature extractor; exists to validate
    equivalence and the speedup claim.
    """
    if masks is None:
        feats0 = model.features(inputs)
        gen = torch.Generator(device=feats0.device).manual_seed(cfg.rng_seed)
        masks = draw_masks(feats0.shape, cfg.dropout_rate, cfg.n_passes, gen, feats0.device)
    pass_logits = []
    for m in range(cfg.n_passes):
        feats = model.features(inputs)
        if masks[m].shape != feats.shape:
            raise ValueError("mask stack shape mismatch")
        pass_logits.append(model.classify(feats * masks[m]))
    return stats_from_passes(torch.stack(pass_logits))
