"""Deep-feature perceptual distance (LPIPS-style) used as the attack regularizer.

Feature maps from a frozen network are unit-normalized along the channel axis
at every spatial location; the squared difference is summed over channels,
averaged over space, then combined across layers with non-negative weights.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn as nn

Extractor = Callable[[torch.Tensor], Sequence[torch.Tensor]]


def _unit_channels(f: torch.Tensor) -> torch.Tensor:
    # smooth at f == 0, unlike f / ||f||
    return f * torch.rsqrt((f * f).sum(dim=1, keepdim=True) + 1e-10)


class PerceptualMetric(nn.Module):
    def __init__(self, extractor: Extractor, layer_weights: Sequence[float] | None = None):
        super().__init__()
        self.extractor = extractor
        if isinstance(extractor, nn.Module):
            for p in extractor.parameters():
                p.requires_grad_(False)
            extractor.eval()
        if layer_weights is not None and any(w < 0 for w in layer_weights):
            raise ValueError("layer weights must be non-negative")
        self.layer_weights = None if layer_weights is None else list(layer_weights)

    def train(self, mode: bool = True):
        # the extractor stays frozen in eval mode
        super().train(mode)
        if isinstance(self.extractor, nn.Module):
            self.extractor.eval()
        return self

    def forward(self, x_a: torch.Tensor, x_b: torch.Tensor) -> torch.Tensor:
        return perceptual_distance(self, x_a, x_b)


def perceptual_distance(metric: PerceptualMetric, x_a: torch.Tensor, x_b: torch.Tensor) -> torch.Tensor:
    """Per-image distance >= 0, differentiable in both inputs."""
    if x_a.shape != x_b.shape:
        raise ValueError(f"shape mismatch: {tuple(x_a.shape)} vs {tuple(x_b.shape)}")
    feats_a = metric.extractor(x_a)
    feats_b = metric.extractor(x_b)
    weights = metric.layer_weights or [1.0 / len(feats_a)] * len(feats_a)
    if len(weights) != len(feats_a):
        raise ValueError(f"{len(weights)} layer weights for {len(feats_a)} feature maps")
    total = x_a.new_zeros(x_a.shape[0])
    for w, fa, fb in zip(weights, feats_a, feats_b):
        diff = _unit_channels(fa) - _unit_channels(fb)
        total = total + w * (diff * diff).sum(dim=1).mean(dim=(1, 2))
    return total


def victim_metric(model: nn.Module, layers: Sequence[int] | None = None,
                  layer_weights: Sequence[float] | None = None) -> PerceptualMetric:
    """Perceptual metric backed by the intermediate maps of a (frozen) victim network."""

    def extract(x):
        feats = model.features(x)
        return feats if layers is None else [feats[i] for i in layers]

    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return PerceptualMetric(extract, layer_weights)
