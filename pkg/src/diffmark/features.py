"""Frozen random-convolution features as a cheap perceptual distance.

A stack of fixed, seed-pinned random convolutions with pooling gives a
multi-scale feature map; L2 distance between channel-normalized features
stands in for a learned perceptual metric at toy scale.  The weights are
never trained and the same extractor instance is shared everywhere a
perceptual term is needed, so distances are comparable across modules.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

FEATURE_SEED = 7771


class FrozenFeatures(nn.Module):
    """Three-stage random conv pyramid over [-1, 1] RGB images."""

    def __init__(self, in_channels: int = 3, widths: tuple[int, ...] = (16, 32, 64),
                 seed: int = FEATURE_SEED):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        layers = []
        prev = in_channels
        for w in widths:
            conv = nn.Conv2d(prev, w, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                fan_in = prev * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            layers.append(conv)
            prev = w
        self.stages = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.stages:
            h = F.silu(conv(h))
            feats.append(h)
        return feats


def _channel_normalize(f: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)


def perceptual_distance(features: FrozenFeatures, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean squared distance between channel-normalized feature pyramids.

    Returns a scalar averaged over the batch; zero iff the feature maps agree.
    """
    fa = features(a)
    fb = features(b)
    total = a.new_zeros(())
    for x, y in zip(fa, fb):
        total = total + (_channel_normalize(x) - _channel_normalize(y)).pow(2).mean()
    return total / len(fa)
