"""Frozen random convolutional features.

Used as the perceptual encoder of the VAE loss and as the embedding for the
Fréchet feature distance. Weights are drawn once from a seed and never
trained; they are buffers, not parameters.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .seeding import torch_generator


class RandomFeatureStack(nn.Module):
    """Three 3x3 conv layers (4 -> 16 -> 32 -> 32), stride 1, 2, 2, with tanh."""

    def __init__(self, seed: int = 0, in_channels: int = 4, widths=(16, 32, 32)):
        super().__init__()
        g = torch_generator(seed, "random-features")
        chans = (in_channels, *widths)
        self.strides = (1, 2, 2)
        for i in range(len(widths)):
            fan_in = chans[i] * 9
            w = torch.randn(chans[i + 1], chans[i], 3, 3, generator=g, dtype=torch.float64) / fan_in**0.5
            self.register_buffer(f"w{i}", w)
        self.out_dim = widths[-1]

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """``x`` is NCHW; returns the activation of every layer."""
        feats = []
        h = x
        for i, s in enumerate(self.strides):
            w = getattr(self, f"w{i}").to(h.dtype)
            h = torch.tanh(F.conv2d(h, w, stride=s, padding=1))
            feats.append(h)
        return feats

    def pooled(self, x: torch.Tensor) -> torch.Tensor:
        """Spatially averaged last-layer features, shape ``(N, out_dim)``."""
        return self.forward(x)[-1].mean(dim=(2, 3))
