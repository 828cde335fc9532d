"""Shared torch building blocks: the small conv trunk and seeding helpers."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn


def seed_everything(seed: int) -> torch.Generator:
    """Seed torch's global RNG and return a dedicated generator for sampling."""
    torch.manual_seed(seed)
    gen = torch.Generator()
    gen.manual_seed(seed + 0x9E3779B9)
    return gen


class ConvTrunk(nn.Module):
    """Four conv blocks producing four feature scales with strictly
    decreasing spatial size (64, 32, 16, 8 on a 64x64 input).

    The last two blocks use 1x1 convs and average pooling so the receptive
    field of a coarsest-scale cell stays close to the cell itself; attention
    maps read off these features then localize instead of smearing."""

    def __init__(self, channels: tuple[int, ...] = (8, 16, 32, 64), in_channels: int = 3):
        super().__init__()
        if len(channels) != 4:
            raise ValueError("trunk needs exactly four stages")
        c1, c2, c3, c4 = channels
        self.blocks = nn.ModuleList(
            [
                nn.Sequential(nn.Conv2d(in_channels, c1, 3, 1, 1), nn.GELU()),
                nn.Sequential(nn.Conv2d(c1, c2, 3, 1, 1), nn.GELU(), nn.AvgPool2d(2)),
                nn.Sequential(nn.Conv2d(c2, c3, 1, 1, 0), nn.GELU(), nn.AvgPool2d(2)),
                nn.Sequential(nn.Conv2d(c3, c4, 1, 1, 0), nn.GELU(), nn.AvgPool2d(2)),
            ]
        )
        self.channels = tuple(channels)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        scales = []
        for block in self.blocks:
            x = block(x)
            scales.append(x)
        return scales


def image_to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """H x W x 3 float array in [0,1] -> 1 x 3 x H x W float32 tensor."""
    arr = np.asarray(pixels, dtype=np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def batch_to_tensor(images: list[np.ndarray]) -> torch.Tensor:
    return torch.cat([image_to_tensor(p) for p in images], dim=0)
