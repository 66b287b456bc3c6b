"""Convolutional building blocks shared by the encoder and the change head."""

import torch
from torch import nn


class ConvBnSiLU(nn.Sequential):
    """Conv -> BatchNorm -> SiLU with size-preserving padding (up to the stride)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1) -> None:
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size, stride, padding=kernel_size // 2, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.SiLU(),
        )
        self.in_channels = in_channels
        self.out_channels = out_channels


class ResidualBlock(nn.Module):
    """Conv3x3 -> BN -> SiLU -> Conv3x3 -> BN, plus the input, then SiLU."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.branch = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
        )
        self.act = nn.SiLU()

    def zero_branch(self) -> None:
        """Make the residual branch output exactly zero (the last BN scale and shift)."""
        last_bn = self.branch[-1]
        assert isinstance(last_bn, nn.BatchNorm2d)
        nn.init.zeros_(last_bn.weight)
        nn.init.zeros_(last_bn.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(x + self.branch(x))
