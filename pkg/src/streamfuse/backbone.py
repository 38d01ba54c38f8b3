"""Shared U-Net-style primitives: refined residual blocks, the two-stage
maxpool encoder, the upsampling decoders (with and without skip
concatenation) and the sigmoid output head.

All public forward() boundaries are channels-last (B, H, W, D, C); modules
permute to torch's channels-first layout internally.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


def _cf(x):  # (B,H,W,D,C) -> (B,C,H,W,D)
    return x.permute(0, 4, 1, 2, 3)


def _cl(x):  # (B,C,H,W,D) -> (B,H,W,D,C)
    return x.permute(0, 2, 3, 4, 1)


class RefinedResidualBlock(nn.Module):
    """x + Dropout(ReLU(Conv(ReLU(Conv(x))))), 3x3x3 same-padding convs.

    When the input channel count differs from the filter count, the skip path
    goes through a bias-free 1x1x1 projection so the residual add is typed.
    dropout_position places the dropout at the end of the branch (default) or
    between the two convolutions (the source text supports either reading).
    """

    def __init__(
        self,
        in_channels: int,
        filters: int,
        dropout_rate: float = 0.2,
        dropout_position: str = "after_second",
    ):
        super().__init__()
        if filters < 1:
            raise ValueError(f"filters must be >= 1, got {filters}")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0,1), got {dropout_rate}")
        if dropout_position not in ("after_second", "after_first"):
            raise ValueError(f"unknown dropout_position {dropout_position!r}")
        self.conv1 = nn.Conv3d(in_channels, filters, 3, padding=1)
        self.conv2 = nn.Conv3d(filters, filters, 3, padding=1)
        self.dropout = nn.Dropout(dropout_rate)
        self.dropout_position = dropout_position
        self.project = (
            nn.Conv3d(in_channels, filters, 1, bias=False) if in_channels != filters else None
        )

    def forward(self, x):
        cf = _cf(x)
        branch = F.relu(self.conv1(cf))
        if self.dropout_position == "after_first":
            branch = self.dropout(branch)
        branch = F.relu(self.conv2(branch))
        if self.dropout_position == "after_second":
            branch = self.dropout(branch)
        skip = self.project(cf) if self.project is not None else cf
        return _cl(skip + branch)


class Upsample2x(nn.Module):
    """Nearest-neighbor x2 followed by a channel-preserving 2x2x2 transposed
    convolution, cropped back to the doubled spatial shape (TF 'same'
    convention: the single overhang voxel is dropped at the trailing edge)."""

    def __init__(self, channels: int):
        super().__init__()
        self.tconv = nn.ConvTranspose3d(channels, channels, 2, stride=1)

    def forward(self, x):
        cf = _cf(x)
        up = F.interpolate(cf, scale_factor=2, mode="nearest")
        out = self.tconv(up)[:, :, : up.shape[2], : up.shape[3], : up.shape[4]]
        return _cl(out)


class Encoder(nn.Module):
    """RRB(w0) -> maxpool2 -> RRB(w1) -> maxpool2 -> RRB(w2); returns the
    bottleneck (spatial dims / 4) and the two pre-pool skip feature maps."""

    def __init__(self, in_channels: int = 1, widths=(64, 128, 256), dropout_rate: float = 0.2):
        super().__init__()
        w0, w1, w2 = widths
        self.block1 = RefinedResidualBlock(in_channels, w0, dropout_rate)
        self.block2 = RefinedResidualBlock(w0, w1, dropout_rate)
        self.block3 = RefinedResidualBlock(w1, w2, dropout_rate)
        self.pool = nn.MaxPool3d(2)

    def forward(self, x):
        spatial = tuple(x.shape[1:4])
        if any(s % 4 != 0 for s in spatial):
            raise ShapeError(f"encoder input spatial dims must be divisible by 4, got {spatial}")
        s1 = self.block1(x)
        x = _cl(self.pool(_cf(s1)))
        s2 = self.block2(x)
        x = _cl(self.pool(_cf(s2)))
        bottleneck = self.block3(x)
        return bottleneck, [s1, s2]


class Decoder(nn.Module):
    """Skipless decoder, literal composition order U o R_w1 o U o R_w2
    applied right-to-left: refine to widths[1], upsample, refine to
    widths[0], upsample. Output has widths[0] channels at 4x the input
    spatial dims."""

    def __init__(self, in_channels: int, widths=(128, 64), dropout_rate: float = 0.2):
        super().__init__()
        w_high, w_low = widths
        self.refine_low = RefinedResidualBlock(in_channels, w_low, dropout_rate)
        self.up1 = Upsample2x(w_low)
        self.refine_high = RefinedResidualBlock(w_low, w_high, dropout_rate)
        self.up2 = Upsample2x(w_high)

    def forward(self, x):
        x = self.refine_low(x)
        x = self.up1(x)
        x = self.refine_high(x)
        return self.up2(x)


class SkipDecoder(nn.Module):
    """Standard U-Net decoder used by the single-stream variants: upsample,
    concatenate the matching encoder skip, refine; twice."""

    def __init__(
        self,
        in_channels: int,
        widths=(128, 64),
        skip_channels=(128, 64),
        dropout_rate: float = 0.2,
    ):
        super().__init__()
        w_high, w_low = widths
        self.up1 = Upsample2x(in_channels)
        self.refine1 = RefinedResidualBlock(in_channels + skip_channels[0], w_high, dropout_rate)
        self.up2 = Upsample2x(w_high)
        self.refine2 = RefinedResidualBlock(w_high + skip_channels[1], w_low, dropout_rate)

    def forward(self, x, skips):
        s_full, s_half = skips
        x = self.up1(x)
        x = self.refine1(torch.cat([x, s_half], dim=-1))
        x = self.up2(x)
        return self.refine2(torch.cat([x, s_full], dim=-1))


class OutputHead(nn.Module):
    """3x3x3 convolution to one channel with sigmoid activation; output values
    lie strictly in (0, 1)."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.conv = nn.Conv3d(in_channels, 1, 3, padding=1)

    def forward(self, x):
        return torch.sigmoid(_cl(self.conv(_cf(x))))
