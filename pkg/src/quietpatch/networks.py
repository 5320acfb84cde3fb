"""Per-scale generator and critic networks.

Both are small fully convolutional nets of 5 conv-blocks with zero padding,
so spatial dims pass through unchanged. The critic stacks stride-1 3x3
convolutions, giving an 11-pixel receptive field; it returns a spatial score
map (one score per receptive field) rather than a single scalar, and carries
no normalization layers so the gradient penalty sees per-sample gradients.
"""

from __future__ import annotations

import torch
import torch.nn as nn


def _init_weights(module: nn.Module) -> None:
    # normal(0, 0.02) conv init, norm affine at normal(1, 0.02)
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            nn.init.normal_(m.weight, 1.0, 0.02)
            nn.init.zeros_(m.bias)


class ConvBlock(nn.Sequential):
    """conv -> optional instance norm -> leaky relu, dims preserved."""

    def __init__(self, in_ch: int, out_ch: int, norm: bool = True):
        layers = [nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=1, padding=1)]
        if norm:
            layers.append(nn.InstanceNorm2d(out_ch, affine=True))
        layers.append(nn.LeakyReLU(0.2, inplace=True))
        super().__init__(*layers)


class PatchGenerator(nn.Module):
    """Residual refiner: input (amp-scaled noise + prior), output a bounded
    residual added onto the prior by the caller.

    Instance norm is used (identical in train and eval modes) so generation
    after training reproduces training-time outputs exactly.
    """

    def __init__(self, channels: int = 3, width: int = 32):
        super().__init__()
        self.head = ConvBlock(channels, width)
        self.body = nn.Sequential(
            ConvBlock(width, width), ConvBlock(width, width), ConvBlock(width, width)
        )
        self.tail = nn.Sequential(
            nn.Conv2d(width, channels, kernel_size=3, stride=1, padding=1), nn.Tanh()
        )
        _init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.tail(self.body(self.head(x)))


class PatchCritic(nn.Module):
    """Markovian critic: 5 stride-1 conv-blocks, no normalization, 1-channel
    score map output. Receptive field 11 px, strictly smaller than the
    composed contexts it scores.
    """

    receptive_field = 11

    def __init__(self, channels: int = 3, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            ConvBlock(channels, width, norm=False),
            ConvBlock(width, width, norm=False),
            ConvBlock(width, width, norm=False),
            ConvBlock(width, width, norm=False),
            nn.Conv2d(width, 1, kernel_size=3, stride=1, padding=1),
        )
        _init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def param_checksum(module: nn.Module) -> str:
    """Stable hex digest over all parameters and buffers, in state-dict order."""
    import hashlib

    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
