"""Model-free bottom-up visual saliency and the conspicuousness metric.

The map is multi-scale center-surround contrast over an intensity channel
and two color-opponency channels (red-green, blue-yellow): build a Gaussian
pyramid per channel, take absolute differences between fine (center) and
upsampled coarse (surround) levels, sum everything at full resolution, and
max-normalize. Deterministic; pinned by a golden-file regression test.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn.functional as F

from .imaging import PatchRegion, validate_image

# 5-tap binomial blur, applied separably with replicate padding
_KERNEL_1D = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur(x: torch.Tensor) -> torch.Tensor:
    # x: (1, H, W)
    k = _KERNEL_1D.to(x.dtype)
    pad = F.pad(x.unsqueeze(0), (2, 2, 0, 0), mode="replicate")
    x = F.conv2d(pad, k.view(1, 1, 1, 5)).squeeze(0)
    pad = F.pad(x.unsqueeze(0), (0, 0, 2, 2), mode="replicate")
    return F.conv2d(pad, k.view(1, 1, 5, 1)).squeeze(0)


def _pyramid(ch: torch.Tensor, depth: int) -> list[torch.Tensor]:
    levels = [ch]
    for _ in range(depth):
        blurred = _blur(levels[-1])
        levels.append(blurred[:, ::2, ::2])
    return levels


def _to_size(m: torch.Tensor, h: int, w: int) -> torch.Tensor:
    # plain bilinear resize without the [-1,1] image-range contract
    return F.interpolate(
        m.unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False
    ).squeeze(0)


def saliency_map(x: torch.Tensor) -> torch.Tensor:
    """Nonnegative (H, W) saliency, max-normalized (all-zero when contrast-free)."""
    validate_image(x)
    v = (x + 1.0) / 2.0
    if v.shape[0] == 1:
        v = v.expand(3, -1, -1)
    elif v.shape[0] != 3:
        v = v[:3]
    r, g, b = v[0:1], v[1:2], v[2:3]
    channels = [
        (r + g + b) / 3.0,  # intensity
        r - g,              # red-green opponency
        b - (r + g) / 2.0,  # blue-yellow opponency
    ]

    H, W = x.shape[1], x.shape[2]
    # stop the pyramid before any side drops under 4 px
    depth = 0
    side = min(H, W)
    while side >= 8 and depth < 4:
        side //= 2
        depth += 1
    total = torch.zeros(1, H, W)
    for ch in channels:
        levels = _pyramid(ch, depth)
        if depth >= 2:
            pairs = [
                (levels[c], levels[c + delta])
                for c in range(depth - 1)
                for delta in (2, 3)
                if c + delta < len(levels)
            ]
        elif depth == 1:
            pairs = [(levels[0], levels[1])]
        else:
            # too small for a pyramid: fine-vs-blurred local contrast
            pairs = [(levels[0], _blur(levels[0]))]
        for center, surround in pairs:
            surround = _to_size(surround, center.shape[1], center.shape[2])
            diff = (center - surround).abs()
            total = total + _to_size(diff, H, W)
    out = total.squeeze(0)
    peak = float(out.max())
    if peak > 0:
        out = out / peak
    return out


class ConspicuousnessResult(NamedTuple):
    ratio: float
    zero_map: bool  # true when the saliency map was identically zero


def conspicuousness_ratio(x_attacked: torch.Tensor, region: PatchRegion) -> ConspicuousnessResult:
    """Mean saliency inside region over mean saliency of the whole image.

    Above 1 means the region draws more than its share of first-glance
    attention. A contrast-free (all-zero) map gives the neutral ratio 1,
    flagged so reports can show the degenerate case.
    """
    _, H, W = x_attacked.shape
    region.validate(H, W)
    sal = saliency_map(x_attacked)
    global_mean = float(sal.mean())
    if global_mean == 0.0:
        return ConspicuousnessResult(ratio=1.0, zero_map=True)
    inside = float(sal[region.rows, region.cols].mean())
    return ConspicuousnessResult(ratio=inside / global_mean, zero_map=False)
