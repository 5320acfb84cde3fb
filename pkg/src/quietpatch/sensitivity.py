"""Model-gradient sensitivity: where a classifier is most attackable.

The heatmap is the channel-summed absolute input gradient of the top-class
logit, max-normalized. Location selection slides an h x w window over the
map and keeps the largest window sum, computed through an integral image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .imaging import PatchRegion
from .victims import VictimModel, gradients, predict


class SensitivityError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionMap:
    values: torch.Tensor  # (H, W), nonnegative
    source_model: str
    normalized: bool = True

    def __post_init__(self):
        v = self.values
        if v.dim() != 2:
            raise SensitivityError(f"attention map must be 2-D, got {tuple(v.shape)}")
        if float(v.min()) < 0:
            raise SensitivityError("attention map has negative entries")
        if self.normalized and v.numel() and float(v.max()) not in (0.0, 1.0):
            # tolerate tiny float slack around 1
            if abs(float(v.max()) - 1.0) > 1e-6:
                raise SensitivityError(f"normalized map has max {float(v.max())}")


def compute_attention(model: VictimModel, x: torch.Tensor) -> AttentionMap:
    """Gradient-magnitude heatmap of the model's top class at x."""
    _, top = predict(model, x)
    grad = gradients(model, x, top)
    heat = grad.abs().sum(dim=0)
    peak = float(heat.max())
    if peak > 0:
        heat = heat / peak
    return AttentionMap(values=heat, source_model=model.identifier)


def window_sums(values: np.ndarray, h: int, w: int) -> np.ndarray:
    """Sum of every h x w window via a summed-area table (float64)."""
    H, W = values.shape
    sat = np.zeros((H + 1, W + 1), dtype=np.float64)
    sat[1:, 1:] = np.cumsum(np.cumsum(values.astype(np.float64), axis=0), axis=1)
    return (
        sat[h : H + 1, w : W + 1]
        - sat[0 : H - h + 1, w : W + 1]
        - sat[h : H + 1, 0 : W - w + 1]
        + sat[0 : H - h + 1, 0 : W - w + 1]
    )


def select_location(M: AttentionMap, h: int, w: int) -> PatchRegion:
    """The h x w window with the largest summed sensitivity; ties go to the
    smallest (top, left) in row-major order.
    """
    H, W = M.values.shape
    if h > H or w > W:
        raise SensitivityError(f"window {h}x{w} larger than map {H}x{W}")
    if h < 1 or w < 1:
        raise SensitivityError(f"window must be at least 1x1, got {h}x{w}")
    sums = window_sums(M.values.numpy(), h, w)
    flat = int(np.argmax(sums))  # first max in row-major order
    top, left = divmod(flat, sums.shape[1])
    return PatchRegion(top, left, h, w)


def attention_overlay(x: torch.Tensor, M: AttentionMap, region: PatchRegion | None = None) -> torch.Tensor:
    """False-color overlay for figures: red where sensitivity is high, the
    image dimmed elsewhere; optional white frame around the chosen region.
    Returns an image tensor in [-1, 1].
    """
    heat = M.values.clamp(0, 1)
    base = (x + 1.0) / 2.0
    if base.shape[0] == 1:
        base = base.expand(3, -1, -1).clone()
    overlay = base * 0.5
    overlay[0] = overlay[0] + 0.5 * heat  # red channel carries the heat
    if region is not None:
        r = region
        overlay[:, r.top, r.cols] = 1.0
        overlay[:, r.top + r.h - 1, r.cols] = 1.0
        overlay[:, r.rows, r.left] = 1.0
        overlay[:, r.rows, r.left + r.w - 1] = 1.0
    return overlay.clamp(0, 1) * 2.0 - 1.0
