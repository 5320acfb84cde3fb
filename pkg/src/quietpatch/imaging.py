"""Pixel containers, rectangular mask algebra, patch/context cropping and
the multi-scale size pyramid.

Images are torch tensors of shape (C, H, W) with float values in [-1, 1].
Conversion from 8-bit files happens exactly once at ingestion
(v = byte / 127.5 - 1). All operations here are pure.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


class ImagingError(ValueError):
    """Malformed image, region, or pyramid geometry."""


def validate_image(img: torch.Tensor, name: str = "image") -> torch.Tensor:
    """Check the (C, H, W) float-in-[-1,1] contract, returning the tensor."""
    if not isinstance(img, torch.Tensor):
        raise ImagingError(f"{name} must be a torch.Tensor, got {type(img).__name__}")
    if img.dim() != 3:
        raise ImagingError(f"{name} must have shape (C, H, W), got {tuple(img.shape)}")
    c, h, w = img.shape
    if c < 1 or h < 1 or w < 1:
        raise ImagingError(f"{name} has empty dimension: {tuple(img.shape)}")
    if not img.dtype.is_floating_point:
        raise ImagingError(f"{name} must be floating point, got {img.dtype}")
    lo, hi = float(img.detach().min()), float(img.detach().max())
    if lo < -1.0 - 1e-6 or hi > 1.0 + 1e-6:
        raise ImagingError(f"{name} values outside [-1, 1]: min={lo:.4f} max={hi:.4f}")
    return img


@dataclass(frozen=True)
class PatchRegion:
    """Rectangular placement (top, left, h, w) of a patch inside a host image."""

    top: int
    left: int
    h: int
    w: int

    def validate(self, H: int, W: int) -> "PatchRegion":
        if self.h < 1 or self.w < 1:
            raise ImagingError(f"region has empty extent: {self}")
        if self.top < 0 or self.left < 0 or self.top + self.h > H or self.left + self.w > W:
            raise ImagingError(f"region {self} out of bounds for image {H}x{W}")
        if self.h * self.w >= H * W:
            raise ImagingError(f"region {self} is not a strict sub-region of {H}x{W}")
        return self

    @property
    def area(self) -> int:
        return self.h * self.w

    @property
    def rows(self) -> slice:
        return slice(self.top, self.top + self.h)

    @property
    def cols(self) -> slice:
        return slice(self.left, self.left + self.w)

    def to_dict(self) -> dict:
        return {"top": self.top, "left": self.left, "h": self.h, "w": self.w}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchRegion":
        return cls(int(d["top"]), int(d["left"]), int(d["h"]), int(d["w"]))


def make_mask(region: PatchRegion, H: int, W: int, dtype=torch.float32) -> torch.Tensor:
    """Binary (H, W) location mask: 1 inside the region, 0 outside."""
    region.validate(H, W)
    m = torch.zeros(H, W, dtype=dtype)
    m[region.rows, region.cols] = 1
    return m


def apply_patch(x: torch.Tensor, p: torch.Tensor, region: PatchRegion) -> torch.Tensor:
    """Paste patch p into x at region: mask * p_padded + (1 - mask) * x.

    Pixels inside the region come from p; every other pixel is bit-identical
    to x.
    """
    validate_image(x, "x")
    validate_image(p, "p")
    _, H, W = x.shape
    region.validate(H, W)
    if p.shape[0] != x.shape[0]:
        raise ImagingError(f"channel mismatch: x has {x.shape[0]}, p has {p.shape[0]}")
    if p.shape[1] != region.h or p.shape[2] != region.w:
        raise ImagingError(
            f"patch shape {tuple(p.shape[1:])} does not match region {region.h}x{region.w}"
        )
    out = x.clone()
    out[:, region.rows, region.cols] = p
    return out


def crop(x: torch.Tensor, region: PatchRegion) -> torch.Tensor:
    """Exact sub-image of x at region."""
    _, H, W = x.shape
    region.validate(H, W)
    return x[:, region.rows, region.cols].clone()


def crop_patch_and_context(
    x: torch.Tensor, region: PatchRegion, context_scale: float = 2.0
) -> tuple[torch.Tensor, torch.Tensor, PatchRegion]:
    """Crop the patch at region plus a larger surrounding context.

    The context has side context_scale times the patch side, placed so the
    patch sits as close to its center as image bounds allow; near a border
    the context keeps its size and the patch goes off-center. Returns
    (patch, context, context_region); the patch offset inside the context is
    region minus context_region.
    """
    if context_scale <= 1.0:
        raise ImagingError(f"context_scale must be > 1, got {context_scale}")
    _, H, W = x.shape
    region.validate(H, W)

    ctx_h = min(round_half_up(context_scale * region.h), H)
    ctx_w = min(round_half_up(context_scale * region.w), W)
    if ctx_h == region.h and ctx_w == region.w:
        raise ImagingError(
            "no context strictly containing the region fits in the image; "
            "shrink context_scale or the patch"
        )
    top = min(max(region.top - (ctx_h - region.h) // 2, 0), H - ctx_h)
    left = min(max(region.left - (ctx_w - region.w) // 2, 0), W - ctx_w)
    ctx_region = PatchRegion(top, left, ctx_h, ctx_w)
    return crop(x, region), crop(x, ctx_region), ctx_region


def round_half_up(v: float) -> int:
    """Round with halves going up (Python's round() is banker's rounding)."""
    return int(math.floor(v + 0.5))


def level_factor(i: int, K: int, coarse_ratio: float) -> float:
    """Downsample factor for level i of a K-scale pyramid.

    Level K is full resolution, level 0 is coarse_ratio times the original.
    The K=0 degenerate pyramid has a single level at coarse_ratio.
    """
    if K == 0:
        return coarse_ratio
    return coarse_ratio ** ((K - i) / K)


def level_side(side: int, i: int, K: int, coarse_ratio: float) -> int:
    """Pixel side of pyramid level i, recomputed from the original size."""
    return round_half_up(side * level_factor(i, K, coarse_ratio))


def resize(img: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Bilinear resize to (target_h, target_w), output clamped to [-1, 1]."""
    validate_image(img)
    if target_h < 1 or target_w < 1:
        raise ImagingError(f"bad target size {target_h}x{target_w}")
    if img.shape[1] == target_h and img.shape[2] == target_w:
        return img.clone()
    out = F.interpolate(
        img.unsqueeze(0), size=(target_h, target_w), mode="bilinear", align_corners=False
    ).squeeze(0)
    return out.clamp(-1.0, 1.0)


def upsample(img: torch.Tensor, target_h: int, target_w: int) -> torch.Tensor:
    """Bilinear upsampling; rejects any downscaling request."""
    if target_h < img.shape[1] or target_w < img.shape[2]:
        raise ImagingError(
            f"upsample target {target_h}x{target_w} smaller than source "
            f"{img.shape[1]}x{img.shape[2]}; downsampling happens in build_pyramid"
        )
    return resize(img, target_h, target_w)


@dataclass(frozen=True)
class PyramidLevel:
    patch: torch.Tensor
    context: torch.Tensor
    offset: PatchRegion  # patch placement inside this level's context

    @property
    def patch_dims(self) -> tuple[int, int]:
        return self.patch.shape[1], self.patch.shape[2]

    @property
    def context_dims(self) -> tuple[int, int]:
        return self.context.shape[1], self.context.shape[2]


@dataclass(frozen=True)
class ScalePyramid:
    """Per-scale (patch, context) pairs for levels 0..K, coarse to fine."""

    levels: list[PyramidLevel]
    coarse_ratio: float
    K: int

    @property
    def ratio(self) -> float:
        """Per-level size factor r, with r**K = coarse_ratio."""
        if self.K == 0:
            return self.coarse_ratio
        return self.coarse_ratio ** (1.0 / self.K)

    def level_sizes(self) -> list[dict]:
        return [
            {
                "patch": list(lvl.patch_dims),
                "context": list(lvl.context_dims),
                "offset": lvl.offset.to_dict(),
            }
            for lvl in self.levels
        ]


def build_pyramid(
    patch: torch.Tensor,
    context: torch.Tensor,
    K: int,
    coarse_ratio: float = 0.75,
    patch_offset: PatchRegion | None = None,
    min_context_side: int = 11,
) -> ScalePyramid:
    """Downsample (patch, context) into levels 0..K.

    Level sides follow round(side * coarse_ratio**((K-i)/K)), each recomputed
    from the original size. The patch offset inside the context is scaled per
    level and clamped so the patch always fits. The coarsest context must not
    fall below the critic's receptive size (min_context_side), since the
    critic scores patch-in-context composites.
    """
    validate_image(patch, "patch")
    validate_image(context, "context")
    if K < 0:
        raise ImagingError(f"K must be >= 0, got {K}")
    if not 0.0 < coarse_ratio < 1.0:
        raise ImagingError(f"coarse_ratio must be in (0, 1), got {coarse_ratio}")
    ph, pw = patch.shape[1], patch.shape[2]
    ch, cw = context.shape[1], context.shape[2]
    if patch_offset is None:
        patch_offset = PatchRegion((ch - ph) // 2, (cw - pw) // 2, ph, pw)
    patch_offset.validate(ch + 1, cw + 1)  # containment only; equality allowed per axis
    if patch_offset.top + ph > ch or patch_offset.left + pw > cw:
        raise ImagingError(f"patch offset {patch_offset} does not fit context {ch}x{cw}")

    coarse_ch = level_side(ch, 0, K, coarse_ratio)
    coarse_cw = level_side(cw, 0, K, coarse_ratio)
    if min(coarse_ch, coarse_cw) < min_context_side:
        raise ImagingError(
            f"coarsest context {coarse_ch}x{coarse_cw} is below the minimum critic "
            f"input of {min_context_side}px; use a smaller K or a larger patch/context"
        )

    levels = []
    for i in range(K + 1):
        f = level_factor(i, K, coarse_ratio)
        lp_h, lp_w = round_half_up(ph * f), round_half_up(pw * f)
        lc_h, lc_w = round_half_up(ch * f), round_half_up(cw * f)
        if i == K and K > 0:
            lvl_patch, lvl_ctx = patch.clone(), context.clone()
        else:
            lvl_patch = resize(patch, lp_h, lp_w)
            lvl_ctx = resize(context, lc_h, lc_w)
        top = min(max(round_half_up(patch_offset.top * f), 0), lc_h - lp_h)
        left = min(max(round_half_up(patch_offset.left * f), 0), lc_w - lp_w)
        levels.append(
            PyramidLevel(lvl_patch, lvl_ctx, PatchRegion(top, left, lp_h, lp_w))
        )
    return ScalePyramid(levels=levels, coarse_ratio=coarse_ratio, K=K)


# --- ingestion / persistence ---

def from_bytes_array(arr: np.ndarray) -> torch.Tensor:
    """8-bit (H, W, C) array to the internal [-1, 1] (C, H, W) tensor."""
    if arr.ndim == 2:
        arr = arr[:, :, None]
    t = torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0)
    return t.permute(2, 0, 1).contiguous()


def to_bytes_array(img: torch.Tensor) -> np.ndarray:
    """Internal tensor back to 8-bit (H, W, C); quantization round((v+1)*127.5)."""
    validate_image(img)
    arr = ((img.detach().cpu().numpy() + 1.0) * 127.5).round()
    return np.clip(arr, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def load_image(path) -> torch.Tensor:
    """Read a PNG/JPEG file into the internal representation."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return from_bytes_array(arr)


def save_image(img: torch.Tensor, path, metadata: dict | None = None) -> None:
    """Write a lossless PNG; metadata goes to a JSON sidecar next to it."""
    path = Path(path)
    arr = to_bytes_array(img)
    Image.fromarray(arr.squeeze(-1) if arr.shape[-1] == 1 else arr).save(path, format="PNG")
    if metadata is not None:
        sidecar = path.with_suffix(path.suffix + ".json")
        record = {"normalization": "v = byte / 127.5 - 1", **metadata}
        sidecar.write_text(json.dumps(record, indent=2, sort_keys=True))
