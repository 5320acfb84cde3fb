"""Attack measurement: success rates, transfer across models, patch
conspicuousness, and the patch-vs-perturbation contrast against a PGD
baseline.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import PatchRegion, apply_patch
from .saliency import conspicuousness_ratio
from .seeding import derive_seed
from .stack import GeneratorStack, generate
from .victims import VictimModel, predict


class EvaluationError(RuntimeError):
    pass


class CleanMisclassification(EvaluationError):
    """The victim got the clean image wrong; the fixture is excluded, not
    silently counted (success is only meaningful on correct predictions).
    """

    def __init__(self, model_id: str, predicted: int, expected: int):
        self.model_id, self.predicted, self.expected = model_id, predicted, expected
        super().__init__(
            f"{model_id} predicts {predicted} on the clean image, expected {expected}"
        )


def sample_patches(stack: GeneratorStack, n_samples: int, seed: int) -> list[torch.Tensor]:
    """n full-resolution patches from distinct derived seeds."""
    if n_samples < 1:
        raise EvaluationError(f"n_samples must be >= 1, got {n_samples}")
    return [generate(stack, derive_seed(seed, "sample", s)) for s in range(n_samples)]


def _flip_count(
    model: VictimModel, x: torch.Tensor, region: PatchRegion,
    patches: list[torch.Tensor], true_class: int,
    targeted: bool = False, target_class: int | None = None,
) -> int:
    composites = torch.stack([apply_patch(x, p, region) for p in patches])
    flips = 0
    for start in range(0, len(composites), 64):
        _, classes = predict(model, composites[start : start + 64])
        if targeted:
            flips += int((classes == target_class).sum())
        else:
            flips += int((classes != true_class).sum())
    return flips


def success_rate(
    stack: GeneratorStack, model: VictimModel, x: torch.Tensor, region: PatchRegion,
    n_samples: int, seed: int, true_class: int | None = None,
    targeted: bool = False, target_class: int | None = None,
    patches: list[torch.Tensor] | None = None,
) -> float:
    """Exact fraction of sampled patches that flip the model's prediction.

    The clean prediction anchors the count; when true_class is given and the
    clean prediction disagrees, the image is rejected via
    CleanMisclassification so corpus runs can exclude and report it.
    """
    _, clean_class = predict(model, x)
    if true_class is not None and clean_class != true_class:
        raise CleanMisclassification(model.identifier, clean_class, true_class)
    if patches is None:
        patches = sample_patches(stack, n_samples, seed)
    flips = _flip_count(model, x, region, patches, clean_class, targeted, target_class)
    return flips / len(patches)


def transfer_matrix(
    stack: GeneratorStack, surrogate: VictimModel, models: list[VictimModel],
    x: torch.Tensor, region: PatchRegion, n_samples: int, seed: int,
    true_class: int | None = None,
) -> dict:
    """Per-model success of the same patch samples generated against the
    surrogate. The surrogate's own row equals its success_rate exactly.
    """
    if not models:
        raise EvaluationError("transfer needs at least one target model")
    patches = sample_patches(stack, n_samples, seed)
    rates = {}
    for m in models:
        try:
            rates[m.identifier] = success_rate(
                stack, m, x, region, n_samples, seed,
                true_class=true_class if m.identifier == surrogate.identifier else None,
                patches=patches,
            )
        except CleanMisclassification:
            raise
    return rates


def pgd_attack(
    model: VictimModel, x: torch.Tensor, epsilon: float = 8.0,
    steps: int = 40, step_size: float | None = None, true_class: int | None = None,
) -> torch.Tensor:
    """Untargeted L-infinity PGD. epsilon is in 8-bit units (the usual
    "eps=8" convention) and is mapped to the [-1,1] domain as 2*eps/255;
    the output never deviates from x by more than that, exactly.
    """
    if "gradients" not in model.capabilities:
        raise EvaluationError(f"model {model.identifier} exposes no gradients; PGD needs them")
    eps = float(epsilon) * 2.0 / 255.0
    # work with a float32 radius no greater than the exact one, so the
    # sup-norm bound holds bitwise no matter what precision checks it
    eps_f32 = torch.tensor(eps, dtype=torch.float32)
    if float(eps_f32) > eps:
        eps_f32 = torch.nextafter(eps_f32, torch.tensor(0.0))
    eps = float(eps_f32)
    alpha = eps / 10.0 if step_size is None else float(step_size) * 2.0 / 255.0
    if true_class is None:
        _, true_class = predict(model, x)
    x_adv = x.detach().clone()
    for _ in range(int(steps)):
        inp = x_adv.clone().requires_grad_(True)
        loss = F.cross_entropy(
            model.net(inp.unsqueeze(0)), torch.tensor([true_class])
        )
        (grad,) = torch.autograd.grad(loss, inp)
        with torch.no_grad():
            x_adv = x_adv + alpha * grad.sign()
            x_adv = x + (x_adv - x).clamp(-eps, eps)
            x_adv = x_adv.clamp(-1.0, 1.0)
    return _exact_linf_project(x.detach(), x_adv, eps)


def _exact_linf_project(x: torch.Tensor, y: torch.Tensor, eps: float) -> torch.Tensor:
    """Nudge y by ulps until the recomputed y - x obeys |.| <= eps bitwise.

    x + clamp(y - x, -eps, eps) rounds, so the recomputed difference can
    overshoot eps by one ulp. Stepping the offenders toward x restores the
    bound without measurably moving the attack.
    """
    lo, hi = torch.full_like(y, -2.0), torch.full_like(y, 2.0)
    for _ in range(4):
        d = y - x
        over, under = d > eps, d < -eps
        if not bool((over | under).any()):
            return y
        y = torch.where(over, torch.nextafter(y, lo), y)
        y = torch.where(under, torch.nextafter(y, hi), y)
    d = y - x
    return torch.where((d > eps) | (d < -eps), x, y)


def diff_distribution(
    x_original: torch.Tensor, x_attacked: torch.Tensor,
    region: PatchRegion | None = None, eps: float | None = None, bins: int = 51,
) -> dict:
    """Histogram summary of elementwise differences.

    With a region (patch attacks) the histogram covers the region only and
    the outside max is reported separately; without one (perturbation
    attacks) the whole image is histogrammed. eps sets the exceedance
    threshold recorded as frac_exceeding.
    """
    if x_original.shape != x_attacked.shape:
        raise EvaluationError(
            f"shape mismatch: {tuple(x_original.shape)} vs {tuple(x_attacked.shape)}"
        )
    diff = (x_attacked - x_original).numpy()
    if region is not None:
        _, H, W = x_original.shape
        region.validate(H, W)
        mask = np.zeros((H, W), dtype=bool)
        mask[region.rows, region.cols] = True
        inside = diff[:, mask]
        outside = diff[:, ~mask]
        max_abs_outside = float(np.abs(outside).max()) if outside.size else 0.0
        scope = inside
    else:
        scope = diff.reshape(x_original.shape[0], -1)
        max_abs_outside = None
    counts, edges = np.histogram(scope, bins=bins, range=(-2.0, 2.0))
    summary = {
        "bin_edges": edges.tolist(),
        "counts": counts.tolist(),
        "max_abs": float(np.abs(scope).max()),
        "max_abs_outside": max_abs_outside,
        "eps": eps,
        "frac_exceeding": float((np.abs(scope) > eps).mean()) if eps is not None else None,
    }
    return summary


def baseline_patch(h: int, w: int, cell: int = 2) -> torch.Tensor:
    """High-contrast conspicuous stand-in: a saturated red/cyan checkerboard."""
    yy, xx = torch.meshgrid(torch.arange(h), torch.arange(w), indexing="ij")
    checker = ((yy // cell + xx // cell) % 2).bool()
    patch = torch.empty(3, h, w)
    patch[0] = torch.where(checker, 1.0, -1.0)
    patch[1] = torch.where(checker, -1.0, 1.0)
    patch[2] = torch.where(checker, -1.0, 1.0)
    return patch


def conspicuousness_comparison(
    x: torch.Tensor, patch: torch.Tensor, region: PatchRegion
) -> dict:
    """Trained patch vs the high-contrast baseline at the same location."""
    ours = conspicuousness_ratio(apply_patch(x, patch, region), region)
    base = baseline_patch(region.h, region.w)
    if x.shape[0] != 3:
        base = base[: x.shape[0]]
    theirs = conspicuousness_ratio(apply_patch(x, base, region), region)
    return {
        "patch_ratio": ours.ratio,
        "patch_zero_map": ours.zero_map,
        "baseline_ratio": theirs.ratio,
        "baseline_zero_map": theirs.zero_map,
    }


@dataclass
class AttackReport:
    """Everything one evaluation run produces, JSON/CSV serializable.

    success_rates maps model id -> exact fraction; conspicuousness holds one
    comparison record per fixture; diff_summaries one histogram record per
    attack kind. Content is fully determined by (inputs, seed): no clocks.
    """

    run_id: str
    config_hash: str
    victim_models: list[str]
    n_samples: int
    patch_area_fraction: float
    success_rates: dict = field(default_factory=dict)
    conspicuousness: list = field(default_factory=list)
    diff_summaries: dict = field(default_factory=dict)
    excluded_fixtures: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def save(self, directory) -> dict:
        """Write report.json plus a success-rate CSV; returns artifact paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        json_path = directory / "report.json"
        json_path.write_text(self.to_json())
        csv_path = directory / "success_rates.csv"
        lines = ["model,role,success_rate,n_samples"]
        for ident in self.victim_models:
            role = "white-box" if ident == self.notes.get("surrogate") else "black-box"
            rate = self.success_rates.get(ident, "")
            lines.append(f"{ident},{role},{rate},{self.n_samples}")
        csv_path.write_text("\n".join(lines) + "\n")
        return {"report_json": str(json_path), "success_csv": str(csv_path)}
