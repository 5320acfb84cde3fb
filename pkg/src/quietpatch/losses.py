"""Scalar objectives of the patch min-max game.

All functions take and return torch tensors (losses are 0-dim) so gradients
flow; tests extract floats with .item(). Patches and contexts follow the
[-1, 1] convention from imaging.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import torch
import torch.nn.functional as F

from .imaging import ImagingError, PatchRegion, apply_patch, validate_image


class LossError(ValueError):
    """Bad loss inputs (dim mismatch, empty palette, non-finite component)."""


@dataclass(frozen=True)
class LossWeights:
    """Composite-objective weights.

    alpha scales the GAN term, beta the reconstruction term, gamma the total
    variation term, delta_print the printability term (0 disables). kappa is
    the attack margin and gp_coef the critic gradient-penalty coefficient.
    """

    alpha: float = 1.0
    beta: float = 10.0
    gamma: float = 0.1
    delta_print: float = 0.0
    kappa: float = 0.0
    gp_coef: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta_print", "kappa", "gp_coef"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise LossError(f"weight {name} must be a finite nonnegative real, got {v!r}")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "delta_print": self.delta_print,
            "kappa": self.kappa,
            "gp_coef": self.gp_coef,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**{k: float(v) for k, v in d.items()})


def attack_loss(
    logits: torch.Tensor,
    true_class: int,
    kappa: float = 0.0,
    targeted: bool = False,
    target_class: int | None = None,
) -> torch.Tensor:
    """Margin loss on raw logits.

    Untargeted: max(z_y - max_{i != y} z_i, -kappa). Targeted: the margin of
    the target class against the runner-up. Minimizing drives the model away
    from (or toward) the chosen class by at least kappa.
    """
    if logits.dim() != 1 or logits.numel() < 2:
        raise LossError(f"logits must be a vector of length >= 2, got shape {tuple(logits.shape)}")
    n = logits.numel()
    if not 0 <= true_class < n:
        raise LossError(f"true_class {true_class} out of range for {n} logits")
    if targeted:
        if target_class is None:
            raise LossError("targeted mode needs target_class")
        if not 0 <= target_class < n:
            raise LossError(f"target_class {target_class} out of range for {n} logits")
        if target_class == true_class:
            raise LossError("target_class equals true_class in targeted mode")
        anchor = target_class
    else:
        if target_class is not None:
            raise LossError("target_class given without targeted=True")
        anchor = true_class
    if kappa < 0:
        raise LossError(f"kappa must be nonnegative, got {kappa}")

    others = torch.cat([logits[:anchor], logits[anchor + 1 :]])
    if targeted:
        margin = others.max() - logits[anchor]
    else:
        margin = logits[anchor] - others.max()
    return torch.clamp(margin, min=-kappa)


def reconstruction_loss(generated: torch.Tensor, p_i: torch.Tensor) -> torch.Tensor:
    """Squared L2 norm of the difference, summed over all elements."""
    if generated.shape != p_i.shape:
        raise LossError(f"shape mismatch: {tuple(generated.shape)} vs {tuple(p_i.shape)}")
    return ((generated - p_i) ** 2).sum()


def tv_loss(p: torch.Tensor) -> torch.Tensor:
    """Anisotropic total variation; neighbor terms past the border are dropped."""
    validate_image(p, "p")
    down = (p[:, 1:, :] - p[:, :-1, :]).abs().sum() if p.shape[1] > 1 else p.sum() * 0
    right = (p[:, :, 1:] - p[:, :, :-1]).abs().sum() if p.shape[2] > 1 else p.sum() * 0
    return down + right


@dataclass(frozen=True)
class PrintablePalette:
    """Finite set of printable RGB colors, components in [0, 1]."""

    colors: torch.Tensor  # (n, 3)

    def __post_init__(self):
        c = self.colors
        if not isinstance(c, torch.Tensor) or c.dim() != 2 or c.shape[1] != 3 or c.shape[0] == 0:
            raise LossError("palette must be a nonempty (n, 3) tensor")
        if float(c.min()) < 0.0 or float(c.max()) > 1.0:
            raise LossError("palette components must lie in [0, 1]")

    def __len__(self) -> int:
        return self.colors.shape[0]

    @classmethod
    def from_file(cls, path) -> "PrintablePalette":
        """Read a plain-text palette: one 'r g b' triple per line, values in [0,1]."""
        rows = []
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 3:
                raise LossError(f"palette line is not an RGB triple: {raw!r}")
            rows.append([float(v) for v in parts])
        if not rows:
            raise LossError(f"palette file {path} holds no colors")
        return cls(torch.tensor(rows, dtype=torch.float32))

    @classmethod
    def default(cls) -> "PrintablePalette":
        ref = resources.files("quietpatch").joinpath("data/printable_colors.txt")
        with resources.as_file(ref) as path:
            return cls.from_file(path)


def nps_loss(p: torch.Tensor, palette: PrintablePalette) -> torch.Tensor:
    """Printability score: per pixel, the product over palette colors of the
    Euclidean RGB distance; summed over pixels. Zero iff every pixel sits
    exactly on a palette color. Pixels compared in [0, 1] space.
    """
    validate_image(p, "p")
    if p.shape[0] != 3:
        raise LossError(f"printability needs RGB patches, got {p.shape[0]} channels")
    px = ((p + 1.0) / 2.0).permute(1, 2, 0).reshape(-1, 1, 3)  # (HW, 1, 3)
    pal = palette.colors.to(p.dtype).reshape(1, -1, 3)  # (1, n, 3)
    dists = (px - pal).pow(2).sum(-1).clamp_min(0).sqrt()  # (HW, n)
    return dists.prod(dim=1).sum()


def compose(patch: torch.Tensor, context: torch.Tensor, offset: PatchRegion | None = None) -> torch.Tensor:
    """Paste patch into context; centered unless an explicit offset is given."""
    ph, pw = patch.shape[1], patch.shape[2]
    ch, cw = context.shape[1], context.shape[2]
    if offset is None:
        offset = PatchRegion((ch - ph) // 2, (cw - pw) // 2, ph, pw)
    return apply_patch(context, patch, offset)


def critic_loss(
    critic,
    real_pair: tuple[torch.Tensor, torch.Tensor],
    fake_pair: tuple[torch.Tensor, torch.Tensor],
    gp_coef: float = 0.1,
    offset: PatchRegion | None = None,
    gan_mode: str = "wgan-gp",
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Critic objective on (patch, context) pairs, minimized by the critic.

    Wasserstein mode: D(fake) - D(real) plus gp_coef times the one-centered
    gradient penalty at a uniform-random convex combination of the two
    composites. 'vanilla' mode is the original saturating objective via
    logits. Both pairs must share the same context tensor dims.
    """
    real_p, real_c = real_pair
    fake_p, fake_c = fake_pair
    if real_c.shape != fake_c.shape:
        raise LossError(
            f"context dims differ between pairs: {tuple(real_c.shape)} vs {tuple(fake_c.shape)}"
        )
    real = compose(real_p, real_c, offset)
    fake = compose(fake_p, fake_c, offset)

    d_real = critic(real.unsqueeze(0)).mean()
    d_fake = critic(fake.unsqueeze(0)).mean()

    if gan_mode == "vanilla":
        # -log sigmoid(D(real)) - log(1 - sigmoid(D(fake)))
        return F.softplus(-d_real) + F.softplus(d_fake)
    if gan_mode != "wgan-gp":
        raise LossError(f"unknown gan_mode {gan_mode!r}")

    u = torch.rand((), generator=rng, dtype=real.dtype)
    x_hat = (u * real.detach() + (1.0 - u) * fake.detach()).requires_grad_(True)
    d_hat = critic(x_hat.unsqueeze(0)).mean()
    (grad,) = torch.autograd.grad(d_hat, x_hat, create_graph=True)
    penalty = (grad.norm(p=2) - 1.0) ** 2
    return d_fake - d_real + gp_coef * penalty


def generator_gan_term(
    critic, fake_patch: torch.Tensor, context: torch.Tensor,
    offset: PatchRegion | None = None, gan_mode: str = "wgan-gp",
) -> torch.Tensor:
    """Generator-side GAN term: -D(fake composite) in Wasserstein mode, the
    saturating log(1 - sigmoid(D)) otherwise.
    """
    score = critic(compose(fake_patch, context, offset).unsqueeze(0)).mean()
    if gan_mode == "vanilla":
        return -F.softplus(score)
    if gan_mode != "wgan-gp":
        raise LossError(f"unknown gan_mode {gan_mode!r}")
    return -score


_TERMS = ("gan", "attack", "reconstruction", "tv", "printability")


def generator_loss(gan, attack, rec, tv, nps, weights: LossWeights) -> torch.Tensor:
    """Composite generator objective.

    attack + alpha*gan + beta*rec + gamma*tv + delta_print*nps. The gan
    component is the generator-side term (already negated for Wasserstein;
    see generator_gan_term). Rejects non-finite components by name.
    """
    comps = (gan, attack, rec, tv, nps)
    vals = []
    for name, c in zip(_TERMS, comps):
        t = c if isinstance(c, torch.Tensor) else torch.as_tensor(float(c), dtype=torch.float64)
        if not bool(torch.isfinite(t).all()):
            raise LossError(f"non-finite {name} component: {t}")
        vals.append(t)
    g, a, r, t, n = vals
    return (
        a
        + weights.alpha * g
        + weights.beta * r
        + weights.gamma * t
        + weights.delta_print * n
    )
