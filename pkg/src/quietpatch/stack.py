"""The coarse-to-fine generator cascade: per-scale pairs, sequential
generation, and checkpoint round-tripping.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .imaging import ScalePyramid, upsample
from .networks import PatchCritic, PatchGenerator, param_checksum
from .seeding import derive_seed, generator_for, seeded_init


class StackError(RuntimeError):
    """Cascade misuse or checkpoint damage."""


@dataclass
class ScalePair:
    """One rung of the cascade: a generator/critic pair plus its geometry."""

    generator: PatchGenerator
    critic: PatchCritic
    scale_index: int
    patch_dims: tuple[int, int]
    context_dims: tuple[int, int]
    noise_amp: float = 1.0


def forward_scale(pair: ScalePair, z: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
    """One cascade step: prior plus a bounded residual of (amp·z + prior).

    z is unit-amplitude noise; the pair's noise_amp scales it here. The prior
    must already be upsampled to this scale's patch dims.
    """
    h, w = pair.patch_dims
    if prior.shape[-2:] != (h, w):
        raise StackError(
            f"prior dims {tuple(prior.shape[-2:])} do not match scale {pair.scale_index} "
            f"patch dims {(h, w)}"
        )
    if z.shape != prior.shape:
        raise StackError(f"noise dims {tuple(z.shape)} do not match prior {tuple(prior.shape)}")
    residual = pair.generator((pair.noise_amp * z + prior).unsqueeze(0)).squeeze(0)
    return (prior + residual).clamp(-1.0, 1.0)


def sample_noise(dims: tuple[int, ...], amp: float, seed: int) -> torch.Tensor:
    """Standard-normal noise scaled by amp, reproducible from seed."""
    if amp < 0:
        raise StackError(f"noise amplitude must be >= 0, got {amp}")
    g = torch.Generator(device="cpu")
    g.manual_seed(seed & (2**63 - 1))
    return torch.randn(*dims, generator=g) * amp


@dataclass
class GeneratorStack:
    """Ordered coarse-to-fine ScalePairs over a pyramid, with the fixed
    reconstruction noise and per-scale freeze flags.
    """

    pairs: list[ScalePair]
    pyramid: ScalePyramid
    recon_noise: list[torch.Tensor]
    frozen: list[bool]
    config_snapshot: dict = field(default_factory=dict)
    # update odometers, bumped by the trainer
    critic_updates: int = 0
    generator_updates: int = 0

    @property
    def K(self) -> int:
        return len(self.pairs) - 1

    def pair_checksums(self) -> list[dict]:
        return [
            {"generator": param_checksum(p.generator), "critic": param_checksum(p.critic)}
            for p in self.pairs
        ]


def init_stack(
    pyramid: ScalePyramid, seed: int, channels: int = 3, width: int = 32,
    config_snapshot: dict | None = None,
) -> GeneratorStack:
    """Fresh unfrozen stack matching the pyramid's level geometry.

    Parameter init and the scale-0 reconstruction noise draw are both derived
    from seed, so two stacks built with the same arguments are identical.
    """
    pairs, recon = [], []
    for i, lvl in enumerate(pyramid.levels):
        with seeded_init(seed, "init", i):
            g = PatchGenerator(channels, width)
            d = PatchCritic(channels, width)
        pairs.append(
            ScalePair(g, d, i, lvl.patch_dims, lvl.context_dims, noise_amp=1.0 if i == 0 else 0.0)
        )
        dims = (channels,) + lvl.patch_dims
        if i == 0:
            recon.append(sample_noise(dims, 1.0, derive_seed(seed, "recon", 0)))
        else:
            recon.append(torch.zeros(dims))
    return GeneratorStack(
        pairs=pairs,
        pyramid=pyramid,
        recon_noise=recon,
        frozen=[False] * len(pairs),
        config_snapshot=dict(config_snapshot or {}),
    )


def cascade(
    stack: GeneratorStack, noises: list[torch.Tensor], upto: int | None = None
) -> torch.Tensor:
    """Run scales 0..upto with the given per-scale unit noises."""
    upto = stack.K if upto is None else upto
    channels = stack.recon_noise[0].shape[0]
    out = torch.zeros((channels,) + stack.pairs[0].patch_dims)
    for i in range(upto + 1):
        if i > 0:
            out = upsample(out, *stack.pairs[i].patch_dims)
        out = forward_scale(stack.pairs[i], noises[i], out)
    return out


def reconstruction_prior(stack: GeneratorStack, i: int) -> torch.Tensor:
    """Upsampled reconstruction-path output of scales 0..i-1 (zeros for i=0)."""
    channels = stack.recon_noise[0].shape[0]
    if i == 0:
        return torch.zeros((channels,) + stack.pairs[0].patch_dims)
    with torch.no_grad():
        out = cascade(stack, stack.recon_noise, upto=i - 1)
    return upsample(out, *stack.pairs[i].patch_dims)


def random_noises(stack: GeneratorStack, seed: int, tag: str = "generate") -> list[torch.Tensor]:
    """Per-scale unit-amplitude noise draws from named streams of seed."""
    return [
        sample_noise(stack.recon_noise[i].shape, 1.0, derive_seed(seed, tag, i))
        for i in range(stack.K + 1)
    ]


def generate(stack: GeneratorStack, seed: int, mode: str = "random") -> torch.Tensor:
    """Full-cascade patch sample (random mode) or the reconstruction path.

    Requires a fully frozen (trained) stack; deterministic given (seed, mode).
    """
    if not all(stack.frozen):
        pending = [i for i, f in enumerate(stack.frozen) if not f]
        raise StackError(f"cannot generate: scales {pending} not trained/frozen")
    if mode == "random":
        noises = random_noises(stack, seed)
    elif mode == "reconstruction":
        noises = stack.recon_noise
    else:
        raise StackError(f"unknown generation mode {mode!r}")
    with torch.no_grad():
        return cascade(stack, noises)


# --- persistence ---

_FORMAT_VERSION = 1


def config_hash(snapshot: dict) -> str:
    return hashlib.sha256(json.dumps(snapshot, sort_keys=True).encode()).hexdigest()[:16]


def save_stack(stack: GeneratorStack, path) -> None:
    """One subdirectory per scale plus a top-level JSON manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(stack.pairs):
        d = root / f"scale_{i:02d}"
        d.mkdir(exist_ok=True)
        torch.save(pair.generator.state_dict(), d / "generator.pt")
        torch.save(pair.critic.state_dict(), d / "critic.pt")
        torch.save(stack.recon_noise[i], d / "recon_noise.pt")
    head_weight = stack.pairs[0].generator.head[0].weight
    manifest = {
        "format_version": _FORMAT_VERSION,
        "K": stack.K,
        "coarse_ratio": stack.pyramid.coarse_ratio,
        "levels": stack.pyramid.level_sizes(),
        # network geometry read off the weights, so reload never guesses
        "net_width": head_weight.shape[0],
        "net_channels": head_weight.shape[1],
        "noise_amps": [p.noise_amp for p in stack.pairs],
        "frozen": list(stack.frozen),
        "critic_updates": stack.critic_updates,
        "generator_updates": stack.generator_updates,
        "config_snapshot": stack.config_snapshot,
        "config_hash": config_hash(stack.config_snapshot),
        "checksums": stack.pair_checksums(),
    }
    (root / "stack.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    # pyramid pixel data rides along so a reloaded stack can keep training
    torch.save(
        {
            "levels": [
                {"patch": l.patch, "context": l.context, "offset": l.offset.to_dict()}
                for l in stack.pyramid.levels
            ]
        },
        root / "pyramid.pt",
    )


def load_stack(path, expect_config_hash: str | None = None) -> GeneratorStack:
    """Inverse of save_stack; verifies parameter checksums and, when given,
    the config hash. Any damage surfaces as StackError, never a partial stack.
    """
    from .imaging import PatchRegion, PyramidLevel  # local import avoids cycle noise

    root = Path(path)
    manifest_path = root / "stack.json"
    if not manifest_path.is_file():
        raise StackError(f"no stack manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise StackError(f"corrupt stack manifest {manifest_path}: {e}") from e
    if manifest.get("format_version") != _FORMAT_VERSION:
        raise StackError(
            f"checkpoint format {manifest.get('format_version')} != supported {_FORMAT_VERSION}"
        )
    stored_hash = manifest.get("config_hash")
    recomputed = config_hash(manifest.get("config_snapshot", {}))
    if stored_hash != recomputed:
        raise StackError(f"config snapshot tampered: hash {recomputed} != stored {stored_hash}")
    if expect_config_hash is not None and stored_hash != expect_config_hash:
        theirs = manifest.get("config_snapshot", {})
        raise StackError(
            f"config hash mismatch: expected {expect_config_hash}, checkpoint has "
            f"{stored_hash}; checkpoint config: {json.dumps(theirs, sort_keys=True)}"
        )

    try:
        pyr_data = torch.load(root / "pyramid.pt", weights_only=True)
        levels = [
            PyramidLevel(d["patch"], d["context"], PatchRegion.from_dict(d["offset"]))
            for d in pyr_data["levels"]
        ]
        pyramid = ScalePyramid(
            levels=levels, coarse_ratio=manifest["coarse_ratio"], K=manifest["K"]
        )
        channels = int(manifest["net_channels"])
        width = int(manifest["net_width"])
        pairs, recon = [], []
        for i, lvl in enumerate(pyramid.levels):
            d = root / f"scale_{i:02d}"
            g = PatchGenerator(channels, width)
            g.load_state_dict(torch.load(d / "generator.pt", weights_only=True))
            c = PatchCritic(channels, width)
            c.load_state_dict(torch.load(d / "critic.pt", weights_only=True))
            pairs.append(
                ScalePair(
                    g, c, i, lvl.patch_dims, lvl.context_dims,
                    noise_amp=float(manifest["noise_amps"][i]),
                )
            )
            recon.append(torch.load(d / "recon_noise.pt", weights_only=True))
    except StackError:
        raise
    except Exception as e:
        raise StackError(f"corrupt or truncated checkpoint under {root}: {e}") from e

    stack = GeneratorStack(
        pairs=pairs,
        pyramid=pyramid,
        recon_noise=recon,
        frozen=[bool(f) for f in manifest["frozen"]],
        config_snapshot=manifest.get("config_snapshot", {}),
        critic_updates=int(manifest.get("critic_updates", 0)),
        generator_updates=int(manifest.get("generator_updates", 0)),
    )
    actual = stack.pair_checksums()
    if actual != manifest["checksums"]:
        bad = [i for i, (a, b) in enumerate(zip(actual, manifest["checksums"])) if a != b]
        raise StackError(f"parameter checksum mismatch at scales {bad}; checkpoint damaged")
    return stack
