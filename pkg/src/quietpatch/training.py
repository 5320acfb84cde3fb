"""Sequential coarse-to-fine min-max training of the generator stack
against one image and one victim classifier.

Per scale: epochs of S_D critic steps (GAN term only) followed by S_G
generator steps on the composite objective; the scale is frozen afterwards
and never touched again. All randomness is drawn from named streams of the
config seed, so identical configs give identical parameters, and a resumed
run finishes bit-identical to an uninterrupted one.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from .imaging import (
    PatchRegion, apply_patch, build_pyramid, crop_patch_and_context, upsample,
)
from .losses import (
    LossWeights, PrintablePalette, attack_loss, critic_loss, generator_gan_term,
    generator_loss, nps_loss, reconstruction_loss, tv_loss,
)
from .seeding import derive_seed, generator_for
from .sensitivity import compute_attention, select_location
from .stack import (
    GeneratorStack, StackError, cascade, config_hash, forward_scale, init_stack,
    load_stack, random_noises, reconstruction_prior, sample_noise, save_stack,
)
from .victims import VictimModel, predict


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs_per_scale: int = 2000
    s_d: int = 3
    s_g: int = 3
    learning_rate: float = 0.0005
    betas: tuple[float, float] = (0.5, 0.999)
    weights: LossWeights = field(default_factory=LossWeights)
    K: int = 3
    coarse_ratio: float = 0.75
    seed: int = 0
    targeted: bool = False
    target_class: int | None = None
    patch_h: int = 40
    patch_w: int = 40
    context_scale: float = 2.0
    gan_mode: str = "wgan-gp"
    noise_amp_scale: float = 0.1
    width: int = 32
    min_context_side: int = 11
    augment_real: bool = False
    palette_path: str | None = None

    def __post_init__(self):
        if self.epochs_per_scale < 1:
            raise TrainingError(f"epochs_per_scale must be >= 1, got {self.epochs_per_scale}")
        if self.s_d < 1 or self.s_g < 1:
            raise TrainingError(f"inner step counts must be >= 1, got S_D={self.s_d} S_G={self.s_g}")
        if self.learning_rate <= 0:
            raise TrainingError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.targeted and self.target_class is None:
            raise TrainingError("targeted mode needs target_class")

    def snapshot(self) -> dict:
        d = {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in self.__dict__.items()
            if k != "weights"
        }
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_snapshot(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        weights = LossWeights.from_dict(d.pop("weights"))
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(weights=weights, **d)


def _nonfinite(*vals) -> bool:
    return any(
        not torch.isfinite(v.detach() if isinstance(v, torch.Tensor) else torch.as_tensor(float(v))).all()
        for v in vals
    )


def train_scale(
    stack: GeneratorStack,
    i: int,
    model: VictimModel,
    x: torch.Tensor,
    region: PatchRegion,
    cfg: TrainConfig,
    palette: PrintablePalette | None = None,
) -> list[dict]:
    """Run the min-max game at scale i and freeze it. Returns per-step log rows.

    The victim model is read-only here: its parameters carry no gradients and
    no optimizer ever sees them. The attack term scores the current fake
    patch upsampled to full resolution and applied to x at region.
    """
    if i < 0 or i > stack.K:
        raise TrainingError(f"scale {i} out of range 0..{stack.K}")
    if any(not stack.frozen[j] for j in range(i)):
        raise TrainingError(f"cannot train scale {i}: earlier scales not frozen")
    if stack.frozen[i]:
        raise TrainingError(f"scale {i} already frozen")
    if cfg.weights.delta_print > 0 and palette is None:
        palette = (
            PrintablePalette.from_file(cfg.palette_path)
            if cfg.palette_path
            else PrintablePalette.default()
        )

    pair = stack.pairs[i]
    lvl = stack.pyramid.levels[i]
    p_i, c_i, offset = lvl.patch, lvl.context, lvl.offset

    # fixed per scale: the reconstruction prior and the noise amplitude
    prior_rec = reconstruction_prior(stack, i)
    if i == 0:
        pair.noise_amp = 1.0
    else:
        rmse = float(torch.sqrt(((prior_rec - p_i) ** 2).mean()))
        pair.noise_amp = cfg.noise_amp_scale * rmse

    try:
        logits, true_class = predict(model, x)
    except Exception as e:  # victim failure surfaces with context
        raise TrainingError(f"victim model failed on the clean image: {e}") from e

    g_opt = torch.optim.Adam(pair.generator.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    d_opt = torch.optim.Adam(pair.critic.parameters(), lr=cfg.learning_rate, betas=cfg.betas)

    def snapshot_states():
        return (
            copy.deepcopy(pair.generator.state_dict()),
            copy.deepcopy(pair.critic.state_dict()),
        )

    def fresh_fake(stream: str, epoch: int, step: int) -> torch.Tensor:
        # fresh noise through every scale up to i, frozen lower scales no-grad
        if i > 0:
            noises = [
                sample_noise(
                    stack.recon_noise[j].shape, 1.0,
                    derive_seed(cfg.seed, "noise", stream, i, epoch, step, j),
                )
                for j in range(i)
            ]
            with torch.no_grad():
                prior = upsample(cascade(stack, noises, upto=i - 1), *pair.patch_dims)
        else:
            prior = torch.zeros_like(p_i)
        z = sample_noise(
            p_i.shape, 1.0, derive_seed(cfg.seed, "noise", stream, i, epoch, step, i)
        )
        return forward_scale(pair, z, prior)

    log: list[dict] = []
    last_good = snapshot_states()
    for epoch in range(cfg.epochs_per_scale):
        for step in range(cfg.s_d):
            d_opt.zero_grad()
            fake = fresh_fake("d", epoch, step).detach()
            real = p_i
            if cfg.augment_real:
                flip_gen = generator_for(cfg.seed, "aug", i, epoch, step)
                if torch.rand((), generator=flip_gen) < 0.5:
                    real = torch.flip(real, dims=[2])
            d_loss = critic_loss(
                pair.critic, (real, c_i), (fake, c_i),
                gp_coef=cfg.weights.gp_coef, offset=offset, gan_mode=cfg.gan_mode,
                rng=generator_for(cfg.seed, "gp", i, epoch, step),
            )
            if _nonfinite(d_loss):
                _restore(pair, last_good)
                raise TrainingError(
                    f"non-finite critic loss at scale {i} epoch {epoch} step {step}; "
                    f"restored last epoch-boundary parameters"
                )
            d_loss.backward()
            d_opt.step()
            stack.critic_updates += 1
            log.append({"scale": i, "epoch": epoch, "step": step, "role": "critic",
                        "loss": float(d_loss.detach())})

        for step in range(cfg.s_g):
            g_opt.zero_grad()
            fake = fresh_fake("g", epoch, step)
            gan = generator_gan_term(pair.critic, fake, c_i, offset, cfg.gan_mode)
            up = upsample(fake, region.h, region.w)
            try:
                attack_logits = model.net(apply_patch(x, up, region).unsqueeze(0)).squeeze(0)
            except Exception as e:
                raise TrainingError(f"victim model failed during the attack term: {e}") from e
            adv = attack_loss(
                attack_logits, true_class, kappa=cfg.weights.kappa,
                targeted=cfg.targeted, target_class=cfg.target_class if cfg.targeted else None,
            )
            rec_out = forward_scale(pair, stack.recon_noise[i], prior_rec)
            rec = reconstruction_loss(rec_out, p_i)
            tv = tv_loss(fake)
            nps = nps_loss(fake, palette) if cfg.weights.delta_print > 0 else torch.zeros(())
            total = generator_loss(gan, adv, rec, tv, nps, cfg.weights)
            if _nonfinite(total):
                _restore(pair, last_good)
                raise TrainingError(
                    f"non-finite generator loss at scale {i} epoch {epoch} step {step}; "
                    f"restored last epoch-boundary parameters"
                )
            total.backward()
            g_opt.step()
            stack.generator_updates += 1
            log.append({
                "scale": i, "epoch": epoch, "step": step, "role": "generator",
                "loss": float(total.detach()), "gan": float(gan.detach()),
                "attack": float(adv.detach()), "reconstruction": float(rec.detach()),
                "tv": float(tv.detach()), "printability": float(nps.detach()),
            })
        last_good = snapshot_states()

    stack.frozen[i] = True
    for p in pair.generator.parameters():
        p.requires_grad_(False)
    for p in pair.critic.parameters():
        p.requires_grad_(False)
    return log


def _restore(pair, states) -> None:
    g_state, d_state = states
    pair.generator.load_state_dict(g_state)
    pair.critic.load_state_dict(d_state)


def image_hash(x: torch.Tensor) -> str:
    return hashlib.sha256(x.detach().cpu().contiguous().numpy().tobytes()).hexdigest()[:16]


def write_log_csv(rows: list[dict], path) -> None:
    if not rows:
        return
    fields = ["scale", "epoch", "step", "role", "loss", "gan", "attack",
              "reconstruction", "tv", "printability"]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields, restval="")
        writer.writeheader()
        writer.writerows(rows)


def train_all(
    x: torch.Tensor,
    model: VictimModel,
    cfg: TrainConfig,
    run_dir=None,
) -> tuple[GeneratorStack, dict]:
    """Full pipeline: sensitivity map, location choice, crop, pyramid, then
    scale-by-scale training. Returns (frozen stack, run manifest).

    With run_dir given, the stack is checkpointed after every scale and an
    interrupted run resumes from the last completed scale; resumed runs
    produce parameters identical to uninterrupted ones.
    """
    t_start = time.time()
    run_dir = Path(run_dir) if run_dir is not None else None
    victim_checksum = model.checksum()

    heat = compute_attention(model, x)
    region = select_location(heat, cfg.patch_h, cfg.patch_w)
    patch, context, ctx_region = crop_patch_and_context(x, region, cfg.context_scale)
    offset = PatchRegion(
        region.top - ctx_region.top, region.left - ctx_region.left, region.h, region.w
    )
    pyramid = build_pyramid(
        patch, context, cfg.K, cfg.coarse_ratio,
        patch_offset=offset, min_context_side=cfg.min_context_side,
    )
    snapshot = cfg.snapshot()

    stack = None
    if run_dir is not None and (run_dir / "stack" / "stack.json").is_file():
        try:
            stack = load_stack(run_dir / "stack", expect_config_hash=config_hash(snapshot))
        except StackError as e:
            raise TrainingError(f"cannot resume from {run_dir}: {e}") from e
    if stack is None:
        stack = init_stack(pyramid, cfg.seed, x.shape[0], cfg.width, config_snapshot=snapshot)

    manifest = {
        "run_id": f"{config_hash(snapshot)}-{image_hash(x)}",
        "config": snapshot,
        "config_hash": config_hash(snapshot),
        "image_hash": image_hash(x),
        "model": model.identifier,
        "victim_checksum_before": victim_checksum,
        "region": region.to_dict(),
        "context_region": ctx_region.to_dict(),
        "pyramid": pyramid.level_sizes(),
        "stages": {},
        "artifacts": {},
    }

    for i in range(cfg.K + 1):
        if stack.frozen[i]:
            manifest["stages"][f"scale_{i}"] = {"status": "resumed"}
            continue
        t0 = time.time()
        try:
            log = train_scale(stack, i, model, x, region, cfg)
        except TrainingError:
            if run_dir is not None:
                save_stack(stack, run_dir / "stack")
                manifest["stages"][f"scale_{i}"] = {"status": "failed"}
                _write_manifest(manifest, run_dir)
            raise
        manifest["stages"][f"scale_{i}"] = {
            "status": "complete",
            "noise_amp": stack.pairs[i].noise_amp,
            "seconds": round(time.time() - t0, 3),
        }
        if run_dir is not None:
            save_stack(stack, run_dir / "stack")
            log_path = run_dir / "logs" / f"scale_{i}.csv"
            write_log_csv(log, log_path)
            manifest["artifacts"][f"log_scale_{i}"] = str(log_path)
            _write_manifest(manifest, run_dir)

    if model.checksum() != victim_checksum:
        raise TrainingError("victim model parameters changed during training")
    manifest["victim_checksum_after"] = victim_checksum
    manifest["seconds_total"] = round(time.time() - t_start, 3)
    if run_dir is not None:
        manifest["artifacts"]["stack"] = str(run_dir / "stack")
        _write_manifest(manifest, run_dir)
    return stack, manifest


def _write_manifest(manifest: dict, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
