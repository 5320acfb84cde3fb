"""Command-line surface: train, generate, evaluate, attention, report,
registry. Every run is reproducible from (config, seed); outputs live under
the chosen run directory. Exit codes: 0 success, 2 validation error,
3 runtime failure.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import torch

from . import __version__
from .config import ConfigError, describe_keys, load_config_file, resolve_config
from .evaluation import (
    AttackReport, CleanMisclassification, EvaluationError, conspicuousness_comparison,
    diff_distribution, pgd_attack, sample_patches, transfer_matrix,
)
from .imaging import (
    ImagingError, PatchRegion, apply_patch, build_pyramid, crop_patch_and_context,
    load_image, save_image,
)
from .losses import LossError
from .saliency import saliency_map
from .sensitivity import SensitivityError, attention_overlay, compute_attention, select_location
from .stack import StackError, generate, load_stack
from .training import TrainingError, train_all
from .victims import VictimError, build_registry, list_models, load_model

VALIDATION_ERRORS = (ConfigError, ImagingError, SensitivityError, LossError, click.UsageError)
RUNTIME_ERRORS = (TrainingError, StackError, EvaluationError, VictimError)


def _run(fn):
    try:
        fn()
    except VALIDATION_ERRORS as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(2)
    except RUNTIME_ERRORS as e:
        click.echo(f"failed: {e}", err=True)
        sys.exit(3)


@click.group()
@click.version_option(__version__)
def main():
    """Inconspicuous adversarial patch synthesis and evaluation."""


@main.command("config-keys")
def config_keys():
    """Print every recognized config key with its type."""
    click.echo(describe_keys())


@main.command()
@click.option("--config", "config_path", type=click.Path(), help="YAML config file.")
@click.option("--image", "image_path", type=click.Path(), required=True)
@click.option("--model", "model_id", required=True, help="victim model id from the registry")
@click.option("--registry", "registry_path", type=click.Path(), default=None,
              help="registry root; defaults to $QUIETPATCH_REGISTRY")
@click.option("--run-dir", type=click.Path(), required=True)
@click.option("--seed", type=int, default=None)
@click.option("--epochs", "epochs_per_scale", type=int, default=None)
@click.option("--patch-size", type=int, default=None, help="square patch side")
@click.option("--scales", "K", type=int, default=None, help="finest scale index K")
@click.option("--dry-run", is_flag=True, help="print the resolved plan and exit")
def train(config_path, image_path, model_id, registry_path, run_dir, seed,
          epochs_per_scale, patch_size, K, dry_run):
    """Train a patch generator stack against one image and one victim."""

    def body():
        file_values = load_config_file(config_path) if config_path else {}
        overrides = {"seed": seed, "epochs_per_scale": epochs_per_scale, "K": K}
        if patch_size is not None:
            overrides["patch_h"] = patch_size
            overrides["patch_w"] = patch_size
        cfg = resolve_config(file_values, overrides)
        if not Path(image_path).is_file():
            raise ConfigError(f"image {image_path} does not exist")
        x = load_image(image_path)
        model = load_model(model_id, registry_path)

        if dry_run:
            heat = compute_attention(model, x)
            region = select_location(heat, cfg.patch_h, cfg.patch_w)
            patch, context, ctx_region = crop_patch_and_context(x, region, cfg.context_scale)
            offset = PatchRegion(region.top - ctx_region.top, region.left - ctx_region.left,
                                 region.h, region.w)
            pyramid = build_pyramid(patch, context, cfg.K, cfg.coarse_ratio,
                                    patch_offset=offset, min_context_side=cfg.min_context_side)
            plan = {
                "config": cfg.snapshot(),
                "region": region.to_dict(),
                "context_region": ctx_region.to_dict(),
                "pyramid": pyramid.level_sizes(),
            }
            click.echo(json.dumps(plan, indent=2, sort_keys=True))
            return

        rd = Path(run_dir)
        rd.mkdir(parents=True, exist_ok=True)
        save_image(x, rd / "input.png", metadata={"source": str(image_path)})
        _, manifest = train_all(x, model, cfg, run_dir=rd)
        click.echo(f"run complete: {rd} (id {manifest['run_id']})")

    _run(body)


def _load_run(run_dir):
    rd = Path(run_dir)
    manifest_path = rd / "manifest.json"
    if not manifest_path.is_file():
        raise ConfigError(f"{rd} is not a run directory (no manifest.json)")
    manifest = json.loads(manifest_path.read_text())
    stack = load_stack(rd / "stack", expect_config_hash=manifest["config_hash"])
    x = load_image(rd / "input.png")
    region = PatchRegion.from_dict(manifest["region"])
    return rd, manifest, stack, x, region


@main.command("generate")
@click.option("--run-dir", type=click.Path(), required=True)
@click.option("-n", "count", type=int, default=1)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), default=None, help="default: RUN_DIR/samples")
def generate_cmd(run_dir, count, seed, out):
    """Sample patches from a trained run; writes patch and composite PNGs."""

    def body():
        from .seeding import derive_seed

        rd, manifest, stack, x, region = _load_run(run_dir)
        out_dir = Path(out) if out else rd / "samples"
        out_dir.mkdir(parents=True, exist_ok=True)
        for s in range(count):
            patch_seed = derive_seed(seed, "sample", s)
            patch = generate(stack, patch_seed)
            composite = apply_patch(x, patch, region)
            meta = {"seed": seed, "sample": s, "region": region.to_dict()}
            save_image(patch, out_dir / f"patch_s{seed}_{s:04d}.png", metadata=meta)
            save_image(composite, out_dir / f"composite_s{seed}_{s:04d}.png", metadata=meta)
        click.echo(f"wrote {count} patch/composite pairs under {out_dir}")

    _run(body)


@main.command()
@click.option("--run-dir", type=click.Path(), required=True)
@click.option("--models", "model_ids", multiple=True,
              help="registry ids to evaluate; default: all registered")
@click.option("--registry", "registry_path", type=click.Path(), default=None)
@click.option("--n-samples", type=int, default=100)
@click.option("--seed", type=int, default=0)
@click.option("--pgd-eps", type=float, default=8.0, help="PGD budget in 8-bit units")
@click.option("--jobs", type=int, default=None, help="worker threads; default: cpu count")
def evaluate(run_dir, model_ids, registry_path, n_samples, seed, pgd_eps, jobs):
    """Success rates, transfer, conspicuousness, and diff histograms."""

    def body():
        from concurrent.futures import ThreadPoolExecutor
        import os

        from .figures import save_heatmap, save_histogram

        rd, manifest, stack, x, region = _load_run(run_dir)
        surrogate = load_model(manifest["model"], registry_path)
        ids = list(model_ids) if model_ids else sorted(list_models(registry_path))
        models = [surrogate if i == surrogate.identifier else load_model(i, registry_path)
                  for i in ids]

        patches = sample_patches(stack, n_samples, seed)
        n_jobs = jobs or os.cpu_count() or 1

        def rate_for(model):
            from .evaluation import success_rate
            return model.identifier, success_rate(
                stack, model, x, region, n_samples, seed, patches=patches
            )

        if n_jobs > 1 and len(models) > 1:
            with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                rates = dict(pool.map(rate_for, models))
        else:
            rates = dict(map(rate_for, models))

        comparison = conspicuousness_comparison(x, patches[0], region)
        composite = apply_patch(x, patches[0], region)
        eps_internal = pgd_eps * 2.0 / 255.0
        adv = pgd_attack(surrogate, x, epsilon=pgd_eps)
        summaries = {
            "patch": diff_distribution(x, composite, region=region, eps=eps_internal),
            "pgd": diff_distribution(x, adv, eps=eps_internal),
        }

        _, H, W = x.shape
        report = AttackReport(
            run_id=manifest["run_id"],
            config_hash=manifest["config_hash"],
            victim_models=ids,
            n_samples=n_samples,
            patch_area_fraction=region.area / (H * W),
            success_rates=rates,
            conspicuousness=[comparison],
            diff_summaries=summaries,
            notes={"surrogate": surrogate.identifier, "seed": seed,
                   "pgd_eps_8bit": pgd_eps, "pgd_eps_internal": eps_internal},
        )
        out_dir = rd / "evaluation"
        artifacts = report.save(out_dir)
        save_heatmap(saliency_map(composite), out_dir / "saliency_composite.png",
                     "composite saliency")
        save_histogram(summaries["patch"], out_dir / "diff_patch.png", "patch differences")
        save_histogram(summaries["pgd"], out_dir / "diff_pgd.png", "PGD differences")
        click.echo(json.dumps({"success_rates": rates, "artifacts": artifacts}, indent=2,
                              sort_keys=True))

    _run(body)


@main.command()
@click.option("--image", "image_path", type=click.Path(), required=True)
@click.option("--model", "model_id", required=True)
@click.option("--registry", "registry_path", type=click.Path(), default=None)
@click.option("--patch-size", type=int, default=8)
@click.option("--out", type=click.Path(), required=True, help="output directory")
def attention(image_path, model_id, registry_path, patch_size, out):
    """Sensitivity heatmap plus the chosen patch region for an image."""

    def body():
        if not Path(image_path).is_file():
            raise ConfigError(f"image {image_path} does not exist")
        x = load_image(image_path)
        model = load_model(model_id, registry_path)
        heat = compute_attention(model, x)
        region = select_location(heat, patch_size, patch_size)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_image(attention_overlay(x, heat, region), out_dir / "attention_overlay.png",
                   metadata={"model": model.identifier, "region": region.to_dict()})
        record = {"model": model.identifier, "region": region.to_dict(),
                  "map_max": float(heat.values.max())}
        (out_dir / "region.json").write_text(json.dumps(record, indent=2, sort_keys=True))
        click.echo(json.dumps(record, sort_keys=True))

    _run(body)


@main.command()
@click.option("--run-dir", type=click.Path(), required=True)
def report(run_dir):
    """Re-emit figures and CSV from an existing evaluation report."""

    def body():
        from .figures import save_histogram

        rd = Path(run_dir)
        report_path = rd / "evaluation" / "report.json"
        if not report_path.is_file():
            raise ConfigError(f"no evaluation report under {rd}; run evaluate first")
        data = json.loads(report_path.read_text())
        rep = AttackReport(**data)
        artifacts = rep.save(rd / "evaluation")
        for kind, summary in rep.diff_summaries.items():
            save_histogram(summary, rd / "evaluation" / f"diff_{kind}.png", f"{kind} differences")
        click.echo(json.dumps(artifacts, indent=2, sort_keys=True))

    _run(body)


@main.command()
@click.option("--root", type=click.Path(), required=True)
@click.option("--seed", type=int, default=7)
def registry(root, seed):
    """Train and register the desk-scale victim classifiers."""

    def body():
        manifest = build_registry(root, seed=seed)
        rows = {k: v["test_accuracy"] for k, v in manifest["models"].items()}
        click.echo(json.dumps(rows, indent=2, sort_keys=True))

    _run(body)


if __name__ == "__main__":
    main()
