"""Victim classifiers: a procedural desk-scale dataset, two small CNN
architectures, training with an accuracy floor, and a file registry exposing
a uniform predict/gradient interface.

Full-scale attacks target large pretrained classifiers; here 10-class 32x32
shape images stand in (generated locally, no downloads), and the interface
stays dimension-agnostic so larger models can be registered.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .networks import param_checksum
from .seeding import derive_seed, seeded_init

ENV_REGISTRY = "QUIETPATCH_REGISTRY"

CLASS_NAMES = (
    "circle", "square", "triangle", "h_stripes", "v_stripes",
    "checker", "ring", "cross", "diag_stripes", "dots",
)


class VictimError(RuntimeError):
    """Registry misuse, missing capability, or a failed training floor."""


# --- dataset ---

def _draw_colors(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    bg = rng.uniform(0.0, 1.0, 3)
    while True:
        fg = rng.uniform(0.0, 1.0, 3)
        if np.linalg.norm(fg - bg) >= 0.30:  # separable, but not trivially so
            return fg, bg


def _shape_mask(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if cls == 0:  # circle
        cy, cx = rng.integers(12, 21, 2)
        r = rng.integers(6, 13)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if cls == 1:  # square
        side = rng.integers(10, 21)
        top = rng.integers(0, size - side + 1)
        left = rng.integers(0, size - side + 1)
        return (yy >= top) & (yy < top + side) & (xx >= left) & (xx < left + side)
    if cls == 2:  # triangle, apex up
        h = rng.integers(12, 22)
        apex_y = rng.integers(2, size - h)
        apex_x = rng.integers(h // 2 + 1, size - h // 2 - 1)
        rel = yy - apex_y
        return (rel >= 0) & (rel < h) & (np.abs(xx - apex_x) <= rel // 2)
    if cls == 3:  # horizontal stripes
        period = int(rng.choice([4, 6, 8]))
        phase = rng.integers(0, period)
        return ((yy + phase) % period) < period // 2
    if cls == 4:  # vertical stripes
        period = int(rng.choice([4, 6, 8]))
        phase = rng.integers(0, period)
        return ((xx + phase) % period) < period // 2
    if cls == 5:  # checkerboard
        cell = int(rng.choice([4, 8]))
        py, px = rng.integers(0, cell, 2)
        return (((yy + py) // cell + (xx + px) // cell) % 2) == 0
    if cls == 6:  # ring
        cy, cx = rng.integers(13, 20, 2)
        r_out = rng.integers(8, 14)
        r_in = r_out - rng.integers(3, 6)
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= r_out * r_out) & (d2 > r_in * r_in)
    if cls == 7:  # cross
        cy, cx = rng.integers(12, 21, 2)
        t = rng.integers(2, 5)
        arm = rng.integers(9, 14)
        horiz = (np.abs(yy - cy) <= t) & (np.abs(xx - cx) <= arm)
        vert = (np.abs(xx - cx) <= t) & (np.abs(yy - cy) <= arm)
        return horiz | vert
    if cls == 8:  # diagonal stripes
        period = int(rng.choice([6, 8, 10]))
        phase = rng.integers(0, period)
        return ((yy + xx + phase) % period) < period // 2
    if cls == 9:  # dot grid
        spacing = int(rng.choice([7, 8, 9]))
        py, px = rng.integers(0, spacing, 2)
        r = rng.integers(2, 4)
        near_y = (yy + py) % spacing
        near_x = (xx + px) % spacing
        dy = np.minimum(near_y, spacing - near_y)
        dx = np.minimum(near_x, spacing - near_x)
        return dy * dy + dx * dx <= r * r
    raise VictimError(f"unknown class {cls}")


def make_shape_image(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One (size, size, 3) float image in [0,1]: colored shape on a colored
    ground, with a low-amplitude background gradient and pixel noise keeping
    the task off the trivially-separable regime.
    """
    fg, bg = _draw_colors(rng)
    mask = _shape_mask(cls, size, rng)
    img = np.where(mask[:, :, None], fg, bg)
    ramp = np.linspace(-1.0, 1.0, size)
    direction = rng.integers(0, 2)
    grad = ramp[:, None] if direction == 0 else ramp[None, :]
    img = img + rng.uniform(-0.12, 0.12) * grad[:, :, None]
    img = img + rng.normal(0.0, 0.08, img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 4000
    n_test: int = 1000
    image_size: int = 32
    num_classes: int = 10
    seed: int = 2024


def build_dataset(spec: DatasetSpec) -> dict:
    """Procedural train/test splits as tensors in the [-1,1] convention."""
    out = {}
    for split, n in (("train", spec.n_train), ("test", spec.n_test)):
        imgs = np.empty((n, spec.image_size, spec.image_size, 3), dtype=np.float32)
        labels = np.empty(n, dtype=np.int64)
        for idx in range(n):
            cls = idx % spec.num_classes
            rng = np.random.default_rng(derive_seed(spec.seed, split, idx))
            imgs[idx] = make_shape_image(cls, spec.image_size, rng)
            labels[idx] = cls
        x = torch.from_numpy(imgs).permute(0, 3, 1, 2).contiguous() * 2.0 - 1.0
        out[split] = (x, torch.from_numpy(labels))
    return out


# --- architectures ---

class ConvNetA(nn.Module):
    """Pool-based batch-normalized conv net with a global-average head."""

    def __init__(self, num_classes: int = 10):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.BatchNorm2d(32), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.BatchNorm2d(64), nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
            nn.Conv2d(64, 128, 3, padding=1), nn.BatchNorm2d(128), nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(128, num_classes)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


class ConvNetB(nn.Module):
    """Strided conv net with a two-layer MLP head; deliberately a different
    family from ConvNetA (kernel 5, stride downsampling, no pooling).
    """

    def __init__(self, num_classes: int = 10):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 24, 5, stride=2, padding=2), nn.ReLU(inplace=True),
            nn.Conv2d(24, 48, 5, stride=2, padding=2), nn.ReLU(inplace=True),
        )
        self.head = nn.Sequential(
            nn.Flatten(), nn.Linear(48 * 8 * 8, 96), nn.ReLU(inplace=True),
            nn.Linear(96, num_classes),
        )

    def forward(self, x):
        return self.head(self.features(x))


ARCHITECTURES = {"convnet_a": ConvNetA, "convnet_b": ConvNetB}


# --- the uniform model wrapper ---

@dataclass
class VictimModel:
    identifier: str
    net: nn.Module
    input_dims: tuple[int, int, int]
    num_classes: int
    capabilities: frozenset = frozenset({"logits", "gradients"})
    provenance: str = ""
    test_accuracy: float | None = None

    def __post_init__(self):
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)

    def checksum(self) -> str:
        return param_checksum(self.net)


def predict(model: VictimModel, x: torch.Tensor):
    """Deterministic eval-mode logits plus argmax with lowest-index tie-break.

    A single (C,H,W) image gives (logits vector, class index); an (N,C,H,W)
    batch gives (logit rows, index array). Batched rows agree with per-image
    calls to kernel precision, not bitwise.
    """
    single = x.dim() == 3
    batch = x.unsqueeze(0) if single else x
    if tuple(batch.shape[1:]) != tuple(model.input_dims):
        raise VictimError(
            f"input dims {tuple(batch.shape[1:])} do not match model {model.input_dims}"
        )
    model.net.eval()
    with torch.no_grad():
        logits = model.net(batch)
    classes = np.argmax(logits.numpy(), axis=1)  # np.argmax: first max wins ties
    if single:
        return logits.squeeze(0), int(classes[0])
    return logits, classes


def gradients(model: VictimModel, x: torch.Tensor, class_index: int) -> torch.Tensor:
    """d logit[class_index] / d x for a single image."""
    if "gradients" not in model.capabilities:
        raise VictimError(f"model {model.identifier} has no gradient capability")
    if x.dim() != 3 or tuple(x.shape) != tuple(model.input_dims):
        raise VictimError(f"input dims {tuple(x.shape)} do not match model {model.input_dims}")
    if not 0 <= class_index < model.num_classes:
        raise VictimError(f"class {class_index} out of range")
    inp = x.detach().clone().requires_grad_(True)
    logits = model.net(inp.unsqueeze(0)).squeeze(0)
    (grad,) = torch.autograd.grad(logits[class_index], inp)
    return grad.detach()


# --- training ---

@dataclass(frozen=True)
class TrainRecipe:
    architecture: str = "convnet_a"
    epochs: int = 16
    batch_size: int = 64
    learning_rate: float = 2e-3
    seed: int = 7
    accuracy_floor: float = 0.80

    def hash(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def train_desk_classifier(spec: DatasetSpec, recipe: TrainRecipe) -> VictimModel:
    """Train one architecture on the shape dataset; rejects results under the
    accuracy floor with the training log attached.
    """
    if recipe.architecture not in ARCHITECTURES:
        raise VictimError(
            f"unknown architecture {recipe.architecture!r}; have {sorted(ARCHITECTURES)}"
        )
    data = build_dataset(spec)
    x_train, y_train = data["train"]
    x_test, y_test = data["test"]

    with seeded_init(recipe.seed, "victim", recipe.architecture):
        net = ARCHITECTURES[recipe.architecture](spec.num_classes)
    opt = torch.optim.Adam(net.parameters(), lr=recipe.learning_rate)
    order_gen = torch.Generator().manual_seed(derive_seed(recipe.seed, "order"))

    log = []
    net.train()
    for epoch in range(recipe.epochs):
        perm = torch.randperm(len(x_train), generator=order_gen)
        total, seen = 0.0, 0
        for start in range(0, len(perm), recipe.batch_size):
            idx = perm[start : start + recipe.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(net(x_train[idx]), y_train[idx])
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        log.append({"epoch": epoch, "train_loss": total / seen})

    net.eval()
    with torch.no_grad():
        correct = 0
        for start in range(0, len(x_test), 256):
            chunk = x_test[start : start + 256]
            pred = net(chunk).argmax(dim=1)
            correct += int((pred == y_test[start : start + 256]).sum())
    acc = correct / len(x_test)
    if acc < recipe.accuracy_floor:
        raise VictimError(
            f"{recipe.architecture} test accuracy {acc:.3f} under the "
            f"{recipe.accuracy_floor:.2f} floor; log: {log}"
        )
    ident = f"{recipe.architecture}-v1"
    return VictimModel(
        identifier=ident,
        net=net,
        input_dims=(3, spec.image_size, spec.image_size),
        num_classes=spec.num_classes,
        provenance=recipe.hash(),
        test_accuracy=acc,
    )


# --- registry ---

def registry_root(root=None) -> Path:
    if root is not None:
        return Path(root)
    env = os.environ.get(ENV_REGISTRY)
    if not env:
        raise VictimError(f"no registry root given and {ENV_REGISTRY} is unset")
    return Path(env)


def build_registry(
    root, spec: DatasetSpec | None = None, seed: int = 7,
    architectures: tuple = ("convnet_a", "convnet_b"),
) -> dict:
    """Train and persist every architecture; writes the registry manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    spec = spec or DatasetSpec()
    entries = {}
    for arch in architectures:
        model = train_desk_classifier(spec, TrainRecipe(architecture=arch, seed=seed))
        path = root / f"{model.identifier}.pt"
        torch.save(model.net.state_dict(), path)
        entries[model.identifier] = {
            "path": path.name,
            "architecture": arch,
            "input_dims": list(model.input_dims),
            "num_classes": model.num_classes,
            "class_names": list(CLASS_NAMES),
            "test_accuracy": model.test_accuracy,
            "provenance": model.provenance,
            "checksum": model.checksum(),
        }
    manifest = {"models": entries, "dataset": spec.__dict__}
    (root / "registry.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def list_models(root=None) -> dict:
    root = registry_root(root)
    manifest_path = root / "registry.json"
    if not manifest_path.is_file():
        raise VictimError(f"no registry manifest at {manifest_path}")
    return json.loads(manifest_path.read_text())["models"]


def load_model(identifier: str, root=None) -> VictimModel:
    """Registry lookup; verifies the stored parameter checksum."""
    root = registry_root(root)
    models = list_models(root)
    if identifier not in models:
        raise VictimError(f"model {identifier!r} not in registry; have {sorted(models)}")
    entry = models[identifier]
    net = ARCHITECTURES[entry["architecture"]](entry["num_classes"])
    net.load_state_dict(torch.load(root / entry["path"], weights_only=True))
    model = VictimModel(
        identifier=identifier,
        net=net,
        input_dims=tuple(entry["input_dims"]),
        num_classes=entry["num_classes"],
        provenance=entry.get("provenance", ""),
        test_accuracy=entry.get("test_accuracy"),
    )
    if entry.get("checksum") and model.checksum() != entry["checksum"]:
        raise VictimError(f"registry checksum mismatch for {identifier}; file damaged?")
    return model
