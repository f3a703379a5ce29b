"""Toy dataset generation and folder ingest.

The synthetic corpus is class-conditional procedural imagery (blobs, gratings,
checker tiles, smooth color fields), smooth enough for a small autoencoder to
reconstruct well while still giving the conditional denoiser distinct modes to
learn.  Everything is deterministic given the seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

CLASS_NAMES = ("blob", "grating", "checker", "rings")


@dataclass
class ImageDataset:
    """In-memory dataset: float32 images in [-1, 1], int64 labels."""

    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int

    def __len__(self) -> int:
        return self.images.shape[0]

    def batches(self, batch_size: int, generator: torch.Generator, epochs: int | None = None):
        """Yield shuffled (images, labels) batches, reshuffling each epoch."""
        n = len(self)
        epoch = 0
        while epochs is None or epoch < epochs:
            perm = torch.randperm(n, generator=generator)
            for i in range(0, n, batch_size):
                idx = perm[i : i + batch_size]
                yield self.images[idx], self.labels[idx]
            epoch += 1


def _grid(size: int):
    ys, xs = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    return ys, xs


def _render(class_id: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One [0,1] HWC image of the given class."""
    ys, xs = _grid(size)
    base = rng.uniform(0.1, 0.9, size=3)
    accent = rng.uniform(0.1, 0.9, size=3)
    if class_id == 0:
        # soft radial blobs
        img = np.zeros((size, size))
        for _ in range(rng.integers(2, 5)):
            cy, cx = rng.uniform(-0.7, 0.7, size=2)
            r = rng.uniform(0.25, 0.6)
            img += np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * r**2))
        img = img / img.max()
    elif class_id == 1:
        # sinusoidal grating, angle snapped to one of 8 orientations
        theta = rng.integers(0, 8) * np.pi / 8
        freq = rng.uniform(1.5, 3.5)
        phase = rng.uniform(0, 2 * np.pi)
        img = 0.5 + 0.5 * np.sin(freq * np.pi * (xs * np.cos(theta) + ys * np.sin(theta)) + phase)
    elif class_id == 2:
        # checker tiles with soft but definite edges
        cells = int(rng.integers(2, 5))
        phase = rng.uniform(0, 2 * np.pi, size=2)
        wave = np.sin(cells * np.pi * xs + phase[0]) * np.sin(cells * np.pi * ys + phase[1])
        img = 0.5 + 0.5 * np.tanh(6.0 * wave)
    elif class_id == 3:
        # concentric rings around a random center
        cy, cx = rng.uniform(-0.4, 0.4, size=2)
        freq = rng.uniform(2.0, 3.5)
        phase = rng.uniform(0, 2 * np.pi)
        r = np.sqrt((ys - cy) ** 2 + (xs - cx) ** 2)
        img = 0.5 + 0.5 * np.sin(freq * np.pi * r + phase)
    else:
        raise ValueError(f"unknown class id {class_id}")
    out = base[None, None, :] + (accent - base)[None, None, :] * img[:, :, None]
    return np.clip(out, 0.0, 1.0)


def make_toy_dataset(
    out_dir: str | Path,
    num_per_class: int = 120,
    num_classes: int = 4,
    image_size: int = 32,
    seed: int = 0,
) -> Path:
    """Write the synthetic corpus as PNGs under out_dir/<class_name>/."""
    if not (1 <= num_classes <= len(CLASS_NAMES)):
        raise ValueError(f"num_classes must lie in 1..{len(CLASS_NAMES)}")
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    for c in range(num_classes):
        cdir = out / CLASS_NAMES[c]
        cdir.mkdir(parents=True, exist_ok=True)
        for i in range(num_per_class):
            arr = (_render(c, image_size, rng) * 255.0).round().astype(np.uint8)
            Image.fromarray(arr).save(cdir / f"{CLASS_NAMES[c]}_{i:04d}.png")
    return out


def _load_image(path: Path, image_size: int) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (image_size, image_size):
                im = im.resize((image_size, image_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except Exception as e:
        raise ValueError(f"could not read image file {path}: {e}") from e
    return torch.from_numpy(arr).permute(2, 0, 1) / 127.5 - 1.0


def load_images(root: str | Path, image_size: int = 32) -> tuple[torch.Tensor, list[Path]]:
    """All images directly under root, sorted by filename, as one batch."""
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"image directory {root} is not a directory")
    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    paths = [
        p for p in sorted(root.iterdir()) if p.suffix.lower() in exts and p.is_file()
    ]
    if not paths:
        raise ValueError(f"no image files found under {root}")
    return torch.stack([_load_image(p, image_size) for p in paths]), paths


def save_images(images: torch.Tensor, out_dir: str | Path, prefix: str = "img") -> list[Path]:
    """Write a [-1, 1] image batch as 8-bit PNGs, one file per image."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        arr = (img.clamp(-1.0, 1.0) + 1.0) * 127.5
        arr = arr.round().to(torch.uint8).permute(1, 2, 0).numpy()
        p = out / f"{prefix}_{i:04d}.png"
        Image.fromarray(arr).save(p)
        paths.append(p)
    return paths


def ingest_dataset(
    root: str | Path,
    image_size: int = 32,
    val_fraction: float = 0.1,
) -> tuple[ImageDataset, ImageDataset]:
    """Load an image folder into normalized train/val tensor datasets.

    Subdirectories become class labels; a flat folder is treated as a single
    class.  The train/val split keys on a content hash of each file so it is
    independent of listing order and stable across runs.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"dataset root {root} is not a directory")
    subdirs = sorted(d for d in root.iterdir() if d.is_dir())
    if subdirs:
        sources = [(d, label) for label, d in enumerate(subdirs)]
        num_classes = len(subdirs)
    else:
        sources = [(root, 0)]
        num_classes = 1
    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    train_imgs, train_labels, val_imgs, val_labels = [], [], [], []
    found = 0
    for d, label in sources:
        for p in sorted(d.iterdir()):
            if p.suffix.lower() not in exts or not p.is_file():
                continue
            found += 1
            img = _load_image(p, image_size)
            digest = hashlib.sha256(p.read_bytes()).digest()
            frac = int.from_bytes(digest[:8], "big") / 2**64
            if frac < val_fraction:
                val_imgs.append(img)
                val_labels.append(label)
            else:
                train_imgs.append(img)
                train_labels.append(label)
    if found == 0:
        raise ValueError(f"no image files found under {root}")
    if not train_imgs or not val_imgs:
        raise ValueError(
            f"degenerate split ({len(train_imgs)} train / {len(val_imgs)} val); "
            "adjust val_fraction or add images"
        )

    def pack(imgs, labels):
        return ImageDataset(
            images=torch.stack(imgs), labels=torch.tensor(labels, dtype=torch.int64),
            num_classes=num_classes,
        )

    return pack(train_imgs, train_labels), pack(val_imgs, val_labels)


def style_variant(ds: ImageDataset) -> ImageDataset:
    """Deterministic style shift of a dataset, used by the attack harness.

    Channels are permuted, contrast is pushed, and a fixed diagonal grating is
    overlaid; content and labels stay the same, the appearance distribution
    moves far enough for a feature probe to separate the two.
    """
    x = ds.images[:, [2, 0, 1], :, :].clone()
    x = torch.tanh(1.6 * x)
    size = x.shape[-1]
    ys, xs = torch.meshgrid(
        torch.linspace(-1, 1, size), torch.linspace(-1, 1, size), indexing="ij"
    )
    grating = 0.35 * torch.sin(6.0 * torch.pi * (xs + ys))
    x = (x + grating[None, None, :, :]).clamp(-1.0, 1.0)
    return ImageDataset(images=x, labels=ds.labels.clone(), num_classes=ds.num_classes)
