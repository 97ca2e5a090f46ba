"""Export pipeline: images -> two augmented views -> frozen backbone -> PEB.

Augmentation happens before the backbone (which stays frozen), so both
views are materialized in the file along with their crop rectangles in
normalized source coordinates.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .backbones import BackboneLoadError, load_backbone
from .peb import write_peb


class ImageDecodeError(RuntimeError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class AugmentSpec:
    crop_scale_min: float = 0.6
    crop_scale_max: float = 1.0
    min_overlap: float = 0.3
    brightness_jitter: float = 0.2
    contrast_jitter: float = 0.2
    max_attempts: int = 100


@dataclass
class ExportManifest:
    images: list  # (path, label) pairs
    backbone: str = "random/14/64"
    image_size: int = 224
    num_classes: int = 0
    num_part_categories: int = 0
    part_mask_dir: str | None = None
    seed: int = 0
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    @staticmethod
    def from_json(path) -> "ExportManifest":
        with open(path) as fh:
            payload = json.load(fh)
        images = []
        if "image_root" in payload:
            root = payload["image_root"]
            classes = sorted(
                d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))
            )
            for label, cls in enumerate(classes):
                for name in sorted(os.listdir(os.path.join(root, cls))):
                    images.append((os.path.join(root, cls, name), label))
        for entry in payload.get("images", []):
            images.append((entry["path"], int(entry["label"])))
        if not images:
            raise ManifestError("manifest lists no images")
        aug = AugmentSpec(**payload.get("augment", {}))
        labels = [lab for _, lab in images]
        return ExportManifest(
            images=images,
            backbone=payload.get("backbone", "random/14/64"),
            image_size=int(payload.get("image_size", 224)),
            num_classes=int(payload.get("num_classes", max(labels) + 1)),
            num_part_categories=int(payload.get("num_part_categories", 0)),
            part_mask_dir=payload.get("part_mask_dir"),
            seed=int(payload.get("seed", 0)),
            augment=aug,
        )


def _load_image(path, size: int) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if img.size != (size, size):
                img = img.resize((size, size), Image.BILINEAR)
            return np.asarray(img, dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc


def _sample_crops(aug: AugmentSpec, rng: np.random.Generator):
    """Two overlapping crop rects in normalized coordinates."""

    def one():
        w = float(rng.uniform(aug.crop_scale_min, aug.crop_scale_max))
        h = float(rng.uniform(aug.crop_scale_min, aug.crop_scale_max))
        x0 = float(rng.uniform(0.0, 1.0 - w))
        y0 = float(rng.uniform(0.0, 1.0 - h))
        return (x0, y0, x0 + w, y0 + h)

    for _ in range(aug.max_attempts):
        ra, rb = one(), one()
        ov_w = min(ra[2], rb[2]) - max(ra[0], rb[0])
        ov_h = min(ra[3], rb[3]) - max(ra[1], rb[1])
        if ov_w > 0 and ov_h > 0 and ov_w * ov_h >= aug.min_overlap:
            return ra, rb
    raise ManifestError(
        f"could not sample crops with overlap >= {aug.min_overlap}"
    )


def _crop_view(image: np.ndarray, rect, size: int, aug: AugmentSpec, rng) -> np.ndarray:
    h, w, _ = image.shape
    x0, y0, x1, y1 = rect
    px0, px1 = int(round(x0 * w)), max(int(round(x1 * w)), int(round(x0 * w)) + 1)
    py0, py1 = int(round(y0 * h)), max(int(round(y1 * h)), int(round(y0 * h)) + 1)
    crop = image[py0:py1, px0:px1]
    pil = Image.fromarray((crop * 255).astype(np.uint8))
    view = np.asarray(pil.resize((size, size), Image.BILINEAR), dtype=np.float64) / 255.0
    if aug.contrast_jitter > 0:
        gamma = rng.uniform(1.0 - aug.contrast_jitter, 1.0 + aug.contrast_jitter)
        view = (view - 0.5) * gamma + 0.5
    if aug.brightness_jitter > 0:
        view = view + rng.uniform(-aug.brightness_jitter, aug.brightness_jitter)
    return np.clip(view, 0.0, 1.0)


def _patch_majority(mask: np.ndarray, grid: int, categories: int) -> np.ndarray:
    """Majority-vote category id per patch cell."""
    h, w = mask.shape
    ph, pw = h // grid, w // grid
    out = np.zeros(grid * grid, dtype=np.uint16)
    for r in range(grid):
        for c in range(grid):
            cell = mask[r * ph : (r + 1) * ph, c * pw : (c + 1) * pw]
            vals, counts = np.unique(cell, return_counts=True)
            winner = int(vals[np.argmax(counts)])
            out[r * grid + c] = min(winner, categories)
    return out


def export(manifest: ExportManifest, out_path) -> dict:
    """Run the backbone over every image and write a two-view PEB bundle."""
    backbone = load_backbone(manifest.backbone)
    if manifest.image_size % backbone.patch_size:
        raise ManifestError(
            f"image size {manifest.image_size} not divisible by patch "
            f"{backbone.patch_size}"
        )
    grid = manifest.image_size // backbone.patch_size
    patches = grid * grid
    n = len(manifest.images)
    embeddings = np.zeros((n, 2, patches, backbone.embed_dim), dtype=np.float32)
    rects = np.zeros((n, 2, 4), dtype=np.float32)
    labels = np.zeros(n, dtype=np.uint32)
    part_ids = np.zeros((n, patches), dtype=np.uint16)

    for idx, (path, label) in enumerate(manifest.images):
        rng = np.random.default_rng(
            np.random.SeedSequence([manifest.seed, 1009, idx])
        )
        image = _load_image(path, manifest.image_size)
        ra, rb = _sample_crops(manifest.augment, rng)
        for view, rect in enumerate((ra, rb)):
            pixels = _crop_view(image, rect, manifest.image_size, manifest.augment, rng)
            embeddings[idx, view] = backbone(pixels).astype(np.float32)
            rects[idx, view] = rect
        labels[idx] = label
        if manifest.part_mask_dir:
            stem = os.path.splitext(os.path.basename(path))[0]
            mask_path = os.path.join(manifest.part_mask_dir, stem + ".png")
            if os.path.exists(mask_path):
                with Image.open(mask_path) as m:
                    mask = np.asarray(m.convert("L"), dtype=np.int64)
                part_ids[idx] = _patch_majority(
                    mask, grid, manifest.num_part_categories
                )

    write_peb(
        out_path,
        labels=labels,
        embeddings=embeddings,
        rects=rects,
        part_ids=part_ids,
        grid_h=grid,
        grid_w=grid,
        num_classes=manifest.num_classes,
        num_part_categories=manifest.num_part_categories,
    )
    return {
        "samples": n,
        "grid": grid,
        "embed_dim": backbone.embed_dim,
        "classes": manifest.num_classes,
        "backbone": manifest.backbone,
    }
