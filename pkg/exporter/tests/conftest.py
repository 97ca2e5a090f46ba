import json
import os

import numpy as np
import pytest
from PIL import Image, ImageDraw

CLASS_SPECS = [
    ("disk", (220, 60, 40)),
    ("box", (40, 90, 220)),
    ("tri", (40, 200, 80)),
    ("cross", (230, 200, 40)),
    ("ring", (180, 60, 200)),
]


def render_image(cls: int, rng: np.random.Generator, size: int = 224) -> Image.Image:
    """One synthetic photo: a class-specific shape on a noisy background."""
    bg = tuple(int(v) for v in rng.integers(90, 150, 3))
    img = Image.new("RGB", (size, size), bg)
    draw = ImageDraw.Draw(img)
    name, color = CLASS_SPECS[cls]
    cx, cy = rng.integers(70, size - 70, 2)
    r = int(rng.integers(38, 58))
    box = (cx - r, cy - r, cx + r, cy + r)
    if name == "disk":
        draw.ellipse(box, fill=color)
    elif name == "box":
        draw.rectangle(box, fill=color)
    elif name == "tri":
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=color)
    elif name == "cross":
        w = r // 2
        draw.rectangle((cx - w, cy - r, cx + w, cy + r), fill=color)
        draw.rectangle((cx - r, cy - w, cx + r, cy + w), fill=color)
    else:
        draw.ellipse(box, outline=color, width=max(r // 3, 6))
    # mild pixel noise so images are not flat constants
    arr = np.asarray(img, dtype=np.int16)
    arr = arr + rng.integers(-12, 13, arr.shape)
    return Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8)), (cx, cy, r)


@pytest.fixture(scope="session")
def image_dataset(tmp_path_factory):
    """A 5-class shape dataset with part masks for the shape region."""
    root = tmp_path_factory.mktemp("shapes")
    masks = root / "masks"
    masks.mkdir()
    rng = np.random.default_rng(123)
    per_class = 16
    for cls, (name, _) in enumerate(CLASS_SPECS):
        cls_dir = root / f"class_{name}"
        cls_dir.mkdir()
        for i in range(per_class):
            img, (cx, cy, r) = render_image(cls, rng)
            stem = f"{name}_{i:03d}"
            img.save(cls_dir / f"{stem}.png")
            mask = Image.new("L", img.size, 0)
            ImageDraw.Draw(mask).ellipse(
                (cx - r, cy - r, cx + r, cy + r), fill=1
            )
            mask.save(masks / f"{stem}.png")
    return root, masks


@pytest.fixture(scope="session")
def manifest_path(image_dataset):
    root, masks = image_dataset
    manifest = {
        "image_root": str(root),
        "backbone": "random/14/64",
        "image_size": 224,
        "num_part_categories": 1,
        "part_mask_dir": str(masks),
        "seed": 7,
        "augment": {"crop_scale_min": 0.7, "crop_scale_max": 1.0},
    }
    # the masks folder sits inside the image root; exclude it from classes
    manifest["image_root"] = None
    images = []
    classes = sorted(d.name for d in root.iterdir() if d.is_dir() and d.name != "masks")
    for label, cls in enumerate(classes):
        for name in sorted(os.listdir(root / cls)):
            images.append({"path": str(root / cls / name), "label": label})
    manifest.pop("image_root")
    manifest["images"] = images
    manifest["num_classes"] = len(classes)
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path
