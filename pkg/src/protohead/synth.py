"""Synthetic patch-embedding scenes with ground-truth part categories.

Each scene is a grid of patches. A handful of part categories occupy
non-overlapping rectangles; everything else is background. Every patch
embedding is a fixed unit-norm codebook vector for its (category, style)
plus isotropic Gaussian noise, and the class label is a deterministic
function of which style each category wears. This keeps every quantity the
training losses and the benchmark consume (features, part masks, view
geometry) available at desk scale without any image pipeline.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import EmbeddingBundle
from .errors import ConfigError, InfeasibleLayout, OverlapTooSmall
from .geometry import ViewGeometry, bilinear_sample, identity_geometry

BACKGROUND = 0


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Independent deterministic stream for (seed, keys...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass
class SynthConfig:
    num_classes: int = 10
    samples_per_class: int = 100
    grid_h: int = 16
    grid_w: int = 16
    embed_dim: int = 64
    num_part_categories: int = 5
    styles_per_category: int = 3
    # each scene's background wears one style, drawn from this many options,
    # so random sample pairs do not share most of their feature correlation
    num_background_styles: int = 4
    noise_std: float = 0.1
    seed: int = 42
    part_extent_min: int = 2
    part_extent_max: int = 4
    # optional explicit class -> per-category style table
    class_styles: list | None = None

    def validate(self) -> "SynthConfig":
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.num_part_categories < 2:
            raise ConfigError("need at least 2 part categories")
        if self.styles_per_category < 1:
            raise ConfigError("need at least 1 style per category")
        if self.num_background_styles < 1:
            raise ConfigError("need at least 1 background style")
        if self.styles_per_category**self.num_part_categories < self.num_classes:
            raise ConfigError("not enough style combinations for the class count")
        if not (1 <= self.part_extent_min <= self.part_extent_max):
            raise ConfigError("bad part extent range")
        if self.part_extent_max > min(self.grid_h, self.grid_w):
            raise ConfigError("part extent exceeds grid")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        table = self.style_table()
        if len({tuple(row) for row in table}) != self.num_classes:
            raise ConfigError("class style combinations must be unique")
        return self

    def style_table(self) -> np.ndarray:
        """[D x U] style index per class and category; unique rows."""
        if self.class_styles is not None:
            table = np.asarray(self.class_styles, dtype=np.int64)
            if table.shape != (self.num_classes, self.num_part_categories):
                raise ConfigError("class_styles must be [num_classes x categories]")
            if np.any(table < 0) or np.any(table >= self.styles_per_category):
                raise ConfigError("style index out of range")
            return table
        rng = rng_for(self.seed, 101)
        seen: set[tuple] = set()
        rows = []
        while len(rows) < self.num_classes:
            combo = tuple(rng.integers(0, self.styles_per_category, self.num_part_categories))
            if combo in seen:
                continue
            seen.add(combo)
            rows.append(combo)
        return np.asarray(rows, dtype=np.int64)

    def codebook(self) -> np.ndarray:
        """Unit-norm mean embedding per (category, style).

        Rows [0, num_background_styles) are background styles; part styles
        follow, grouped by category.
        """
        rng = rng_for(self.seed, 202)
        n = self.num_background_styles + (
            self.num_part_categories * self.styles_per_category
        )
        vecs = rng.normal(size=(n, self.embed_dim))
        return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)

    def codebook_row(self, category: int, style: int) -> int:
        if category == BACKGROUND:
            return style
        return (
            self.num_background_styles
            + (category - 1) * self.styles_per_category
            + style
        )


@dataclass
class SyntheticScene:
    part_ids: np.ndarray  # [I] int, 0 = background
    style_ids: np.ndarray  # [I] codebook row per patch
    embeddings: np.ndarray  # [I x c_f] float64, noise included
    label: int
    grid_h: int
    grid_w: int


def _place_parts(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Assign each part category a non-overlapping rectangle; 0 elsewhere."""
    for _ in range(20):
        grid = np.zeros((cfg.grid_h, cfg.grid_w), dtype=np.int64)
        ok = True
        for cat in range(1, cfg.num_part_categories + 1):
            placed = False
            for _ in range(200):
                h = int(rng.integers(cfg.part_extent_min, cfg.part_extent_max + 1))
                w = int(rng.integers(cfg.part_extent_min, cfg.part_extent_max + 1))
                r = int(rng.integers(0, cfg.grid_h - h + 1))
                c = int(rng.integers(0, cfg.grid_w - w + 1))
                if np.any(grid[r : r + h, c : c + w] != 0):
                    continue
                grid[r : r + h, c : c + w] = cat
                placed = True
                break
            if not placed:
                ok = False
                break
        if ok:
            return grid.reshape(-1)
    raise InfeasibleLayout(
        f"could not place {cfg.num_part_categories} parts on a "
        f"{cfg.grid_h}x{cfg.grid_w} grid"
    )


def make_scene(cfg: SynthConfig, label: int, sample_index: int) -> SyntheticScene:
    rng = rng_for(cfg.seed, 303, sample_index)
    table = cfg.style_table()
    codebook = cfg.codebook()
    part_ids = _place_parts(cfg, rng)
    # one background style per scene, varying across the dataset
    bg_style = int(rng.integers(0, cfg.num_background_styles))
    style_ids = np.full_like(part_ids, cfg.codebook_row(BACKGROUND, bg_style))
    for cat in range(1, cfg.num_part_categories + 1):
        style_ids[part_ids == cat] = cfg.codebook_row(cat, int(table[label, cat - 1]))
    emb = codebook[style_ids].astype(np.float64)
    if cfg.noise_std > 0:
        emb = emb + rng.normal(scale=cfg.noise_std, size=emb.shape)
    return SyntheticScene(
        part_ids=part_ids,
        style_ids=style_ids,
        embeddings=emb,
        label=label,
        grid_h=cfg.grid_h,
        grid_w=cfg.grid_w,
    )


def generate_dataset(cfg: SynthConfig) -> EmbeddingBundle:
    """Single-view bundle (identity crop); views are synthesized at train time."""
    cfg.validate()
    total = cfg.num_classes * cfg.samples_per_class
    patches = cfg.grid_h * cfg.grid_w
    labels = np.zeros(total, dtype=np.uint32)
    embeddings = np.zeros((total, 1, patches, cfg.embed_dim), dtype=np.float32)
    rects = np.tile(
        np.asarray([0.0, 0.0, 1.0, 1.0], dtype=np.float32), (total, 1, 1)
    )
    part_ids = np.zeros((total, patches), dtype=np.uint16)
    idx = 0
    for label in range(cfg.num_classes):
        for _ in range(cfg.samples_per_class):
            scene = make_scene(cfg, label, idx)
            labels[idx] = label
            embeddings[idx, 0] = scene.embeddings.astype(np.float32)
            part_ids[idx] = scene.part_ids.astype(np.uint16)
            idx += 1
    return EmbeddingBundle(
        grid_h=cfg.grid_h,
        grid_w=cfg.grid_w,
        embed_dim=cfg.embed_dim,
        num_views=1,
        num_classes=cfg.num_classes,
        num_part_categories=cfg.num_part_categories,
        labels=labels,
        embeddings=embeddings,
        rects=rects,
        part_ids=part_ids,
    ).validate()


@dataclass
class AugmentConfig:
    """Two-view augmentation: random overlapping crops plus a channelwise jitter."""

    crop_scale_min: float = 0.6
    crop_scale_max: float = 1.0
    min_overlap: float = 0.3
    color_scale_jitter: float = 0.2
    color_shift_std: float = 0.1
    view_noise_std: float = 0.05
    max_attempts: int = 100

    def validate(self) -> "AugmentConfig":
        if not (0.0 < self.crop_scale_min <= self.crop_scale_max <= 1.0):
            raise ConfigError("crop scale range must lie in (0, 1]")
        if not (0.0 < self.min_overlap <= 1.0):
            raise ConfigError("min_overlap must lie in (0, 1]")
        if self.color_scale_jitter < 0 or self.color_shift_std < 0:
            raise ConfigError("jitter magnitudes must be >= 0")
        if self.view_noise_std < 0:
            raise ConfigError("view_noise_std must be >= 0")
        return self


def _sample_rect(aug: AugmentConfig, rng: np.random.Generator):
    w = float(rng.uniform(aug.crop_scale_min, aug.crop_scale_max))
    h = float(rng.uniform(aug.crop_scale_min, aug.crop_scale_max))
    x0 = float(rng.uniform(0.0, 1.0 - w))
    y0 = float(rng.uniform(0.0, 1.0 - h))
    return (x0, y0, x0 + w, y0 + h)


def _intersection_area(ra, rb) -> float:
    x0, y0 = max(ra[0], rb[0]), max(ra[1], rb[1])
    x1, y1 = min(ra[2], rb[2]), min(ra[3], rb[3])
    return max(0.0, x1 - x0) * max(0.0, y1 - y0)


def make_views(scene, aug: AugmentConfig, seed, grid_h=None, grid_w=None):
    """Two jittered views of a patch grid plus the geometry of each crop.

    `scene` is a SyntheticScene or a raw [I x c_f] grid (then grid_h/grid_w
    are required). Returns (view_a, view_b, geom_a, geom_b). Each view is the
    bilinear resample of the grid over its crop rect back to grid_h x grid_w,
    scaled and shifted channelwise, with fresh Gaussian noise on top.
    """
    if isinstance(scene, SyntheticScene):
        embeddings, grid_h, grid_w = scene.embeddings, scene.grid_h, scene.grid_w
    else:
        embeddings = scene
        if grid_h is None or grid_w is None:
            raise ConfigError("grid_h/grid_w required for raw grids")
    aug.validate()
    keys = seed if isinstance(seed, tuple) else (seed,)
    rng = rng_for(*keys)
    for _ in range(aug.max_attempts):
        ra = _sample_rect(aug, rng)
        rb = _sample_rect(aug, rng)
        if _intersection_area(ra, rb) >= aug.min_overlap:
            break
    else:
        raise OverlapTooSmall(
            f"no crop pair with overlap >= {aug.min_overlap} in "
            f"{aug.max_attempts} attempts"
        )
    source = identity_geometry(grid_h, grid_w)
    views = []
    geoms = []
    for rect in (ra, rb):
        geom = ViewGeometry(rect, grid_h, grid_w)
        view = bilinear_sample(
            np.asarray(embeddings, dtype=np.float64), source, rect, grid_h, grid_w
        )
        if aug.color_scale_jitter > 0:
            gamma = rng.uniform(
                1.0 - aug.color_scale_jitter,
                1.0 + aug.color_scale_jitter,
                size=view.shape[1],
            )
            view = view * gamma
        if aug.color_shift_std > 0:
            beta = rng.normal(scale=aug.color_shift_std, size=view.shape[1])
            view = view + beta
        if aug.view_noise_std > 0:
            view = view + rng.normal(scale=aug.view_noise_std, size=view.shape)
        views.append(view)
        geoms.append(geom)
    return views[0], views[1], geoms[0], geoms[1]


def resample_part_ids(
    part_ids: np.ndarray, grid_h: int, grid_w: int, geom: ViewGeometry
) -> np.ndarray:
    """Nearest-patch part ids of a view grid (for inspection, not training)."""
    x0, y0, x1, y1 = geom.rect
    cols = x0 + (np.arange(grid_w) + 0.5) / grid_w * (x1 - x0)
    rows = y0 + (np.arange(grid_h) + 0.5) / grid_h * (y1 - y0)
    ci = np.clip((cols * grid_w).astype(int), 0, grid_w - 1)
    ri = np.clip((rows * grid_h).astype(int), 0, grid_h - 1)
    grid = np.asarray(part_ids).reshape(grid_h, grid_w)
    return grid[np.ix_(ri, ci)].reshape(-1)


def perturb(bundle: EmbeddingBundle, sigma_stab: float, seed: int) -> EmbeddingBundle:
    """Add Gaussian noise scaled by the bundle's global embedding std."""
    if sigma_stab < 0:
        raise ConfigError("sigma_stab must be >= 0")
    emb = bundle.embeddings.astype(np.float64)
    if sigma_stab > 0:
        scale = sigma_stab * float(emb.std())
        emb = emb + rng_for(seed, 404).normal(scale=scale, size=emb.shape)
    return EmbeddingBundle(
        grid_h=bundle.grid_h,
        grid_w=bundle.grid_w,
        embed_dim=bundle.embed_dim,
        num_views=bundle.num_views,
        num_classes=bundle.num_classes,
        num_part_categories=bundle.num_part_categories,
        labels=bundle.labels.copy(),
        embeddings=emb.astype(np.float32),
        rects=bundle.rects.copy(),
        part_ids=bundle.part_ids.copy(),
    )
