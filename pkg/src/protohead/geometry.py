"""Cross-view correspondence: crop-rectangle overlap and bilinear resampling.

A view covers a rectangle of the unit source square with a grid_h x grid_w
patch grid. Resampling maps a source-space region of interest onto a fixed
output grid by bilinear interpolation at cell centers, which is how the two
augmented views of one image are brought into register.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyOverlap, InvariantViolation

Rect = tuple[float, float, float, float]


def validate_rect(rect) -> Rect:
    x0, y0, x1, y1 = (float(v) for v in rect)
    if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
        raise InvariantViolation(f"bad crop rect {rect}")
    return (x0, y0, x1, y1)


@dataclass(frozen=True)
class ViewGeometry:
    rect: Rect
    grid_h: int
    grid_w: int

    def __post_init__(self):
        object.__setattr__(self, "rect", validate_rect(self.rect))
        if self.grid_h < 1 or self.grid_w < 1:
            raise InvariantViolation("grid dims must be >= 1")


def identity_geometry(grid_h: int, grid_w: int) -> ViewGeometry:
    return ViewGeometry((0.0, 0.0, 1.0, 1.0), grid_h, grid_w)


def overlap_region(ga: ViewGeometry, gb: ViewGeometry) -> Rect:
    """Intersection of two view rectangles in source coordinates."""
    ax0, ay0, ax1, ay1 = ga.rect
    bx0, by0, bx1, by1 = gb.rect
    x0, y0 = max(ax0, bx0), max(ay0, by0)
    x1, y1 = min(ax1, bx1), min(ay1, by1)
    if x0 >= x1 or y0 >= y1:
        raise EmptyOverlap(f"rects {ga.rect} and {gb.rect} do not intersect")
    return (x0, y0, x1, y1)


def sample_points(g: ViewGeometry, roi: Rect, out_h: int, out_w: int) -> np.ndarray:
    """Continuous (row, col) patch coordinates of the roi cell centers in g's grid."""
    x0, y0, x1, y1 = g.rect
    rx0, ry0, rx1, ry1 = roi
    cols = rx0 + (np.arange(out_w) + 0.5) / out_w * (rx1 - rx0)
    rows = ry0 + (np.arange(out_h) + 0.5) / out_h * (ry1 - ry0)
    # source -> view-local in [0, 1], then to continuous patch coordinates
    u = (cols - x0) / (x1 - x0) * g.grid_w - 0.5
    v = (rows - y0) / (y1 - y0) * g.grid_h - 0.5
    pts = np.stack(np.meshgrid(v, u, indexing="ij"), axis=-1)
    return pts.reshape(-1, 2)


def bilinear_weights(g: ViewGeometry, roi: Rect, out_h: int, out_w: int) -> np.ndarray:
    """Dense [out_h*out_w, grid_h*grid_w] matrix of bilinear sampling weights.

    One sample per output cell at its center; patch centers sit at
    (i + 0.5) / grid, and coordinates outside the grid clamp to the edge.
    """
    pts = sample_points(g, roi, out_h, out_w)
    h, w = g.grid_h, g.grid_w
    pv, pu = pts[:, 0], pts[:, 1]
    r0 = np.floor(pv).astype(np.intp)
    c0 = np.floor(pu).astype(np.intp)
    fr, fc = pv - r0, pu - c0
    weights = np.zeros((pts.shape[0], h * w), dtype=np.float64)
    rows = np.arange(pts.shape[0])
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = np.clip(r0 + dr, 0, h - 1)
            cc = np.clip(c0 + dc, 0, w - 1)
            np.add.at(weights, (rows, rr * w + cc), wr * wc)
    return weights


def bilinear_sample(
    field: np.ndarray, g: ViewGeometry, roi: Rect, out_h: int, out_w: int
) -> np.ndarray:
    """Same map as bilinear_weights(...) @ field, via 4-neighbor gathers."""
    pts = sample_points(g, roi, out_h, out_w)
    h, w = g.grid_h, g.grid_w
    pv, pu = pts[:, 0], pts[:, 1]
    r0 = np.floor(pv).astype(np.intp)
    c0 = np.floor(pu).astype(np.intp)
    fr, fc = pv - r0, pu - c0
    field = np.asarray(field, dtype=np.float64)
    out = np.zeros((pts.shape[0], field.shape[1]), dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            rr = np.clip(r0 + dr, 0, h - 1)
            cc = np.clip(c0 + dc, 0, w - 1)
            out += (wr * wc)[:, None] * field[rr * w + cc]
    return out


def roi_align(
    field: np.ndarray, g: ViewGeometry, roi, out_g: int
) -> np.ndarray:
    """Resample a per-patch field [I x N] over a source-space roi onto out_g^2 cells."""
    roi = validate_rect(roi)
    if out_g < 1:
        raise InvariantViolation("out_g must be >= 1")
    field = np.asarray(field, dtype=np.float64)
    if field.shape[0] != g.grid_h * g.grid_w:
        raise InvariantViolation(
            f"field has {field.shape[0]} rows, geometry implies {g.grid_h * g.grid_w}"
        )
    return bilinear_weights(g, roi, out_g, out_g) @ field
