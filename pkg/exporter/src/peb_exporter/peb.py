"""Writer for the PEB v1 wire format.

Layout (all integers unsigned 32-bit little-endian, floats IEEE-754
little-endian single precision):

    magic "PEB1" | version=1 | num_samples | grid_h | grid_w | embed_dim
                 | num_views | num_classes | num_part_categories
    per sample:
        label (u32)
        per view: crop rect x0,y0,x1,y1 (4 x f32), embeddings (I*c_f x f32)
        part ids (I x u16)

This module is intentionally self-contained: the byte layout is the
interface contract between the exporter and any consumer of the format.
"""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"PEB1"
VERSION = 1
_HEADER = struct.Struct("<4s8I")


class PebWriteError(RuntimeError):
    pass


def write_peb(
    path,
    labels: np.ndarray,
    embeddings: np.ndarray,
    rects: np.ndarray,
    part_ids: np.ndarray,
    grid_h: int,
    grid_w: int,
    num_classes: int,
    num_part_categories: int,
) -> None:
    """Write samples to a PEB v1 file.

    embeddings: [S, V, I, c_f]; rects: [S, V, 4] normalized source
    coordinates; part_ids: [S, I] with 0 meaning background.
    """
    labels = np.asarray(labels)
    embeddings = np.asarray(embeddings, dtype=np.float32)
    rects = np.asarray(rects, dtype=np.float32)
    part_ids = np.asarray(part_ids, dtype=np.uint16)
    s, v, patches, dim = embeddings.shape
    if patches != grid_h * grid_w:
        raise PebWriteError(f"{patches} patches but grid {grid_h}x{grid_w}")
    if labels.shape != (s,) or rects.shape != (s, v, 4) or part_ids.shape != (s, patches):
        raise PebWriteError("inconsistent array shapes")
    if not np.all(np.isfinite(embeddings)):
        raise PebWriteError("embeddings contain NaN or Inf")
    if s and (labels.min() < 0 or labels.max() >= num_classes):
        raise PebWriteError("label outside [0, num_classes)")
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                MAGIC, VERSION, s, grid_h, grid_w, dim, v,
                num_classes, num_part_categories,
            )
        )
        for idx in range(s):
            fh.write(struct.pack("<I", int(labels[idx])))
            for view in range(v):
                fh.write(np.ascontiguousarray(rects[idx, view], dtype="<f4").tobytes())
                fh.write(
                    np.ascontiguousarray(embeddings[idx, view], dtype="<f4").tobytes()
                )
            fh.write(np.ascontiguousarray(part_ids[idx], dtype="<u2").tobytes())
