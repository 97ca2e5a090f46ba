"""Binary dataset format ("PEB", Patch Embedding Bundle) and checkpoints.

PEB v1 layout, all integers unsigned 32-bit little-endian, floats IEEE-754
little-endian single precision:

    magic "PEB1" | version | num_samples | grid_h | grid_w | embed_dim
                 | num_views | num_classes | num_part_categories
    per sample:
        label (u32)
        per view: crop rect x0,y0,x1,y1 (4 x f32), embeddings (I*c_f x f32)
        part ids (I x u16)

A checkpoint is a JSON header (config, shapes, epoch, seed) followed by the
raw little-endian f32 payload of every array in header order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    InvariantViolation,
    IoFailure,
    NonFiniteValue,
    ShapeMismatch,
    TruncatedFile,
    VersionMismatch,
)

PEB_MAGIC = b"PEB1"
PEB_VERSION = 1
_HEADER = struct.Struct("<4s8I")

CKPT_MAGIC = b"PHCKPT1\n"


@dataclass
class EmbeddingBundle:
    """Multi-view patch-embedding dataset with per-patch part annotations."""

    grid_h: int
    grid_w: int
    embed_dim: int
    num_views: int
    num_classes: int
    num_part_categories: int
    labels: np.ndarray  # [S] uint32
    embeddings: np.ndarray  # [S, V, I, c_f] float32
    rects: np.ndarray  # [S, V, 4] float32
    part_ids: np.ndarray  # [S, I] uint16

    @property
    def num_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def patches(self) -> int:
        return self.grid_h * self.grid_w

    def validate(self) -> "EmbeddingBundle":
        s, v, i, c = self.embeddings.shape
        if (
            s != self.num_samples
            or v != self.num_views
            or i != self.patches
            or c != self.embed_dim
        ):
            raise InvariantViolation("embedding tensor shape inconsistent with header")
        if self.rects.shape != (s, v, 4) or self.part_ids.shape != (s, i):
            raise InvariantViolation("rects or part_ids shape inconsistent")
        if not np.all(np.isfinite(self.embeddings)):
            raise NonFiniteValue("bundle embeddings contain NaN or Inf")
        if s and np.any(self.labels >= self.num_classes):
            raise InvariantViolation("label outside [0, num_classes)")
        if s and np.any(self.part_ids > self.num_part_categories):
            raise InvariantViolation("part id above num_part_categories")
        r = self.rects.astype(np.float64)
        if s and not (
            np.all(r[..., 0] < r[..., 2])
            and np.all(r[..., 1] < r[..., 3])
            and np.all(r >= 0.0)
            and np.all(r <= 1.0)
        ):
            raise InvariantViolation("crop rect outside the unit square or empty")
        return self


def write_bundle(bundle: EmbeddingBundle, path) -> None:
    bundle.validate()
    s = bundle.num_samples
    try:
        with open(path, "wb") as fh:
            fh.write(
                _HEADER.pack(
                    PEB_MAGIC,
                    PEB_VERSION,
                    s,
                    bundle.grid_h,
                    bundle.grid_w,
                    bundle.embed_dim,
                    bundle.num_views,
                    bundle.num_classes,
                    bundle.num_part_categories,
                )
            )
            for idx in range(s):
                fh.write(struct.pack("<I", int(bundle.labels[idx])))
                for view in range(bundle.num_views):
                    fh.write(
                        np.ascontiguousarray(
                            bundle.rects[idx, view], dtype="<f4"
                        ).tobytes()
                    )
                    fh.write(
                        np.ascontiguousarray(
                            bundle.embeddings[idx, view], dtype="<f4"
                        ).tobytes()
                    )
                fh.write(
                    np.ascontiguousarray(bundle.part_ids[idx], dtype="<u2").tobytes()
                )
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_bundle(path) -> EmbeddingBundle:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise TruncatedFile(f"{path}: shorter than the fixed header")
    magic, version, s, gh, gw, cf, v, d, u = _HEADER.unpack_from(blob, 0)
    if magic != PEB_MAGIC:
        raise BadMagic(f"{path}: magic {magic!r}")
    if version != PEB_VERSION:
        raise VersionMismatch(f"{path}: version {version}")
    patches = gh * gw
    per_view = 4 * 4 + patches * cf * 4
    per_sample = 4 + v * per_view + patches * 2
    expected = _HEADER.size + s * per_sample
    if len(blob) < expected:
        raise TruncatedFile(f"{path}: {len(blob)} bytes, need {expected}")
    if len(blob) > expected:
        raise InvariantViolation(f"{path}: {len(blob) - expected} trailing bytes")

    labels = np.zeros(s, dtype=np.uint32)
    embeddings = np.zeros((s, v, patches, cf), dtype=np.float32)
    rects = np.zeros((s, v, 4), dtype=np.float32)
    part_ids = np.zeros((s, patches), dtype=np.uint16)
    off = _HEADER.size
    for idx in range(s):
        (labels[idx],) = struct.unpack_from("<I", blob, off)
        off += 4
        for view in range(v):
            rects[idx, view] = np.frombuffer(blob, dtype="<f4", count=4, offset=off)
            off += 16
            emb = np.frombuffer(blob, dtype="<f4", count=patches * cf, offset=off)
            embeddings[idx, view] = emb.reshape(patches, cf)
            off += patches * cf * 4
        part_ids[idx] = np.frombuffer(blob, dtype="<u2", count=patches, offset=off)
        off += patches * 2
    bundle = EmbeddingBundle(
        grid_h=gh,
        grid_w=gw,
        embed_dim=cf,
        num_views=v,
        num_classes=d,
        num_part_categories=u,
        labels=labels,
        embeddings=embeddings,
        rects=rects,
        part_ids=part_ids,
    )
    return bundle.validate()


@dataclass
class Checkpoint:
    """Trained head state: config snapshot plus named f32 arrays."""

    config: dict
    arrays: dict[str, np.ndarray]
    epoch: int = 0
    step: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = list(ckpt.arrays)
    header = {
        "version": 1,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "extra": ckpt.extra,
        "arrays": [
            {"name": n, "shape": list(ckpt.arrays[n].shape)} for n in names
        ],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<I", len(head)))
            fh.write(head)
            for n in names:
                fh.write(np.ascontiguousarray(ckpt.arrays[n], dtype="<f4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if not blob.startswith(CKPT_MAGIC):
        raise BadMagic(f"{path}: not a checkpoint file")
    off = len(CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    try:
        header = json.loads(blob[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvariantViolation(f"{path}: corrupt header: {exc}") from exc
    off += hlen
    arrays: dict[str, np.ndarray] = {}
    for spec in header["arrays"]:
        shape = tuple(int(x) for x in spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        if off + count * 4 > len(blob):
            raise ShapeMismatch(
                f"{path}: payload too short for array {spec['name']} {shape}"
            )
        arrays[spec["name"]] = (
            np.frombuffer(blob, dtype="<f4", count=count, offset=off)
            .reshape(shape)
            .copy()
        )
        off += count * 4
    if off != len(blob):
        raise ShapeMismatch(f"{path}: {len(blob) - off} unexplained payload bytes")
    return Checkpoint(
        config=header["config"],
        arrays=arrays,
        epoch=int(header["epoch"]),
        step=int(header["step"]),
        seed=int(header["seed"]),
        extra=header.get("extra", {}),
    )
