"""Frozen patch-embedding backbones.

Two families:
  * ``random/<patch>/<dim>`` -- a seeded random two-layer patch featurizer.
    No pretrained weights, fully offline, deterministic; useful for tests
    and for environments without model hubs. Random projections preserve
    patch appearance structure well enough for a head to train on.
  * ``hf:<model_id>`` -- any Hugging Face vision model exposing patch
    tokens (e.g. DINOv2). Requires `torch` + `transformers` and network
    or cached weights; loaded lazily.
"""
from __future__ import annotations

import hashlib

import numpy as np


class BackboneLoadError(RuntimeError):
    pass


class PatchBackbone:
    """Maps an image array [H, W, 3] in [0, 1] to patch features [I, c_f]."""

    patch_size: int
    embed_dim: int

    def __call__(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SeededRandomPatchNet(PatchBackbone):
    """Deterministic random features over non-overlapping patches.

    Each patch is flattened, passed through two fixed random projections
    with a tanh in between, and scaled to roughly unit variance. Weights
    derive from the backbone name, so the same identifier always produces
    identical features.
    """

    def __init__(self, patch_size: int = 14, embed_dim: int = 64, hidden: int = 256):
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        digest = hashlib.sha256(
            f"random/{patch_size}/{embed_dim}/{hidden}".encode()
        ).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        fan_in = patch_size * patch_size * 3
        self.w1 = rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, hidden))
        self.b1 = rng.normal(scale=0.1, size=hidden)
        self.w2 = rng.normal(scale=1.0 / np.sqrt(hidden), size=(hidden, embed_dim))

    def __call__(self, image: np.ndarray) -> np.ndarray:
        h, w, c = image.shape
        p = self.patch_size
        if h % p or w % p or c != 3:
            raise BackboneLoadError(f"image {image.shape} not divisible by patch {p}")
        gh, gw = h // p, w // p
        patches = (
            image.reshape(gh, p, gw, p, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(gh * gw, p * p * 3)
        )
        patches = patches - patches.mean(axis=1, keepdims=True)
        hidden = np.tanh(patches @ self.w1 + self.b1)
        return hidden @ self.w2


class HuggingFaceBackbone(PatchBackbone):
    """Patch tokens from a pretrained transformer (DINOv2-style)."""

    def __init__(self, model_id: str):
        try:
            import torch
            from transformers import AutoImageProcessor, AutoModel
        except ImportError as exc:
            raise BackboneLoadError(
                f"transformers/torch unavailable for {model_id!r}: {exc}"
            ) from exc
        try:
            self.processor = AutoImageProcessor.from_pretrained(model_id)
            self.model = AutoModel.from_pretrained(model_id).eval()
        except Exception as exc:  # hub, network, or weight errors
            raise BackboneLoadError(f"cannot load {model_id!r}: {exc}") from exc
        self._torch = torch
        self.patch_size = int(getattr(self.model.config, "patch_size", 14))
        self.embed_dim = int(self.model.config.hidden_size)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            inputs = self.processor(
                images=(image * 255).astype(np.uint8), return_tensors="pt"
            )
            out = self.model(**inputs).last_hidden_state[0]
        tokens = out.numpy().astype(np.float64)
        patches = (image.shape[0] // self.patch_size) * (
            image.shape[1] // self.patch_size
        )
        return tokens[-patches:]  # strip class/register tokens


def load_backbone(identifier: str) -> PatchBackbone:
    if identifier.startswith("hf:"):
        return HuggingFaceBackbone(identifier[3:])
    if identifier.startswith("random/"):
        parts = identifier.split("/")
        if len(parts) != 3:
            raise BackboneLoadError(
                f"bad identifier {identifier!r}; expected random/<patch>/<dim>"
            )
        return SeededRandomPatchNet(patch_size=int(parts[1]), embed_dim=int(parts[2]))
    raise BackboneLoadError(f"unknown backbone {identifier!r}")
