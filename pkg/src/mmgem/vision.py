"""Patch-based vision encoder producing spatial feature maps.

No global [CLS] feature exists anywhere: an image is represented only as a
C x H x W grid of patch features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .transformer import block, init_block, init_ln, init_linear, linear, ln, trunc_normal


class ImageError(ValueError):
    pass


@dataclass
class FeatureMap:
    """Spatial visual features, batched (B, C, H, W)."""

    tensor: T.Tensor

    @property
    def batch(self):
        return self.tensor.shape[0]

    @property
    def channels(self):
        return self.tensor.shape[1]

    @property
    def grid(self):
        return self.tensor.shape[2], self.tensor.shape[3]


def patchify(images, patch):
    """(B, 3, S, S) or (3, S, S) -> (B, n_patches, 3*patch*patch), row-major.

    Patch vectors are laid out (channel, y, x); lossless by construction.
    """
    arr = np.asarray(images)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3 or arr.shape[2] != arr.shape[3]:
        raise ImageError(f"expected (B, 3, S, S) images, got {arr.shape}")
    s = arr.shape[2]
    if s % patch:
        raise ImageError(f"image size {s} not divisible by patch {patch}")
    g = s // patch
    out = (arr.reshape(-1, 3, g, patch, g, patch)
              .transpose(0, 2, 4, 1, 3, 5)
              .reshape(-1, g * g, 3 * patch * patch))
    return out[0] if single else out


def init_vision(store, cfg, rng):
    init_linear(store, "vision.patch_proj", cfg.patch_dim, cfg.vis_dim, rng)
    store.add("vision.pos", trunc_normal(rng, (cfg.grid_cells, cfg.vis_dim)),
              no_decay=True)
    for i in range(cfg.vis_depth):
        init_block(store, f"vision.blocks.{i}", cfg.vis_dim, cfg.vis_heads, rng)
    init_ln(store, "vision.ln_f", cfg.vis_dim)


def vision_forward(store, cfg, images):
    """Images (B, 3, S, S) in [0, 1] -> FeatureMap (B, C, S/P, S/P)."""
    arr = np.asarray(images, dtype=store.dtype)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ImageError("image values must lie in [0, 1]")
    patches = T.tensor(patchify(arr, cfg.patch), dtype=store.dtype)
    x = linear(store, "vision.patch_proj", patches)
    x = T.add(x, store["vision.pos"])
    for i in range(cfg.vis_depth):
        x = block(store, f"vision.blocks.{i}", x, cfg.vis_heads)
    x = ln(store, "vision.ln_f", x)
    g = cfg.grid
    fm = T.reshape(T.transpose(x, (0, 2, 1)), (arr.shape[0], cfg.vis_dim, g, g))
    return FeatureMap(fm)
