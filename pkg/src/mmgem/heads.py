"""Pooling (mean / bilinear region) and the four projection heads.

h1: visual C -> embedding E        h2: LM hidden M -> embedding E
h3: embedding E -> LM input M      h4: embedding E -> E (identity at init)

All heads are single affine maps. In fine-grained paths h1 is applied per
spatial cell before aggregation, so the per-cell heatmap path and the region
embedding path share one code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from . import tensor as T
from .tensor import _record
from .transformer import init_linear, linear, trunc_normal


class RegionError(ValueError):
    pass


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle in normalized unit-square coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        ok = (0.0 <= self.x0 < self.x1 <= 1.0
              and 0.0 <= self.y0 < self.y1 <= 1.0)
        if not ok:
            raise RegionError(f"invalid region {(self.x0, self.y0, self.x1, self.y1)}")

    def as_array(self):
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.float64)


WHOLE = Region(0.0, 0.0, 1.0, 1.0)


def region_batch(regions, batch):
    """Regions (one Region, or a list per sample) -> (B, 4) float64."""
    if isinstance(regions, Region):
        regions = [regions] * batch
    if len(regions) != batch:
        raise RegionError(f"{len(regions)} regions for batch {batch}")
    return np.stack([r.as_array() for r in regions])


def init_heads(store, cfg, rng):
    init_linear(store, "heads.h1", cfg.vis_dim, cfg.embed_dim, rng)
    init_linear(store, "heads.h2", cfg.lm_dim, cfg.embed_dim, rng)
    init_linear(store, "heads.h3", cfg.embed_dim, cfg.lm_dim, rng)
    # identity-mapping init keeps stage-one embeddings untouched at stage-two start
    store.add("heads.h4.w", np.eye(cfg.embed_dim))
    store.add("heads.h4.b", np.zeros(cfg.embed_dim), no_decay=True)


def mean_pool(fm):
    """FeatureMap (B, C, H, W) -> per-channel spatial mean (B, C)."""
    return T.mean(fm.tensor, axis=(2, 3))


def roi_align(fm, regions, out_h, out_w):
    """Differentiable bilinear region pooling -> Tensor (B, C, out_h, out_w)."""
    if out_h < 1 or out_w < 1:
        raise RegionError(f"output grid {out_h}x{out_w} must be >= 1x1")
    v = fm.tensor
    b, c, h, w = v.shape
    boxes = region_batch(regions, b)
    if np.any((boxes[:, 2] - boxes[:, 0]) * w <= 0.0) or \
       np.any((boxes[:, 3] - boxes[:, 1]) * h <= 0.0):
        raise RegionError("degenerate region: zero area on the feature grid")
    out = T.Tensor(K.roi_align_forward(np.ascontiguousarray(v.data), boxes,
                                       out_h, out_w))

    def vjp(g):
        return (K.roi_align_backward(np.ascontiguousarray(g), boxes, h, w),)

    return _record(out, (v,), vjp)


def _cells(x):
    """(B, C, H, W) Tensor -> (B, H*W, C) row-major cell sequence."""
    b, c, h, w = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (b, h * w, c))


def apply_head(store, name, x):
    return linear(store, f"heads.{name}", x)


def embed_visual(store, fm, regions=None, fine=False):
    """Unit-norm visual embeddings (B, E).

    fine=False: l2_normalize(h1(mean_pool(V))) over the whole image.
    fine=True:  l2_normalize(h4(mean over cells of h1(roi_align(V, R, H, W)))).
    """
    if not fine:
        return T.l2_normalize(apply_head(store, "h1", mean_pool(fm)))
    if regions is None:
        regions = WHOLE
    h, w = fm.grid
    cells = _cells(roi_align(fm, regions, h, w))
    e = T.mean(apply_head(store, "h1", cells), axis=1)
    return T.l2_normalize(apply_head(store, "h4", e))


def visual_prefix(store, fm, stage, regions=None):
    """Vectors in the LM input space: (B, 1, M) stage 1, (B, H*W, M) stage 2."""
    if stage == 1:
        x = apply_head(store, "h3", apply_head(store, "h1", mean_pool(fm)))
        b, m = x.shape
        return T.reshape(x, (b, 1, m))
    if stage == 2:
        if regions is None:
            regions = WHOLE
        h, w = fm.grid
        cells = _cells(roi_align(fm, regions, h, w))
        return apply_head(store, "h3", apply_head(store, "h1", cells))
    raise ValueError(f"stage must be 1 or 2, got {stage!r}")


def cell_embeddings(store, fm, stage):
    """Per-cell unit embeddings (B, H*W, E) for similarity heatmaps."""
    e = apply_head(store, "h1", _cells(fm.tensor))
    if stage == 2:
        e = apply_head(store, "h4", e)
    elif stage != 1:
        raise ValueError(f"stage must be 1 or 2, got {stage!r}")
    return T.l2_normalize(e)
