"""Training objectives: symmetric info-NCE, caption loss, and their sum."""

from __future__ import annotations

import numpy as np

from . import tensor as T

TAU_INIT = 0.07
TAU_MIN = 0.01


class ObjectiveError(ValueError):
    pass


def clamp_tau(tau):
    """Project the temperature back to [TAU_MIN, inf) after an update."""
    if float(tau.data) < TAU_MIN:
        tau.assign(np.asarray(TAU_MIN, dtype=tau.data.dtype))


def info_nce(visual, textual, tau):
    """Symmetric contrastive loss over in-batch pairs.

    Returns (L_v2t, L_t2v, L_emb) where L_emb is their sum. Rows must be
    unit-norm embeddings paired by index; tau is the learnable temperature.
    """
    if visual.shape != textual.shape or visual.data.ndim != 2:
        raise ObjectiveError(
            f"paired (B, E) embeddings required, got {visual.shape} vs "
            f"{textual.shape}")
    b = visual.shape[0]
    if b < 1:
        raise ObjectiveError("empty batch")
    if float(tau.data) <= 0.0:
        raise ObjectiveError(f"temperature must be positive, got {float(tau.data)}")
    for name, e in (("visual", visual), ("textual", textual)):
        norms = np.linalg.norm(e.data, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-5:
            raise ObjectiveError(f"{name} embeddings are not unit norm")
    sims = T.matmul(visual, T.transpose(textual, (1, 0)))
    logits = T.div(sims, tau)
    diag = np.arange(b)
    l_v2t = T.mean(T.softmax_cross_entropy(logits, diag))
    l_t2v = T.mean(T.softmax_cross_entropy(T.transpose(logits, (1, 0)), diag))
    return l_v2t, l_t2v, T.add(l_v2t, l_t2v)


def caption_loss(logits, targets, mask):
    """Mean over batch of mean per-token cross-entropy on masked-in positions.

    ``mask`` must exclude prefix/prompt/BOS predictions and padding; a row
    with nothing to score is an error, not a zero.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:2] != targets.shape or targets.shape != mask.shape:
        raise ObjectiveError(
            f"shape mismatch: logits {logits.shape}, targets {targets.shape}, "
            f"mask {mask.shape}")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ObjectiveError("caption loss over an empty mask")
    # PAD targets are masked out; remap them so the CE kernel sees valid ids
    safe_targets = np.where(mask, targets, 0)
    dt = logits.data.dtype
    ce = T.softmax_cross_entropy(logits, safe_targets)
    maskf = T.tensor(mask.astype(dt), dtype=dt)
    row_means = T.div(T.sum_(T.mul(ce, maskf), axis=1),
                      T.tensor(counts.astype(dt), dtype=dt))
    return T.mean(row_means)


def combined_loss(l_emb, l_gen):
    """Unweighted sum of embedding and generation losses."""
    for name, v in (("l_emb", l_emb), ("l_gen", l_gen)):
        if not np.isfinite(v.data).all():
            raise ObjectiveError(f"{name} is not finite")
    return T.add(l_emb, l_gen)


def token_accuracy(logits, targets, mask):
    """Fraction of masked-in positions where argmax(logits) == target."""
    mask = np.asarray(mask, dtype=bool)
    pred = np.argmax(logits.data, axis=-1)
    hits = (pred == np.asarray(targets)) & mask
    total = int(mask.sum())
    return float(hits.sum()) / total if total else 0.0
