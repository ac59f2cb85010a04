"""Optimizers (AdamW / LAMB) and the warmup + cosine schedule."""

from __future__ import annotations

import math

import numpy as np


class OptimError(ValueError):
    pass


def lr_schedule(t, total, warmup, peak):
    """Linear warmup to ``peak`` over ``warmup`` steps, cosine decay to 0."""
    if not 0 <= t <= total:
        raise OptimError(f"step {t} outside [0, {total}]")
    if warmup > total:
        raise OptimError(f"warmup {warmup} exceeds total {total}")
    if t < warmup:
        return peak * t / warmup
    if total == warmup:
        return peak if t == warmup else 0.0
    return peak * 0.5 * (1.0 + math.cos(math.pi * (t - warmup) / (total - warmup)))


class Optimizer:
    """AdamW (decoupled decay) or LAMB (per-tensor trust ratio).

    ``groups`` is a list of (params, peak_lr); only trainable parameters are
    updated, and weight decay skips parameters flagged ``no_decay``.
    """

    def __init__(self, kind, groups, weight_decay=0.0,
                 betas=(0.9, 0.999), eps=1e-8):
        if kind not in ("adamw", "lamb"):
            raise OptimError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.groups = [(list(params), float(peak)) for params, peak in groups]
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.step_count = 0
        self._m = {}
        self._v = {}
        for params, _ in self.groups:
            for p in params:
                if p.name in self._m:
                    raise OptimError(f"parameter {p.name} in two groups")
                self._m[p.name] = np.zeros_like(p.data)
                self._v[p.name] = np.zeros_like(p.data)

    def step(self, lrs):
        """Apply one update; ``lrs`` holds the current lr per group."""
        if len(lrs) != len(self.groups):
            raise OptimError(f"{len(lrs)} lrs for {len(self.groups)} groups")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for (params, _), lr in zip(self.groups, lrs):
            for p in params:
                if not p.trainable:
                    continue
                g = p.grad
                if not np.all(np.isfinite(g)):
                    raise OptimError(f"non-finite gradient for {p.name}")
                m = self._m[p.name]
                v = self._v[p.name]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                wd = 0.0 if p.no_decay else self.weight_decay
                if self.kind == "adamw":
                    new = p.data * (1.0 - lr * wd) - lr * update
                else:
                    if wd:
                        update = update + wd * p.data
                    wn = float(np.linalg.norm(p.data))
                    un = float(np.linalg.norm(update))
                    trust = wn / un if (wn > 0.0 and un > 0.0) else 1.0
                    new = p.data - lr * trust * update
                p.assign(new.astype(p.data.dtype))
