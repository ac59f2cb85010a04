"""Central-difference gradient verification against the reverse-mode engine."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, TensorError, backward, no_grad


class NonDeterministicError(TensorError):
    """The checked function returned different values on repeated evaluation."""


@dataclass
class ParamCheck:
    name: str
    max_rel: float
    worst_index: tuple
    checked: int


@dataclass
class GradCheckReport:
    eps: float
    params: list = field(default_factory=list)

    @property
    def max_rel(self):
        return max((p.max_rel for p in self.params), default=0.0)

    def passed(self, threshold=1e-4):
        return self.max_rel < threshold

    def to_dict(self):
        return {
            "eps": self.eps,
            "max_rel": self.max_rel,
            "params": [
                {"name": p.name, "max_rel": p.max_rel,
                 "worst_index": list(p.worst_index), "checked": p.checked}
                for p in self.params
            ],
        }


def _rel_err(g_ad, g_fd):
    return abs(g_ad - g_fd) / max(abs(g_ad), abs(g_fd), 1e-8)


def finite_difference_check(f, params, eps=1e-5, analytic=None,
                            max_entries=None, seed=0):
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` takes no arguments, closes over ``params`` (all float64), and
    returns a scalar Tensor. ``analytic`` may supply precomputed gradients
    (name -> array); otherwise one tape backward pass produces them.
    ``max_entries`` caps the number of FD probes per parameter tensor
    (seeded subsample); None checks every entry.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise TensorError(f"finite_difference_check requires f64 params "
                              f"(got {p.data.dtype} for {p.name})")

    def value():
        with no_grad():
            return f().item()

    v1, v2 = value(), value()
    if v1 != v2:
        raise NonDeterministicError(
            f"f returned {v1!r} then {v2!r} on identical state")

    if analytic is None:
        saved = [(p, p.grad.copy()) for p in params]
        for p in params:
            p.zero_grad()
        with Tape():
            loss = f()
            backward(loss)
        analytic = {p.name: p.grad.copy() for p in params}
        for p, g in saved:
            p.grad[...] = g

    rng = np.random.default_rng(seed)
    report = GradCheckReport(eps=eps)
    for p in params:
        g_ad = np.asarray(analytic[p.name])
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idxs = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idxs = np.arange(n)
        worst = 0.0
        worst_i = 0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            g_fd = (fp - fm) / (2.0 * eps)
            rel = _rel_err(float(g_ad.reshape(-1)[i]), g_fd)
            if rel > worst:
                worst, worst_i = rel, int(i)
        report.params.append(ParamCheck(
            name=p.name, max_rel=worst,
            worst_index=np.unravel_index(worst_i, p.data.shape),
            checked=len(idxs)))
    return report
