"""Finite-difference oracle: self-tests and per-kernel gradient checks."""

import numpy as np
import pytest

from mmgem import tensor as T
from mmgem.gradcheck import NonDeterministicError, finite_difference_check


def _p(name, rng, shape, scale=1.0):
    return T.Parameter(name, rng.normal(size=shape) * scale, dtype=np.float64)


def _const(rng, shape):
    return T.tensor(rng.normal(size=shape), dtype=np.float64)


def _weighted(rng, build):
    """Fixed random linear functional of build() -> deterministic scalar fn."""
    probe = build()
    w = T.tensor(rng.normal(size=probe.shape), dtype=np.float64)

    def fn():
        return T.sum_(T.mul(build(), w))

    return fn


# one entry per differentiable kernel: name -> (params, loss_fn) builder
def _kernel_cases(rng):
    cases = {}

    a = _p("a", rng, (3, 4))
    b = _p("b", rng, (4, 5))
    cases["matmul_2d"] = ([a, b], _weighted(rng, lambda: T.matmul(a, b)))

    a3 = _p("a3", rng, (2, 3, 4))
    b3 = _p("b3", rng, (2, 4, 5))
    cases["matmul_batched"] = ([a3, b3], _weighted(rng, lambda: T.matmul(a3, b3)))

    x3 = _p("x3", rng, (2, 3, 4))
    w2 = _p("w2", rng, (4, 5))
    cases["matmul_3d_2d"] = ([x3, w2], _weighted(rng, lambda: T.matmul(x3, w2)))

    wa = _p("wa", rng, (4, 6))
    ba = _p("ba", rng, (6,))
    cases["affine"] = ([x3, wa, ba],
                       _weighted(rng, lambda: T.affine(x3, wa, ba)))

    u = _p("u", rng, (3, 5))
    v = _p("v", rng, (3, 5))
    cases["add"] = ([u, v], _weighted(rng, lambda: T.add(u, v)))
    cases["sub"] = ([u, v], _weighted(rng, lambda: T.sub(u, v)))
    cases["mul"] = ([u, v], _weighted(rng, lambda: T.mul(u, v)))

    dpos = T.Parameter("dpos", rng.random((3, 5)) + 0.5, dtype=np.float64)
    cases["div"] = ([u, dpos], _weighted(rng, lambda: T.div(u, dpos)))

    bias = _p("bias", rng, (5,))
    cases["add_broadcast"] = ([u, bias], _weighted(rng, lambda: T.add(u, bias)))

    cases["neg"] = ([u], _weighted(rng, lambda: T.neg(u)))
    cases["concat"] = ([u, v], _weighted(rng, lambda: T.concat([u, v], axis=0)))
    cases["slice"] = ([u], _weighted(
        rng, lambda: T.slice_(u, (slice(1, 3), slice(0, 4)))))
    cases["mean_axes"] = ([x3], _weighted(rng, lambda: T.mean(x3, axis=(0, 2))))
    cases["sum_axes"] = ([x3], _weighted(rng, lambda: T.sum_(x3, axis=1)))
    cases["reshape"] = ([u], _weighted(rng, lambda: T.reshape(u, (5, 3))))
    cases["transpose"] = ([x3], _weighted(rng, lambda: T.transpose(x3, (2, 0, 1))))

    tab = _p("tab", rng, (7, 4))
    ids = rng.integers(0, 7, size=(2, 3))
    cases["embedding"] = ([tab], _weighted(rng, lambda: T.embedding(tab, ids)))

    h = _p("h", rng, (3, 4, 5))
    idx = rng.integers(0, 4, size=3)
    cases["gather_rows"] = ([h], _weighted(rng, lambda: T.gather_rows(h, idx)))

    cases["gelu"] = ([u], _weighted(rng, lambda: T.gelu(u)))

    g = T.Parameter("g", rng.random(5) + 0.5, dtype=np.float64)
    bb = _p("bb", rng, (5,))
    cases["layer_norm"] = ([u, g, bb],
                           _weighted(rng, lambda: T.layer_norm(u, g, bb)))

    cases["softmax"] = ([u], _weighted(rng, lambda: T.softmax(u)))
    cases["log_softmax"] = ([u], _weighted(rng, lambda: T.log_softmax(u)))
    cases["l2_normalize"] = ([u], _weighted(rng, lambda: T.l2_normalize(u)))

    targets = rng.integers(0, 5, size=3)
    cases["softmax_cross_entropy"] = (
        [u], lambda: T.mean(T.softmax_cross_entropy(u, targets)))
    return cases


KERNELS = sorted(_kernel_cases(np.random.default_rng(0)).keys())


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kernel", KERNELS)
def test_every_kernel_passes_fd(kernel, seed):
    rng = np.random.default_rng(1000 + seed)
    params, fn = _kernel_cases(rng)[kernel]
    report = finite_difference_check(fn, params, eps=1e-5)
    assert report.max_rel < 1e-4, (kernel, seed, report.max_rel)


def test_injected_fault_is_flagged():
    rng = np.random.default_rng(5)
    x = _p("x", rng, (4,))
    w = rng.normal(size=4)

    def fn():
        return T.sum_(T.mul(T.mul(x, x), T.tensor(w, dtype=np.float64)))

    good = {"x": 2 * w * x.numpy()}
    report = finite_difference_check(fn, [x], eps=1e-5, analytic=good)
    assert report.max_rel < 1e-4

    bad = {"x": good["x"].copy()}
    bad["x"][2] *= 1.10
    report = finite_difference_check(fn, [x], eps=1e-5, analytic=bad)
    flagged = next(p for p in report.params if p.name == "x")
    assert flagged.max_rel > 1e-2
    assert flagged.worst_index == (2,)


def test_constant_function():
    x = T.Parameter("x", np.ones(3), dtype=np.float64)

    def fn():
        return T.sum_(T.mul(x, T.tensor(np.zeros(3), dtype=np.float64)))

    report = finite_difference_check(fn, [x], eps=1e-5)
    assert report.max_rel < 1e-10


def test_nondeterministic_function_detected():
    x = T.Parameter("x", np.ones(1), dtype=np.float64)
    state = {"n": 0}

    def fn():
        state["n"] += 1
        return T.sum_(T.mul(x, T.tensor([float(state["n"])], dtype=np.float64)))

    with pytest.raises(NonDeterministicError):
        finite_difference_check(fn, [x], eps=1e-5)


def test_requires_f64():
    x = T.Parameter("x", np.ones(2), dtype=np.float32)
    with pytest.raises(T.TensorError):
        finite_difference_check(lambda: T.sum_(x), [x])


def test_subsampling_covers_requested_entries():
    rng = np.random.default_rng(9)
    x = _p("x", rng, (30,))

    def fn():
        return T.sum_(T.mul(x, x))

    report = finite_difference_check(fn, [x], eps=1e-5, max_entries=10)
    assert report.params[0].checked == 10
    assert report.max_rel < 1e-4
