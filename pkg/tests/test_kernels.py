"""Compiled and numpy kernels must agree bit for bit."""

import numpy as np
import pytest

from affectcal import kernels

py = kernels.python_backend
cy = kernels.compiled_backend

needs_compiled = pytest.mark.skipif(cy is None, reason="compiled kernels not built")


def test_backend_name():
    assert kernels.BACKEND in ("cython", "python")


def _logp(rng, n, k):
    p = rng.dirichlet(np.ones(k), size=n)
    return np.log(p + 1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_python_bias_sweep_matches_argmax(seed):
    rng = np.random.default_rng(seed)
    n, k = 300, 5
    logp = _logp(rng, n, k)
    truth = rng.integers(0, k, n)
    bias = rng.normal(size=k)
    grid = np.round(np.arange(-20, 21) * 0.1, 12)
    c = int(rng.integers(k))
    out = py.bias_sweep(logp, truth, bias, c, grid)
    for g, f in zip(grid, out):
        b = bias.copy()
        b[c] = g
        pred = np.argmax(logp + b, axis=1)
        cm = py.confusion_matrix(pred, truth, k)
        tp = np.diag(cm)
        ref = py.macro_from_counts(tp, cm.sum(0) - tp, cm.sum(1) - tp)[1]
        assert f == ref


def test_python_window_mean_matches_loop():
    rng = np.random.default_rng(1)
    x = rng.random((40, 3))
    for half in (1, 2, 5, 60):
        out = py.window_mean(x, half)
        for i in range(40):
            ref = x[max(0, i - half): i + half + 1].mean(axis=0)
            np.testing.assert_allclose(out[i], ref, rtol=0, atol=1e-15)


@needs_compiled
@pytest.mark.parametrize("seed", range(10))
def test_backends_bit_identical(seed):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(1, 400)), int(rng.integers(2, 9))
    logp = _logp(rng, n, k)
    truth = rng.integers(0, k, n)
    bias = np.round(rng.normal(size=k), 1)
    grid = np.round(np.arange(-20, 21) * 0.1, 12)
    for c in range(k):
        assert np.array_equal(py.bias_sweep(logp, truth, bias, c, grid), cy.bias_sweep(logp, truth, bias, c, grid))
    pred = rng.integers(0, k, n)
    assert np.array_equal(py.confusion_matrix(pred, truth, k), cy.confusion_matrix(pred, truth, k))
    s = rng.random(n)
    t = rng.integers(0, 2, n)
    tg = np.round(np.arange(1, 10) * 0.1, 1)
    assert np.array_equal(py.threshold_sweep(s, t, tg), cy.threshold_sweep(s, t, tg))
    x = rng.random((n, k))
    half = int(rng.integers(1, 20))
    assert np.array_equal(py.window_mean(x, half), cy.window_mean(x, half))
    idx = rng.integers(0, n, 3 * n)
    vals = rng.random(3 * n)
    for a, b in zip(py.scatter_mean(idx, vals, n), cy.scatter_mean(idx, vals, n)):
        assert np.array_equal(a, b)
    tp, fp, fn = (rng.integers(0, 50, k) for _ in range(3))
    pa, ma = py.macro_from_counts(tp, fp, fn)
    pb, mb = cy.macro_from_counts(tp, fp, fn)
    assert np.array_equal(pa, pb) and ma == mb


def test_macro_from_counts_zero_division():
    per, macro = py.macro_from_counts(np.array([0, 2]), np.array([0, 1]), np.array([0, 1]))
    assert per.tolist() == [0.0, 2 * 2 / (2 * 2 + 2)]
    assert macro == per.mean()
