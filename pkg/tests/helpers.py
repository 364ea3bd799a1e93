"""Independent oracles used to derive expected values.

Everything here is deliberately naive: dict-of-words arithmetic, cumulative
quadrature of the defining iterated integrals, and closed-form flows. None of
it shares code with the library paths it checks.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


# ---------------------------------------------------------------------------
# Brute-force word-indexed algebra (dict word -> coefficient)
# ---------------------------------------------------------------------------

def dict_from_tensor(t):
    out = {}
    for k, block in enumerate(t.levels):
        for word in t.shape.words(k):
            c = block[t.shape.word_index(word)] if k else block[0]
            if c != 0.0:
                out[tuple(word)] = c
    return out


def dict_mul(a: dict, b: dict, kappa: int) -> dict:
    out = {}
    for wu, cu in a.items():
        for wv, cv in b.items():
            w = wu + wv
            if len(w) <= kappa:
                out[w] = out.get(w, 0.0) + cu * cv
    return out


def dict_add(a: dict, b: dict, scale: float = 1.0) -> dict:
    out = dict(a)
    for w, c in b.items():
        out[w] = out.get(w, 0.0) + scale * c
    return out


def dict_exp(xi: dict, kappa: int) -> dict:
    acc = {(): 1.0}
    term = {(): 1.0}
    for k in range(1, kappa + 1):
        term = dict_mul(term, xi, kappa)
        acc = dict_add(acc, term, 1.0 / math.factorial(k))
    return acc


def dict_log(g: dict, kappa: int) -> dict:
    x = dict(g)
    x[()] = x.get((), 0.0) - 1.0
    acc = dict(x)
    power = dict(x)
    for k in range(2, kappa + 1):
        power = dict_mul(power, x, kappa)
        acc = dict_add(acc, power, (-1.0) ** (k + 1) / k)
    return acc


def dict_close(a: dict, b: dict, tol: float) -> bool:
    words = set(a) | set(b)
    return all(abs(a.get(w, 0.0) - b.get(w, 0.0)) <= tol for w in words)


def random_tensor(shape, rng, lie_only=False):
    """Random dense element (grade-0 zero when lie_only) as a library tensor."""
    from roughflow.algebra import TruncatedTensor

    levels = [rng.standard_normal(shape.level_dim(k)) for k in range(shape.kappa + 1)]
    if lie_only:
        levels[0][:] = 0.0
    return TruncatedTensor(shape, levels)


def random_lie_element(shape, rng):
    """Random free Lie element: combination of right-nested bracket words."""
    from roughflow.algebra import LieElement, TruncatedTensor, right_nested_bracket

    acc = TruncatedTensor.zero(shape)
    for k in range(1, shape.kappa + 1):
        for word in itertools.islice(shape.words(k), 0, None):
            if rng.random() < 0.4:
                acc = acc + float(rng.standard_normal()) * right_nested_bracket(shape, word)
    return LieElement(acc)


# ---------------------------------------------------------------------------
# Iterated-integral quadrature oracle for piecewise-linear paths
# ---------------------------------------------------------------------------

def signature_by_quadrature(times, values, kappa, s, t, n_fine=4000):
    """Level-by-level cumulative quadrature of X^k = int X^{k-1} (x) dx over [s, t].

    Returns per-grade flat blocks (big-endian lexicographic word order). Uses the
    midpoint value of the previous level on each fine cell, second order in the
    cell width; independent of the per-segment-exponential production path.
    """
    times = np.asarray(times, float)
    values = np.asarray(values, float)
    d = values.shape[1]

    grid = np.linspace(s, t, n_fine + 1)
    grid = np.unique(np.concatenate([grid, times[(times > min(s, t)) & (times < max(s, t))]]))
    if s > t:
        grid = grid[::-1]
    pts = np.stack([np.interp(grid, times, values[:, j]) for j in range(d)], axis=1)
    dx = np.diff(pts, axis=0)

    blocks = [np.array([1.0])]
    for k in range(1, kappa + 1):
        prev = blocks[k - 1]
        # running value of X^{k-1}_{s,sigma} at the fine nodes
        if k == 1:
            running = np.ones((len(grid), 1))
        else:
            running = np.zeros((len(grid), len(prev)))
            running[1:] = np.cumsum(_cell_products(blocks, k - 1, dx, grid, pts), axis=0)
        mid = 0.5 * (running[:-1] + running[1:])
        contrib = mid[:, :, None] * dx[:, None, :]
        blocks.append(contrib.reshape(len(dx), -1).sum(axis=0))
    return blocks


def _cell_products(blocks, k, dx, grid, pts):
    """Per-cell increments of X^k, built recursively with midpoint values."""
    if k == 1:
        return dx
    lower = _cell_products(blocks, k - 1, dx, grid, pts)
    running = np.zeros((len(grid), lower.shape[1]))
    running[1:] = np.cumsum(lower, axis=0)
    mid = 0.5 * (running[:-1] + running[1:])
    contrib = mid[:, :, None] * dx[:, None, :]
    return contrib.reshape(len(dx), -1)


# ---------------------------------------------------------------------------
# Closed-form flows
# ---------------------------------------------------------------------------

def heisenberg_frozen_flow(a, b, lam, m):
    """Exact time-1 flow of the frozen field (a, b, b*x + lam) on R^3."""
    x, y, z = m
    return np.array([x + a, y + b, z + b * x + 0.5 * a * b + lam])


def heisenberg_exact_flow(lift, s, t, m):
    """Exact solution of the Heisenberg system driven by the lift over [s, t]."""
    g = lift.at(s, t)
    a = g.coeff((1,))
    b = g.coeff((2,))
    lam = 0.5 * (g.coeff((1, 2)) - g.coeff((2, 1)))
    return heisenberg_frozen_flow(a, b, lam, m)
