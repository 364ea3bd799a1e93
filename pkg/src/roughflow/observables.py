"""Scalar observables with exact iterated directional derivatives along the
generator fields.

Two kinds are supported: polynomial-style observables on Euclidean backends
(sympy expressions, differentiated symbolically and lambdified once per word)
and linear matrix-entry observables tr(C^T u) on matrix groups, which are
closed under left-invariant derivatives. The word convention matches the
tensor side: the last letter acts first, so concatenation of words composes
the operators in tensor order.
"""
from __future__ import annotations

import numpy as np
import sympy as sp

from .algebra import DomainError, GroupElement, TruncatedTensor


class PolynomialObservable:
    """Observable f on a Euclidean symbolic system, with V_w f exact for any word."""

    def __init__(self, sys, expr):
        if getattr(sys, "sym_ctx", None) is None:
            raise DomainError("observable needs a symbolic Euclidean system")
        self.sys = sys
        self.ctx = sys.sym_ctx
        self.expr = sp.sympify(expr)
        self._word_exprs: dict[tuple, sp.Expr] = {(): self.expr}
        self._word_fns: dict[tuple, object] = {}

    @classmethod
    def coordinate(cls, sys, index: int) -> "PolynomialObservable":
        return cls(sys, sys.sym_ctx.syms[index])

    def word_expr(self, word) -> sp.Expr:
        word = tuple(word)
        hit = self._word_exprs.get(word)
        if hit is not None:
            return hit
        inner = self.word_expr(word[1:])
        gen = self.sys.generator(word[0])
        out = self.ctx.directional_derivative(inner, gen.exprs)
        self._word_exprs[word] = out
        return out

    def word_derivative(self, word):
        word = tuple(word)
        fn = self._word_fns.get(word)
        if fn is None:
            fn = self.ctx.scalar_fn(self.word_expr(word))
            self._word_fns[word] = fn
        return fn

    def value(self, pts):
        return self.word_derivative(())(pts)


class MatrixEntryObservable:
    """f_C(u) = tr(C^T u) on a left-invariant matrix-group system.

    L_{V_xi} f_C = f_{C xi^T}, so every iterated derivative is again linear.
    """

    def __init__(self, sys, C):
        if not hasattr(sys, "matrices"):
            raise DomainError("matrix-entry observables need a left-invariant system")
        self.sys = sys
        self.C = np.asarray(C, float)
        self._word_mats: dict[tuple, np.ndarray] = {(): self.C}

    @classmethod
    def entry(cls, sys, i: int, j: int) -> "MatrixEntryObservable":
        C = np.zeros((sys.backend.n, sys.backend.n))
        C[i, j] = 1.0
        return cls(sys, C)

    def _mat(self, word) -> np.ndarray:
        word = tuple(word)
        hit = self._word_mats.get(word)
        if hit is not None:
            return hit
        inner = self._mat(word[1:])
        out = inner @ self.sys.matrices[word[0] - 1].T
        self._word_mats[word] = out
        return out

    def word_derivative(self, word):
        C = self._mat(word)

        def fn(pts, C=C):
            pts = np.asarray(pts, float)
            if pts.ndim == 2:
                return float(np.sum(C * pts))
            return np.einsum("ij,nij->n", C, pts)

        return fn

    def value(self, pts):
        return self.word_derivative(())(pts)


def tensor_apply(obs, element, m) -> float:
    """(V_T f)(m) for a truncated tensor T: sum over words of coefficient times
    the iterated derivative, the tensor-extended differential operator."""
    t = element.tensor if isinstance(element, GroupElement) else element
    if not isinstance(t, TruncatedTensor):
        raise DomainError("tensor_apply expects a truncated tensor or group element")
    total = t.grade0 * float(obs.word_derivative(())(m))
    shape = t.shape
    for k in range(1, shape.kappa + 1):
        block = t.levels[k]
        if not np.any(block):
            continue
        for word in shape.words(k):
            c = block[shape.word_index(word)]
            if c != 0.0:
                total += c * float(obs.word_derivative(word)(m))
    return total


def graded_apply(obs, blocks_shape, block, grade: int, first_letter: int, m) -> float:
    """sum over |w| = grade of block_w * (V_{(first_letter,) + w} f)(m); the
    contraction used by the remainder integrand."""
    total = 0.0
    for word in blocks_shape.words(grade):
        c = block[blocks_shape.word_index(word)]
        if c != 0.0:
            total += c * float(obs.word_derivative((first_letter,) + word)(m))
    return total
