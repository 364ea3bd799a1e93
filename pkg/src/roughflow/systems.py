"""Dynamical systems on concrete backends: generator fields, iterated Lie
brackets, the extension of the generator map to free Lie elements, seminorm
estimation over point clouds, conformal rescaling, localization, and the
frame systems on SO(3).

Euclidean named systems carry sympy expressions, so nested brackets, Jacobians
and iterated directional derivatives are exact (lambdified once, evaluated as
batched numpy). Matrix-group systems are left-invariant: brackets are matrix
commutators and frozen flows are exact exponentials.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import sympy as sp
from scipy.linalg import expm, logm

from .algebra import (
    DEFAULT_LIE_TOL,
    AlgebraShape,
    DomainError,
    LieElement,
    dynkin_expand,
    right_nested_bracket,
)

FD_REL_STEP = 1e-5  # central differences at h = FD_REL_STEP * (1 + |m|), one Richardson level


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EuclideanBackend:
    dim: int

    kind = "euclidean"

    def distance(self, p, q) -> float:
        return float(np.linalg.norm(np.asarray(p, float) - np.asarray(q, float)))

    def distances(self, P, Q) -> np.ndarray:
        return np.linalg.norm(np.asarray(P, float) - np.asarray(Q, float), axis=-1)

    def tangent_norm(self, m, v) -> float:
        return float(np.linalg.norm(v))

    def as_batch(self, pts):
        pts = np.asarray(pts, float)
        if pts.ndim == 1:
            return pts[None, :], True
        return pts, False


@dataclass(frozen=True)
class SpecialOrthogonalBackend:
    """SO(n) as full matrices; distance is the geodesic angle ||log(g1^T g2)||_F / sqrt(2)."""

    n: int
    drift_tol: float = 1e-10

    kind = "group"

    def distance(self, g, h) -> float:
        r = np.asarray(g).T @ np.asarray(h)
        if self.n == 3:
            c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
            return float(np.arccos(c))
        w = logm(r)
        return float(np.linalg.norm(w, "fro") / np.sqrt(2.0))

    def distances(self, G, H) -> np.ndarray:
        G, _ = self.as_batch(G)
        H, _ = self.as_batch(H)
        return np.array([self.distance(g, h) for g, h in zip(G, H)])

    def orthogonality_drift(self, g) -> float:
        g = np.asarray(g)
        return float(np.linalg.norm(g.T @ g - np.eye(self.n), "fro"))

    def project(self, g) -> np.ndarray:
        """Polar re-orthonormalization (nearest rotation)."""
        u, _, vt = np.linalg.svd(np.asarray(g, float))
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] *= -1.0
            r = u @ vt
        return r

    def renormalize(self, G) -> np.ndarray:
        """Project each batch member whose drift exceeds the tolerance."""
        G, single = self.as_batch(G)
        out = G.copy()
        for i, g in enumerate(G):
            if self.orthogonality_drift(g) > self.drift_tol:
                out[i] = self.project(g)
        return out[0] if single else out

    def as_batch(self, pts):
        pts = np.asarray(pts, float)
        if pts.ndim == 2:
            return pts[None, :, :], True
        return pts, False


# ---------------------------------------------------------------------------
# Vector fields
# ---------------------------------------------------------------------------

class VectorField:
    """Batched point -> tangent-vector map with optional analytic Jacobian/exprs."""

    def __init__(self, backend, fn, jac_fn=None, exprs=None, name=""):
        self.backend = backend
        self.fn = fn
        self.jac_fn = jac_fn
        self.exprs = tuple(exprs) if exprs is not None else None
        self.name = name

    def __call__(self, pts):
        return self.fn(np.asarray(pts, float))

    def jacobian(self, pts):
        pts = np.asarray(pts, float)
        if self.jac_fn is not None:
            return self.jac_fn(pts)
        return fd_jacobian(self.fn, pts)

    def __repr__(self):
        return f"VectorField({self.name or 'anonymous'})"


def fd_jacobian(fn, pts, rel_step: float = FD_REL_STEP):
    """Central-difference Jacobian with one Richardson extrapolation level.

    Step scales with 1 + |m| per point; works on (dim,) or (N, dim) input.
    """
    pts = np.asarray(pts, float)
    single = pts.ndim == 1
    P = pts[None, :] if single else pts
    n, dim = P.shape
    h = rel_step * (1.0 + np.linalg.norm(P, axis=1))

    def jac_at(step):
        J = np.empty((n, dim, dim))
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = 1.0
            plus = fn(P + step[:, None] * e)
            minus = fn(P - step[:, None] * e)
            J[:, :, j] = (plus - minus) / (2.0 * step[:, None])
        return J

    coarse = jac_at(h)
    fine = jac_at(h / 2.0)
    J = (4.0 * fine - coarse) / 3.0
    return J[0] if single else J


def lie_bracket(sys, Y: VectorField, Z: VectorField) -> VectorField:
    """[Y, Z]: symbolic when both fields carry expressions, matrix commutator for
    left-invariant fields, else the Jacobian commutator (DZ)Y - (DY)Z."""
    if Y.backend != Z.backend:
        raise DomainError("bracket operands live on different backends")
    if isinstance(Y, LeftInvariantField) and isinstance(Z, LeftInvariantField):
        m = Y.matrix @ Z.matrix - Z.matrix @ Y.matrix
        return LeftInvariantField(Y.backend, m, name=f"[{Y.name},{Z.name}]")
    ctx = getattr(sys, "sym_ctx", None)
    if ctx is not None and Y.exprs is not None and Z.exprs is not None:
        return ctx.field(ctx.bracket_exprs(Y.exprs, Z.exprs), name=f"[{Y.name},{Z.name}]")
    return numeric_bracket(Y, Z)


def numeric_bracket(Y: VectorField, Z: VectorField) -> VectorField:
    backend = Y.backend
    if backend.kind == "group":
        return _embedded_group_bracket(Y, Z)

    def fn(pts, Y=Y, Z=Z):
        vy = Y(pts)
        vz = Z(pts)
        jy = Y.jacobian(pts)
        jz = Z.jacobian(pts)
        if pts.ndim == 1:
            return jz @ vy - jy @ vz
        return (np.einsum("nij,nj->ni", jz, vy)
                - np.einsum("nij,nj->ni", jy, vz))

    return VectorField(backend, fn, name=f"[{Y.name},{Z.name}]~fd")


def _embedded_group_bracket(Y, Z):
    """Jacobian-commutator bracket in flattened matrix coordinates."""
    backend = Y.backend
    n = backend.n

    def flat_field(field):
        def ffn(x):
            single = x.ndim == 1
            X = x.reshape(-1, n, n)
            out = field(X).reshape(-1, n * n)
            return out[0] if single else out
        return ffn

    fy, fz = flat_field(Y), flat_field(Z)

    def fn(pts, fy=fy, fz=fz):
        single = pts.ndim == 2
        P = pts.reshape(-1, n * n)
        vy, vz = fy(P), fz(P)
        jy = fd_jacobian(fy, P)
        jz = fd_jacobian(fz, P)
        out = (np.einsum("nij,nj->ni", jz, vy)
               - np.einsum("nij,nj->ni", jy, vz)).reshape(-1, n, n)
        return out[0] if single else out

    return VectorField(backend, fn, name=f"[{Y.name},{Z.name}]~fd")


class LeftInvariantField(VectorField):
    """u -> u @ xi for a fixed algebra element xi."""

    def __init__(self, backend, matrix, name=""):
        self.matrix = np.asarray(matrix, float)

        def fn(pts, m=self.matrix):
            return pts @ m

        super().__init__(backend, fn, name=name)


# ---------------------------------------------------------------------------
# Symbolic (Euclidean) context
# ---------------------------------------------------------------------------

class SymbolicContext:
    """Sympy helper tied to a Euclidean backend: exact brackets, Jacobians and
    iterated directional derivatives, lambdified to batched numpy closures."""

    def __init__(self, dim: int):
        self.dim = dim
        self.backend = EuclideanBackend(dim)
        self.syms = sp.symbols(f"x0:{dim}", real=True)

    def _lambdify_vec(self, exprs):
        func = sp.lambdify(self.syms, list(exprs), "numpy")
        dim = self.dim

        def fn(pts, func=func, dim=dim):
            single = pts.ndim == 1
            P = pts[None, :] if single else pts
            vals = func(*P.T)
            out = np.empty((P.shape[0], dim))
            for j in range(dim):
                out[:, j] = vals[j]
            return out[0] if single else out

        return fn

    def _lambdify_matrix(self, mat_exprs):
        flat = [e for row in mat_exprs for e in row]
        func = sp.lambdify(self.syms, flat, "numpy")
        dim = self.dim

        def fn(pts, func=func, dim=dim):
            single = pts.ndim == 1
            P = pts[None, :] if single else pts
            vals = func(*P.T)
            out = np.empty((P.shape[0], dim, dim))
            for i in range(dim):
                for j in range(dim):
                    out[:, i, j] = vals[i * dim + j]
            return out[0] if single else out

        return fn

    def field(self, exprs, name="") -> VectorField:
        exprs = [sp.sympify(e) for e in exprs]
        if len(exprs) != self.dim:
            raise DomainError(f"field needs {self.dim} components")
        jac_exprs = [[sp.diff(e, s) for s in self.syms] for e in exprs]
        return VectorField(
            backend=self.backend,
            fn=self._lambdify_vec(exprs),
            jac_fn=self._lambdify_matrix(jac_exprs),
            exprs=exprs,
            name=name,
        )

    def bracket_exprs(self, ye, ze):
        out = []
        for i in range(self.dim):
            total = sp.S.Zero
            for j in range(self.dim):
                total += ye[j] * sp.diff(ze[i], self.syms[j]) - ze[j] * sp.diff(ye[i], self.syms[j])
            out.append(sp.expand(total))
        return out

    def directional_derivative(self, expr, field_exprs):
        """L_Y f as an expression."""
        return sp.expand(sum(field_exprs[j] * sp.diff(expr, self.syms[j])
                             for j in range(self.dim)))

    def scalar_fn(self, expr):
        f = sp.lambdify(self.syms, sp.sympify(expr), "numpy")

        def fn(pts, f=f):
            single = pts.ndim == 1
            P = pts[None, :] if single else pts
            vals = np.broadcast_to(np.asarray(f(*P.T), float), P.shape[0])
            return float(vals[0]) if single else np.array(vals, float)

        return fn


# ---------------------------------------------------------------------------
# Dynamical systems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QStructure:
    """Structure functions with [V_a, V_b] = V_{Q(a,b)}; constant for
    left-invariant frames."""

    fn: Callable
    constant: bool = True

    def __call__(self, a, b, m=None) -> np.ndarray:
        return np.asarray(self.fn(np.asarray(a, float), np.asarray(b, float), m), float)

    def matrix(self, a, d: int, m=None) -> np.ndarray:
        """Q_a with columns Q(a, e_j)."""
        cols = [self(a, np.eye(d)[j], m) for j in range(d)]
        return np.stack(cols, axis=1)


class WordBasis:
    """All bracket-word fields of a symbolic system fused into one lambdified
    call, so a frozen-field evaluation costs a single numpy pass regardless of
    how many words contribute."""

    def __init__(self, ctx: SymbolicContext, words, fields):
        self.ctx = ctx
        self.dim = ctx.dim
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        exprs = []
        self.entries = []  # (word_idx, component, flat_idx) for nonzero exprs
        for wi, fld in enumerate(fields):
            for j, e in enumerate(fld.exprs):
                if e != 0:
                    self.entries.append((wi, j, len(exprs)))
                    exprs.append(e)
        self._func = sp.lambdify(ctx.syms, exprs, "numpy") if exprs else None
        self._jac_func = None
        self._jac_entries = None
        self._jac_exprs_fields = fields

    def _build_jacobian(self):
        exprs = []
        entries = []
        for wi, fld in enumerate(self._jac_exprs_fields):
            for i, e in enumerate(fld.exprs):
                for j, s in enumerate(self.ctx.syms):
                    de = sp.diff(e, s)
                    if de != 0:
                        entries.append((wi, i, j, len(exprs)))
                        exprs.append(de)
        self._jac_func = sp.lambdify(self.ctx.syms, exprs, "numpy") if exprs else 0
        self._jac_entries = entries

    def combine(self, coeffs: dict, backend) -> VectorField:
        """Field sum_w coeffs[w] * B_w with a fused evaluation."""
        cvec = np.zeros(len(self.words))
        for w, c in coeffs.items():
            cvec[self.index[w]] = c
        active = [(wi, j, fi, cvec[wi]) for wi, j, fi in self.entries if cvec[wi] != 0.0]
        func = self._func
        dim = self.dim

        def fn(pts, active=active, func=func, dim=dim):
            single = pts.ndim == 1
            P = pts[None, :] if single else pts
            vals = func(*P.T) if func is not None else []
            out = np.zeros((P.shape[0], dim))
            for _, j, fi, c in active:
                out[:, j] += c * vals[fi]
            return out[0] if single else out

        basis = self

        def jac_fn(pts, cvec=cvec, basis=basis, dim=dim):
            if basis._jac_func is None:
                basis._build_jacobian()
            single = pts.ndim == 1
            P = pts[None, :] if single else pts
            out = np.zeros((P.shape[0], dim, dim))
            if basis._jac_func != 0:
                vals = basis._jac_func(*P.T)
                for wi, i, j, fi in basis._jac_entries:
                    c = cvec[wi]
                    if c != 0.0:
                        out[:, i, j] += c * vals[fi]
            return out[0] if single else out

        return VectorField(backend, fn, jac_fn=jac_fn, name="extension")


class DynamicalSystem:
    """Generators V_1..V_d on a backend plus the bracket/extension machinery."""

    def __init__(self, backend, fields, name="", sym_ctx=None, q_structure=None,
                 frame_orthonormal=False):
        self.backend = backend
        self.fields = tuple(fields)
        self.name = name
        self.sym_ctx = sym_ctx
        self.q_structure = q_structure
        self.frame_orthonormal = frame_orthonormal
        self._bracket_cache: dict[tuple, VectorField] = {
            (i + 1,): f for i, f in enumerate(self.fields)
        }
        self._basis_cache: dict[int, WordBasis | None] = {}

    @property
    def d(self) -> int:
        return len(self.fields)

    def generator(self, letter: int) -> VectorField:
        return self.fields[letter - 1]

    def bracket_field(self, word) -> VectorField:
        """Right-nested bracket field for the word, cached per system."""
        word = tuple(word)
        hit = self._bracket_cache.get(word)
        if hit is not None:
            return hit
        inner = self.bracket_field(word[1:])
        out = lie_bracket(self, self.generator(word[0]), inner)
        self._bracket_cache[word] = out
        return out

    def combination(self, coeffs) -> VectorField:
        """sum of c * V_letter for coeffs over the generators."""
        coeffs = np.asarray(coeffs, float)
        items = [(c, f) for c, f in zip(coeffs, self.fields) if c != 0.0]

        def fn(pts, items=items):
            acc = None
            for c, f in items:
                v = c * f(pts)
                acc = v if acc is None else acc + v
            if acc is None:
                return np.zeros_like(pts)
            return acc

        return VectorField(self.backend, fn, name="combination")

    def word_basis(self, kappa: int) -> WordBasis | None:
        """Fused evaluator over all bracket words up to kappa (symbolic systems)."""
        if type(self) is not DynamicalSystem or self.sym_ctx is None:
            return None
        hit = self._basis_cache.get(kappa)
        if hit is None and kappa not in self._basis_cache:
            shape = AlgebraShape(self.d, kappa)
            words = [w for k in range(1, kappa + 1) for w in shape.words(k)]
            fields = [self.bracket_field(w) for w in words]
            if all(f.exprs is not None for f in fields):
                hit = WordBasis(self.sym_ctx, words, fields)
            self._basis_cache[kappa] = hit
        return self._basis_cache.get(kappa)

    def extension(self, elem: LieElement, tol: float = DEFAULT_LIE_TOL) -> VectorField:
        """Field of the extended system at a free Lie element: the Dynkin word
        coefficients weight the right-nested bracket fields."""
        items = dynkin_expand(elem, tol)
        basis = self.word_basis(elem.shape.kappa)
        if basis is not None:
            return basis.combine(dict(items), self.backend)
        pieces = [(c, self.bracket_field(w)) for w, c in items if c != 0.0]

        jac_ok = all(f.jac_fn is not None for _, f in pieces)

        def fn(pts, pieces=pieces):
            acc = None
            for c, f in pieces:
                v = c * f(pts)
                acc = v if acc is None else acc + v
            if acc is None:
                return np.zeros_like(np.asarray(pts, float))
            return acc

        jac_fn = None
        if jac_ok and pieces:
            def jac_fn(pts, pieces=pieces):
                acc = None
                for c, f in pieces:
                    j = c * f.jac_fn(pts)
                    acc = j if acc is None else acc + j
                return acc

        return VectorField(self.backend, fn, jac_fn=jac_fn, name="extension")

    def extension_at(self, elem: LieElement, pts, tol: float = DEFAULT_LIE_TOL):
        return self.extension(elem, tol)(pts)

    def frozen_matrix(self, elem):
        return None  # exact exponentials only exist on matrix-group systems


class LeftInvariantSystem(DynamicalSystem):
    """System whose generators are left-invariant fields of algebra matrices."""

    def __init__(self, backend, matrices, name="", inner_weights=None):
        matrices = [np.asarray(m, float) for m in matrices]
        fields = [LeftInvariantField(backend, m, name=f"V{i + 1}")
                  for i, m in enumerate(matrices)]
        super().__init__(backend, fields, name=name, frame_orthonormal=True)
        self.matrices = matrices
        basis = np.stack([m.ravel() for m in matrices])
        self._coord_solver = np.linalg.pinv(basis.T)
        q = self._structure_from_commutators()
        self.q_structure = q

    def _structure_from_commutators(self):
        d = len(self.matrices)
        table = np.empty((d, d, d))
        for i in range(d):
            for j in range(d):
                comm = self.matrices[i] @ self.matrices[j] - self.matrices[j] @ self.matrices[i]
                table[i, j] = self.frame_coords_matrix(comm)

        def fn(a, b, m=None, table=table):
            return np.einsum("i,j,ijk->k", a, b, table)

        return QStructure(fn=fn, constant=True)

    def frame_coords_matrix(self, omega) -> np.ndarray:
        """Coordinates of an algebra matrix in the generator basis."""
        return self._coord_solver @ np.asarray(omega, float).ravel()

    def frame_coords(self, u, tangent) -> np.ndarray:
        """Coordinates of a tangent vector W = u @ omega at the frame point u."""
        omega = np.asarray(u, float).T @ np.asarray(tangent, float)
        return self.frame_coords_matrix(omega)

    def metric_inner(self, u, w1, w2) -> float:
        """Inner product declaring the generator frame orthonormal."""
        return float(self.frame_coords(u, w1) @ self.frame_coords(u, w2))

    def metric_norm(self, u, w) -> float:
        return float(np.sqrt(max(self.metric_inner(u, w, w), 0.0)))

    def bracket_matrix(self, word) -> np.ndarray:
        word = tuple(word)
        if len(word) == 1:
            return self.matrices[word[0] - 1]
        inner = self.bracket_matrix(word[1:])
        outer = self.matrices[word[0] - 1]
        return outer @ inner - inner @ outer

    def extension(self, elem: LieElement, tol: float = DEFAULT_LIE_TOL) -> LeftInvariantField:
        items = dynkin_expand(elem, tol)
        acc = np.zeros_like(self.matrices[0])
        for w, c in items:
            acc = acc + c * self.bracket_matrix(w)
        return LeftInvariantField(self.backend, acc, name="extension")

    def frozen_matrix(self, elem):
        return self.extension(elem).matrix


# ---------------------------------------------------------------------------
# Named systems / registry
# ---------------------------------------------------------------------------

def abelian(dim: int, vectors=None) -> DynamicalSystem:
    """Constant commuting fields; defaults to the coordinate directions."""
    ctx = SymbolicContext(dim)
    if vectors is None:
        vectors = np.eye(dim)
    fields = [ctx.field([sp.Float(v) for v in vec], name=f"V{i + 1}")
              for i, vec in enumerate(np.asarray(vectors, float))]
    return DynamicalSystem(EuclideanBackend(dim), fields, name=f"abelian({dim})", sym_ctx=ctx)


def heisenberg() -> DynamicalSystem:
    """V1 = d/dx, V2 = d/dy + x d/dz on R^3 (step-2 nilpotent)."""
    ctx = SymbolicContext(3)
    x0 = ctx.syms[0]
    fields = [ctx.field([1, 0, 0], name="V1"), ctx.field([0, 1, x0], name="V2")]
    return DynamicalSystem(EuclideanBackend(3), fields, name="heisenberg", sym_ctx=ctx)


def engel() -> DynamicalSystem:
    """V1 = d/dx, V2 = d/dy + x d/dz + (x^2/2) d/dw on R^4 (step-3 nilpotent).

    With a step-2 lift the one-step map is not multiplicative, so this system
    exhibits the genuine dyadic convergence rate.
    """
    ctx = SymbolicContext(4)
    x0 = ctx.syms[0]
    fields = [ctx.field([1, 0, 0, 0], name="V1"),
              ctx.field([0, 1, x0, x0 ** 2 / 2], name="V2")]
    return DynamicalSystem(EuclideanBackend(4), fields, name="engel", sym_ctx=ctx)


def rotation2d() -> DynamicalSystem:
    ctx = SymbolicContext(2)
    x0, x1 = ctx.syms
    return DynamicalSystem(EuclideanBackend(2), [ctx.field([-x1, x0], name="V1")],
                           name="rotation2d", sym_ctx=ctx)


def linear_radial(dim: int) -> DynamicalSystem:
    """Single generator Y(m) = m: the canonical linear-growth field."""
    ctx = SymbolicContext(dim)
    return DynamicalSystem(EuclideanBackend(dim),
                           [ctx.field(list(ctx.syms), name="V1")],
                           name=f"linear_radial({dim})", sym_ctx=ctx)


def euclidean_custom(dim: int, tables) -> DynamicalSystem:
    """Polynomial generators from coefficient tables.

    tables[i][j] is a list of {"coeff": c, "powers": [p_0..p_{dim-1}]} monomials
    for component j of generator i.
    """
    ctx = SymbolicContext(dim)
    fields = []
    for gi, table in enumerate(tables):
        if len(table) != dim:
            raise DomainError(f"generator {gi}: need {dim} components")
        comps = []
        for comp in table:
            total = sp.S.Zero
            for mono in comp:
                term = sp.Float(mono["coeff"])
                for s, p in zip(ctx.syms, mono["powers"]):
                    term *= s ** int(p)
                total += term
            comps.append(total)
        fields.append(ctx.field(comps, name=f"V{gi + 1}"))
    return DynamicalSystem(EuclideanBackend(dim), fields, name="euclidean_custom",
                           sym_ctx=ctx)


def so3_left_invariant() -> LeftInvariantSystem:
    """Left-invariant frame of SO(3) from the standard hat-map basis."""
    l1 = np.array([[0.0, 0, 0], [0, 0, -1], [0, 1, 0]])
    l2 = np.array([[0.0, 0, 1], [0, 0, 0], [-1, 0, 0]])
    l3 = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 0]])
    return LeftInvariantSystem(SpecialOrthogonalBackend(3), [l1, l2, l3],
                               name="so3_left_invariant")


def _horizontal_matrix(a) -> np.ndarray:
    a = np.asarray(a, float)
    return np.array([
        [0.0, 0.0, a[0]],
        [0.0, 0.0, a[1]],
        [-a[0], -a[1], 0.0],
    ])


def _vertical_matrix(A) -> np.ndarray:
    A = np.asarray(A, float)
    out = np.zeros((3, 3))
    out[:2, :2] = A
    return out


class RollingSystem(LeftInvariantSystem):
    """Frame-bundle system of the unit sphere: O(S^2) ~ SO(3) with columns
    (u e1, u e2) an oriented tangent frame at the base point u e3.

    Driving space is R^2 + so(2); the third generator is scaled by 1/sqrt(2) so
    the driving basis is orthonormal for the Hilbert-Schmidt pairing on so(2).
    """

    def __init__(self):
        rot = np.array([[0.0, -1.0], [1.0, 0.0]])
        mats = [
            _horizontal_matrix([1.0, 0.0]),
            _horizontal_matrix([0.0, 1.0]),
            _vertical_matrix(rot) / np.sqrt(2.0),
        ]
        super().__init__(SpecialOrthogonalBackend(3), mats, name="rolling_s2")

    def horizontal(self, a) -> LeftInvariantField:
        return LeftInvariantField(self.backend, _horizontal_matrix(a), name="B_a")

    def vertical(self, A) -> LeftInvariantField:
        return LeftInvariantField(self.backend, _vertical_matrix(A), name="A*")

    def driving_field(self, a, A) -> LeftInvariantField:
        """V_{(a,A)} = B_a + A* for a in R^2, A in so(2)."""
        return LeftInvariantField(
            self.backend, _horizontal_matrix(a) + _vertical_matrix(A), name="V_(a,A)")

    @staticmethod
    def curvature(a, c) -> np.ndarray:
        """Constant-curvature tensor of the unit sphere in so(2): a c^T - c a^T."""
        a = np.asarray(a, float)
        c = np.asarray(c, float)
        return np.outer(a, c) - np.outer(c, a)

    def base_point(self, u) -> np.ndarray:
        return np.asarray(u, float)[:, 2]

    def frame_norm_sq(self, a, A) -> float:
        """|a|^2 + |A|^2_HS, the squared driving norm of (a, A)."""
        a = np.asarray(a, float)
        A = np.asarray(A, float)
        return float(a @ a + np.sum(A * A))


def rolling_system() -> RollingSystem:
    return RollingSystem()


_REGISTRY = {
    "abelian": abelian,
    "heisenberg": heisenberg,
    "engel": engel,
    "rotation2d": rotation2d,
    "linear_radial": linear_radial,
    "euclidean_custom": euclidean_custom,
    "so3_left_invariant": so3_left_invariant,
    "rolling_s2": rolling_system,
}


def build_system(name: str, **params) -> DynamicalSystem:
    if name not in _REGISTRY:
        raise DomainError(f"unknown system '{name}'; known: {sorted(_REGISTRY)}")
    return _REGISTRY[name](**params)


def cloud_ball(center, radius: float, count: int, seed: int) -> np.ndarray:
    """Deterministic point cloud in a ball (Philox-seeded, uniform by rejection-free
    radial scaling)."""
    center = np.asarray(center, float)
    gen = np.random.Generator(np.random.Philox(key=[seed, 0]))
    dim = center.shape[0]
    raw = gen.standard_normal((count, dim))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    radii = radius * gen.random(count) ** (1.0 / dim)
    return center + raw * radii[:, None]


# ---------------------------------------------------------------------------
# Seminorm estimation over clouds
# ---------------------------------------------------------------------------

@dataclass
class GrowthFit:
    slope: float
    intercept: float
    bound_holds: bool


@dataclass
class NormReport:
    cloud_size: int
    direction_budget: int
    field_norm: float
    grad_norm: float
    hessian_norm: float
    h_norm: float
    per_generator: dict
    growth: GrowthFit
    failures: list

    @property
    def values(self) -> dict:
        return {
            "field": self.field_norm,
            "grad": self.grad_norm,
            "hessian": self.hessian_norm,
            "H": self.h_norm,
        }


def _unit_directions(shape: AlgebraShape, extra: int, seed: int) -> list[LieElement]:
    """Normalized bracketing words plus random unit combinations of them."""
    from .algebra import TruncatedTensor

    words = []
    for k in range(1, shape.kappa + 1):
        words.extend(shape.words(k))
    out = []
    tensors = []
    for w in words:
        t = right_nested_bracket(shape, w)
        n = t.norm()
        if n > 1e-14:
            tensors.append(t)
            out.append(LieElement((1.0 / n) * t))
    gen = np.random.Generator(np.random.Philox(key=[seed, 1]))
    for _ in range(extra):
        acc = TruncatedTensor.zero(shape)
        for t in tensors:
            acc = acc + float(gen.standard_normal()) * t
        n = acc.norm()
        if n > 1e-12:
            out.append(LieElement((1.0 / n) * acc))
    return out


def _second_derivative_norm(field: VectorField, m, rng, samples: int = 6,
                            rel_step: float = 1e-4) -> float:
    """sup over sampled unit direction pairs of |D^2 Y(m)[v, w]|, via central
    differences of the (analytic where available) Jacobian."""
    m = np.asarray(m, float)
    dim = m.shape[0]
    h = rel_step * (1.0 + np.linalg.norm(m))
    best = 0.0
    dirs = list(np.eye(dim))
    dirs.extend(rng.standard_normal(dim) for _ in range(max(samples - dim, 0)))
    for w in dirs:
        w = np.asarray(w, float)
        w = w / np.linalg.norm(w)
        jp = field.jacobian(m + h * w)
        jm = field.jacobian(m - h * w)
        hess_w = (jp - jm) / (2.0 * h)  # D^2 Y [.,w]
        best = max(best, float(np.linalg.norm(hess_w, 2)))
    return best


def estimate_norms(sys: DynamicalSystem, kappa: int, cloud, direction_samples: int = 16,
                   seed: int = 0, origin=None) -> NormReport:
    """Cloud maxima of |V_A|, |nabla V_A| and the second-derivative part of H
    over unit free Lie directions (bracketing words + random combinations).

    Flat backends have no curvature term, so H reduces to the second-derivative
    norm. On matrix-group backends the Jacobian norms are embedded-coordinate
    surrogates. The growth fit regresses max_A |V_A(m)| against 1 + d(o, m).
    """
    shape = AlgebraShape(sys.d, kappa)
    n_words = sum(shape.level_dim(k) for k in range(1, kappa + 1))
    if direction_samples < n_words:
        direction_samples = n_words
    directions = _unit_directions(shape, extra=direction_samples - n_words, seed=seed)

    is_group = sys.backend.kind == "group"
    cloud = np.asarray(cloud, float)
    n_pts = cloud.shape[0]
    if origin is None:
        origin = np.zeros(cloud.shape[-1]) if not is_group else np.eye(sys.backend.n)

    rng = np.random.default_rng(seed)
    field_max = np.zeros(n_pts)
    grad_max = 0.0
    hess_max = 0.0
    failures = []
    per_gen = {}

    def field_values(fieldobj):
        vals = fieldobj(cloud)
        if is_group:
            return np.array([sys.metric_norm(u, w) for u, w in zip(cloud, vals)])
        return np.linalg.norm(vals, axis=-1)

    for a_idx, elem in enumerate(directions):
        try:
            fld = sys.extension(elem)
        except DomainError:
            continue
        norms = field_values(fld)
        if not np.all(np.isfinite(norms)):
            bad = int(np.argmax(~np.isfinite(norms)))
            failures.append({"direction": a_idx, "point_index": bad})
            norms = np.nan_to_num(norms)
        field_max = np.maximum(field_max, norms)
        if is_group:
            embed = cloud.reshape(n_pts, -1)
            jac = fd_jacobian(lambda x: fld(x.reshape(-1, 3, 3)).reshape(len(x), -1), embed)
            grad_max = max(grad_max, max(np.linalg.norm(j, 2) for j in jac))
        else:
            jac = fld.jacobian(cloud)
            grad_max = max(grad_max, max(np.linalg.norm(j, 2) for j in jac))
            sub = cloud[:: max(1, n_pts // 8)]
            for m in sub:
                hess_max = max(hess_max, _second_derivative_norm(fld, m, rng))

    for i, gen_field in enumerate(sys.fields):
        norms = field_values(gen_field)
        if is_group:
            per_gen[f"V{i + 1}"] = {"field": float(norms.max())}
        else:
            jac = gen_field.jacobian(cloud)
            per_gen[f"V{i + 1}"] = {
                "field": float(norms.max()),
                "grad": float(max(np.linalg.norm(j, 2) for j in jac)),
            }

    if is_group:
        dist = np.array([sys.backend.distance(origin, u) for u in cloud])
    else:
        dist = np.linalg.norm(cloud - origin, axis=-1)
    ones = np.stack([np.ones(n_pts), dist], axis=1)
    coeffs, *_ = np.linalg.lstsq(ones, field_max, rcond=None)
    bound_holds = bool(np.all(field_max <= field_max.min() + grad_max * dist + 1e-9))
    growth = GrowthFit(slope=float(coeffs[1]), intercept=float(coeffs[0]),
                       bound_holds=bound_holds)

    return NormReport(
        cloud_size=n_pts,
        direction_budget=len(directions),
        field_norm=float(field_max.max()),
        grad_norm=float(grad_max),
        hessian_norm=float(hess_max),
        h_norm=float(hess_max),  # flat / surrogate: curvature term absent
        per_generator=per_gen,
        growth=growth,
        failures=failures,
    )


# ---------------------------------------------------------------------------
# Conformal rescaling (Euclidean backends)
# ---------------------------------------------------------------------------

@dataclass
class ConformalMetric:
    """Metric (1/(1+h))^2 g with the smooth distance surrogate
    h(m) = sqrt(|m-o|^2 + eps^2)."""

    origin: np.ndarray
    epsilon: float

    def h(self, pts) -> np.ndarray:
        pts = np.asarray(pts, float)
        r = np.linalg.norm(pts - self.origin, axis=-1)
        return np.sqrt(r * r + self.epsilon ** 2)

    def factor(self, pts) -> np.ndarray:
        return 1.0 / (1.0 + self.h(pts))

    def grad_h(self, m) -> np.ndarray:
        m = np.asarray(m, float)
        return (m - self.origin) / self.h(m)

    def norm(self, m, v) -> float:
        return float(self.factor(m) * np.linalg.norm(v))

    def nabla_bar(self, fld: VectorField, m, u) -> np.ndarray:
        """Covariant derivative of the rescaled metric along u, in flat coordinates,
        via the conformal-change formula with potential -ln(1+h)."""
        m = np.asarray(m, float)
        u = np.asarray(u, float)
        y = fld(m)
        J = fld.jacobian(m)
        gphi = -self.grad_h(m) / (1.0 + self.h(m))
        return (J @ u) + (gphi @ u) * y + (gphi @ y) * u - (u @ y) * gphi

    def grad_norm_bar(self, fld: VectorField, m) -> float:
        """sup over flat-unit u of |nabla_bar_u Y|: the operator norm of
        J + Y grad(phi)^T + (grad(phi).Y) I - grad(phi) Y^T."""
        m = np.asarray(m, float)
        y = fld(m)
        J = fld.jacobian(m)
        gphi = -self.grad_h(m) / (1.0 + self.h(m))
        M = J + np.outer(y, gphi) + (gphi @ y) * np.eye(len(y)) - np.outer(gphi, y)
        return float(np.linalg.norm(M, 2))

    def radial_distance(self, p) -> float:
        """Conformal length of the radial segment from the origin to p (exact for
        radially nonincreasing factors)."""
        from .estimates import conformal_distance

        r = float(np.linalg.norm(np.asarray(p, float) - self.origin))
        eps = self.epsilon
        return conformal_distance(lambda u: 1.0 / (1.0 + np.sqrt(u * u + eps * eps)), r)

    def segment_distance(self, p, q) -> float:
        """Quadrature along the straight segment p -> q; an upper-bound estimate
        (flagged approximate) off radial rays."""
        from scipy.integrate import quad

        p = np.asarray(p, float)
        q = np.asarray(q, float)
        L = np.linalg.norm(q - p)
        if L == 0:
            return 0.0
        val, _ = quad(lambda t: float(self.factor(p + t * (q - p))) * L, 0.0, 1.0,
                      epsabs=1e-10, limit=200)
        return float(val)


@dataclass
class ConformalReport:
    sup_norm_bar: float
    linear_coeff: float
    g_bar_bounded: bool
    grad_bar_sup: float


def conformal_rescale(sys: DynamicalSystem, origin, epsilon: float):
    """Attach the conformal machinery to a Euclidean system; rejected elsewhere."""
    if sys.backend.kind != "euclidean":
        raise DomainError("conformal rescaling is implemented on Euclidean backends only")
    metric = ConformalMetric(origin=np.asarray(origin, float), epsilon=float(epsilon))
    return sys, metric


def conformal_boundedness(metric: ConformalMetric, fld: VectorField, cloud) -> ConformalReport:
    """Check the rescaled boundedness criterion for a field over a cloud: finite
    sup of |Y|_bar and a finite linear-growth coefficient |Y| <= C(1 + d(o, m))."""
    cloud = np.asarray(cloud, float)
    vals = fld(cloud)
    flat = np.linalg.norm(vals, axis=-1)
    dist = np.linalg.norm(cloud - metric.origin, axis=-1)
    sup_bar = float(np.max(flat * metric.factor(cloud)))
    linear_coeff = float(np.max(flat / (1.0 + dist)))
    grad_bar = float(max(metric.grad_norm_bar(fld, m) for m in cloud))
    return ConformalReport(
        sup_norm_bar=sup_bar,
        linear_coeff=linear_coeff,
        g_bar_bounded=bool(np.isfinite(sup_bar) and np.isfinite(linear_coeff)),
        grad_bar_sup=grad_bar,
    )


# ---------------------------------------------------------------------------
# Localization
# ---------------------------------------------------------------------------

def smooth_step(x):
    """C^infinity step: exactly 0 for x <= 0, exactly 1 for x >= 1, built from
    exp(-1/x) ratios. Fixed profile, bit-reproducible."""
    x = np.asarray(x, float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(x > 0.0, np.exp(-1.0 / np.where(x > 0.0, x, 1.0)), 0.0)
        b = np.where(x < 1.0, np.exp(-1.0 / np.where(x < 1.0, 1.0 - x, 1.0)), 0.0)
    return a / (a + b)


def smooth_step_derivative(x):
    x = np.asarray(x, float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        xp = np.where(x > 0.0, x, 1.0)
        xq = np.where(x < 1.0, 1.0 - x, 1.0)
        a = np.where(x > 0.0, np.exp(-1.0 / xp), 0.0)
        b = np.where(x < 1.0, np.exp(-1.0 / xq), 0.0)
        da = np.where(x > 0.0, a / xp ** 2, 0.0)
        db = np.where(x < 1.0, -b / xq ** 2, 0.0)
    s = a + b
    return (da * s - a * (da + db)) / (s * s)


class LocalizedSystem(DynamicalSystem):
    """Generators multiplied by a plateau bump: phi = 1 on |m-o| <= r1, 0 outside r2.

    Inside the open plateau every phi-derivative vanishes identically, so all
    nested bracket fields coincide with the base system's ones there; the
    implementation evaluates them piecewise (base values inside, finite-difference
    brackets of the bumped generators outside), which is exact on the plateau.
    """

    def __init__(self, base: DynamicalSystem, r1: float, r2: float, origin):
        if not (0 < r1 < r2):
            raise DomainError("need 0 < r1 < r2")
        if base.backend.kind != "euclidean":
            raise DomainError("localization is implemented on Euclidean backends only")
        self.base = base
        self.r1 = float(r1)
        self.r2 = float(r2)
        self.origin = np.asarray(origin, float)
        fields = [self._bumped(f) for f in base.fields]
        super().__init__(base.backend, fields, name=base.name + "~localized")

    def bump(self, pts) -> np.ndarray:
        r = np.linalg.norm(np.asarray(pts, float) - self.origin, axis=-1)
        return smooth_step((self.r2 - r) / (self.r2 - self.r1))

    def bump_gradient(self, m) -> np.ndarray:
        m = np.asarray(m, float)
        rel = m - self.origin
        r = np.linalg.norm(rel)
        if r == 0.0 or r <= self.r1 or r >= self.r2:
            return np.zeros_like(m)
        x = (self.r2 - r) / (self.r2 - self.r1)
        return smooth_step_derivative(x) * (-1.0 / (self.r2 - self.r1)) * rel / r

    def _bumped(self, fld: VectorField) -> VectorField:
        def fn(pts, fld=fld):
            vals = fld(pts)
            phi = self.bump(pts)
            return vals * phi[..., None] if vals.ndim > 1 else vals * phi

        def jac_fn(pts, fld=fld):
            pts_arr = np.asarray(pts, float)
            single = pts_arr.ndim == 1
            P = pts_arr[None, :] if single else pts_arr
            base_j = fld.jacobian(P)
            vals = fld(P)
            phi = self.bump(P)
            out = base_j * phi[:, None, None]
            for i, m in enumerate(P):
                grad = self.bump_gradient(m)
                if np.any(grad):
                    out[i] += np.outer(vals[i], grad)
            return out[0] if single else out

        return VectorField(fld.backend, fn, jac_fn=jac_fn, name=fld.name + "~bumped")

    def bracket_field(self, word) -> VectorField:
        word = tuple(word)
        hit = self._bracket_cache.get(word)
        if hit is not None:
            return hit
        if len(word) == 1:
            return self.fields[word[0] - 1]
        base_field = self.base.bracket_field(word)
        inner = self.bracket_field(word[1:])
        outer_fd = numeric_bracket(self.fields[word[0] - 1], inner)

        def fn(pts, base_field=base_field, outer_fd=outer_fd):
            pts_arr = np.asarray(pts, float)
            single = pts_arr.ndim == 1
            P = pts_arr[None, :] if single else pts_arr
            r = np.linalg.norm(P - self.origin, axis=-1)
            inside = r <= self.r1
            out = np.zeros_like(P)
            if np.any(inside):
                out[inside] = base_field(P[inside])
            if np.any(~inside):
                out[~inside] = outer_fd(P[~inside])
            return out[0] if single else out

        result = VectorField(self.backend, fn, name=f"bracket{word}~localized")
        self._bracket_cache[word] = result
        return result


def localize(sys: DynamicalSystem, r1: float, r2: float, origin) -> LocalizedSystem:
    return LocalizedSystem(sys, r1, r2, origin)


# ---------------------------------------------------------------------------
# Koszul connection for parallelized frames
# ---------------------------------------------------------------------------

class FrameConnection:
    """Levi-Civita derivative of a parallelized orthonormal frame, computed from
    the structure functions: nabla_{V_a} V_b = (1/2) V_{Q(a,b) - Q_a^T b - Q_b^T a}."""

    def __init__(self, sys: DynamicalSystem):
        if sys.q_structure is None:
            raise DomainError("system carries no structure functions Q")
        if not sys.frame_orthonormal:
            raise DomainError("Koszul frame formula needs an orthonormal frame")
        self.sys = sys
        self.q = sys.q_structure

    def coefficients(self, a, b, m=None) -> np.ndarray:
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        d = self.sys.d
        qa = self.q.matrix(a, d, m)
        qb = self.q.matrix(b, d, m)
        return 0.5 * (self.q(a, b, m) - qa.T @ b - qb.T @ a)

    def covariant(self, a, b, m):
        """nabla_{V_a} V_b evaluated at m (tangent vector in backend coordinates)."""
        w = self.coefficients(a, b, m)
        vals = [f(m) for f in self.sys.fields]
        acc = np.zeros_like(vals[0])
        for c, v in zip(w, vals):
            acc = acc + c * v
        return acc

    def koszul_rhs(self, a, b, c, m=None) -> float:
        """(1/2)(Q(a,b).c - Q(a,c).b - Q(b,c).a): the metric-derivative terms vanish
        because the frame pairing is constant."""
        return 0.5 * float(self.q(a, b, m) @ np.asarray(c, float)
                           - self.q(a, c, m) @ np.asarray(b, float)
                           - self.q(b, c, m) @ np.asarray(a, float))

    def koszul_rhs_numeric(self, a, b, c, m) -> float:
        """Same contraction with the brackets evaluated by the numeric
        Jacobian-commutator oracle and the frame inner product."""
        sys = self.sys
        fa, fb, fc = (sys.combination(v) for v in (a, b, c))
        bab = numeric_bracket(fa, fb)(m)
        bac = numeric_bracket(fa, fc)(m)
        bbc = numeric_bracket(fb, fc)(m)
        vb, va, vc = fb(m), fa(m), fc(m)
        if sys.backend.kind == "group":
            inner = lambda w1, w2: sys.metric_inner(m, w1, w2)
        else:
            inner = lambda w1, w2: float(np.asarray(w1) @ np.asarray(w2))
        return 0.5 * (inner(bab, vc) - inner(bac, vb) - inner(bbc, va))


def koszul_parallelized(sys: DynamicalSystem) -> FrameConnection:
    return FrameConnection(sys)


def exact_group_step(backend: SpecialOrthogonalBackend, pts, matrix: np.ndarray):
    """Right translation by expm(matrix): the exact frozen flow of a
    left-invariant field."""
    Q = expm(matrix)
    return pts @ Q
