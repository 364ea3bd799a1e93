"""Step-kappa truncated tensor algebra, free nilpotent group and free Lie layer.

Elements are stored densely: one real coefficient array per grade k = 0..kappa,
indexed by words i_1...i_k over the alphabet {1..d} in lexicographic (big-endian)
order, so that concatenation of words matches np.kron of the grade blocks.
Everything is double precision; every operation projects away grades > kappa.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Dense storage is Sum_k d^k coefficients per element; past this envelope the
# grade convolution stops being cheap, so construction refuses.
MAX_DIM = 6
MAX_KAPPA = 6

DEFAULT_GROUP_TOL = 1e-9
DEFAULT_LIE_TOL = 1e-9


class ShapeMismatchError(ValueError):
    """Operands live in different truncated algebras."""


class DomainError(ValueError):
    """Element violates a grade-0 / membership precondition."""


@dataclass(frozen=True)
class AlgebraShape:
    """Alphabet size d and truncation step kappa of T^(kappa)(R^d)."""

    d: int
    kappa: int

    def __post_init__(self):
        if not (1 <= self.d <= MAX_DIM):
            raise DomainError(f"driving dimension d={self.d} outside supported 1..{MAX_DIM}")
        if not (1 <= self.kappa <= MAX_KAPPA):
            raise DomainError(f"truncation kappa={self.kappa} outside supported 1..{MAX_KAPPA}")

    def level_dim(self, k: int) -> int:
        return self.d ** k

    def words(self, k: int):
        """All words of length k as tuples of letters in 1..d, lexicographic."""
        return itertools.product(range(1, self.d + 1), repeat=k)

    def word_index(self, word: tuple[int, ...]) -> int:
        idx = 0
        for letter in word:
            if not 1 <= letter <= self.d:
                raise DomainError(f"letter {letter} outside alphabet 1..{self.d}")
            idx = idx * self.d + (letter - 1)
        return idx


def _check_same_shape(a: "TruncatedTensor", b: "TruncatedTensor"):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")


class TruncatedTensor:
    """Element of T^(kappa)(R^d) with dense per-grade coefficient blocks."""

    __slots__ = ("shape", "levels")

    def __init__(self, shape: AlgebraShape, levels):
        self.shape = shape
        lv = []
        for k in range(shape.kappa + 1):
            arr = np.asarray(levels[k], dtype=float).reshape(shape.level_dim(k))
            arr = arr.copy()
            arr.flags.writeable = False
            lv.append(arr)
        self.levels = tuple(lv)

    # -- constructors -------------------------------------------------
    @classmethod
    def zero(cls, shape: AlgebraShape) -> "TruncatedTensor":
        return cls(shape, [np.zeros(shape.level_dim(k)) for k in range(shape.kappa + 1)])

    @classmethod
    def unit(cls, shape: AlgebraShape) -> "TruncatedTensor":
        levels = [np.zeros(shape.level_dim(k)) for k in range(shape.kappa + 1)]
        levels[0][0] = 1.0
        return cls(shape, levels)

    @classmethod
    def basis(cls, shape: AlgebraShape, letter: int) -> "TruncatedTensor":
        return cls.from_words(shape, {(letter,): 1.0})

    @classmethod
    def from_words(cls, shape: AlgebraShape, coeffs: dict) -> "TruncatedTensor":
        levels = [np.zeros(shape.level_dim(k)) for k in range(shape.kappa + 1)]
        for word, c in coeffs.items():
            word = tuple(word)
            k = len(word)
            if k > shape.kappa:
                continue
            levels[k][shape.word_index(word)] += c
        return cls(shape, levels)

    @classmethod
    def from_grade1(cls, shape: AlgebraShape, vec) -> "TruncatedTensor":
        levels = [np.zeros(shape.level_dim(k)) for k in range(shape.kappa + 1)]
        levels[1][:] = np.asarray(vec, dtype=float)
        return cls(shape, levels)

    # -- basic queries ------------------------------------------------
    def coeff(self, word) -> float:
        word = tuple(word)
        k = len(word)
        if k > self.shape.kappa:
            return 0.0
        return float(self.levels[k][self.shape.word_index(word)])

    @property
    def grade0(self) -> float:
        return float(self.levels[0][0])

    def level_norms(self) -> np.ndarray:
        return np.array([np.linalg.norm(block) for block in self.levels])

    def norm(self) -> float:
        """Hilbertian norm induced by the word basis being orthonormal."""
        return float(np.sqrt(sum(float(block @ block) for block in self.levels)))

    def inner(self, other: "TruncatedTensor") -> float:
        _check_same_shape(self, other)
        return float(sum(a @ b for a, b in zip(self.levels, other.levels)))

    # -- linear structure ----------------------------------------------
    def __add__(self, other):
        _check_same_shape(self, other)
        return TruncatedTensor(self.shape, [a + b for a, b in zip(self.levels, other.levels)])

    def __sub__(self, other):
        _check_same_shape(self, other)
        return TruncatedTensor(self.shape, [a - b for a, b in zip(self.levels, other.levels)])

    def __mul__(self, scalar):
        scalar = float(scalar)
        return TruncatedTensor(self.shape, [scalar * a for a in self.levels])

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def dilate(self, lam: float) -> "TruncatedTensor":
        """Graded dilation: grade-k block scaled by lam^k."""
        return TruncatedTensor(self.shape, [(lam ** k) * a for k, a in enumerate(self.levels)])

    def __repr__(self):
        head = {tuple(): self.grade0}
        for word in self.shape.words(1):
            head[word] = self.coeff(word)
        return f"TruncatedTensor(d={self.shape.d}, kappa={self.shape.kappa}, low={head})"


def mul(a: TruncatedTensor, b: TruncatedTensor) -> TruncatedTensor:
    """Truncated tensor product: grade k of a*b is sum_j a_j (x) b_{k-j}."""
    _check_same_shape(a, b)
    shape = a.shape
    out = [np.zeros(shape.level_dim(k)) for k in range(shape.kappa + 1)]
    for k in range(shape.kappa + 1):
        acc = out[k]
        for j in range(k + 1):
            aj, bk = a.levels[j], b.levels[k - j]
            if j == 0:
                acc += aj[0] * bk
            elif j == k:
                acc += b.levels[0][0] * aj
            else:
                acc += np.kron(aj, bk)
    return TruncatedTensor(shape, out)


def bracket(a: TruncatedTensor, b: TruncatedTensor) -> TruncatedTensor:
    """Commutator ab - ba, truncated at kappa."""
    return mul(a, b) - mul(b, a)


# ---------------------------------------------------------------------------
# Group / Lie wrappers
# ---------------------------------------------------------------------------

class LieElement:
    """Tensor with vanishing grade-0 block (candidate element of the free Lie layer)."""

    __slots__ = ("tensor",)

    def __init__(self, tensor: TruncatedTensor, tol: float = 1e-12):
        if abs(tensor.grade0) > tol:
            raise DomainError(f"grade-0 coefficient {tensor.grade0} != 0")
        self.tensor = tensor

    @property
    def shape(self) -> AlgebraShape:
        return self.tensor.shape

    @classmethod
    def from_words(cls, shape, coeffs) -> "LieElement":
        return cls(TruncatedTensor.from_words(shape, coeffs))

    @classmethod
    def from_grade1(cls, shape, vec) -> "LieElement":
        return cls(TruncatedTensor.from_grade1(shape, vec))

    def __repr__(self):
        return f"LieElement({self.tensor!r})"


class GroupElement:
    """Tensor with grade-0 block exactly 1 (element of 1 + g^(kappa))."""

    __slots__ = ("tensor",)

    def __init__(self, tensor: TruncatedTensor, tol: float = 1e-12):
        if abs(tensor.grade0 - 1.0) > tol:
            raise DomainError(f"grade-0 coefficient {tensor.grade0} != 1")
        self.tensor = tensor

    @property
    def shape(self) -> AlgebraShape:
        return self.tensor.shape

    @classmethod
    def identity(cls, shape: AlgebraShape) -> "GroupElement":
        return cls(TruncatedTensor.unit(shape))

    def coeff(self, word) -> float:
        return self.tensor.coeff(word)

    def __repr__(self):
        return f"GroupElement({self.tensor!r})"


def group_mul(g: GroupElement, h: GroupElement) -> GroupElement:
    return GroupElement(mul(g.tensor, h.tensor))


def increment(g: GroupElement) -> LieElement:
    """g - 1 as a grade-0-free tensor (not generally a Lie element)."""
    t = g.tensor - TruncatedTensor.unit(g.shape)
    return LieElement(t)


def hom_norm(x) -> float:
    """Homogeneous norm max_k |x_k|^(1/k) over grades 1..kappa.

    Accepts a LieElement, or a GroupElement (applied to its positive grades),
    or a raw tensor with zero grade-0 block.
    """
    if isinstance(x, GroupElement):
        t = x.tensor
    elif isinstance(x, LieElement):
        t = x.tensor
    else:
        t = x
        if abs(t.grade0) > 1e-12:
            raise DomainError("hom_norm needs a vanishing grade-0 block")
    best = 0.0
    for k in range(1, t.shape.kappa + 1):
        nk = np.linalg.norm(t.levels[k])
        if nk > 0:
            best = max(best, nk ** (1.0 / k))
    return best


def exp(xi: LieElement) -> GroupElement:
    """Truncated exponential sum_k xi^k / k!."""
    shape = xi.shape
    acc = TruncatedTensor.unit(shape)
    term = TruncatedTensor.unit(shape)
    for k in range(1, shape.kappa + 1):
        term = mul(term, xi.tensor) * (1.0 / k)
        acc = acc + term
    return GroupElement(acc)


def log(g: GroupElement) -> LieElement:
    """Truncated logarithm sum_k (-1)^(k+1)/k (g-1)^k."""
    shape = g.shape
    x = g.tensor - TruncatedTensor.unit(shape)
    acc = x
    power = x
    for k in range(2, shape.kappa + 1):
        power = mul(power, x)
        acc = acc + ((-1.0) ** (k + 1) / k) * power
    return LieElement(acc)


@lru_cache(maxsize=64)
def _reversal_perm(d: int, k: int) -> np.ndarray:
    """Permutation sending the flat index of a word to the index of its reversal."""
    idx = np.arange(d ** k).reshape((d,) * k)
    return idx.transpose(tuple(reversed(range(k)))).ravel()


def antipode(g: GroupElement, tol: float | None = None) -> GroupElement:
    """Group inverse on geometric elements: grade k maps to (-1)^k times word reversal.

    When tol is given, the group-likeness defect is checked first and a
    DomainError carrying the defect is raised beyond tolerance (the coefficient
    formula is only the inverse on the geometric subgroup).
    """
    if tol is not None:
        report = is_group_like(g, tol)
        if not report.is_geometric:
            raise DomainError(
                f"antipode formula needs a geometric element; shuffle defect "
                f"{report.defect:.3e} > tol {tol:.3e} at word pair {report.worst_pair}"
            )
    shape = g.shape
    out = [g.tensor.levels[0].copy()]
    for k in range(1, shape.kappa + 1):
        out.append(((-1.0) ** k) * g.tensor.levels[k][_reversal_perm(shape.d, k)])
    return GroupElement(TruncatedTensor(shape, out))


# ---------------------------------------------------------------------------
# Shuffle machinery / group-likeness
# ---------------------------------------------------------------------------

@lru_cache(maxsize=200_000)
def shuffle_words(u: tuple, v: tuple) -> tuple:
    """All interleavings of u and v, with multiplicity."""
    if not u:
        return (v,)
    if not v:
        return (u,)
    first = tuple((u[0],) + w for w in shuffle_words(u[1:], v))
    second = tuple((v[0],) + w for w in shuffle_words(u, v[1:]))
    return first + second


def shuffle_eval(g: GroupElement, u, v) -> tuple[float, float]:
    """Pointwise product <g,u><g,v> and shuffle sum sum_{w in u sh v} <g,w>.

    Equality of the two characterizes group-likeness at this word pair.
    """
    u, v = tuple(u), tuple(v)
    if len(u) + len(v) > g.shape.kappa:
        raise DomainError(f"|u|+|v| = {len(u) + len(v)} exceeds kappa = {g.shape.kappa}")
    lhs = g.coeff(u) * g.coeff(v)
    rhs = sum(g.coeff(w) for w in shuffle_words(u, v))
    return lhs, rhs


@dataclass(frozen=True)
class GroupLikeReport:
    defect: float
    tol: float
    worst_pair: tuple
    is_geometric: bool


def is_group_like(g: GroupElement, tol: float = DEFAULT_GROUP_TOL) -> GroupLikeReport:
    """Max shuffle mismatch over nonempty word pairs with |u|+|v| <= kappa."""
    shape = g.shape
    worst = 0.0
    worst_pair = ((), ())
    for ku in range(1, shape.kappa):
        for kv in range(ku, shape.kappa - ku + 1):
            for u in shape.words(ku):
                for v in shape.words(kv):
                    lhs, rhs = shuffle_eval(g, u, v)
                    m = abs(lhs - rhs)
                    if m > worst:
                        worst = m
                        worst_pair = (u, v)
    return GroupLikeReport(defect=worst, tol=tol, worst_pair=worst_pair, is_geometric=worst <= tol)


# ---------------------------------------------------------------------------
# Dynkin right-bracketing layer
# ---------------------------------------------------------------------------

def right_nested_bracket(shape: AlgebraShape, word) -> TruncatedTensor:
    """ad_{e_{i1}} ... ad_{e_{i_{k-1}}} e_{ik} as a grade-|word| tensor."""
    word = tuple(word)
    k = len(word)
    if k == 0 or k > shape.kappa:
        raise DomainError(f"word length {k} outside 1..{shape.kappa}")
    vec = np.zeros(shape.d)
    vec[word[-1] - 1] = 1.0
    for pos in range(k - 2, -1, -1):
        vec = _ad_basis(shape.d, word[pos], vec)
    levels = [np.zeros(shape.level_dim(j)) for j in range(shape.kappa + 1)]
    levels[k] = vec
    return TruncatedTensor(shape, levels)


def _ad_basis(d: int, letter: int, block: np.ndarray) -> np.ndarray:
    """[e_letter, T] on a flat grade block: kron(e, T) - kron(T, e)."""
    j = block.shape[0]
    out = np.zeros(d * j)
    out.reshape(d, j)[letter - 1] = block
    spread = np.zeros((j, d))
    spread[:, letter - 1] = block
    out -= spread.ravel()
    return out


def _right_bracketing_map(d: int, block: np.ndarray, k: int) -> np.ndarray:
    """sum_w block_w * (right-nested bracket of w), on a flat grade-k block."""
    if k == 1:
        return block.copy()
    view = block.reshape(d, -1)
    j = view.shape[1]
    out = np.zeros(d * j)
    for i in range(d):
        inner = _right_bracketing_map(d, view[i], k - 1)
        if np.any(inner):
            out += _ad_basis(d, i + 1, inner)
    return out


def lie_project(a) -> TruncatedTensor:
    """Gradewise (1/k) * right-bracketing map; the identity exactly on free Lie elements."""
    t = a.tensor if isinstance(a, LieElement) else a
    shape = t.shape
    out = [t.levels[0].copy()]
    for k in range(1, shape.kappa + 1):
        out.append(_right_bracketing_map(shape.d, t.levels[k], k) / k)
    return TruncatedTensor(shape, out)


def dynkin_defects(a) -> np.ndarray:
    """Per-grade norms of (1/k) rho(a_k) - a_k (zero iff a_k is a Lie element)."""
    t = a.tensor if isinstance(a, LieElement) else a
    proj = lie_project(a)
    return np.array([
        np.linalg.norm(proj.levels[k] - t.levels[k])
        for k in range(1, t.shape.kappa + 1)
    ])


def dynkin_expand(a: LieElement, tol: float = DEFAULT_LIE_TOL) -> list[tuple[tuple, float]]:
    """Word coefficients c_w = a_w / |w| with a = sum_w c_w (right-nested bracket of w).

    Rejects elements failing the free-Lie membership test, reporting the
    per-grade defects.
    """
    defects = dynkin_defects(a)
    scale = max(1.0, a.tensor.norm())
    if np.any(defects > tol * scale):
        raise DomainError(
            "not a free Lie element: per-grade Dynkin defects "
            + np.array2string(defects, precision=3)
        )
    shape = a.shape
    out = []
    for k in range(1, shape.kappa + 1):
        block = a.tensor.levels[k]
        if not np.any(block):
            continue
        for word in shape.words(k):
            c = block[shape.word_index(word)]
            if c != 0.0:
                out.append((word, c / k))
    return out


def assemble_brackets(shape: AlgebraShape, items) -> TruncatedTensor:
    """sum over (word, c) of c * right-nested bracket; inverse check for dynkin_expand."""
    acc = TruncatedTensor.zero(shape)
    for word, c in items:
        acc = acc + c * right_nested_bracket(shape, word)
    return acc


# ---------------------------------------------------------------------------
# Serialization (flat record: d, kappa, per-level arrays in word order)
# ---------------------------------------------------------------------------

def to_record(t: TruncatedTensor) -> dict:
    return {
        "d": t.shape.d,
        "kappa": t.shape.kappa,
        "levels": [list(map(float, block)) for block in t.levels],
    }


def from_record(rec: dict) -> TruncatedTensor:
    shape = AlgebraShape(int(rec["d"]), int(rec["kappa"]))
    return TruncatedTensor(shape, [np.asarray(b, dtype=float) for b in rec["levels"]])


def word_strings(shape: AlgebraShape) -> list[str]:
    """CSV column headers: one word per column, lexicographic within grades."""
    out = [""]
    for k in range(1, shape.kappa + 1):
        out.extend("".join(map(str, w)) for w in shape.words(k))
    return out


def flat_coefficients(t: TruncatedTensor) -> np.ndarray:
    return np.concatenate(t.levels)
