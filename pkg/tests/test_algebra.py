import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roughflow.algebra import (
    AlgebraShape,
    DomainError,
    GroupElement,
    LieElement,
    ShapeMismatchError,
    TruncatedTensor,
    antipode,
    assemble_brackets,
    bracket,
    dynkin_defects,
    dynkin_expand,
    exp,
    flat_coefficients,
    from_record,
    group_mul,
    hom_norm,
    increment,
    is_group_like,
    lie_project,
    log,
    mul,
    right_nested_bracket,
    shuffle_eval,
    to_record,
    word_strings,
)
from helpers import (
    dict_close,
    dict_exp,
    dict_from_tensor,
    dict_log,
    dict_mul,
    random_lie_element,
    random_tensor,
)


S2 = AlgebraShape(2, 2)


def basis(shape, *letters):
    return TruncatedTensor.from_words(shape, {tuple(letters): 1.0})


class TestMul:
    def test_two_generators(self):
        a = TruncatedTensor.unit(S2) + basis(S2, 1)
        b = TruncatedTensor.unit(S2) + basis(S2, 2)
        prod = mul(a, b)
        assert prod.coeff(()) == 1.0
        assert prod.coeff((1,)) == 1.0
        assert prod.coeff((2,)) == 1.0
        assert prod.coeff((1, 2)) == 1.0
        assert prod.coeff((2, 1)) == 0.0

    def test_unit_is_identity(self):
        rng = np.random.default_rng(0)
        shape = AlgebraShape(3, 3)
        a = random_tensor(shape, rng)
        one = TruncatedTensor.unit(shape)
        assert np.allclose(flat_coefficients(mul(a, one)), flat_coefficients(a))
        assert np.allclose(flat_coefficients(mul(one, a)), flat_coefficients(a))

    def test_associativity_against_dict_oracle(self):
        rng = np.random.default_rng(1)
        shape = AlgebraShape(3, 4)
        for _ in range(10):
            a, b, c = (random_tensor(shape, rng) for _ in range(3))
            left = mul(mul(a, b), c)
            right = mul(a, mul(b, c))
            scale = a.norm() * b.norm() * c.norm()
            assert (left - right).norm() <= 1e-13 * max(scale, 1.0)
            oracle = dict_mul(dict_mul(dict_from_tensor(a), dict_from_tensor(b), 4),
                              dict_from_tensor(c), 4)
            assert dict_close(dict_from_tensor(left), oracle, 1e-11 * max(scale, 1.0))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeMismatchError):
            mul(TruncatedTensor.unit(S2), TruncatedTensor.unit(AlgebraShape(2, 3)))


class TestBracket:
    def test_generators(self):
        b = bracket(basis(S2, 1), basis(S2, 2))
        assert b.coeff((1, 2)) == 1.0
        assert b.coeff((2, 1)) == -1.0

    def test_antisymmetry(self):
        rng = np.random.default_rng(2)
        a = random_tensor(AlgebraShape(2, 3), rng)
        assert bracket(a, a).norm() == 0.0

    def test_truncation_kills_depth_three(self):
        inner = bracket(basis(S2, 1), basis(S2, 2))
        assert bracket(basis(S2, 1), inner).norm() == 0.0

    def test_jacobi(self):
        rng = np.random.default_rng(3)
        shape = AlgebraShape(3, 4)
        a, b, c = (random_tensor(shape, rng) for _ in range(3))
        total = (bracket(a, bracket(b, c)) + bracket(b, bracket(c, a))
                 + bracket(c, bracket(a, b)))
        assert total.norm() <= 1e-12 * a.norm() * b.norm() * c.norm()


class TestHomNorm:
    def test_single_grade(self):
        assert hom_norm(LieElement.from_words(S2, {(1,): 2.0})) == 2.0

    def test_grade_two_root(self):
        shape = AlgebraShape(2, 2)
        levels = [np.zeros(1), np.zeros(2), np.zeros(4)]
        levels[2][:] = [4.0, 0, 0, 0]
        t = TruncatedTensor(shape, levels)
        assert hom_norm(LieElement(t)) == pytest.approx(2.0)

    def test_nonzero_grade0_rejected(self):
        with pytest.raises(DomainError):
            hom_norm(TruncatedTensor.unit(S2))

    def test_dilation_homogeneity(self):
        rng = np.random.default_rng(4)
        xi = LieElement(random_tensor(AlgebraShape(3, 4), rng, lie_only=True))
        for lam in (0.25, 1.7, 9.0):
            scaled = LieElement(xi.tensor.dilate(lam))
            assert hom_norm(scaled) == pytest.approx(lam * hom_norm(xi), rel=1e-12)

    def test_antipode_preserves_hom_norm(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            g = exp(random_lie_element(AlgebraShape(3, 4), rng))
            assert hom_norm(increment(antipode(g))) == pytest.approx(
                hom_norm(increment(g)), rel=1e-12)


class TestExpLog:
    def test_exp_zero(self):
        g = exp(LieElement(TruncatedTensor.zero(S2)))
        assert (g.tensor - TruncatedTensor.unit(S2)).norm() == 0.0

    def test_exp_generator(self):
        g = exp(LieElement.from_words(S2, {(1,): 1.0}))
        assert g.coeff(()) == 1.0
        assert g.coeff((1,)) == 1.0
        assert g.coeff((1, 1)) == pytest.approx(0.5)
        assert g.coeff((1, 2)) == 0.0

    def test_log_identity(self):
        xi = log(GroupElement.identity(S2))
        assert xi.tensor.norm() == 0.0

    def test_roundtrip_random(self):
        rng = np.random.default_rng(6)
        shape = AlgebraShape(3, 4)
        for _ in range(10):
            xi = LieElement(random_tensor(shape, rng, lie_only=True))
            back = log(exp(xi))
            assert (back.tensor - xi.tensor).norm() <= 1e-12 * max(1.0, xi.tensor.norm())

    def test_series_against_dict_oracle(self):
        rng = np.random.default_rng(7)
        shape = AlgebraShape(2, 4)
        xi = random_tensor(shape, rng, lie_only=True)
        ours = dict_from_tensor(exp(LieElement(xi)).tensor)
        oracle = dict_exp(dict_from_tensor(xi), 4)
        assert dict_close(ours, oracle, 1e-12)
        g = exp(LieElement(xi))
        assert dict_close(dict_from_tensor(log(g).tensor),
                          dict_log(dict_from_tensor(g.tensor), 4), 1e-12)

    def test_truncated_bch_two_generators(self):
        # log(exp(e1) exp(e2)) at kappa=2 is e1 + e2 + [e1,e2]/2
        g = group_mul(exp(LieElement.from_words(S2, {(1,): 1.0})),
                      exp(LieElement.from_words(S2, {(2,): 1.0})))
        xi = log(g)
        assert xi.tensor.coeff((1,)) == pytest.approx(1.0)
        assert xi.tensor.coeff((2,)) == pytest.approx(1.0)
        assert xi.tensor.coeff((1, 2)) == pytest.approx(0.5)
        assert xi.tensor.coeff((2, 1)) == pytest.approx(-0.5)


class TestAntipode:
    def test_identity(self):
        g = antipode(GroupElement.identity(S2))
        assert (g.tensor - TruncatedTensor.unit(S2)).norm() == 0.0

    def test_two_segment_lift(self):
        g = group_mul(exp(LieElement.from_words(S2, {(1,): 1.0})),
                      exp(LieElement.from_words(S2, {(2,): 1.0})))
        inv = antipode(g)
        assert inv.coeff((1,)) == -1.0
        assert inv.coeff((2,)) == -1.0
        assert inv.coeff((1, 1)) == pytest.approx(0.5)
        assert inv.coeff((2, 1)) == pytest.approx(1.0)
        assert inv.coeff((1, 2)) == 0.0
        assert inv.coeff((2, 2)) == pytest.approx(0.5)
        prod = group_mul(g, inv)
        assert (prod.tensor - TruncatedTensor.unit(S2)).norm() == 0.0

    def test_matches_exp_of_negative(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            xi = random_lie_element(AlgebraShape(2, 4), rng)
            lhs = antipode(exp(xi))
            rhs = exp(LieElement(-xi.tensor))
            assert (lhs.tensor - rhs.tensor).norm() <= 1e-12 * max(1.0, rhs.tensor.norm())

    def test_involution_exact(self):
        rng = np.random.default_rng(9)
        g = exp(random_lie_element(AlgebraShape(3, 4), rng))
        twice = antipode(antipode(g))
        assert (twice.tensor - g.tensor).norm() == 0.0

    def test_non_group_like_rejected_with_defect(self):
        g = GroupElement(TruncatedTensor.from_words(S2, {(): 1.0, (1,): 1.0}))
        with pytest.raises(DomainError, match="defect"):
            antipode(g, tol=1e-9)


class TestShuffle:
    def test_two_segment_unit_lift(self):
        g = group_mul(exp(LieElement.from_words(S2, {(1,): 1.0})),
                      exp(LieElement.from_words(S2, {(2,): 1.0})))
        lhs, rhs = shuffle_eval(g, (1,), (2,))
        assert lhs == pytest.approx(1.0)
        assert rhs == pytest.approx(1.0)

    def test_empty_word(self):
        rng = np.random.default_rng(10)
        g = exp(random_lie_element(S2, rng))
        lhs, rhs = shuffle_eval(g, (), (2,))
        assert lhs == rhs == g.coeff((2,))

    def test_missing_square_detected(self):
        g = GroupElement(TruncatedTensor.from_words(S2, {(): 1.0, (1,): 1.0}))
        lhs, rhs = shuffle_eval(g, (1,), (1,))
        assert lhs == 1.0 and rhs == 0.0

    def test_word_length_guard(self):
        g = GroupElement.identity(S2)
        with pytest.raises(DomainError):
            shuffle_eval(g, (1, 2), (1,))

    def test_exp_is_group_like(self):
        rng = np.random.default_rng(11)
        report = is_group_like(exp(random_lie_element(AlgebraShape(3, 4), rng)))
        assert report.defect <= 1e-10
        assert report.is_geometric

    def test_defect_of_missing_square(self):
        g = GroupElement(TruncatedTensor.from_words(S2, {(): 1.0, (1,): 1.0}))
        report = is_group_like(g)
        assert report.defect == pytest.approx(1.0)  # <g,1><g,1> = 1 vs 2<g,11> = 0
        assert not report.is_geometric


class TestDynkin:
    def test_single_letter(self):
        coeffs = dynkin_expand(LieElement.from_words(S2, {(1,): 1.0}))
        assert coeffs == [((1,), 1.0)]

    def test_bracket_word(self):
        xi = LieElement(bracket(basis(S2, 1), basis(S2, 2)))
        coeffs = dict(dynkin_expand(xi))
        assert coeffs[(1, 2)] == pytest.approx(0.5)
        assert coeffs[(2, 1)] == pytest.approx(-0.5)
        back = assemble_brackets(S2, coeffs.items())
        assert (back - xi.tensor).norm() <= 1e-15

    def test_non_lie_rejected(self):
        bad = LieElement.from_words(S2, {(1, 2): 1.0})
        defects = dynkin_defects(bad)
        assert defects[1] > 0.5
        with pytest.raises(DomainError, match="Dynkin"):
            dynkin_expand(bad)

    def test_projection_idempotent_on_lie_elements(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            xi = random_lie_element(AlgebraShape(3, 4), rng)
            proj = lie_project(xi)
            assert (proj - xi.tensor).norm() <= 1e-12 * max(1.0, xi.tensor.norm())

    def test_expand_reassemble_roundtrip(self):
        rng = np.random.default_rng(13)
        for _ in range(5):
            xi = random_lie_element(AlgebraShape(2, 5), rng)
            back = assemble_brackets(xi.shape, dynkin_expand(xi))
            assert (back - xi.tensor).norm() <= 1e-12 * max(1.0, xi.tensor.norm())

    def test_log_of_geometric_is_lie(self):
        rng = np.random.default_rng(14)
        g = exp(random_lie_element(AlgebraShape(3, 3), rng))
        assert max(dynkin_defects(log(g))) <= 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(0, 10_000))
def test_mul_associative_property(d, kappa, seed):
    shape = AlgebraShape(d, kappa)
    rng = np.random.default_rng(seed)
    a, b, c = (random_tensor(shape, rng) for _ in range(3))
    left = mul(mul(a, b), c)
    right = mul(a, mul(b, c))
    assert (left - right).norm() <= 1e-12 * max(1.0, a.norm() * b.norm() * c.norm())


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(0, 10_000))
def test_exp_log_roundtrip_property(d, kappa, seed):
    shape = AlgebraShape(d, kappa)
    rng = np.random.default_rng(seed)
    xi = LieElement(random_tensor(shape, rng, lie_only=True))
    assert (log(exp(xi)).tensor - xi.tensor).norm() <= 1e-12 * max(1.0, xi.tensor.norm())


class TestSerialization:
    def test_record_roundtrip(self):
        rng = np.random.default_rng(15)
        t = random_tensor(AlgebraShape(3, 3), rng)
        back = from_record(to_record(t))
        assert (back - t).norm() == 0.0
        assert back.shape == t.shape

    def test_word_headers(self):
        headers = word_strings(S2)
        assert headers == ["", "1", "2", "11", "12", "21", "22"]
        assert len(headers) == len(flat_coefficients(TruncatedTensor.zero(S2)))

    def test_right_nested_bracket_matches_bracket(self):
        rho = right_nested_bracket(S2, (1, 2))
        direct = bracket(basis(S2, 1), basis(S2, 2))
        assert (rho - direct).norm() == 0.0
