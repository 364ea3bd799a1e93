import numpy as np
import pytest

from roughflow.algebra import AlgebraShape, DomainError, TruncatedTensor, GroupElement
from roughflow.observables import MatrixEntryObservable, PolynomialObservable, tensor_apply
from roughflow.systems import heisenberg, so3_left_invariant


class TestPolynomialObservable:
    def test_coordinate_values(self):
        sys = heisenberg()
        obs = PolynomialObservable.coordinate(sys, 2)
        assert obs.value(np.array([1.0, 2.0, 3.0])) == 3.0

    def test_first_order_words(self):
        sys = heisenberg()
        obs = PolynomialObservable.coordinate(sys, 2)  # f = z
        m = np.array([0.7, -1.0, 5.0])
        assert obs.word_derivative((1,))(m) == 0.0      # V1 z = 0
        assert obs.word_derivative((2,))(m) == 0.7      # V2 z = x

    def test_second_order_words(self):
        sys = heisenberg()
        obs = PolynomialObservable.coordinate(sys, 2)
        m = np.array([0.7, -1.0, 5.0])
        # last letter acts first: word (1,2) is L_{V1} L_{V2} f = L_{V1} x = 1
        assert obs.word_derivative((1, 2))(m) == 1.0
        assert obs.word_derivative((2, 1))(m) == 0.0
        assert obs.word_derivative((2, 2))(m) == 0.0

    def test_word_convention_matches_tensor_concatenation(self):
        sys = heisenberg()
        obs = PolynomialObservable(sys, sys.sym_ctx.syms[2] ** 2)  # f = z^2
        m = np.array([0.5, 0.3, 1.5])
        # L_{V2} z^2 = 2 z x ; then L_{V1} of that = 2 z
        assert obs.word_derivative((1, 2))(m) == pytest.approx(2 * 1.5)
        # L_{V2}(2 z x) = 2 x^2
        assert obs.word_derivative((2, 2))(m) == pytest.approx(2 * 0.5 ** 2)

    def test_tensor_apply_linear(self):
        sys = heisenberg()
        obs = PolynomialObservable.coordinate(sys, 2)
        shape = AlgebraShape(2, 2)
        g = GroupElement(TruncatedTensor.from_words(
            shape, {(): 1.0, (2,): 2.0, (1, 2): 3.0}))
        m = np.array([0.7, 0.0, 1.0])
        # f + 2 (V2 f) + 3 (V1 V2 f) = 1 + 2*0.7 + 3
        assert tensor_apply(obs, g, m) == pytest.approx(1.0 + 1.4 + 3.0)

    def test_requires_symbolic_system(self):
        sys = so3_left_invariant()
        with pytest.raises(DomainError):
            PolynomialObservable(sys, 1)


class TestMatrixEntryObservable:
    def test_value_and_derivative(self):
        sys = so3_left_invariant()
        obs = MatrixEntryObservable.entry(sys, 0, 0)
        u = np.eye(3)
        assert obs.value(u) == 1.0
        # L_{V_k} f_C (u) = tr(C^T u L_k)
        for k in range(1, 4):
            got = obs.word_derivative((k,))(u)
            expect = float(np.sum(np.eye(3)[0:1].T @ np.eye(3)[0:1] * (u @ sys.matrices[k - 1])))
            assert got == pytest.approx((u @ sys.matrices[k - 1])[0, 0])

    def test_second_order_matches_finite_difference(self):
        from scipy.linalg import expm

        sys = so3_left_invariant()
        obs = MatrixEntryObservable.entry(sys, 0, 2)
        u = expm(0.3 * sys.matrices[0] + 0.1 * sys.matrices[2])
        h = 1e-5
        # FD of sigma -> f(u e^{sigma L1} e^{tau L2}) cross derivative
        def f(a, b):
            return (u @ expm(a * sys.matrices[0]) @ expm(b * sys.matrices[1]))[0, 2]

        fd = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4 * h * h)
        got = obs.word_derivative((1, 2))(u)
        assert got == pytest.approx(fd, abs=1e-6)

    def test_requires_left_invariant(self):
        with pytest.raises(DomainError):
            MatrixEntryObservable(heisenberg(), np.eye(3))
