import numpy as np
import pytest

from koopflow import numlin
from koopflow.errors import (
    IllConditioned,
    ImaginaryResidue,
    NegativeRealEigenvalue,
    Overflow,
    SingularEigenvalue,
)

from helpers import near_orthogonal_no_neg, random_orthogonal, rotation


class TestEig:
    def test_identity(self):
        d = numlin.eig(np.eye(3))
        assert np.allclose(sorted(d.eigenvalues.real), [1.0, 1.0, 1.0], atol=1e-12)
        assert np.allclose(d.eigenvalues.imag, 0.0, atol=1e-12)

    def test_rotation_eigenvalues_match_characteristic_roots(self):
        # Independent oracle: roots of lambda^2 - 2 cos(theta) lambda + 1.
        theta = np.pi / 4
        d = numlin.eig(rotation(theta))
        expected = np.roots([1.0, -2.0 * np.cos(theta), 1.0])
        got = sorted(d.eigenvalues, key=lambda v: v.imag)
        want = sorted(expected, key=lambda v: v.imag)
        assert np.allclose(got, want, atol=1e-12)
        assert np.allclose(sorted(d.eigenvalues, key=lambda v: v.imag),
                           sorted([np.exp(1j * theta), np.exp(-1j * theta)],
                                  key=lambda v: v.imag), atol=1e-12)

    def test_diagonal(self):
        d = numlin.eig(np.diag([2.0, 3.0]))
        assert np.allclose(sorted(d.eigenvalues.real), [2.0, 3.0], atol=1e-14)
        # Eigenvectors are the standard basis up to order and sign.
        v = np.abs(d.eigenvectors.real)
        assert np.allclose(np.sort(v, axis=0), [[0, 0], [1, 1]], atol=1e-14)

    def test_conjugate_pair_symmetry(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            k = rng.uniform(-1.0, 1.0, size=(8, 8))
            lam = numlin.eig(k).eigenvalues
            lam_sorted = np.sort_complex(lam)
            conj_sorted = np.sort_complex(lam.conj())
            assert np.allclose(lam_sorted, conj_sorted, atol=1e-10)

    def test_reconstruction_residual_random(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            d = rng.integers(2, 17)
            k = rng.uniform(-1.0, 1.0, size=(d, d))
            try:
                decomp = numlin.eig(k)
            except IllConditioned:
                continue
            assert decomp.reconstruction_residual <= 1e-8

    def test_defective_matrix_rejected(self):
        with pytest.raises(IllConditioned):
            numlin.eig(np.array([[1.0, 1.0], [0.0, 1.0]]))

    def test_non_square_rejected(self):
        with pytest.raises(ValueError):
            numlin.eig(np.ones((2, 3)))


class TestPrincipalLog:
    def test_log_identity_is_zero(self):
        d = numlin.principal_log(numlin.eig(np.eye(4)))
        assert np.allclose(d, 0.0, atol=1e-12)

    def test_log_quarter_rotation_closed_form(self):
        d = numlin.principal_log(numlin.eig(rotation(np.pi / 2)))
        expected = np.array([[0.0, -np.pi / 2], [np.pi / 2, 0.0]])
        assert np.allclose(d, expected, atol=1e-12)
        assert np.allclose(numlin.matrix_exp(d), rotation(np.pi / 2), atol=1e-12)

    def test_log_diagonal(self):
        d = numlin.principal_log(numlin.eig(np.diag([np.e, np.e**2])))
        assert np.allclose(d, np.diag([1.0, 2.0]), atol=1e-12)

    def test_negative_real_eigenvalue_rejected(self):
        with pytest.raises(NegativeRealEigenvalue):
            numlin.principal_log(numlin.eig(np.diag([-1.0, 1.0])))
        # Rotation by pi has the double eigenvalue -1.
        with pytest.raises(NegativeRealEigenvalue):
            numlin.principal_log(numlin.eig(rotation(np.pi)))

    def test_singular_eigenvalue_rejected(self):
        with pytest.raises(SingularEigenvalue):
            numlin.principal_log(numlin.eig(np.diag([0.0, 1.0])))

    def test_imaginary_residue_guard(self):
        # A hand-corrupted decomposition whose eigenbasis does not pair
        # conjugate eigenvalues leaves a complex "logarithm".
        bad = numlin.EigenDecomposition(
            matrix=np.diag([1.0, 2.0]),
            eigenvalues=np.array([1j, 2.0]),
            eigenvectors=np.eye(2, dtype=complex),
            reconstruction_residual=0.0,
        )
        with pytest.raises(ImaginaryResidue):
            numlin.principal_log(bad)


class TestMatrixExp:
    def test_t_zero_exact_identity(self):
        rng = np.random.default_rng(3)
        d = rng.normal(size=(5, 5))
        out = numlin.matrix_exp(d, 0.0)
        assert np.array_equal(out, np.eye(5))

    def test_rotation_generator_closed_form(self):
        theta = np.pi / 3
        gen = np.array([[0.0, -theta], [theta, 0.0]])
        assert np.allclose(numlin.matrix_exp(gen), rotation(theta), atol=1e-12)

    def test_roundtrip_random_orthogonal(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            q = random_orthogonal(6, rng)
            if np.min(np.abs(np.linalg.eigvals(q) + 1.0)) <= 1e-3:
                continue
            d = numlin.principal_log(numlin.eig(q))
            assert np.linalg.norm(numlin.matrix_exp(d) - q) <= 1e-10 * np.linalg.norm(q)

    def test_overflow(self):
        with pytest.raises(Overflow):
            numlin.matrix_exp(np.array([[1000.0]]))


class TestMatrixPower:
    def test_power_zero(self):
        rng = np.random.default_rng(0)
        k = rng.normal(size=(4, 4))
        assert np.array_equal(numlin.matrix_power(k, 0), np.eye(4))

    def test_diagonal_square(self):
        assert np.allclose(numlin.matrix_power(np.diag([2.0, 3.0]), 2),
                           np.diag([4.0, 9.0]), atol=1e-14)

    def test_rotation_angle_addition(self):
        assert np.allclose(numlin.matrix_power(rotation(np.pi / 8), 4),
                           rotation(np.pi / 2), atol=1e-13)

    def test_recursion(self):
        rng = np.random.default_rng(2)
        k = rng.uniform(-0.7, 0.7, size=(5, 5))
        for p in range(5):
            assert np.allclose(numlin.matrix_power(k, p + 1),
                               k @ numlin.matrix_power(k, p), atol=1e-12)

    def test_negative_power_rejected(self):
        with pytest.raises(ValueError):
            numlin.matrix_power(np.eye(2), -1)


class TestOrthDefect:
    def test_identity_zero(self):
        assert numlin.orth_defect(np.eye(4)) == 0.0

    def test_scaled_identity(self):
        # ||(2I)(2I)^T - I||_F^2 = ||3I||_F^2 = 9 * 2.
        assert numlin.orth_defect(2.0 * np.eye(2)) == pytest.approx(18.0, abs=1e-12)

    def test_rotations_are_orthogonal(self):
        rng = np.random.default_rng(9)
        for theta in rng.uniform(-np.pi, np.pi, size=10):
            assert numlin.orth_defect(rotation(theta)) <= 1e-24

    def test_transpose_symmetry(self):
        rng = np.random.default_rng(4)
        k = rng.normal(size=(6, 6))
        assert numlin.orth_defect(k) == pytest.approx(numlin.orth_defect(k.T), rel=1e-12)

    def test_similarity_invariance(self):
        rng = np.random.default_rng(21)
        for _ in range(10):
            k = rng.normal(size=(5, 5))
            q = random_orthogonal(5, rng)
            a = numlin.orth_defect(k)
            b = numlin.orth_defect(q @ k @ q.T)
            assert abs(a - b) <= 1e-10 * max(1.0, a)


class TestRoundTripProperty:
    def test_near_orthogonal_roundtrip(self):
        rng = np.random.default_rng(33)
        for _ in range(100):
            k = near_orthogonal_no_neg(8, rng)
            d = numlin.principal_log(numlin.eig(k))
            err = np.linalg.norm(numlin.matrix_exp(d) - k)
            assert err <= 1e-8 * np.linalg.norm(k)

    def test_semigroup(self):
        rng = np.random.default_rng(13)
        for _ in range(15):
            d = rng.uniform(-0.5, 0.5, size=(6, 6))
            s, t = rng.uniform(-2.0, 2.0, size=2)
            lhs = numlin.matrix_exp(d, s + t)
            rhs = numlin.matrix_exp(d, s) @ numlin.matrix_exp(d, t)
            assert np.linalg.norm(lhs - rhs) <= 1e-9 * max(1.0, np.linalg.norm(lhs))

    def test_power_matches_exp_log(self):
        rng = np.random.default_rng(29)
        for _ in range(15):
            k = near_orthogonal_no_neg(6, rng)
            d = numlin.principal_log(numlin.eig(k))
            for p in (0, 1, 3, 7):
                lhs = numlin.matrix_power(k, p)
                rhs = numlin.matrix_exp(d, float(p))
                assert np.linalg.norm(lhs - rhs) <= 1e-7 * max(1.0, np.linalg.norm(lhs))
