"""Dense linear algebra for generator extraction.

Everything here operates on small (d <= a few hundred) square float64 matrices:
eigendecomposition of general real matrices, the principal matrix logarithm
computed through the eigenbasis, the matrix exponential, integer powers, and
the orthogonality defect ||K K^T - I||_F^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    IllConditioned,
    ImaginaryResidue,
    NegativeRealEigenvalue,
    NonConvergence,
    Overflow,
    SingularEigenvalue,
)

# Reject eigendecompositions whose similarity transform does not reproduce the
# input to this relative Frobenius accuracy (defective/near-defective input).
EIG_RESIDUAL_TOL = 1e-6

# An eigenvalue with |Im| below this band and negative real part counts as
# lying on the negative real axis: the principal log has no real representative.
NEG_AXIS_IMAG_TOL = 1e-9
SINGULAR_MODULUS_TOL = 1e-12

# Allowed imaginary leakage of V log(Lambda) V^-1 relative to its real part.
IMAG_RESIDUE_TOL = 1e-8

# exp(principal_log(K)) must reproduce K this tightly.
ROUNDTRIP_TOL = 1e-8


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigendecomposition K = V Lambda V^-1 of a real square matrix.

    eigenvalues come in conjugate pairs (the input is real); eigenvectors are
    the columns of V. reconstruction_residual is ||V Lambda V^-1 - K||_F
    relative to ||K||_F, and is guaranteed <= EIG_RESIDUAL_TOL on construction.
    """

    matrix: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    reconstruction_residual: float

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def _as_square(k: np.ndarray, name: str) -> np.ndarray:
    k = np.asarray(k, dtype=float)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {k.shape}")
    if not np.isfinite(k).all():
        raise ValueError(f"{name} contains non-finite entries")
    return k


def eig(k: np.ndarray) -> EigenDecomposition:
    """Full eigendecomposition of a real square matrix.

    Raises NonConvergence if the QR iteration fails, IllConditioned if the
    eigenbasis does not reconstruct the input to EIG_RESIDUAL_TOL (defective
    or nearly defective input).
    """
    k = _as_square(k, "K")
    try:
        lam, v = np.linalg.eig(k)
    except np.linalg.LinAlgError as exc:
        raise NonConvergence(f"eigenvalue iteration failed: {exc}") from exc

    lam = lam.astype(complex)
    v = v.astype(complex)
    try:
        recon = (v * lam) @ np.linalg.inv(v)
    except np.linalg.LinAlgError as exc:
        raise IllConditioned("eigenvector matrix is singular") from exc

    denom = np.linalg.norm(k)
    residual = float(np.linalg.norm(recon - k)) / (denom if denom > 0 else 1.0)
    if residual > EIG_RESIDUAL_TOL:
        raise IllConditioned(
            f"eigenbasis reconstruction residual {residual:.3e} exceeds {EIG_RESIDUAL_TOL:.0e}"
        )
    return EigenDecomposition(
        matrix=k, eigenvalues=lam, eigenvectors=v, reconstruction_residual=residual
    )


def principal_log(decomp: EigenDecomposition) -> np.ndarray:
    """Real principal matrix logarithm D = Re(V log(Lambda) V^-1).

    The principal branch log(r e^{i phi}) = ln r + i phi with phi in (-pi, pi]
    is applied to each eigenvalue. Eigenvalues on the closed negative real
    axis (no real logarithm guaranteed) or with modulus ~ 0 are rejected, as
    is an eigenbasis that leaves a non-negligible imaginary residue or fails
    the exp(D) ~ K round trip.
    """
    lam = decomp.eigenvalues
    moduli = np.abs(lam)
    if np.any(moduli < SINGULAR_MODULUS_TOL):
        worst = lam[np.argmin(moduli)]
        raise SingularEigenvalue(f"eigenvalue {worst} has modulus below {SINGULAR_MODULUS_TOL:.0e}")
    on_neg_axis = (np.abs(lam.imag) < NEG_AXIS_IMAG_TOL) & (lam.real < 0.0)
    if np.any(on_neg_axis):
        worst = lam[on_neg_axis][0]
        raise NegativeRealEigenvalue(
            f"eigenvalue {worst} lies on the negative real axis; no real logarithm"
        )

    v = decomp.eigenvectors
    log_lam = np.log(lam)  # principal branch: Im in (-pi, pi]
    full = (v * log_lam) @ np.linalg.inv(v)
    d = full.real
    imag_norm = float(np.linalg.norm(full.imag))
    real_norm = float(np.linalg.norm(d))
    if imag_norm > IMAG_RESIDUE_TOL * max(real_norm, 1.0):
        raise ImaginaryResidue(
            f"imaginary residue {imag_norm:.3e} vs real norm {real_norm:.3e}"
        )

    k_norm = float(np.linalg.norm(decomp.matrix))
    roundtrip = float(np.linalg.norm(matrix_exp(d) - decomp.matrix))
    if roundtrip > ROUNDTRIP_TOL * max(k_norm, 1.0):
        raise IllConditioned(
            f"exp(log K) reconstruction error {roundtrip:.3e} exceeds {ROUNDTRIP_TOL:.0e}*||K||"
        )
    return d


def matrix_exp(d: np.ndarray, t: float = 1.0) -> np.ndarray:
    """exp(t*D) by scaling-and-squaring; exp(0*D) is the exact identity."""
    d = _as_square(d, "D")
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    if t == 0.0:
        return np.eye(d.shape[0])
    with np.errstate(over="ignore", invalid="ignore"):
        out = scipy.linalg.expm(t * d)
    if not np.isfinite(out).all():
        raise Overflow(f"exp({t}*D) overflowed the float range")
    return out


def matrix_power(k: np.ndarray, p: int) -> np.ndarray:
    """K^p for integer p >= 0 (K^0 = I)."""
    k = _as_square(k, "K")
    if p < 0:
        raise ValueError("p must be a nonnegative integer")
    return np.linalg.matrix_power(k, int(p))


def orth_defect(k: np.ndarray) -> float:
    """||K K^T - I||_F^2: zero exactly when K is orthogonal."""
    k = _as_square(k, "K")
    e = k @ k.T - np.eye(k.shape[0])
    return float(np.sum(e * e))
