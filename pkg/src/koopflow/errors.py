"""Exception taxonomy shared across the package."""


class KoopflowError(Exception):
    """Base class for all package-specific failures."""


class NonConvergence(KoopflowError):
    """Eigenvalue iteration did not converge within its budget."""


class IllConditioned(KoopflowError):
    """Numerical eigenbasis too ill-conditioned to trust the factorization."""


class NegativeRealEigenvalue(KoopflowError):
    """Eigenvalue on the closed negative real axis: no real logarithm guaranteed."""


class SingularEigenvalue(KoopflowError):
    """Eigenvalue with modulus ~ 0: logarithm undefined."""


class ImaginaryResidue(KoopflowError):
    """Reconstructed real logarithm carries a non-negligible imaginary part."""


class Overflow(KoopflowError):
    """Matrix exponential left the finite float range."""


class NonFinite(KoopflowError):
    """NaN or infinity appeared where a finite value is required."""


class FactorTooLarge(KoopflowError):
    """Decimation factor leaves fewer than 2 samples."""


class DimensionMismatch(KoopflowError):
    """Input vector/matrix dimensions do not chain."""


class TrajectoryTooShort(KoopflowError):
    """Trajectory has too few samples for the requested loss horizon."""


class GridMismatch(KoopflowError):
    """Timestamp grids of two trajectories do not coincide."""


class CheckpointError(KoopflowError):
    """Corrupt, truncated, or version-mismatched checkpoint file."""
