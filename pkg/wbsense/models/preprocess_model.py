"""Minimum-norm pre-recovery feeding the occupancy network.

The right pseudo-inverse ``A^+ = A^H (A A^H)^-1`` is built from an LU
factorization of the K x K Gram matrix; ``A^+ @ Y`` is split into real and
imaginary channels and standardized per sample.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy.linalg

from wbsense.models.signal_model import SensingMatrix, SnsCapture
from wbsense.utils.errors import InvalidInputError, ShapeMismatchError, SingularMatrixError
from wbsense.utils.logger import logger

PIVOT_TOLERANCE = 1e-12
STD_FLOOR = 1e-12


@dataclass
class LduFactors:
    """P G = L D U with unit-diagonal L and U."""

    P: np.ndarray
    L: np.ndarray
    D: np.ndarray
    U: np.ndarray


@dataclass
class PseudoInverse:
    entries: np.ndarray
    source_matrix_hash: str
    factors: Optional[LduFactors] = None

    @property
    def shape(self):
        return self.entries.shape


@dataclass
class RealTensor:
    values: np.ndarray
    stats: Dict[str, float] = field(default_factory=dict)

    @property
    def shape(self):
        return self.values.shape

    def to_complex(self):
        return self.values[..., 0] + 1j * self.values[..., 1]


def ldu_factorize(G) -> LduFactors:
    """Partial-pivoting LU of G rewritten as P G = L D U.

    Raises:
        SingularMatrixError: a pivot is zero relative to the largest pivot.
    """
    p, L, U = scipy.linalg.lu(G)
    d = np.diag(U).copy()
    scale = np.max(np.abs(d)) if d.size else 0.0
    if scale == 0 or np.any(np.abs(d) < PIVOT_TOLERANCE * scale):
        small = int(np.argmin(np.abs(d))) if d.size else 0
        raise SingularMatrixError(f"Gram matrix is singular: pivot {small} is {abs(d[small]) if d.size else 0:.3e}")
    # scipy returns G = p L U, so P = p^T
    return LduFactors(P=p.T, L=L, D=d, U=U / d[:, None])


def pseudo_inverse_lu(A: SensingMatrix) -> PseudoInverse:
    """Right pseudo-inverse via LU of the Gram matrix ``G = A A^H``."""
    entries = np.asarray(A.entries, dtype=np.complex128)
    G = entries @ entries.conj().T
    try:
        factors = ldu_factorize(G)
    except SingularMatrixError:
        logger.error("Pseudo-inverse failed: A A^H is singular")
        raise
    # Solve G Z = A through the factors, then A^+ = Z^H because G is Hermitian
    rhs = factors.P @ entries
    z = scipy.linalg.solve_triangular(factors.L, rhs, lower=True, unit_diagonal=True)
    z = z / factors.D[:, None]
    Z = scipy.linalg.solve_triangular(factors.U, z, lower=False, unit_diagonal=True)
    return PseudoInverse(entries=Z.conj().T, source_matrix_hash=A.digest, factors=factors)


def pseudo_recover(Ad: PseudoInverse, Y: SnsCapture):
    """Minimum-norm solution ``A^+ @ Y`` (N x Q, complex)."""
    if Y.matrix_digest is not None and Y.matrix_digest != Ad.source_matrix_hash:
        raise InvalidInputError("Capture was taken with a different sensing matrix than the pseudo-inverse")
    samples = np.asarray(Y.samples)
    if samples.shape[0] != Ad.entries.shape[1]:
        raise ShapeMismatchError(f"Capture has {samples.shape[0]} rows, pseudo-inverse expects {Ad.entries.shape[1]}")
    return Ad.entries @ samples


def to_real_channels(X) -> RealTensor:
    X = np.asarray(X)
    return RealTensor(values=np.stack([X.real, X.imag], axis=-1).astype(np.float64))


def normalize(t: RealTensor) -> RealTensor:
    """Per-sample standardization over all N*Q*2 entries."""
    values = t.values
    mean = float(values.mean())
    std = float(values.std())
    if std < STD_FLOOR:
        return RealTensor(values=np.zeros_like(values), stats={"mean": mean, "scale": 0.0})
    return RealTensor(values=(values - mean) / std, stats={"mean": mean, "scale": std})


class Preprocessor:
    """Runs the whole pre-recovery chain for one sensing matrix.

    The pseudo-inverse is computed once and shared read-only.
    """

    def __init__(self, A: SensingMatrix):
        self.A = A
        self.pinv = pseudo_inverse_lu(A)
        logger.info(f"Pseudo-inverse ready: {self.pinv.shape[0]}x{self.pinv.shape[1]}")

    def transform(self, Y: SnsCapture) -> RealTensor:
        return normalize(to_real_channels(pseudo_recover(self.pinv, Y)))

    def transform_batch(self, captures: Sequence[SnsCapture]) -> np.ndarray:
        """Stack of network inputs with shape (S, N, Q, 2)."""
        if not captures:
            raise InvalidInputError("No captures to preprocess")
        return np.stack([self.transform(c).values for c in captures])


def masks_to_targets(masks: List) -> np.ndarray:
    return np.stack([m.bits.astype(np.float64) for m in masks])


def direct_pseudo_inverse(A: SensingMatrix):
    """A^+ from a direct solve of G Z = A; reference for the LU route."""
    entries = np.asarray(A.entries, dtype=np.complex128)
    G = entries @ entries.conj().T
    return np.linalg.solve(G, entries).conj().T
