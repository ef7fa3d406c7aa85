#!/usr/bin/env python3
"""
Simplex ETF Module for the CoFInAl Scoring Head

Builds the fixed sub-grade classifier: K prototype vectors of dimension d
with unit norms and pairwise inner product -1/(K-1). Prototypes are stored
row-major as a K x d matrix (the transpose of the column form E = [e_1..e_K]).
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from errors import ConfigError, InfeasibleRotationError
from tensor_core import RngStream, Tensor


# Maximum Gram deviation accepted as a valid frame
ETF_TOLERANCE = 1e-8


@dataclass(frozen=True)
class ETFMatrix:
    """Fixed simplex ETF prototypes (non-learnable)."""
    E: np.ndarray
    K: int
    d: int
    seed: int

    def as_tensor(self) -> Tensor:
        """Constant tensor view of the prototypes; never registered as a parameter."""
        return Tensor(self.E)


def random_orthonormal(d: int, K: int, rng: RngStream) -> np.ndarray:
    """
    Draw a d x K matrix with orthonormal columns.

    A standard-normal draw is orthonormalized by QR and re-orthogonalized
    once more; column signs are fixed by the diagonal of R.

    Args:
        d: Ambient dimension
        K: Number of columns (K <= d)
        rng: Random stream

    Returns:
        U with U^T U = I_K
    """
    if d < K:
        raise InfeasibleRotationError(f"Cannot build {K} orthonormal columns in dimension {d}")
    U = rng.normal((d, K))
    for _ in range(2):
        U, R = linalg.qr(U, mode="economic")
        signs = np.sign(np.diag(R))
        signs[signs == 0] = 1.0
        U = U * signs
    return U


def build_etf(d: int, K: int, rng: RngStream) -> ETFMatrix:
    """
    Build E = sqrt(K/(K-1)) U (I_K - 1/K 1 1^T) and store its columns as rows.

    Args:
        d: Prototype dimension
        K: Number of prototypes (sub-grades)
        rng: Random stream for the rotation U

    Returns:
        ETFMatrix with a K x d prototype matrix
    """
    if K < 2:
        raise ConfigError(f"A simplex ETF needs at least 2 classes, got {K}")
    U = random_orthonormal(d, K, rng)
    centering = np.eye(K) - np.ones((K, K)) / K
    columns = math.sqrt(K / (K - 1)) * (U @ centering)
    E = np.ascontiguousarray(columns.T)
    E.setflags(write=False)
    logging.debug(f"Built simplex ETF: K={K}, d={d}, seed={rng.seed}")
    return ETFMatrix(E=E, K=K, d=d, seed=rng.seed)


def verify_etf(etf: ETFMatrix) -> float:
    """
    Maximum absolute deviation of the Gram matrix from K/(K-1) delta_ij - 1/(K-1),
    i.e. unit diagonal and -1/(K-1) off the diagonal.

    Args:
        etf: Frame to check

    Returns:
        Non-negative deviation (below ETF_TOLERANCE for any build_etf output)
    """
    K = etf.E.shape[0]
    gram = etf.E @ etf.E.T
    target = (K / (K - 1)) * np.eye(K) - 1.0 / (K - 1)
    return float(np.max(np.abs(gram - target)))
