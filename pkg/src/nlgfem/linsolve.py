"""Direct sparse solves for the saddle-point systems of each time step.

SuperLU with a fixed column ordering; the same inputs give the same bits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SingularMatrix(ArithmeticError):
    """Raised when a pivot falls below 1e-14 * max|A|."""


PIVOT_THRESHOLD = 1e-14


@dataclass(frozen=True)
class BlockLayout:
    """Offsets of consecutive unknown blocks, e.g. velocity / pressure / multiplier."""

    names: tuple[str, ...]
    offsets: tuple[int, ...]  # len(names) + 1, starts at 0

    @classmethod
    def from_sizes(cls, **sizes: int) -> "BlockLayout":
        offsets = np.concatenate([[0], np.cumsum(list(sizes.values()))]).astype(int)
        return cls(tuple(sizes), tuple(int(o) for o in offsets))

    @property
    def size(self) -> int:
        return self.offsets[-1]

    def slice(self, name: str) -> slice:
        k = self.names.index(name)
        return slice(self.offsets[k], self.offsets[k + 1])

    def split(self, x: np.ndarray) -> dict[str, np.ndarray]:
        return {n: x[self.slice(n)] for n in self.names}


@dataclass
class BlockSystem:
    matrix: sp.spmatrix
    rhs: np.ndarray
    layout: BlockLayout

    def __post_init__(self):
        n = self.matrix.shape[0]
        if self.matrix.shape != (n, n) or self.rhs.shape != (n,) or self.layout.size != n:
            raise ValueError("block system dimensions are inconsistent")

    def residual(self, x: np.ndarray) -> float:
        """Relative residual ||Ax - b|| / ||b|| (absolute when b = 0)."""
        r = np.linalg.norm(self.matrix @ x - self.rhs)
        nb = np.linalg.norm(self.rhs)
        return float(r / nb) if nb > 0 else float(r)


class Factorization:
    """LU factorization with partial pivoting, reusable across right-hand sides."""

    def __init__(self, A):
        A = sp.csc_matrix(A, dtype=float)
        n, m = A.shape
        if n != m:
            raise ValueError(f"matrix must be square, got {A.shape}")
        self.shape = A.shape
        self.n = n
        if n == 0:
            self._lu = None
            return
        scale = abs(A).max() if A.nnz else 0.0
        if scale == 0.0:
            raise SingularMatrix("zero matrix")
        try:
            self._lu = spla.splu(A, permc_spec="COLAMD", options={"SymmetricMode": False})
        except RuntimeError as exc:
            raise SingularMatrix(str(exc)) from exc
        piv = np.abs(self._lu.U.diagonal())
        if piv.min() <= PIVOT_THRESHOLD * scale:
            raise SingularMatrix(f"pivot {piv.min():.3e} below threshold {PIVOT_THRESHOLD * scale:.3e}")

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"rhs has length {b.shape[0]}, matrix is {self.n}x{self.n}")
        if self.n == 0:
            return b.copy()
        return self._lu.solve(b)


class LowRankUpdate:
    """Solves with A + U S^{-1} V^T given a factorization of A (Woodbury identity).

    ``U`` and ``Vt`` are sparse (n x k, k x n) and ``S`` is a small k x k matrix.
    """

    def __init__(self, F: Factorization, U, S, Vt):
        self.F = F
        self.n = F.n
        self.Vt = sp.csr_matrix(Vt)
        U = sp.csc_matrix(U)
        self.Z = F.solve(U.toarray()) if U.shape[1] else np.zeros((F.n, 0))
        cap = np.asarray(S.toarray() if sp.issparse(S) else S, dtype=float) + self.Vt @ self.Z
        self._cap = sla.lu_factor(cap) if cap.size else None

    def solve(self, b) -> np.ndarray:
        x = self.F.solve(b)
        if self._cap is None:
            return x
        return x - self.Z @ sla.lu_solve(self._cap, self.Vt @ x)


def factor(A) -> Factorization:
    return Factorization(A)


def solve(F: Factorization, b) -> np.ndarray:
    return F.solve(b)
