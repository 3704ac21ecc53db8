"""Intrinsic GMRF precision structures (unit scale).

Each builder returns a :class:`PrecisionModel` carrying the structure matrix,
the analytically known null space, and a sum-to-zero constraint row.  The
block precision used in inference is ``tau * Q``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sps

from .errors import DomainError, FactorizationError

NULL_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PrecisionModel:
    Q: sps.csr_matrix
    null_basis: np.ndarray  # (k, dim), may have k == 0
    constraint: np.ndarray  # (c, dim)
    name: str = ""
    scale: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.Q.shape[0]

    @property
    def rank_deficiency(self) -> int:
        return self.null_basis.shape[0]

    @property
    def rank(self) -> int:
        return self.dim - self.rank_deficiency

    def quad_form(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ (self.Q @ x))

    def null_residual(self) -> float:
        if self.rank_deficiency == 0:
            return 0.0
        return float(np.max(np.abs(self.Q @ self.null_basis.T)))

    def validate(self) -> None:
        Q = self.Q.tocoo()
        diff = (self.Q - self.Q.T).tocoo()
        if diff.nnz and np.max(np.abs(diff.data)) != 0.0:
            raise DomainError(f"{self.name}: precision is not symmetric")
        if self.null_residual() > NULL_TOL * max(1.0, np.max(np.abs(Q.data))):
            raise DomainError(f"{self.name}: declared null basis is not annihilated")
        if self.constraint.size and np.linalg.matrix_rank(self.constraint) < self.constraint.shape[0]:
            raise DomainError(f"{self.name}: constraint matrix lacks full row rank")

    def log_gdet(self) -> float:
        """Log generalized determinant: sum of log nonzero eigenvalues."""
        return log_generalized_determinant(self.Q, self.null_basis)


def _sum_to_zero(m):
    return np.ones((1, m))


def _symmetrize(Q) -> sps.csr_matrix:
    Q = sps.csr_matrix(Q)
    # exact symmetry: average with the transpose then drop explicit zeros
    Q = ((Q + Q.T) * 0.5).tocsr()
    Q.eliminate_zeros()
    Q.sort_indices()
    return Q


def difference_matrix(m: int, order: int) -> sps.csr_matrix:
    """``(m - order) x m`` forward-difference operator."""
    D = sps.identity(m, format="csr")
    for k in range(order):
        n = m - k
        D = sps.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)) @ D
    return sps.csr_matrix(D)


def rw1_structure(m: int) -> sps.csr_matrix:
    D = difference_matrix(m, 1)
    return _symmetrize(D.T @ D)


def rw2_structure(m: int) -> sps.csr_matrix:
    D = difference_matrix(m, 2)
    return _symmetrize(D.T @ D)


def rw1_precision(m: int) -> PrecisionModel:
    if m < 2:
        raise DomainError(f"RW1 needs at least 2 bins, got {m}")
    pm = PrecisionModel(rw1_structure(m), np.ones((1, m)), _sum_to_zero(m), name="rw1")
    return pm


def rw2_precision(m: int) -> PrecisionModel:
    if m < 3:
        raise DomainError(f"RW2 needs at least 3 bins, got {m}")
    basis = np.vstack([np.ones(m), np.arange(1, m + 1, dtype=float)])
    return PrecisionModel(rw2_structure(m), basis, _sum_to_zero(m), name="rw2")


def rw2d_precision(n1: int, n2: int, variant: str = "paper") -> PrecisionModel:
    """Lattice field on an ``n1 x n2`` grid, row-major (``index = i * n2 + j``).

    ``variant="paper"``::

        I_{n1} (x) R1_{n2} + R2_{n1} (x) I_{n2} + 2 R1_{n1} (x) R2_{n2}

    with ``R1``/``R2`` the RW1/RW2 structure matrices.  Its null space is
    spanned by the constant field and a linear trend along the first axis.

    ``variant="squared_laplacian"`` is the classical form
    ``I (x) R2 + R2 (x) I + 2 R1 (x) R1`` with constants and both linear
    trends in the null space.
    """
    if n1 < 3 or n2 < 3:
        raise DomainError(f"RW2D needs a grid of at least 3 x 3, got {n1} x {n2}")
    I1, I2 = sps.identity(n1), sps.identity(n2)
    ones1, ones2 = np.ones(n1), np.ones(n2)
    lin1 = np.arange(n1, dtype=float) - (n1 - 1) / 2
    lin2 = np.arange(n2, dtype=float) - (n2 - 1) / 2
    if variant == "paper":
        Q = (sps.kron(I1, rw1_structure(n2)) + sps.kron(rw2_structure(n1), I2)
             + 2 * sps.kron(rw1_structure(n1), rw2_structure(n2)))
        basis = np.vstack([np.kron(ones1, ones2), np.kron(lin1, ones2)])
    elif variant == "squared_laplacian":
        Q = (sps.kron(I1, rw2_structure(n2)) + sps.kron(rw2_structure(n1), I2)
             + 2 * sps.kron(rw1_structure(n1), rw1_structure(n2)))
        basis = np.vstack([np.kron(ones1, ones2), np.kron(lin1, ones2),
                           np.kron(ones1, lin2)])
    else:
        raise DomainError(f"unknown rw2d variant {variant!r}")
    pm = PrecisionModel(_symmetrize(Q), basis, _sum_to_zero(n1 * n2), name=f"rw2d_{variant}",
                        meta={"n1": n1, "n2": n2, "variant": variant})
    if n1 * n2 <= 2500:
        lam_min = np.linalg.eigvalsh(pm.Q.toarray())[0]
        if lam_min < -1e-8:
            raise DomainError(f"RW2D precision is not PSD (min eigenvalue {lam_min:.3g})")
    return pm


def iid_precision(m: int) -> PrecisionModel:
    return PrecisionModel(sps.identity(m, format="csr"), np.zeros((0, m)), np.zeros((0, m)),
                          name="iid")


def _orthonormal_rows(B):
    if B.shape[0] == 0:
        return B
    q, _ = np.linalg.qr(B.T)
    return q.T


def log_generalized_determinant(Q, null_basis) -> float:
    """``log |Q|_+`` from ``log |Q + V V'|`` with ``V`` an orthonormal null basis."""
    V = _orthonormal_rows(np.asarray(null_basis, dtype=float))
    M = Q.toarray() if sps.issparse(Q) else np.asarray(Q)
    M = M + V.T @ V
    try:
        c, _ = sla.cho_factor(M, lower=True)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            "structure matrix is singular beyond its declared rank deficiency") from exc
    return float(2 * np.sum(np.log(np.diag(c))))


def constrained_pseudo_inverse(pm: PrecisionModel) -> np.ndarray:
    """Moore-Penrose inverse of ``Q``: the covariance with null directions removed."""
    V = _orthonormal_rows(pm.null_basis)
    M = pm.Q.toarray() + V.T @ V
    try:
        c = sla.cho_factor(M, lower=True)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            f"{pm.name}: singular beyond declared rank deficiency {pm.rank_deficiency}") from exc
    inv = sla.cho_solve(c, np.eye(pm.dim))
    return inv - V.T @ V


def scale_to_unit_gv(pm: PrecisionModel) -> PrecisionModel:
    """Rescale so the geometric mean of the generalized marginal variances is 1."""
    var = np.diag(constrained_pseudo_inverse(pm))
    if np.any(var <= 0):
        raise FactorizationError(f"{pm.name}: nonpositive generalized variance")
    gv = float(np.exp(np.mean(np.log(var))))
    return replace(pm, Q=_symmetrize(pm.Q * gv), scale=pm.scale * gv)
