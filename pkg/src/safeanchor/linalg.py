"""Dense float64 linear algebra used throughout the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The symmetric
eigensolver is a cyclic Jacobi method with round-robin (tournament) pair
ordering, so each round applies n/2 disjoint rotations at once as vectorized
row and column updates. The thin SVD is derived from the eigendecomposition
of the Gram matrix on the thinner side.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

JACOBI_TOL = 1e-11
JACOBI_MAX_SWEEPS = 100
SYMMETRY_TOL = 1e-9


class ShapeError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class SymEigResult:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray  # descending, non-negative
    vt: np.ndarray


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(a) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


def frobenius_norm(a) -> float:
    a = as_matrix(a)
    return float(np.sqrt(np.sum(a * a)))


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings for one cyclic sweep: n-1 rounds, each covering n/2 disjoint pairs.

    Every unordered pair (p, q) appears in exactly one round. An odd n gets a
    dummy slot whose pairs are dropped.
    """
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for j in range(m // 2):
            p, q = players[j], players[m - 1 - j]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _off_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.sqrt(np.sum(off * off)))


def _jacobi(a: np.ndarray, tol: float, max_sweeps: int) -> tuple[np.ndarray, np.ndarray]:
    n = a.shape[0]
    scale = frobenius_norm(a)
    vt = np.eye(n)
    if n == 1 or scale == 0.0:
        return np.diag(a).copy(), vt
    target = tol * scale
    rounds = _round_robin(n)
    off = _off_norm(a)
    sweeps = 0
    while off > target:
        if sweeps >= max_sweeps:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps", off / scale)
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 1e-300
            if not np.any(active):
                continue
            p, q, apq = p[active], q[active], apq[active]
            tau = (a[q, q] - a[p, p]) / (2.0 * apq)
            big = np.abs(tau) > 1e150
            tau_c = np.clip(tau, -1e150, 1e150)
            tau_sq = np.where(big, 0.0, tau_c * tau_c)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau_sq))
            t = np.where(big, 0.5 / np.where(big, tau, 1.0), t)
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = t[:, None] * c
            # J^T A J as: rotate rows, transpose (A symmetric), rotate rows again
            for _ in range(2):
                rp, rq = a[p], a[q]
                a[p] = c * rp - s * rq
                a[q] = s * rp + c * rq
                a = np.ascontiguousarray(a.T)
            a[p, q] = 0.0
            a[q, p] = 0.0
            rp, rq = vt[p], vt[q]
            vt[p] = c * rp - s * rq
            vt[q] = s * rp + c * rq
        sweeps += 1
        off = _off_norm(a)
    return np.diag(a).copy(), vt


def sym_eig(f, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS, method: str = "jacobi") -> SymEigResult:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    ``method="lapack"`` hands the symmetrized matrix to ``numpy.linalg.eigh``
    instead; ordering and validation are the same.

    Eigenvalues come back in descending order; ties keep the original diagonal
    order, so the basis of a degenerate eigenspace is not unique but its
    projector is. Rows that are exactly zero are deflated before iterating.
    Raises ``ConvergenceError`` if the off-diagonal Frobenius norm is still
    above ``tol * ||f||_F`` after ``max_sweeps`` sweeps.
    """
    a = as_matrix(f)
    n, m = a.shape
    if n != m:
        raise ShapeError(f"sym_eig needs a square matrix, got {a.shape}")
    if n == 0:
        raise ShapeError("sym_eig of an empty matrix")
    scale = frobenius_norm(a)
    asym = frobenius_norm(a - a.T)
    if asym > SYMMETRY_TOL * max(scale, 1.0):
        raise ShapeError(f"matrix is not symmetric (||F - F^T||_F = {asym:.3e})")
    a = 0.5 * (a + a.T)
    if method == "lapack":
        w, vecs = np.linalg.eigh(a)
        order = np.argsort(-w, kind="stable")
        return SymEigResult(w[order], np.ascontiguousarray(vecs[:, order]))
    if method != "jacobi":
        raise ValueError(f"unknown eigen method {method!r}")

    live = np.flatnonzero(np.any(a != 0.0, axis=1))
    w = np.zeros(n)
    vecs = np.eye(n)
    if live.size:
        sub = np.ascontiguousarray(a[np.ix_(live, live)])
        w_live, vt_live = _jacobi(sub, tol, max_sweeps)
        w[live] = w_live
        vecs[:, live] = 0.0
        vecs[np.ix_(live, live)] = vt_live.T
    order = np.argsort(-w, kind="stable")
    return SymEigResult(w[order], np.ascontiguousarray(vecs[:, order]))


def _complete_basis(q: np.ndarray, k: int) -> np.ndarray:
    """Extend the orthonormal columns of ``q`` to ``k`` columns by Gram-Schmidt on e_1, e_2, ..."""
    n = q.shape[0]
    cols = [q[:, j] for j in range(q.shape[1])]
    for i in range(n):
        if len(cols) >= k:
            break
        e = np.zeros(n)
        e[i] = 1.0
        for _ in range(2):
            for c in cols:
                e -= (c @ e) * c
        norm = np.linalg.norm(e)
        if norm > 1e-8:
            cols.append(e / norm)
    return np.column_stack(cols) if cols else np.zeros((n, 0))


def _first_nonzero_positive(vecs: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Sign per column so that each column's first non-negligible entry is positive."""
    signs = np.ones(vecs.shape[1])
    for j in range(vecs.shape[1]):
        nz = np.flatnonzero(np.abs(vecs[:, j]) > tol)
        if nz.size and vecs[nz[0], j] < 0:
            signs[j] = -1.0
    return signs


def _reorthonormalize(q: np.ndarray) -> np.ndarray:
    """Two passes of modified Gram-Schmidt; columns are already nearly orthonormal."""
    q = q.copy()
    for _ in range(2):
        for j in range(q.shape[1]):
            for i in range(j):
                q[:, j] -= (q[:, i] @ q[:, j]) * q[:, i]
            q[:, j] /= np.linalg.norm(q[:, j])
    return q


def thin_svd(m, method: str = "jacobi") -> SvdResult:
    """Thin SVD ``m = u @ diag(s) @ vt`` with min(rows, cols) singular triplets.

    Computed from ``sym_eig`` of the smaller Gram matrix. Each right singular
    vector (row of ``vt``) is signed so its first nonzero entry is positive.
    Directions with zero singular value are completed to an orthonormal set.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    if rows == 0 or cols == 0:
        raise ShapeError("thin_svd of an empty matrix")
    if rows < cols:
        t = thin_svd(a.T, method)
        # a = (a^T)^T = vt^T s u^T; re-sign so rows of the new vt lead positive
        u, s, vt = t.vt.T, t.singular_values, t.u.T
        signs = _first_nonzero_positive(vt.T)
        return SvdResult(u * signs, s, vt * signs[:, None])

    if method == "lapack":
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        signs = _first_nonzero_positive(vt.T)
        return SvdResult(u * signs, s, np.ascontiguousarray(vt * signs[:, None]))
    eig = sym_eig(a.T @ a, method=method)
    lam = np.clip(eig.eigenvalues, 0.0, None)
    s = np.sqrt(lam)
    v = eig.eigenvectors
    v = v * _first_nonzero_positive(v)

    cutoff = max(s[0], 1.0) * 1e-10 if s.size else 0.0
    keep = s > cutoff
    u = np.zeros((rows, cols))
    if np.any(keep):
        u[:, keep] = _reorthonormalize((a @ v[:, keep]) / s[keep])
    nkeep = int(np.sum(keep))
    if nkeep < cols:
        # keep is a prefix because s is sorted descending
        u = _complete_basis(u[:, :nkeep], cols)
    return SvdResult(u, s, np.ascontiguousarray(v.T))
