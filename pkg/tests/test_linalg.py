import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safeanchor.linalg import ConvergenceError, ShapeError, frobenius_norm, matmul, sym_eig, thin_svd, transpose


def naive_matmul(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return np.array(out)


def char_poly_roots(a):
    """Eigenvalues via the Faddeev-LeVerrier characteristic polynomial (loop matmul only)."""
    n = len(a)
    a = [list(map(float, row)) for row in a]
    coeffs = [1.0]
    m = [[0.0] * n for _ in range(n)]
    eye = [[float(i == j) for j in range(n)] for i in range(n)]
    c = 1.0
    for k in range(1, n + 1):
        m = [[m_ij + c * e_ij for m_ij, e_ij in zip(mr, er)] for mr, er in zip(naive_matmul(a, m).tolist(), eye)]
        am = naive_matmul(a, m)
        c = -sum(am[i][i] for i in range(n)) / k
        coeffs.append(c)
    return np.sort(np.roots(coeffs).real)[::-1]


def random_sym(rng, n):
    x = rng.normal(size=(n, n))
    return (x + x.T) / 2


# -- plumbing against loop oracles -------------------------------------------


def test_matmul_transpose_norm_match_loops():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a.tolist(), b.tolist()), rtol=1e-13, atol=1e-13)
    t = transpose(a)
    assert all(t[j, i] == a[i, j] for i in range(5) for j in range(7))
    assert frobenius_norm(a) == pytest.approx(sum(v * v for v in a.ravel()) ** 0.5, rel=1e-14)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        matmul(np.array([[np.nan]]), np.ones((1, 1)))


# -- sym_eig -----------------------------------------------------------------


def test_identity_2x2():
    r = sym_eig(np.eye(2))
    np.testing.assert_allclose(r.eigenvalues, [1.0, 1.0])
    np.testing.assert_allclose(r.eigenvectors.T @ r.eigenvectors, np.eye(2), atol=1e-12)


def test_diagonal():
    r = sym_eig(np.diag([9.0, 1.0]))
    np.testing.assert_allclose(r.eigenvalues, [9.0, 1.0])
    np.testing.assert_allclose(np.abs(r.eigenvectors), np.eye(2), atol=1e-12)


def test_two_by_two_char_poly():
    # (2-l)^2 - 1 = 0 -> l = 3, 1
    r = sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(r.eigenvalues, [3.0, 1.0], atol=1e-12)
    s = 1 / np.sqrt(2)
    v0, v1 = r.eigenvectors[:, 0], r.eigenvectors[:, 1]
    assert abs(abs(v0 @ np.array([s, s])) - 1) < 1e-12
    assert abs(abs(v1 @ np.array([s, -s])) - 1) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_four_by_four_matches_char_poly(seed):
    a = random_sym(np.random.default_rng(seed), 4)
    np.testing.assert_allclose(sym_eig(a).eigenvalues, char_poly_roots(a.tolist()), atol=1e-9)


@pytest.mark.parametrize("n", [1, 3, 17, 40])
def test_reconstruction_and_orthonormality(n):
    a = random_sym(np.random.default_rng(n), n)
    r = sym_eig(a)
    u, lam = r.eigenvectors, r.eigenvalues
    assert np.all(np.diff(lam) <= 0)
    assert np.abs(u.T @ u - np.eye(n)).max() < 1e-8
    assert frobenius_norm(u @ np.diag(lam) @ u.T - a) <= 1e-7 * frobenius_norm(a)


def test_jacobi_and_lapack_agree():
    a = random_sym(np.random.default_rng(7), 30)
    j, l = sym_eig(a), sym_eig(a, method="lapack")
    np.testing.assert_allclose(j.eigenvalues, l.eigenvalues, atol=1e-10)
    # compare projectors onto the top 5 directions (bases are sign-ambiguous)
    pj, pl = j.eigenvectors[:, :5] @ j.eigenvectors[:, :5].T, l.eigenvectors[:, :5] @ l.eigenvectors[:, :5].T
    np.testing.assert_allclose(pj, pl, atol=1e-8)


def test_psd_gram_properties():
    rng = np.random.default_rng(3)
    g = rng.normal(size=(20, 50))  # rank-deficient: 20 samples in 50 dims
    f = g.T @ g / 20
    lam = sym_eig(f).eigenvalues
    assert lam.min() >= -1e-9
    assert lam.sum() == pytest.approx(np.trace(f), rel=1e-9)
    assert np.sum(lam > 1e-9 * lam[0]) == 20


def test_zero_rows_deflated():
    a = np.zeros((6, 6))
    a[1:3, 1:3] = [[2.0, 1.0], [1.0, 2.0]]
    r = sym_eig(a)
    np.testing.assert_allclose(r.eigenvalues, [3, 1, 0, 0, 0, 0], atol=1e-12)
    assert frobenius_norm(r.eigenvectors @ np.diag(r.eigenvalues) @ r.eigenvectors.T - a) < 1e-12


def test_degenerate_ties_keep_projector():
    a = np.diag([2.0, 5.0, 2.0, 1.0])
    r = sym_eig(a)
    np.testing.assert_allclose(r.eigenvalues, [5, 2, 2, 1])
    p = r.eigenvectors[:, 1:3] @ r.eigenvectors[:, 1:3].T
    np.testing.assert_allclose(p, np.diag([1.0, 0, 1.0, 0]), atol=1e-12)


def test_sym_eig_errors():
    with pytest.raises(ShapeError):
        sym_eig(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ShapeError):
        sym_eig(np.zeros((0, 0)))


def test_convergence_error_reports_residual():
    a = random_sym(np.random.default_rng(0), 12)
    with pytest.raises(ConvergenceError) as info:
        sym_eig(a, max_sweeps=1)
    assert info.value.residual > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_property_reconstruct_idempotent(n, seed):
    a = random_sym(np.random.default_rng(seed), n)
    r = sym_eig(a)
    rebuilt = r.eigenvectors @ np.diag(r.eigenvalues) @ r.eigenvectors.T
    assert frobenius_norm(rebuilt - a) <= 1e-7 * max(frobenius_norm(a), 1e-300)
    r2 = sym_eig(rebuilt)
    np.testing.assert_allclose(r2.eigenvalues, r.eigenvalues, atol=1e-9 * max(1.0, abs(r.eigenvalues).max()))


# -- thin_svd ----------------------------------------------------------------


def test_svd_identity():
    np.testing.assert_allclose(thin_svd(np.eye(3)).singular_values, [1, 1, 1])


def test_svd_rank_one():
    u = np.array([2.0, 0.0, 0.0, 0.0])
    v = np.array([0.0, 3.0, 0.0])
    s = thin_svd(np.outer(u, v)).singular_values
    np.testing.assert_allclose(s, [6.0, 0.0, 0.0], atol=1e-12)


@pytest.mark.parametrize("shape", [(5, 3), (3, 5), (8, 8), (40, 12)])
def test_svd_gram_oracle(shape):
    m = np.random.default_rng(sum(shape)).normal(size=shape)
    r = thin_svd(m)
    small = m.T @ m if shape[0] >= shape[1] else m @ m.T
    oracle = np.sqrt(np.clip(char_poly_roots(small.tolist()) if small.shape[0] <= 5 else np.linalg.eigvalsh(small)[::-1], 0, None))
    np.testing.assert_allclose(r.singular_values, oracle, rtol=1e-8, atol=1e-10)
    assert frobenius_norm(r.u @ np.diag(r.singular_values) @ r.vt - m) <= 1e-7 * frobenius_norm(m)
    k = min(shape)
    assert np.abs(r.u.T @ r.u - np.eye(k)).max() < 1e-8
    assert np.abs(r.vt @ r.vt.T - np.eye(k)).max() < 1e-8


def test_svd_sign_convention():
    m = np.random.default_rng(2).normal(size=(6, 4))
    for method in ("jacobi", "lapack"):
        vt = thin_svd(m, method).vt
        for row in vt:
            nz = row[np.abs(row) > 1e-12]
            assert nz[0] > 0


def test_svd_orthonormal_columns_give_unit_values():
    q, _ = np.linalg.qr(np.random.default_rng(4).normal(size=(30, 6)))
    np.testing.assert_allclose(thin_svd(q).singular_values, np.ones(6), atol=1e-8)


def test_svd_rank_deficient_still_orthonormal():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(20, 2)) @ rng.normal(size=(2, 6))
    r = thin_svd(m)
    assert np.abs(r.u.T @ r.u - np.eye(6)).max() < 1e-8
    assert r.singular_values[2:].max() < 1e-6


def test_svd_empty():
    with pytest.raises(ShapeError):
        thin_svd(np.zeros((0, 3)))
