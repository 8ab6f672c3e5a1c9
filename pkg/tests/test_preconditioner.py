import logging
import math

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp

from dirscatter.compression import build_directional_approx
from dirscatter.preconditioner import (
    SingularWError,
    _inverse,
    antidiagonal,
    build_preconditioner,
    build_schur_blocks,
    build_W,
    factor_W,
    threshold_T,
)

from .conftest import approx_for, disc_for, matrix_for, random_complex, segments_for


@pytest.fixture(scope="module")
def schur_q5():
    return build_schur_blocks(approx_for("ellipse", 5, "dirichlet"))


def zero_E(approx):
    import dataclasses

    return dataclasses.replace(approx, E=sp.csr_matrix(approx.E.shape, dtype=complex))


def augmented_solve(approx, f):
    """Dense solve of [[B, U, 0], [U^t, 0, I], [0, I, E]] (q, p, r) = (f, 0, 0)."""
    B, U, E = approx.dense_B(), approx.dense_U(), approx.E.toarray()
    n, nk = U.shape
    Z = np.zeros
    A = np.block(
        [
            [B, U, Z((n, nk))],
            [U.T, Z((nk, nk)), np.eye(nk)],
            [Z((nk, n)), np.eye(nk), E],
        ]
    )
    rhs = np.concatenate([f, np.zeros(2 * nk)])
    return np.linalg.solve(A, rhs)[:n]


# ----------------------------------------------------------------- Schur blocks


def test_level_five_dimensions(schur_q5):
    S, T, cond = schur_q5
    approx = approx_for("ellipse", 5, "dirichlet")
    assert 5 in S
    assert approx.B[5].shape == (256, 256)
    assert approx.U[5].shape == (256, 65)
    assert S[5].shape == T[5].shape == (65, 65)


def test_S_times_T_is_identity(schur_q5):
    S, T, cond = schur_q5
    for lev in S:
        assert cond[lev] < 1e12
        assert np.abs(S[lev] @ T[lev] - np.eye(len(S[lev]))).max() <= 1e-10


def test_T_concentrates_on_antidiagonal(schur_q5):
    _, T, _ = schur_q5
    for Tl in T.values():
        D = len(Tl)
        peak = np.abs(Tl).argmax(axis=1)
        assert np.mean(np.abs(peak - (D - 1 - np.arange(D))) <= 2) >= 0.8


def test_schur_blocks_are_block_diagonal_restrictions():
    approx = approx_for("kite", 4, "neumann")
    S, _, _ = build_schur_blocks(approx)
    U = approx.dense_U()
    S_dense = U.T @ np.linalg.solve(approx.dense_B(), U)
    S_blocks = sla.block_diag(*[S[s.level] for s in approx.segments])
    assert np.allclose(S_dense, S_blocks, rtol=0, atol=1e-10 * np.abs(S_blocks).max())


def test_ill_conditioned_block_falls_back_to_pseudo_inverse(caplog):
    A = np.diag([1.0, 1e-14, 2.0])
    with caplog.at_level(logging.WARNING):
        inv, cond = _inverse(A)
    assert cond > 1e12
    assert "ill-conditioned" in caplog.text
    assert np.allclose(inv, np.diag([1.0, 0.0, 0.5]))


# ----------------------------------------------------------------- thresholding


def test_threshold_keeps_everything_when_budget_is_large(rng):
    T = random_complex(rng, 9, 9)
    assert np.array_equal(threshold_T(T, 100).toarray(), T)
    assert np.array_equal(threshold_T(T, None).toarray(), T)


@pytest.mark.parametrize("tau", [1, 1.5, 4, 8.3])
def test_threshold_count(rng, tau):
    T = random_complex(rng, 17, 17)
    thr = threshold_T(T, tau)
    assert thr.nnz == min(math.ceil(tau * 17), 17 * 17)
    kept = np.abs(thr.toarray())
    dropped = np.abs(T)[kept == 0]
    assert dropped.max() <= kept[kept > 0].min()


def test_threshold_ties_lexicographic():
    T = np.ones((3, 3))
    thr = threshold_T(T, 1.0).toarray()
    assert np.array_equal(np.argwhere(thr), [[0, 0], [0, 1], [0, 2]])


def test_threshold_rejects_small_tau():
    with pytest.raises(ValueError):
        threshold_T(np.eye(3), 0.5)


def test_tau_four_loses_little(schur_q5):
    _, T, _ = schur_q5
    for Tl in T.values():
        loss = np.linalg.norm(Tl - threshold_T(Tl, 4.0).toarray()) / np.linalg.norm(Tl)
        assert loss <= 0.1


# ----------------------------------------------------------------- W and its LU


def test_antidiagonal_positions():
    T = np.arange(25.0).reshape(5, 5)
    A = antidiagonal(T).toarray()
    assert np.array_equal(np.argwhere(A), [[0, 4], [1, 3], [2, 2], [3, 1], [4, 0]])
    assert A[2, 2] == T[2, 2]


@pytest.mark.parametrize("shape", ["ellipse", "kite"])
def test_W_sparsity(shape):
    approx = approx_for(shape, 4, "dirichlet")
    _, T, _ = build_schur_blocks(approx)
    W = build_W(approx, T)
    m = approx.segments.m
    assert W.nnz == m * (m - 1) + approx.nk
    assert W.nnz <= approx.E.nnz + approx.nk


def test_W_without_E_inverts_mirror_entries():
    approx = zero_E(approx_for("ellipse", 4, "dirichlet"))
    _, T, _ = build_schur_blocks(approx)
    W = build_W(approx, T)
    lu = factor_W(W)
    seg = approx.segments[2]
    Tl = T[seg.level]
    D = len(Tl)
    off = approx.k_offsets[2]
    for a in (0, 3, D // 2):
        e = np.zeros(approx.nk, dtype=complex)
        e[off + a] = 1.0
        x = lu.solve(e)
        expected = np.zeros(approx.nk, dtype=complex)
        expected[off + D - 1 - a] = 1.0 / Tl[a, D - 1 - a]
        assert np.allclose(x, expected, rtol=1e-12, atol=0)


def test_lu_factors_reproduce_permuted_W():
    approx = approx_for("ellipse", 4, "neumann")
    P = build_preconditioner(approx)
    W, lu, n = P.W, P.lu, P.W.shape[0]
    Pr = sp.csc_matrix((np.ones(n), (lu.perm_r, np.arange(n))))
    Pc = sp.csc_matrix((np.ones(n), (np.arange(n), lu.perm_c)))
    diff = (Pr @ W @ Pc - lu.L @ lu.U).toarray()
    assert np.linalg.norm(diff) <= 1e-12 * sp.linalg.norm(W)
    assert sp.tril(lu.L, -1).nnz == lu.L.nnz - n and sp.triu(lu.U).nnz == lu.U.nnz


def test_singular_W_is_reported():
    with pytest.raises(SingularWError):
        factor_W(sp.csc_matrix((4, 4), dtype=complex))
    W = sp.csc_matrix(np.diag([1.0, 1.0, 1e-20, 1.0]).astype(complex))
    with pytest.raises(SingularWError):
        factor_W(W)


def test_diagnostics():
    P = build_preconditioner(approx_for("kite", 4, "dirichlet"))
    diag = P.diagnostics()
    assert set(diag) >= {"levels", "cond_S", "nnz_T", "nnz_W", "dim_W", "lu_fill"}
    assert diag["dim_W"] == P.approx.nk
    for lev, nnz in diag["nnz_T"].items():
        D = 2 ** (lev + 1) + 1
        assert nnz == min(math.ceil(4 * D), D * D)


# ----------------------------------------------------------------- apply


def test_apply_without_E_is_block_inverse(rng):
    approx = zero_E(approx_for("kite", 4, "dirichlet"))
    P = build_preconditioner(approx, tau=None, w_mode="full", w_solver="dense")
    f = random_complex(rng, approx.n)
    assert np.allclose(P(f), approx.apply_Binv(f), rtol=0, atol=1e-10 * np.abs(approx.apply_Binv(f)).max())


def test_apply_zero_and_linear(rng):
    P = build_preconditioner(approx_for("ellipse", 4, "dirichlet"))
    n = P.n
    assert np.array_equal(P(np.zeros(n, dtype=complex)), np.zeros(n))
    f1, f2 = random_complex(rng, n), random_complex(rng, n)
    a, b = 0.3 - 1.2j, 2.0
    lhs = P(a * f1 + b * f2)
    rhs = a * P(f1) + b * P(f2)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * np.linalg.norm(rhs)


def test_apply_dimension_check():
    P = build_preconditioner(approx_for("ellipse", 4, "dirichlet"))
    with pytest.raises(ValueError):
        P(np.zeros(P.n + 1))


@pytest.mark.parametrize("bc", ["dirichlet", "neumann"])
def test_unapproximated_pipeline_matches_augmented_system(rng, bc):
    approx = approx_for("ellipse", 4, bc)
    P = build_preconditioner(approx, tau=None, w_mode="full", w_solver="dense")
    f = random_complex(rng, approx.n)
    ref = augmented_solve(approx, f)
    assert np.linalg.norm(P(f) - ref) <= 1e-9 * np.linalg.norm(ref)
    # and it inverts B + U E U^t
    A = approx.dense()
    for _ in range(3):
        x = random_complex(rng, approx.n)
        assert np.linalg.norm(P(A @ x) - x) <= 1e-9 * np.linalg.norm(x)


def test_sparse_and_dense_W_solvers_agree(rng):
    approx = approx_for("kite", 4, "neumann")
    f = random_complex(rng, approx.n)
    a = build_preconditioner(approx, w_solver="splu")(f)
    b = build_preconditioner(approx, w_solver="dense")(f)
    assert np.allclose(a, b, rtol=1e-10)


def test_exact_diagonal_blocks_per_segment():
    d, segs, M = disc_for("ellipse", 4), segments_for("ellipse", 4), matrix_for("ellipse", 4, "dirichlet")
    approx = build_directional_approx(d, segs, "dirichlet", exact_diagonal=lambda a, b: M.array[a:b, a:b])
    S, T, _ = build_schur_blocks(approx)
    counts = {lev: int(np.sum(segs.levels == lev)) for lev in S}
    for lev in S:
        assert S[lev].shape[0] == counts[lev]
    P = build_preconditioner(approx, tau=None, w_mode="full", w_solver="dense")
    x = np.exp(0.3j * np.arange(d.n))
    assert np.linalg.norm(P(approx.matvec(x)) - x) <= 1e-9 * np.linalg.norm(x)


@pytest.mark.parametrize("option", [dict(w_mode="diag"), dict(w_solver="gauss")])
def test_bad_options(option):
    with pytest.raises(ValueError):
        build_preconditioner(approx_for("ellipse", 4, "dirichlet"), **option)


def _tau_errors(shape, bc):
    approx = approx_for(shape, 4, bc)
    M = matrix_for(shape, 4, bc)
    rng = np.random.default_rng(3)
    X = [random_complex(rng, approx.n) for _ in range(10)]
    med = []
    for tau in (2.0, 4.0, 8.0):
        P = build_preconditioner(approx, tau)
        med.append(np.median([np.linalg.norm(P(M.matvec(x)) - x) / np.linalg.norm(x) for x in X]))
    return med


@pytest.mark.xfail(strict=True, reason="with W built from the anti-diagonal of T, a fuller T is less consistent; see ledger")
def test_error_no_worse_as_tau_grows():
    med = _tau_errors("ellipse", "dirichlet")
    assert med[0] >= med[1] >= med[2]


def test_tau_changes_error_only_slightly():
    med = _tau_errors("ellipse", "dirichlet")
    assert max(med) <= 1.05 * min(med)
    assert max(med) < 0.5
