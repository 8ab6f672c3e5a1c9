"""Directional preconditioner: an approximate inverse of B + U E U^t.

With S = U^t B^-1 U, T = S^-1 and W = E + T, the inverse applied to f is

    g = U^t B^-1 f
    r = W^-1 T g
    q = B^-1 (f - U T (g - r))

Cheap variants replace T by a thresholded copy and W by E plus the
anti-diagonal of T, factored once with a sparse LU.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .compression import DirectionalApprox

__all__ = [
    "PreconditionerState",
    "SingularWError",
    "antidiagonal",
    "build_W",
    "build_preconditioner",
    "build_schur_blocks",
    "threshold_T",
]

log = logging.getLogger(__name__)

COND_LIMIT = 1e12


class SingularWError(RuntimeError):
    pass


def _inverse(S):
    cond = np.linalg.cond(S)
    if cond <= COND_LIMIT:
        return np.linalg.inv(S), cond
    log.warning("ill-conditioned Schur block (cond %.2e); using truncated pseudo-inverse", cond)
    return np.linalg.pinv(S, rcond=1.0 / COND_LIMIT), cond


def build_schur_blocks(approx: DirectionalApprox):
    """Per-level S_l = U_l^t B_l^-1 U_l and T_l = S_l^-1, with cond(S_l).

    When B holds per-segment blocks, S and T are stacks with one block per
    segment and cond is the worst one of the level.
    """
    S, T, cond = {}, {}, {}
    for lev, U in approx.U.items():
        Binv = approx.Binv[lev]
        S[lev] = U.T @ Binv @ U
        if Binv.ndim == 2:
            T[lev], cond[lev] = _inverse(S[lev])
        else:
            pairs = [_inverse(Sk) for Sk in S[lev]]
            T[lev] = np.array([t for t, _ in pairs])
            cond[lev] = max(c for _, c in pairs)
    return S, T, cond


def threshold_T(T: np.ndarray, tau: float | None) -> sp.csr_matrix:
    """Keep the ceil(tau * dim) largest-magnitude entries of T (all of them if tau is None).

    Ties in magnitude are broken by (row, col) lexicographic order.
    """
    dim = T.shape[0]
    if tau is None:
        return sp.csr_matrix(T)
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    keep = min(math.ceil(tau * dim), dim * dim)
    flat = np.abs(T).ravel()
    # stable sort on -|T| keeps the row-major (lexicographic) order among ties
    order = np.argsort(-flat, kind="stable")[:keep]
    rows, cols = np.divmod(order, dim)
    return sp.csr_matrix((T.ravel()[order], (rows, cols)), shape=T.shape)


def antidiagonal(T: np.ndarray) -> sp.csr_matrix:
    """The k <-> -k mirror entries (a, D-1-a) of a D x D block."""
    D = T.shape[0]
    a = np.arange(D)
    return sp.csr_matrix((T[a, D - 1 - a], (a, D - 1 - a)), shape=T.shape)


def _per_segment(approx, per_level, make):
    """Apply ``make`` to the block of every segment and stack them block-diagonally."""
    blocks = approx.segment_blocks(per_level)
    return sp.block_diag([make(b) for b in blocks], format="csr")


def build_W(approx: DirectionalApprox, T: dict, *, mode: str = "antidiag"):
    """W = E + (anti-diagonal of T) on the concatenated phase index space.

    mode='full' uses all of T instead (the exact W = E + T).
    """
    if mode == "antidiag":
        make = antidiagonal
    elif mode == "full":
        make = sp.csr_matrix
    else:
        raise ValueError(f"unknown W mode {mode!r}")
    return (approx.E + _per_segment(approx, T, make)).tocsc()


def factor_W(W: sp.csc_matrix):
    """Sparse LU with a fill-reducing column ordering and partial pivoting."""
    try:
        lu = spla.splu(W, permc_spec="COLAMD", diag_pivot_thresh=1.0)
    except RuntimeError as exc:
        raise SingularWError(f"sparse LU of W failed: {exc}") from exc
    pivots = np.abs(lu.U.diagonal())
    if pivots.min() <= 1e-14 * pivots.max():
        raise SingularWError(f"near-zero pivot in W: min |u_kk| = {pivots.min():.3e}, max = {pivots.max():.3e}")
    return lu


@dataclass(eq=False)
class PreconditionerState:
    approx: DirectionalApprox
    S: dict
    T: dict
    cond: dict
    T_thr: sp.csr_matrix
    W: sp.csc_matrix
    solve_W: object
    tau: float | None
    lu: object = None
    nnz_T: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.approx.n

    def apply(self, f):
        """Approximate (B + U E U^t)^-1 f."""
        f = np.asarray(f)
        if f.shape != (self.n,):
            raise ValueError(f"expected vector of length {self.n}, got shape {f.shape}")
        ap = self.approx
        binv_f = ap.apply_Binv(f)
        g = ap.apply_Ut(binv_f)
        Tg = self.T_thr @ g
        r = self.solve_W(Tg)
        return binv_f - ap.apply_Binv(ap.apply_U(self.T_thr @ (g - r)))

    __call__ = apply

    def diagnostics(self) -> dict:
        out = {
            "levels": sorted(self.S),
            "cond_S": {lev: float(c) for lev, c in self.cond.items()},
            "nnz_T": dict(self.nnz_T),
            "nnz_W": int(self.W.nnz),
            "dim_W": int(self.W.shape[0]),
        }
        if self.lu is not None:
            out["lu_fill"] = int(self.lu.L.nnz + self.lu.U.nnz - self.W.shape[0])
        return out


def build_preconditioner(
    approx: DirectionalApprox,
    tau: float | None = 4.0,
    *,
    w_mode: str = "antidiag",
    w_solver: str = "splu",
) -> PreconditionerState:
    """Precompute Schur blocks, threshold T, assemble and factor W.

    tau=None keeps T exact; w_mode='full' with w_solver='dense' gives the
    unapproximated inverse of B + U E U^t.
    """
    S, T, cond = build_schur_blocks(approx)
    T_thr = _per_segment(approx, T, lambda b: threshold_T(b, tau))
    W = build_W(approx, T, mode=w_mode)
    lu = None
    if w_solver == "splu":
        lu = factor_W(W)
        solve = lu.solve
    elif w_solver == "dense":
        lu_dense = sla.lu_factor(W.toarray())
        solve = lambda v: sla.lu_solve(lu_dense, v)
    else:
        raise ValueError(f"unknown W solver {w_solver!r}")
    nnz_T = {}
    for s, blk in zip(approx.segments, approx.segment_blocks(T)):
        nnz_T.setdefault(s.level, int(threshold_T(blk, tau).nnz))
    return PreconditionerState(approx, S, T, cond, T_thr, W, solve, tau, lu, nnz_T)
