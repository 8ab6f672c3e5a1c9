"""Restarted GMRES with optional left preconditioning."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

__all__ = ["NonFiniteError", "SolveReport", "gmres"]


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class SolveReport:
    x: np.ndarray
    iterations: int
    restarts: int
    converged: bool
    residuals: list = field(default_factory=list)
    wall_time: float = 0.0
    matvec_time: float = 0.0
    precond_time: float = 0.0
    n_matvec: int = 0
    n_precond: int = 0

    @property
    def relative_residual(self) -> float:
        return self.residuals[-1] if self.residuals else float("nan")

    def residual_csv(self) -> str:
        return "residual\n" + "".join(f"{r:.17g}\n" for r in self.residuals)


def gmres(apply_A, f, apply_M=None, *, tol=1e-6, restart=80, maxit=500, x0=None) -> SolveReport:
    """Solve A x = f by GMRES(restart) with modified Gram-Schmidt Arnoldi.

    With ``apply_M`` the system M A x = M f is solved and convergence is
    measured on the preconditioned residual relative to ||M f||.  The
    iteration count is the number of Arnoldi steps over all cycles.
    """
    t_start = time.perf_counter()
    timers = {"A": 0.0, "M": 0.0, "nA": 0, "nM": 0}

    def A(v):
        t0 = time.perf_counter()
        out = apply_A(v)
        timers["A"] += time.perf_counter() - t0
        timers["nA"] += 1
        return out

    def M(v):
        if apply_M is None:
            return v
        t0 = time.perf_counter()
        out = apply_M(v)
        timers["M"] += time.perf_counter() - t0
        timers["nM"] += 1
        return out

    f = np.asarray(f, dtype=complex)
    n = f.shape[0]
    x = np.zeros(n, dtype=complex) if x0 is None else np.array(x0, dtype=complex)
    Mf = M(f)
    bnorm = np.linalg.norm(Mf)
    if bnorm == 0:
        raise ValueError("right-hand side vanishes; relative residual undefined")

    residuals = []
    total = 0
    cycles = 0
    converged = False
    r = M(f - A(x)) if x0 is not None else Mf.copy()
    beta = np.linalg.norm(r)
    residuals.append(beta / bnorm)
    if beta / bnorm <= tol:
        converged = True

    while not converged and total < maxit:
        cycles += 1
        m = min(restart, maxit - total)
        V = np.zeros((m + 1, n), dtype=complex)
        H = np.zeros((m + 1, m), dtype=complex)
        cs = np.zeros(m, dtype=complex)
        sn = np.zeros(m, dtype=complex)
        g = np.zeros(m + 1, dtype=complex)
        g[0] = beta
        V[0] = r / beta
        k_done = 0
        for k in range(m):
            w = M(A(V[k]))
            if not np.all(np.isfinite(w)):
                raise NonFiniteError(f"non-finite values in Krylov vector at iteration {total + 1}")
            for j in range(k + 1):
                H[j, k] = np.vdot(V[j], w)
                w = w - H[j, k] * V[j]
            H[k + 1, k] = np.linalg.norm(w)
            breakdown = H[k + 1, k] <= 1e-14 * np.abs(H[: k + 1, k]).max(initial=0.0)
            if not breakdown:
                V[k + 1] = w / H[k + 1, k]
            for j in range(k):
                tmp = np.conj(cs[j]) * H[j, k] + np.conj(sn[j]) * H[j + 1, k]
                H[j + 1, k] = -sn[j] * H[j, k] + cs[j] * H[j + 1, k]
                H[j, k] = tmp
            a, b = H[k, k], H[k + 1, k]
            denom = np.hypot(abs(a), abs(b))
            if denom == 0:
                cs[k], sn[k] = 1.0, 0.0
            else:
                cs[k], sn[k] = a / denom, b / denom
            H[k, k] = np.conj(cs[k]) * a + np.conj(sn[k]) * b
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = np.conj(cs[k]) * g[k]
            total += 1
            k_done = k + 1
            res = abs(g[k + 1]) / bnorm
            residuals.append(res)
            if res <= tol or breakdown:
                converged = res <= tol or breakdown
                break
        y = np.linalg.solve(np.triu(H[:k_done, :k_done]), g[:k_done])
        x = x + V[:k_done].T @ y
        if converged:
            break
        r = M(f - A(x))
        beta = np.linalg.norm(r)
        if beta / bnorm <= tol:
            converged = True
            residuals[-1] = beta / bnorm

    return SolveReport(
        x=x,
        iterations=total,
        restarts=cycles,
        converged=converged,
        residuals=residuals,
        wall_time=time.perf_counter() - t_start,
        matvec_time=timers["A"],
        precond_time=timers["M"],
        n_matvec=timers["nA"],
        n_precond=timers["nM"],
    )
