"""Data-sparse directional approximation M ~ B + U E U^t.

B is block diagonal with flat-segment operators, U is block diagonal with
partial Fourier blocks U_i(x, k) = exp(i k (s(x) - s(c_i))), and E holds one
coefficient per ordered pair of distinct segments.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .assembly import (
    _check_bc,
    _log_correction,
    _smooth_diag_single,
    kernel_from_geometry,
)
from .geometry import Discretization
from .segmentation import SegmentList
from .special import hankel01

__all__ = [
    "DirectionalApprox",
    "build_directional_approx",
    "chebyshev_nodes",
    "compute_e",
    "flat_segment_operator",
    "interpolation_matrix",
    "phase_grid",
    "phase_pair",
    "phase_pairs",
    "round_to_grid",
]


def phase_grid(level: int, omega: float) -> np.ndarray:
    """The 2**(level+1) + 1 equispaced phases on [-omega, omega]."""
    j = np.arange(2 ** (level + 1) + 1)
    grid = -omega + j * (omega / 2**level)
    grid[2**level] = 0.0
    grid[-1] = omega
    return grid


def round_to_grid(value, level: int, omega: float):
    """Index of the nearest phase gridpoint; exact ties go to the point nearer zero."""
    value = np.asarray(value, dtype=float)
    step = omega / 2**level
    u = (value + omega) / step
    lo = np.floor(u)
    frac = u - lo
    center = 2**level
    up = (frac > 0.5) | ((frac == 0.5) & (lo < center))
    idx = lo + up
    return np.clip(idx, 0, 2 ** (level + 1)).astype(int)


def phase_pairs(centers, tangents, levels, omega):
    """Row and column grid indices for all ordered pairs (i, j), i != j.

    Returns (I, J, ki, kj) with ki the index of [omega a_ij . t_i]_i in K_i and
    kj the index of [-omega a_ij . t_j]_j in K_j, a_ij = (c_i - c_j)/|c_i - c_j|.
    """
    m = len(centers)
    I, J = np.nonzero(~np.eye(m, dtype=bool))
    a = centers[I] - centers[J]
    dist = np.hypot(a[:, 0], a[:, 1])
    if np.any(dist == 0):
        raise RuntimeError("coincident segment centers")
    a /= dist[:, None]
    vi = omega * np.einsum("ij,ij->i", a, tangents[I])
    vj = -omega * np.einsum("ij,ij->i", a, tangents[J])
    ki = np.empty(len(I), dtype=int)
    kj = np.empty(len(I), dtype=int)
    for lev in np.unique(levels):
        si = levels[I] == lev
        ki[si] = round_to_grid(vi[si], lev, omega)
        sj = levels[J] == lev
        kj[sj] = round_to_grid(vj[sj], lev, omega)
    return I, J, ki, kj


def phase_pair(seg_i, seg_j, omega):
    """(k^i_ij, k^j_ij) as phase values for two segments."""
    centers = np.array([seg_i.center, seg_j.center])
    tangents = np.array([seg_i.tangent, seg_j.tangent])
    levels = np.array([seg_i.level, seg_j.level])
    _, _, ki, kj = phase_pairs(centers, tangents, levels, omega)
    return phase_grid(seg_i.level, omega)[ki[0]], phase_grid(seg_j.level, omega)[kj[0]]


def local_offsets(count: int, h: float) -> np.ndarray:
    """s(x) - s(c) for the points of a segment of ``count`` points."""
    return (np.arange(count) - 0.5 * (count - 1)) * h


def fourier_block(level: int, p: int, h: float, omega: float) -> np.ndarray:
    """U_l(x, k) = exp(i k (s(x) - s(c))), shape (2**l p, 2**(l+1) + 1)."""
    off = local_offsets(2**level * p, h)
    return np.exp(1j * np.outer(off, phase_grid(level, omega)))


def _flat_line_circulant(disc: Discretization, bc: str, eta: float) -> np.ndarray:
    """First column of the n-point circulant discretizing the operator on a straight line.

    Uses the same split rule as the curved assembly with distances measured
    along a line (wrapped at n/2), so blocks of it are Toeplitz.
    """
    n, h, omega = disc.n, disc.h, disc.omega
    sigma = disc.length / (2 * np.pi)
    W = _log_correction(n, disc.length)
    j = np.arange(n)
    r = h * np.minimum(j, n - j).astype(float)
    r[0] = 1.0
    h0, _ = hankel01(omega * r)
    s = h * 0.25j * h0 + W * (-h0.real / (4 * np.pi))
    s[0] = W[0] * (-1 / (4 * np.pi)) + h * _smooth_diag_single(omega, sigma)
    if bc == "dirichlet":
        col = -1j * eta * s
    else:
        # N = d/ds S d/ds + omega^2 S on a line, diagonalized by the DFT
        lam_s = np.fft.fft(s)
        k = 2 * np.pi * np.fft.fftfreq(n, h)
        k[n // 2] = 0.0
        lam_n = (omega**2 - k**2) * lam_s
        col = np.fft.ifft(lam_n) / (1j * eta)
    col[0] += 0.5
    return col


def flat_segment_operator(level: int, disc: Discretization, bc: str, eta: float | None = None, _col=None) -> np.ndarray:
    """B_l: the CFIE restricted to a straight segment of 2**l p equispaced points."""
    _check_bc(bc)
    eta = disc.omega if eta is None else eta
    col = _flat_line_circulant(disc, bc, eta) if _col is None else _col
    size = 2**level * disc.p
    if size > disc.n // 2:
        raise ValueError("segment longer than half the boundary")
    # the line operator is symmetric in the offset, so the block is symmetric Toeplitz
    return sla.toeplitz(col[:size], col[:size])


def chebyshev_nodes(m_c: int) -> np.ndarray:
    """First-kind Chebyshev nodes on (-1, 1), in increasing order."""
    k = np.arange(m_c)
    return -np.cos((2 * k + 1) * np.pi / (2 * m_c))


def interpolation_matrix(nodes, x) -> np.ndarray:
    """Barycentric Lagrange matrix I(x, b) mapping values at ``nodes`` to ``x``."""
    nodes = np.asarray(nodes, dtype=float)
    x = np.asarray(x, dtype=float)
    m_c = len(nodes)
    k = np.arange(m_c)
    # first-kind Chebyshev barycentric weights
    w = (-1.0) ** k * np.sin((2 * k + 1) * np.pi / (2 * m_c))
    diff = x[:, None] - nodes[None, :]
    exact = diff == 0
    diff[exact] = 1.0
    terms = w / diff
    out = terms / terms.sum(axis=1, keepdims=True)
    rows = exact.any(axis=1)
    out[rows] = exact[rows].astype(float)
    return out


def compute_e(mtilde, avg_i, avg_j) -> complex:
    """Least-squares rank-1 coefficient from the demodulated kernel on the Chebyshev grid.

    ``avg_i`` is w_i^+ I_i, i.e. the mean over the segment points of each
    Lagrange basis function; similarly ``avg_j`` for the column segment.
    """
    return complex(avg_i @ mtilde @ avg_j)


@dataclass(eq=False)
class DirectionalApprox:
    disc: Discretization
    segments: SegmentList
    bc: str
    eta: float
    m_c: int
    B: dict  # level -> dense block, or a stack of per-segment blocks
    Binv: dict  # level -> dense inverse (same layout as B)
    U: dict  # level -> partial Fourier block
    E: sp.csr_matrix
    k_offsets: np.ndarray  # start of each segment's K-block in the concatenated index space
    e_pairs: tuple  # (I, J, ki, kj, values)
    avg: dict = field(default_factory=dict)  # level -> w^+ I

    @property
    def nk(self) -> int:
        return int(self.E.shape[0])

    @property
    def n(self) -> int:
        return self.disc.n

    def _groups(self):
        """Segments grouped by level: level -> (segment indices, point starts, K starts)."""
        if not hasattr(self, "_group_cache"):
            levels = self.segments.levels
            starts = self.segments.starts
            groups = {}
            for lev in np.unique(levels):
                ids = np.nonzero(levels == lev)[0]
                groups[int(lev)] = (ids, starts[ids], self.k_offsets[ids])
            self._group_cache = groups
        return self._group_cache

    def _gather(self, v, lev, starts, size):
        return v[starts[:, None] + np.arange(size)[None, :]]

    def apply_block_diag(self, blocks, v, *, in_k=False, out_k=False):
        """Apply a per-level block-diagonal operator.

        ``blocks[level]`` is either one dense block shared by all segments of
        that level or a stack with one block per segment (in segment order).
        """
        v = np.asarray(v)
        out_dim = self.nk if out_k else self.n
        out = np.zeros(out_dim, dtype=np.result_type(v.dtype, complex))
        p = self.disc.p
        for lev, (ids, pstarts, kstarts) in self._groups().items():
            npts, nkk = 2**lev * p, 2 ** (lev + 1) + 1
            src = kstarts if in_k else pstarts
            dst = kstarts if out_k else pstarts
            X = self._gather(v, lev, src, nkk if in_k else npts)
            blk = blocks[lev]
            Y = X @ blk.T if blk.ndim == 2 else np.einsum("sij,sj->si", blk, X)
            out[dst[:, None] + np.arange(Y.shape[1])[None, :]] = Y
        return out

    def apply_U(self, v):
        """U v for v indexed by the concatenated phase grids."""
        if np.shape(v) != (self.nk,):
            raise ValueError(f"expected length {self.nk}")
        return self.apply_block_diag(self.U, v, in_k=True, out_k=False)

    def apply_Ut(self, v):
        """U^t v (plain transpose) for v indexed by boundary points."""
        if np.shape(v) != (self.n,):
            raise ValueError(f"expected length {self.n}")
        Ut = {lev: U.T for lev, U in self.U.items()}
        return self.apply_block_diag(Ut, v, in_k=False, out_k=True)

    def apply_B(self, v):
        return self.apply_block_diag(self.B, v)

    def apply_Binv(self, v):
        return self.apply_block_diag(self.Binv, v)

    def matvec(self, v):
        """(B + U E U^t) v."""
        return self.apply_B(v) + self.apply_U(self.E @ self.apply_Ut(v))

    def segment_blocks(self, blocks):
        """List of the dense block acting on each segment, in segment order."""
        out = []
        seen = {}
        for s in self.segments:
            blk = blocks[s.level]
            if blk.ndim == 3:
                k = seen.get(s.level, 0)
                seen[s.level] = k + 1
                blk = blk[k]
            out.append(blk)
        return out

    def dense_B(self):
        return sla.block_diag(*self.segment_blocks(self.B))

    def dense_U(self):
        return sla.block_diag(*[self.U[s.level] for s in self.segments])

    def dense(self):
        U = self.dense_U()
        return self.dense_B() + U @ (self.E.toarray() @ U.T)

    def write_e(self, path):
        """Debug dump of E in coordinate form: row, col, re, im."""
        E = self.E.tocoo()
        with open(path, "w") as fh:
            fh.writelines(f"{r} {c} {v.real:.17g} {v.imag:.17g}\n" for r, c, v in zip(E.row, E.col, E.data))


def _segment_curve_points(disc, segments, m_c):
    """Chebyshev nodes on each segment's arclength interval, mapped onto the curve."""
    h = disc.h
    ref = chebyshev_nodes(m_c)
    offs = []
    svals = []
    for s in segments:
        half = 0.5 * s.count * h
        mid = disc.arclength[s.start] + 0.5 * (s.count - 1) * h
        offs.append(ref * half)
        svals.append(mid + ref * half)
    svals = np.concatenate(svals)
    curve = disc.curve
    t = curve.t_of_s(svals)
    return curve.position(t), curve.normal(t), np.array(offs)


def build_directional_approx(
    disc: Discretization,
    segments: SegmentList,
    bc: str = "dirichlet",
    eta: float | None = None,
    m_c: int = 10,
    *,
    exact_diagonal=None,
) -> DirectionalApprox:
    """Assemble B, U, E for the CFIE of ``bc``.

    ``exact_diagonal`` may be a callable (start, stop) -> dense M_jj block;
    when given, B holds the exact diagonal block of every segment instead of
    the shared flat block of its level (used for ablation).
    """
    _check_bc(bc)
    omega = disc.omega
    eta = omega if eta is None else float(eta)
    h, p = disc.h, disc.p
    levels = segments.levels
    col = _flat_line_circulant(disc, bc, eta)

    B, Binv, U, avg = {}, {}, {}, {}
    ref = chebyshev_nodes(m_c)
    for lev in np.unique(levels):
        lev = int(lev)
        if exact_diagonal is None:
            B[lev] = flat_segment_operator(lev, disc, bc, eta, _col=col)
        else:
            B[lev] = np.array([np.asarray(exact_diagonal(s.start, s.stop)) for s in segments if s.level == lev])
        Binv[lev] = np.linalg.inv(B[lev])
        U[lev] = fourier_block(lev, p, h, omega)
        npts = 2**lev * p
        half = 0.5 * npts * h
        I_lev = interpolation_matrix(ref * half, local_offsets(npts, h))
        avg[lev] = I_lev.mean(axis=0)

    dims = 2 ** (levels + 1) + 1
    k_offsets = np.concatenate([[0], np.cumsum(dims)[:-1]])
    nk = int(dims.sum())

    I, J, ki, kj = phase_pairs(segments.centers, segments.tangents, levels, omega)
    X, NX, offs = _segment_curve_points(disc, segments, m_c)
    K = kernel_matrix_blocks(bc, omega, eta, X, NX, segments.m, m_c)
    # demodulate by conj(U_i(x, k_i)) conj(U_j(y, k_j)) and weight by h
    kval_i = np.array([phase_grid(int(levels[i]), omega)[k] for i, k in zip(I, ki)])
    kval_j = np.array([phase_grid(int(levels[j]), omega)[k] for j, k in zip(J, kj)])
    ph_i = np.exp(-1j * kval_i[:, None] * offs[I])  # (pairs, m_c)
    ph_j = np.exp(-1j * kval_j[:, None] * offs[J])
    blocks = K[I, :, J, :]  # (pairs, m_c, m_c)
    mt = h * blocks * ph_i[:, :, None] * ph_j[:, None, :]
    avg_i = np.array([avg[int(levels[i])] for i in range(segments.m)])
    vals = np.einsum("pa,pab,pb->p", avg_i[I], mt, avg_i[J])

    rows = k_offsets[I] + ki
    cols = k_offsets[J] + kj
    E = sp.csr_matrix((vals, (rows, cols)), shape=(nk, nk))
    approx = DirectionalApprox(disc, segments, bc, eta, m_c, B, Binv, U, E, k_offsets, (I, J, ki, kj, vals), avg)
    return approx


def kernel_matrix_blocks(bc, omega, eta, X, NX, m, m_c):
    """Kernel between all Chebyshev points, shaped (m, m_c, m, m_c); self-blocks are zero."""
    total = m * m_c
    owner = np.repeat(np.arange(m), m_c)
    out = np.empty((total, total), dtype=complex)
    step = max(1, (1 << 20) // total)
    for r0 in range(0, total, step):
        rows = slice(r0, min(total, r0 + step))
        same = owner[rows, None] == owner[None, :]
        d = X[rows, None, :] - X[None, :, :]
        r = np.hypot(d[..., 0], d[..., 1])
        r[same] = 1.0
        blk = kernel_from_geometry(bc, omega, eta, d, r, NX[rows, None, :], NX[None, :, :])
        blk[same] = 0.0
        out[rows] = blk
    return out.reshape(m, m_c, m, m_c)
