"""Nystrom discretization of the combined field integral equations.

Layer-potential kernels are split into a log(4 sin^2) part and a smooth
remainder on the periodic parameter grid (Kress's rule).  The hypersingular
operator goes through Maue's identity,

    N q = d/ds S (dq/ds) + omega^2 S_nn q,

with the arclength derivatives applied spectrally.

Sound-soft system:  (1/2 I + D - i eta S) q = f,        u = (D - i eta S) q
Sound-hard system:  (1/2 I - D' + N/(i eta)) q = f,     u = (D/(i eta) - S) q
"""

from __future__ import annotations

import logging
import mmap
import os
import tempfile
import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import Discretization
from .special import hankel01

__all__ = [
    "CfieMatrix",
    "FieldValues",
    "RightHandSide",
    "assemble_cfie",
    "evaluate_field",
    "green",
    "kernel_matrix",
    "kress_log_weights",
    "layer_matrix",
    "plane_wave_rhs",
    "point_source_rhs",
    "spectral_derivative",
    "split_rule_matrix",
]

log = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649015329
BCS = ("dirichlet", "neumann")

# matrices above this many bytes are kept in a disk-backed memmap
MEMMAP_BYTES = int(os.environ.get("DIRSCATTER_MEMMAP_BYTES", "1500000000"))
_CHUNK_ENTRIES = 1 << 21
_PANEL_BYTES = 512 << 20
_MATVEC_BLOCK_BYTES = 256 << 20


def _check_bc(bc):
    if bc not in BCS:
        raise ValueError(f"bc must be one of {BCS}, got {bc!r}")


def kress_log_weights(n: int) -> np.ndarray:
    """Circulant row R_j of Kress's weights for log(4 sin^2((t - tau)/2)) on 2*pi-periodic n-point grid."""
    if n % 2:
        raise ValueError("Kress weights need an even number of points")
    m = np.fft.fftfreq(n, 1.0 / n)
    c = np.zeros(n)
    inner = (m != 0) & (np.abs(m) < n // 2)
    c[inner] = 1.0 / np.abs(m[inner])
    cos_sum = 0.5 * n * np.fft.ifft(c).real
    j = np.arange(n)
    return -(4 * np.pi / n) * cos_sum - (4 * np.pi / n**2) * (-1.0) ** j


def _log_correction(n: int, length: float) -> np.ndarray:
    """Circulant row W_j with  A_ab = h k_ab + W_{a-b} k1_ab  off the diagonal.

    k1 is the coefficient of log(4 sin^2(pi (a-b)/n)) in the arclength kernel
    k; W_0 = sigma R_0 multiplies the diagonal value of k1.
    """
    sigma = length / (2 * np.pi)
    h = length / n
    R = kress_log_weights(n)
    j = np.arange(n)
    logsin = np.zeros(n)
    logsin[1:] = np.log(4 * np.sin(np.pi * j[1:] / n) ** 2)
    return sigma * R - h * logsin


def spectral_derivative(v, length: float, axis: int = 0):
    """d/ds of periodic samples on an equispaced arclength grid (Nyquist mode dropped)."""
    v = np.asarray(v)
    n = v.shape[axis]
    k = 2j * np.pi * np.fft.fftfreq(n, length / n)
    if n % 2 == 0:
        k[n // 2] = 0.0
    shape = [1] * v.ndim
    shape[axis] = n
    return np.fft.ifft(np.fft.fft(v, axis=axis) * k.reshape(shape), axis=axis)


def _smooth_diag_single(omega, sigma):
    return 0.25j - (EULER_GAMMA + np.log(omega * sigma / 2)) / (2 * np.pi)


class _Storage:
    """A complex n x n array in RAM or in a temporary memmap file."""

    def __init__(self, n, dtype=complex):
        nbytes = n * n * np.dtype(dtype).itemsize
        self.path = None
        if nbytes > MEMMAP_BYTES:
            fd, self.path = tempfile.mkstemp(prefix="cfie_", suffix=".dat", dir=os.environ.get("DIRSCATTER_TMPDIR"))
            os.close(fd)
            self.array = np.memmap(self.path, dtype=dtype, mode="w+", shape=(n, n))
            log.info("matrix %d x %d kept on disk at %s", n, n, self.path)
        else:
            self.array = np.empty((n, n), dtype=dtype)

    def write_rows(self, r0, block):
        """Store ``block`` as rows r0, r0+1, ... (one contiguous write on disk)."""
        if self.path is None:
            self.array[r0 : r0 + len(block)] = block
            return
        data = np.ascontiguousarray(block, dtype=self.array.dtype)
        offset = r0 * self.array.shape[1] * self.array.itemsize
        with open(self.path, "r+b", buffering=0) as fh:
            view = memoryview(data).cast("B")
            while view:
                written = os.pwrite(fh.fileno(), view, offset)
                view, offset = view[written:], offset + written

    def read_rows(self, r0, count):
        """Copy of rows r0 .. r0+count-1."""
        if self.path is None:
            return self.array[r0 : r0 + count].copy()
        out = np.empty((count, self.array.shape[1]), dtype=self.array.dtype)
        with open(self.path, "rb", buffering=0) as fh:
            fh.seek(r0 * self.array.shape[1] * self.array.itemsize)
            if fh.readinto(memoryview(out).cast("B")) != out.nbytes:
                raise OSError(f"short read from {self.path}")
        return out

    def row_blocks(self, rows_per_block):
        """Yield (first_row, block) over the whole file with plain sequential reads.

        Streaming through the memmap costs a page fault per 4 kB; explicit
        reads into one page-aligned buffer are about twice as fast.  O_DIRECT
        is used when rows are block aligned, so the scan does not evict the
        page cache either.
        """
        A = self.array
        n, row_bytes = A.shape[0], A.shape[1] * A.itemsize
        A.flush()
        raw = mmap.mmap(-1, rows_per_block * row_bytes)
        buf = np.frombuffer(raw, dtype=A.dtype).reshape(rows_per_block, A.shape[1])
        fd = -1
        if row_bytes % 4096 == 0 and hasattr(os, "O_DIRECT"):
            try:
                fd = os.open(self.path, os.O_RDONLY | os.O_DIRECT)
            except OSError:
                fd = -1
        if fd < 0:
            fd = os.open(self.path, os.O_RDONLY)
        try:
            for r0 in range(0, n, rows_per_block):
                count = min(rows_per_block, n - r0)
                view = memoryview(raw)[: count * row_bytes]
                got = os.preadv(fd, [view], r0 * row_bytes)
                if got != count * row_bytes:
                    raise OSError(f"short read from {self.path}: {got} of {count * row_bytes} bytes")
                yield r0, buf[:count]
        finally:
            os.close(fd)

    def release(self):
        arr = self.array
        self.array = None
        if self.path is not None:
            del arr
            try:
                os.remove(self.path)
            except OSError:
                pass
            self.path = None

    def __del__(self):
        self.release()


def _transpose_in_place(X, tile=None):
    """Transpose a square (possibly disk-backed) array in place, one pair of tiles at a time."""
    n = X.shape[0]
    if tile is None:
        tile = max(1, int(np.sqrt(_PANEL_BYTES / (2 * X.itemsize))))
    for i0 in range(0, n, tile):
        I = slice(i0, min(n, i0 + tile))
        X[I, I] = np.array(X[I, I]).T
        for j0 in range(i0 + tile, n, tile):
            J = slice(j0, min(n, j0 + tile))
            upper = np.array(X[I, J])
            X[I, J] = np.array(X[J, I]).T
            X[J, I] = upper.T


def _row_chunk(n):
    return max(1, min(n, _CHUNK_ENTRIES // n))


@dataclass(eq=False)
class CfieMatrix:
    """Dense CFIE system matrix with its boundary condition and coupling parameter."""

    storage: _Storage
    bc: str
    eta: float
    omega: float

    @property
    def array(self):
        return self.storage.array

    @property
    def n(self) -> int:
        return self.storage.array.shape[0]

    @property
    def shape(self):
        return (self.n, self.n)

    @property
    def dtype(self):
        return np.dtype(complex)

    def matvec(self, v):
        """Dense product M v, streamed over fixed row blocks."""
        v = np.asarray(v)
        if v.shape != (self.n,):
            raise ValueError(f"expected vector of length {self.n}, got shape {v.shape}")
        A = self.storage.array
        if not isinstance(A, np.memmap):
            return A @ v
        out = np.empty(self.n, dtype=np.result_type(A.dtype, v.dtype))
        step = max(1, _MATVEC_BLOCK_BYTES // (16 * self.n))
        for r0, block in self.storage.row_blocks(step):
            out[r0 : r0 + len(block)] = block @ v
        return out

    __matmul__ = matvec

    def release(self):
        """Drop the matrix (and delete its backing file, if any)."""
        self.storage.release()


def _geometry_block(disc, rows):
    x = disc.points
    d = x[rows, None, :] - x[None, :, :]
    r = np.hypot(d[..., 0], d[..., 1])
    return d, r


def _layer_block(disc, omega, idx, op, W, d, r, h0, h1, circ):
    """Rows ``idx`` of S, D, D' (op 'S', 'D', 'Dp') with diagonal limits in place."""
    h = disc.h
    nrm = disc.normals
    local_diag = (np.arange(len(idx)), idx)
    if op == "S":
        k = 0.25j * h0
        k1 = -h0.real / (4 * np.pi)
        diag = W[0] * (-1 / (4 * np.pi)) + h * _smooth_diag_single(omega, disc.length / (2 * np.pi))
    else:
        if op == "D":  # n(y).(x - y)/r
            g = (d[..., 0] * nrm[None, :, 0] + d[..., 1] * nrm[None, :, 1]) / r
        else:  # n(x).(y - x)/r
            g = -(d[..., 0] * nrm[idx, None, 0] + d[..., 1] * nrm[idx, None, 1]) / r
        k = 0.25j * omega * h1 * g
        k1 = -(omega / (4 * np.pi)) * h1.real * g
        diag = -h * disc.curvature[idx] / (4 * np.pi)
    block = h * k + circ * k1
    block[local_diag] = diag
    return block


def split_rule_matrix(disc: Discretization, k, k1):
    """Quadrature matrix h k + W_(a-b) k1 for a kernel k(x_a, y_b) = k1 log(4 sin^2) + smooth.

    ``k`` and ``k1`` are full n x n arrays (diagonal included); with k1 = 0 this
    is the plain trapezoid rule.
    """
    n = disc.n
    W = _log_correction(n, disc.length)
    a = np.arange(n)
    return disc.h * np.asarray(k) + W[(a[:, None] - a[None, :]) % n] * np.asarray(k1)


def _row_setup(disc, omega, rows, W):
    n = disc.n
    idx = np.arange(rows.start, rows.stop)
    d, r = _geometry_block(disc, rows)
    r[np.arange(len(idx)), idx] = 1.0
    h0, h1 = hankel01(omega * r)
    circ = W[(idx[:, None] - np.arange(n)[None, :]) % n]
    return idx, d, r, h0, h1, circ


def _fill_rows(disc, omega, rows, *, kind, eta, W):
    """Rows ``rows`` of the requested operator combination.

    kind: 'soft'  -> 1/2 I + D - i eta S
          'hard0' -> 1/2 I - D' - (i omega^2 / eta) S_nn, returned together with S
    """
    idx, d, r, h0, h1, circ = _row_setup(disc, omega, rows, W)
    local_diag = (np.arange(len(idx)), idx)
    S = _layer_block(disc, omega, idx, "S", W, d, r, h0, h1, circ)
    if kind == "soft":
        block = _layer_block(disc, omega, idx, "D", W, d, r, h0, h1, circ) - 1j * eta * S
        block[local_diag] += 0.5
        return block
    nrm = disc.normals
    nn = nrm[idx, None, 0] * nrm[None, :, 0] + nrm[idx, None, 1] * nrm[None, :, 1]
    block = -_layer_block(disc, omega, idx, "Dp", W, d, r, h0, h1, circ) - (1j * omega**2 / eta) * nn * S
    block[local_diag] += 0.5
    return block, S


def layer_matrix(disc: Discretization, op: str) -> np.ndarray:
    """Dense single (``'S'``), double (``'D'``) or adjoint double (``'Dp'``) layer matrix.

    Intended for small instances; the CFIE assembly streams the same rows.
    """
    if op not in ("S", "D", "Dp"):
        raise ValueError(f"op must be 'S', 'D' or 'Dp', got {op!r}")
    W = _log_correction(disc.n, disc.length)
    rows = slice(0, disc.n)
    return _layer_block(disc, disc.omega, np.arange(disc.n), op, W, *_row_setup(disc, disc.omega, rows, W)[1:])


def assemble_cfie(disc: Discretization, bc: str = "dirichlet", eta: float | None = None) -> CfieMatrix:
    """Assemble the dense n x n CFIE matrix for ``bc`` with coupling ``eta`` (default omega)."""
    _check_bc(bc)
    omega = disc.omega
    eta = omega if eta is None else float(eta)
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    n = disc.n
    W = _log_correction(n, disc.length)
    out = _Storage(n)
    step = _row_chunk(n)
    if bc == "dirichlet":
        for r0 in range(0, n, step):
            out.write_rows(r0, _fill_rows(disc, omega, slice(r0, min(n, r0 + step)), kind="soft", eta=eta, W=W))
    else:
        # X = S d/ds is built row by row (a row of S times the antisymmetric
        # derivative matrix is minus the derivative of the row); the Maue term
        # needs d/ds X, a derivative down the columns
        scratch = _Storage(n)
        for r0 in range(0, n, step):
            block, sblock = _fill_rows(disc, omega, slice(r0, min(n, r0 + step)), kind="hard0", eta=eta, W=W)
            out.write_rows(r0, block)
            scratch.write_rows(r0, -spectral_derivative(sblock, disc.length, axis=1))
        c = -1j / eta
        if scratch.path is None:
            A, X = out.array, scratch.array
            cstep = max(1, _CHUNK_ENTRIES // n)
            for c0 in range(0, n, cstep):
                cols = slice(c0, min(n, c0 + cstep))
                A[:, cols] += c * spectral_derivative(X[:, cols], disc.length, axis=0)
        else:
            # Column access to a row-major file is slow.  Y = d/ds S d/ds is
            # symmetric (S is symmetric, d/ds antisymmetric), so the row
            # derivative of X^T, which is Y^T, can be added row by row.
            _transpose_in_place(scratch.array)
            scratch.array.flush()
            for r0 in range(0, n, step):
                count = min(step, n - r0)
                y = spectral_derivative(scratch.read_rows(r0, count), disc.length, axis=1)
                out.write_rows(r0, out.read_rows(r0, count) + c * y)
        scratch.release()
    if isinstance(out.array, np.memmap):
        out.array.flush()
    return CfieMatrix(out, bc, eta, omega)


def kernel_from_geometry(bc, omega, eta, d, r, nx, ny):
    """CFIE kernel from separations d = x - y, distances r and broadcastable normals."""
    h0, h1 = hankel01(omega * r)
    ny_d = (d[..., 0] * ny[..., 0] + d[..., 1] * ny[..., 1]) / r
    if bc == "dirichlet":
        return 0.25j * omega * h1 * ny_d + 0.25 * eta * h0
    nx_d = (d[..., 0] * nx[..., 0] + d[..., 1] * nx[..., 1]) / r
    nn = nx[..., 0] * ny[..., 0] + nx[..., 1] * ny[..., 1]
    dgdnx = -0.25j * omega * h1 * nx_d
    # G = g(r): d2G/dnx dny = -g'' (nx.d)(ny.d)/r^2 + g'/r (-nx.ny + (nx.d)(ny.d)/r^2)
    g1 = -0.25j * omega * h1
    g2 = -0.25j * omega**2 * (h0 - h1 / (omega * r))
    hyp = -g2 * nx_d * ny_d + (g1 / r) * (nx_d * ny_d - nn)
    return -dgdnx + hyp / (1j * eta)


def kernel_matrix(bc, omega, eta, x, nx, y, ny):
    """Exact CFIE kernel K(x_a, y_b) per unit arclength (no quadrature weight).

    Points must be distinct.  Sound-soft: dG/dn(y) - i eta G.
    Sound-hard: -dG/dn(x) + (1/(i eta)) d^2G/dn(x)dn(y).
    """
    _check_bc(bc)
    d = x[:, None, :] - y[None, :, :]
    r = np.hypot(d[..., 0], d[..., 1])
    return kernel_from_geometry(bc, omega, eta, d, r, nx[:, None, :], ny[None, :, :])


@dataclass(frozen=True)
class RightHandSide:
    values: np.ndarray
    source: dict


def plane_wave_rhs(disc: Discretization, direction=(1.0, 0.0), bc: str = "dirichlet") -> RightHandSide:
    """Boundary data for an incident plane wave exp(i omega d.x)."""
    _check_bc(bc)
    d = np.asarray(direction, dtype=float)
    if abs(np.hypot(*d) - 1) > 1e-12:
        raise ValueError("direction must be a unit vector")
    omega = disc.omega
    ui = np.exp(1j * omega * (disc.points @ d))
    if bc == "dirichlet":
        f = -ui
    else:
        f = -1j * omega * (disc.normals @ d) * ui
    return RightHandSide(f, {"kind": "plane_wave", "direction": tuple(d)})


def green(omega, x, x0):
    """Free-space Green's function (i/4) H_0(omega |x - x0|) at points x."""
    x = np.atleast_2d(x)
    r = np.hypot(x[:, 0] - x0[0], x[:, 1] - x0[1])
    return 0.25j * hankel01(omega * r)[0]


def point_source_rhs(disc: Discretization, x0, bc: str = "dirichlet") -> RightHandSide:
    """Boundary data whose exact exterior solution is G(., x0) for interior x0."""
    _check_bc(bc)
    x0 = np.asarray(x0, dtype=float)
    if not disc.contains(x0[None, :])[0] or disc.distance_to(x0[None, :])[0] < 0.5 * disc.h:
        raise ValueError("point source must lie strictly inside the scatterer")
    omega = disc.omega
    d = disc.points - x0
    r = np.hypot(d[:, 0], d[:, 1])
    h0, h1 = hankel01(omega * r)
    if bc == "dirichlet":
        f = 0.25j * h0
    else:
        f = -0.25j * omega * h1 * np.einsum("ij,ij->i", disc.normals, d) / r
    return RightHandSide(f, {"kind": "point_source", "x0": tuple(x0)})


class NearBoundaryWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FieldValues:
    values: np.ndarray
    near_boundary: np.ndarray


def evaluate_field(disc: Discretization, density, bc: str, eta: float | None, targets) -> FieldValues:
    """Scattered field at exterior targets from the boundary density (plain trapezoid rule)."""
    _check_bc(bc)
    omega = disc.omega
    eta = omega if eta is None else eta
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    density = np.asarray(density)
    near = disc.distance_to(targets) < 2 * disc.wavelength
    if near.any():
        warnings.warn(
            f"{int(near.sum())} target(s) closer than two wavelengths to the boundary",
            NearBoundaryWarning,
            stacklevel=2,
        )
    y, ny = disc.points, disc.normals
    out = np.empty(len(targets), dtype=complex)
    step = _row_chunk(disc.n)
    for t0 in range(0, len(targets), step):
        x = targets[t0 : t0 + step]
        d = x[:, None, :] - y[None, :, :]
        r = np.hypot(d[..., 0], d[..., 1])
        h0, h1 = hankel01(omega * r)
        G = 0.25j * h0
        dG = 0.25j * omega * h1 * (d[..., 0] * ny[None, :, 0] + d[..., 1] * ny[None, :, 1]) / r
        if bc == "dirichlet":
            K = dG - 1j * eta * G
        else:
            K = dG / (1j * eta) - G
        out[t0 : t0 + step] = disc.h * (K @ density)
    return FieldValues(out, near)
