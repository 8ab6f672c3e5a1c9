"""Hankel functions of the first kind, orders 0 and 1, for positive real arguments.

Small arguments use the ascending series evaluated in extended precision;
large arguments use Hankel's asymptotic expansion with a term count chosen
per argument band.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["CROSSOVER", "hankel01", "hankel1"]

CROSSOVER = 16.0

_LD = np.longdouble
_PI = _LD("3.14159265358979323846264338327950288")
_EULER = _LD("0.577215664901532860606512090082402431")
_NSERIES = 64

# (lower band edge, number of asymptotic terms)
_BANDS = ((16.0, 32), (18.0, 36), (20.0, 27), (25.0, 20), (35.0, 15), (60.0, 12), (100.0, 10), (300.0, 7), (1000.0, 6))


def _series_coefficients():
    fact = [math.factorial(k) for k in range(_NSERIES + 2)]
    harmonic = [_LD(0)]
    for k in range(1, _NSERIES + 2):
        harmonic.append(harmonic[-1] + _LD(1) / _LD(k))
    sign = [(-1) ** k for k in range(_NSERIES)]
    j0 = np.array([_LD(sign[k]) / _LD(fact[k] ** 2) for k in range(_NSERIES)], dtype=_LD)
    y0 = np.array([-_LD(sign[k]) * harmonic[k] / _LD(fact[k] ** 2) for k in range(_NSERIES)], dtype=_LD)
    j1 = np.array([_LD(sign[k]) / _LD(fact[k] * fact[k + 1]) for k in range(_NSERIES)], dtype=_LD)
    # psi(k+1) + psi(k+2) = 2 H_k + 1/(k+1) - 2 gamma
    y1 = np.array(
        [
            _LD(sign[k]) * (2 * harmonic[k] + _LD(1) / _LD(k + 1) - 2 * _EULER) / _LD(fact[k] * fact[k + 1])
            for k in range(_NSERIES)
        ],
        dtype=_LD,
    )
    return j0, y0, j1, y1


def _asymptotic_coefficients(nu, kmax):
    a = [1.0]
    for k in range(1, kmax + 1):
        a.append(a[-1] * (4 * nu * nu - (2 * k - 1) ** 2) / (8.0 * k))
    p = np.array([a[k] * (-1) ** (k // 2) for k in range(0, kmax + 1, 2)])
    q = np.array([a[k] * (-1) ** (k // 2) for k in range(1, kmax + 1, 2)])
    return p, q


_SER = _series_coefficients()
_ASY = {nu: _asymptotic_coefficients(nu, 40) for nu in (0, 1)}


def _horner(coef, y, nterms):
    acc = np.full_like(y, coef[nterms - 1])
    for c in coef[nterms - 2 :: -1]:
        acc = acc * y + c
    return acc


def _small(x):
    x = x.astype(_LD)
    z = x * x / 4
    sj0, sy0, sj1, sy1 = (_horner(c, z, _NSERIES) for c in _SER)
    logt = np.log(x / 2)
    j0 = sj0
    y0 = (2 / _PI) * ((logt + _EULER) * j0 + sy0)
    j1 = (x / 2) * sj1
    y1 = (2 / _PI) * logt * j1 - 2 / (_PI * x) - x / (2 * _PI) * sy1
    h0 = j0.astype(float) + 1j * y0.astype(float)
    h1 = j1.astype(float) + 1j * y1.astype(float)
    return h0, h1


def _large(x):
    h0 = np.empty(x.shape, dtype=complex)
    h1 = np.empty(x.shape, dtype=complex)
    edges = [b[0] for b in _BANDS] + [np.inf]
    for (lo, nterms), hi in zip(_BANDS, edges[1:]):
        sel = (x >= lo) & (x < hi)
        if not sel.any():
            continue
        xs = x[sel]
        inv = 1.0 / xs
        y = inv * inv
        amp = np.sqrt(2.0 / (np.pi * xs))
        # exp(i(x - pi/4)) and exp(i(x - 3pi/4)) = -i exp(i(x - pi/4))
        ph = np.exp(1j * xs) * complex(math.cos(math.pi / 4), -math.sin(math.pi / 4))
        np_, nq_ = (nterms + 2) // 2, (nterms + 1) // 2
        for nu, out in ((0, h0), (1, h1)):
            pc, qc = _ASY[nu]
            P = _horner(pc, y, np_)
            Q = inv * _horner(qc, y, nq_)
            val = amp * (P + 1j * Q) * ph
            out[sel] = val if nu == 0 else -1j * val
    return h0, h1


def hankel01(x):
    """Return (H_0^(1)(x), H_1^(1)(x)) elementwise for real x > 0."""
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("hankel1 requires strictly positive real arguments")
    flat = x.ravel()
    h0 = np.empty(flat.shape, dtype=complex)
    h1 = np.empty(flat.shape, dtype=complex)
    small = flat < CROSSOVER
    if small.any():
        h0[small], h1[small] = _small(flat[small])
    if not small.all():
        big = ~small
        h0[big], h1[big] = _large(flat[big])
    return h0.reshape(x.shape), h1.reshape(x.shape)


def hankel1(order: int, x):
    """Hankel function of the first kind H_order^(1)(x), order 0 or 1, x > 0."""
    if order not in (0, 1):
        raise ValueError(f"order must be 0 or 1, got {order}")
    h0, h1 = hankel01(x)
    out = h0 if order == 0 else h1
    return out[()] if out.ndim == 0 else out
