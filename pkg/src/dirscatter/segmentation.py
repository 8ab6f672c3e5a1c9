"""Partition of the sampled boundary into almost-planar segments."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .geometry import Discretization

__all__ = ["Segment", "SegmentList", "build_segments", "write_segments_csv"]


@dataclass(frozen=True)
class Segment:
    index: int
    level: int
    start: int
    count: int
    center: np.ndarray
    tangent: np.ndarray
    max_curvature: float
    planar: bool

    @property
    def stop(self) -> int:
        return self.start + self.count


@dataclass(frozen=True, eq=False)
class SegmentList:
    segments: tuple
    n: int
    point_to_segment: np.ndarray

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def __getitem__(self, i):
        return self.segments[i]

    @property
    def m(self) -> int:
        return len(self.segments)

    @property
    def levels(self) -> np.ndarray:
        return np.array([s.level for s in self.segments])

    @property
    def starts(self) -> np.ndarray:
        return np.array([s.start for s in self.segments])

    @property
    def centers(self) -> np.ndarray:
        return np.array([s.center for s in self.segments])

    @property
    def tangents(self) -> np.ndarray:
        return np.array([s.tangent for s in self.segments])

    def nonplanar_count(self) -> int:
        return sum(not s.planar for s in self.segments)


def build_segments(disc: Discretization, m_leaf: int = 4) -> SegmentList:
    """Recursively bisect the 2**q initial segments until each is almost-planar or a leaf.

    A segment of 2**l wavelengths stops when 2**l <= 2**q / sqrt(c), with c
    the largest |curvature| at its points (almost-planar), or otherwise when
    2**l <= m_leaf (non-planar leaf).
    """
    if m_leaf not in (2, 4):
        raise ValueError(f"m_leaf must be 2 or 4, got {m_leaf}")
    q, p = disc.q, disc.p
    if 2**q < m_leaf:
        raise ValueError(f"q={q} too small for m_leaf={m_leaf}")
    lam = disc.wavelength
    absk = np.abs(disc.curvature)
    bound = 2**q * lam

    finished = []

    def visit(start, level):
        count = 2**level * p
        c = absk[start : start + count].max()
        seglen = 2**level * lam
        if c == 0 or seglen <= bound / np.sqrt(c):
            finished.append((start, level, c, True))
        elif seglen <= m_leaf * lam:
            finished.append((start, level, c, False))
        else:
            visit(start, level - 1)
            visit(start + count // 2, level - 1)

    for k in range(2**q):
        visit(k * 2**q * p, q)

    h = disc.h
    owner = np.empty(disc.n, dtype=int)
    segments = []
    curve = disc.curve
    for i, (start, level, c, planar) in enumerate(finished):
        count = 2**level * p
        mid = disc.arclength[start] + 0.5 * (count - 1) * h
        if curve is not None:
            t = curve.t_of_s(mid)
            center, tangent = curve.position(t), curve.tangent(t)
        else:
            # synthetic discretizations without a curve: interpolate between the two middle points
            a, b = start + count // 2 - 1, start + count // 2
            center = 0.5 * (disc.points[a] + disc.points[b])
            tangent = disc.tangents[a] + disc.tangents[b]
            tangent = tangent / np.linalg.norm(tangent)
        owner[start : start + count] = i
        segments.append(Segment(i, level, start, count, np.asarray(center), np.asarray(tangent), float(c), planar))
    return SegmentList(tuple(segments), disc.n, owner)


def write_segments_csv(segments: SegmentList, path) -> None:
    """Debug dump: one row per segment."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "level", "start", "count", "cx", "cy", "tx", "ty", "planar"])
        for s in segments:
            w.writerow([s.index, s.level, s.start, s.count, *s.center, *s.tangent, int(s.planar)])
