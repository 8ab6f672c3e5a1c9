import csv

import numpy as np
import pytest

from dirscatter.geometry import Discretization, build_curve, discretize
from dirscatter.segmentation import build_segments, write_segments_csv

from .conftest import disc_for, segments_for


def check_partition(segs, n):
    starts = segs.starts
    counts = np.array([s.count for s in segs])
    assert starts[0] == 0
    assert np.array_equal(starts[1:], starts[:-1] + counts[:-1])
    assert counts.sum() == n
    owner = np.repeat(np.arange(segs.m), counts)
    assert np.array_equal(segs.point_to_segment, owner)


def test_unit_circle_q6_all_level_four():
    d = discretize(build_curve("circle", {"r": 1 / (2 * np.pi)}), 6, 8)
    segs = build_segments(d)
    assert segs.m == 256
    assert set(segs.levels.tolist()) == {4}
    assert segs.nonplanar_count() == 0
    check_partition(segs, d.n)


def test_straight_line_fixture_never_splits():
    q, p = 3, 8
    n = 4**q * p
    s = np.arange(n) / n
    line = Discretization(
        points=np.column_stack([s, np.zeros(n)]),
        arclength=s,
        normals=np.tile([0.0, -1.0], (n, 1)),
        tangents=np.tile([1.0, 0.0], (n, 1)),
        curvature=np.zeros(n),
        length=1.0,
        q=q,
        p=p,
    )
    segs = build_segments(line)
    assert segs.m == 2**q
    assert set(segs.levels.tolist()) == {q}
    assert all(s.planar for s in segs)
    # without a curve object the center falls between the two middle points
    first = segs[0]
    assert first.center == pytest.approx([(first.count - 1) / 2 / n, 0.0])
    assert first.tangent == pytest.approx([1.0, 0.0])


@pytest.mark.parametrize("shape", ["circle", "ellipse", "kite"])
@pytest.mark.parametrize("q", [3, 4, 5])
def test_partition_and_stopping_rules(shape, q):
    d = disc_for(shape, q)
    segs = segments_for(shape, q)
    check_partition(segs, d.n)
    lam = d.wavelength
    for s in segs:
        assert s.count == 2**s.level * d.p
        assert 2 <= s.level <= q
        c = np.abs(d.curvature[s.start : s.stop]).max()
        assert s.max_curvature == c
        if s.planar:
            assert 2**s.level * lam <= 2**q * lam / np.sqrt(c) * (1 + 1e-12)
        else:
            assert 2**s.level * lam <= 4 * lam


def test_ellipse_q5_counts_sum_to_n():
    segs = segments_for("ellipse", 5)
    assert sum(2**lev * 8 for lev in segs.levels) == 4**5 * 8


@pytest.mark.parametrize("shape", ["ellipse", "kite"])
def test_no_nonplanar_leaves_at_q6(shape):
    assert build_segments(disc_for(shape, 6)).nonplanar_count() == 0


@pytest.mark.parametrize("shape", ["ellipse", "kite"])
def test_segment_count_grows_linearly(shape):
    m = [segments_for(shape, q).m if q < 6 else build_segments(disc_for(shape, 6)).m for q in (4, 5, 6)]
    assert m[1] / m[0] <= 2.5 and m[2] / m[1] <= 2.5


def test_nonplanar_leaves_at_low_frequency():
    # at q=2 the kite's nose is far too curved for a 4-wavelength segment
    segs = build_segments(disc_for("kite", 2))
    assert segs.nonplanar_count() > 0
    assert all(s.level == 2 for s in segs if not s.planar)
    finer = build_segments(disc_for("kite", 2), m_leaf=2)
    assert finer.m >= segs.m


def test_centers_at_arclength_midpoints():
    d = disc_for("kite", 4)
    segs = segments_for("kite", 4)
    for s in segs:
        mid = d.arclength[s.start] + 0.5 * (s.count - 1) * d.h
        t = d.curve.t_of_s(mid)
        assert np.allclose(s.center, d.curve.position(t), atol=1e-14)
        assert np.linalg.norm(s.tangent) == pytest.approx(1.0, abs=1e-14)


def test_deterministic():
    a = build_segments(disc_for("kite", 4))
    b = build_segments(disc_for("kite", 4))
    assert [(s.start, s.level, s.planar) for s in a] == [(s.start, s.level, s.planar) for s in b]
    assert np.array_equal(a.centers, b.centers)


def test_bad_leaf_sizes():
    with pytest.raises(ValueError):
        build_segments(disc_for("circle", 3), m_leaf=3)
    with pytest.raises(ValueError):
        build_segments(disc_for("circle", 2), m_leaf=8)


def test_csv_dump(tmp_path):
    segs = segments_for("ellipse", 3)
    path = tmp_path / "segs.csv"
    write_segments_csv(segs, path)
    rows = list(csv.reader(path.read_text().splitlines()))
    assert rows[0] == ["i", "level", "start", "count", "cx", "cy", "tx", "ty", "planar"]
    assert len(rows) == segs.m + 1
    assert int(rows[1][3]) == segs[0].count
