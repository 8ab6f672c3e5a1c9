import functools

import numpy as np
import pytest

from dirscatter.assembly import assemble_cfie
from dirscatter.compression import build_directional_approx
from dirscatter.geometry import build_curve, discretize
from dirscatter.segmentation import build_segments


@functools.cache
def disc_for(shape, q, p=8):
    return discretize(build_curve(shape), q, p)


@functools.cache
def segments_for(shape, q):
    return build_segments(disc_for(shape, q))


@functools.cache
def matrix_for(shape, q, bc):
    return assemble_cfie(disc_for(shape, q), bc)


@functools.cache
def approx_for(shape, q, bc):
    return build_directional_approx(disc_for(shape, q), segments_for(shape, q), bc)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_complex(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
