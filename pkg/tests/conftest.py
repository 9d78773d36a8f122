import numpy as np
import pytest

from stressdg.mesh import barycentric_refine, generate_structured, side_predicate, tag_boundary


def square(n, sides=("all",), bary=False):
    mesh = tag_boundary(generate_structured(n, 2), side_predicate(sides))
    return barycentric_refine(mesh) if bary else mesh


def cube(n, sides=("all",), bary=False):
    mesh = tag_boundary(generate_structured(n, 3), side_predicate(sides))
    return barycentric_refine(mesh) if bary else mesh


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
