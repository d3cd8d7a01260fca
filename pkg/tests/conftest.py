import numpy as np
import pytest
from hypothesis import strategies as st

from tribody.dynamics import ConservedPair, derive_mass_constants, pair_distances


@pytest.fixture
def equal():
    return derive_mass_constants(1.0, 1.0, 1.0)


@pytest.fixture
def cons():
    return ConservedPair(-1.0, 0.5)


masses = st.tuples(*[st.floats(0.1, 10.0)] * 3).map(lambda m: derive_mass_constants(*m))
coords = st.floats(-3.0, 3.0, allow_nan=False)
vec4 = st.lists(coords, min_size=4, max_size=4).map(np.array)


def nonsingular(x, mass, floor=0.05):
    return bool(np.min(pair_distances(x, mass)) > floor)


def pairwise_potential(q, m):
    """Newtonian potential straight from absolute positions (independent oracle)."""
    return sum(m[i] * m[j] / np.linalg.norm(q[i] - q[j]) for i, j in ((0, 1), (0, 2), (1, 2)))


def random_states(rng, mass, n, floor=0.05):
    out = []
    while len(out) < n:
        x = rng.uniform(-2, 2, 4)
        if nonsingular(x, mass, floor):
            out.append((x, rng.uniform(-2, 2, 4)))
    return out
