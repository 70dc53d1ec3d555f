"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from cowlib import Interval, make_density


@pytest.fixture(scope="session")
def unit_interval():
    return Interval(0.0, 1.0)


@pytest.fixture(scope="session")
def box_model(unit_interval):
    """Closed-form two-component model: signal uniform on [0, 1/2] (density 2),
    background uniform on [0, 1].

    With signal fraction 1/2 the mixture is 3/2 on the left half and 1/2 on
    the right, so every W-matrix integral is a sum of two constant pieces:

        W_ss = (4 / (3/2)) * 1/2               = 4/3
        W_sb = (2 / (3/2)) * 1/2               = 2/3
        W_bb = (1 / (3/2)) * 1/2 + (1/(1/2))*1/2 = 4/3

    and the signal weight function is +1 on [0, 1/2), -1 on (1/2, 1].
    """
    gs = make_density("uniform", [0.0, 0.5], unit_interval)
    gb = make_density("uniform", [0.0, 1.0], unit_interval)
    return gs, gb


BOX_W = np.array([[4.0 / 3.0, 2.0 / 3.0], [2.0 / 3.0, 4.0 / 3.0]])


@pytest.fixture(scope="session")
def box_W():
    return BOX_W


def sample_box_mixture(rng, n, z=0.5):
    """Draw n events from the box_model mixture with signal fraction z."""
    is_sig = rng.random(n) < z
    m = rng.random(n)
    m[is_sig] *= 0.5
    return m
