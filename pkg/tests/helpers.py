"""Shared instance builders for the test modules."""

import numpy as np

from admmqp.core import validate_problem


def random_box_problem(d_z, seed, d_eq=1, box=2.0):
    """Random PD problem with a wide box so that few bounds are active."""
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((2 * d_z, d_z))
    Q = U.T @ U / (2 * d_z) + 0.1 * np.eye(d_z)
    A = rng.standard_normal((d_eq, d_z))
    return validate_problem(Q, rng.standard_normal(d_z), A, rng.standard_normal(d_eq), -box * np.ones(d_z), box * np.ones(d_z))
