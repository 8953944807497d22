"""Shared fixtures-free helpers for the test suite."""

import numpy as np

from planekit.exemplars import ExemplarSet


def make_exemplars(seed=0, k_n=7, k_d=20):
    """Random but valid exemplar set: unit normals, ascending positive offsets."""
    rng = np.random.default_rng(seed)
    normals = rng.standard_normal((k_n, 3))
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    offsets = np.sort(rng.uniform(0.2, 45.0, k_d))
    assert (np.diff(offsets) > 0).all()
    return ExemplarSet(normals, offsets)
