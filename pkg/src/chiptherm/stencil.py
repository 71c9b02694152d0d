"""5-point Laplacian kernel shared by the solver, the physics residual and the model loss.

Ghost cells mirror the boundary pixel itself, so the flux through every wall
face is zero. The resulting operator is symmetric and its columns sum to zero,
which makes it conservative and lets CG solve the shifted systems.
"""

import numpy as np


def pad_edge(v: np.ndarray) -> np.ndarray:
    pad = [(0, 0)] * (v.ndim - 2) + [(1, 1), (1, 1)]
    return np.pad(v, pad, mode="edge")


def laplacian_array(v: np.ndarray, pitch: float = 1.0) -> np.ndarray:
    """Laplacian over the last two axes of ``v`` with zero-flux walls.

    Term order is (north + south + west + east - 4 * center) / pitch**2.
    """
    p = pad_edge(v)
    out = (p[..., :-2, 1:-1] + p[..., 2:, 1:-1] + p[..., 1:-1, :-2] + p[..., 1:-1, 2:]
           - 4.0 * v)
    if pitch != 1.0:
        out /= pitch * pitch
    return out


def laplacian_adjoint(g: np.ndarray) -> np.ndarray:
    """Transpose of the unit-pitch operator; it is symmetric, so this is the operator itself."""
    return laplacian_array(g)
