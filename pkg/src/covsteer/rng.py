"""Counter-based random streams for reproducible, order-independent sampling.

Every Monte-Carlo trial draws from its own Philox stream keyed by
(seed, trial), with separate counter lanes for initial-state draws and
process noise.  Results are therefore identical no matter how trials are
chunked across workers, and common random numbers hold across scenario
variants run with the same seed.
"""

from __future__ import annotations

import numpy as np

_INIT_LANE = 1
_NOISE_LANE = 2


def _stream(seed: int, trial: int, lane: int) -> np.random.Generator:
    if seed < 0 or trial < 0:
        raise ValueError("seed and trial must be nonnegative")
    bitgen = np.random.Philox(counter=[0, 0, 0, lane], key=[seed, trial])
    return np.random.Generator(bitgen)


def noise_tape(seed: int, trial: int, steps: int, dim: int) -> np.ndarray:
    """Standard-normal process noise for one trial, shape (steps, dim)."""
    return _stream(seed, trial, _NOISE_LANE).standard_normal((steps, dim))


def cov_sqrt(cov: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix; exact zero for zero input."""
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def initial_draw(
    seed: int,
    trial: int,
    mean: np.ndarray,
    sqrt_cov: np.ndarray,
    truncate_coords: tuple[int, ...] = (),
    truncate_sigmas: float = 3.0,
    max_rejects: int = 10_000,
) -> np.ndarray:
    """Draw one initial state, optionally truncating flagged standard coordinates.

    ``sqrt_cov`` is a square root of the covariance (see :func:`cov_sqrt`).
    Truncation rejects the whole draw until every flagged coordinate of the
    underlying standard-normal vector lies within +-truncate_sigmas.
    """
    gen = _stream(seed, trial, _INIT_LANE)
    flagged = np.asarray(truncate_coords, dtype=int)
    for _ in range(max_rejects):
        z = gen.standard_normal(len(mean))
        if flagged.size == 0 or np.all(np.abs(z[flagged]) <= truncate_sigmas):
            return mean + sqrt_cov @ z
    raise RuntimeError("truncated-Gaussian rejection sampling exceeded retry budget")
