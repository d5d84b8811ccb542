"""
Uniform rectified-flow time grid, forward noising and the Euler step.

Data sits at t = 0 and noise at t = 1, ``z_t = (1 - t) x + t n``, and the ground-truth velocity is ``n - x``.
Iterating from ``t_{n_max}`` down with the negative step ``dt = -1 / T`` therefore denoises.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from mvgrid_edit.errors import ConfigError, ShapeError


@dataclass(frozen=True)
class TimeGrid:
    """
    Descending noise times ``[n_max / T, ..., 1 / T]`` with signed step ``dt = -1 / T``.

    >>> grid = make_schedule(5, 3)
    >>> grid.times.tolist()
    [0.6, 0.4, 0.2]
    >>> grid.dt
    -0.2
    """

    times: np.ndarray
    dt: float
    total_steps: int
    active_steps: int

    def __len__(self) -> int:
        return len(self.times)

    def steps(self) -> Iterator[tuple[int, float, float]]:
        """Yield ``(i, t_i, dt)`` for ``i = n_max, ..., 1``."""
        for offset, t in enumerate(self.times):
            yield self.active_steps - offset, float(t), self.dt


def make_schedule(total_steps: int, n_max: int) -> TimeGrid:
    if isinstance(total_steps, bool) or isinstance(n_max, bool):
        raise ConfigError("step counts must be integers")
    if int(total_steps) != total_steps or int(n_max) != n_max:
        raise ConfigError(f"step counts must be integers, got T={total_steps}, n_max={n_max}")
    total_steps, n_max = int(total_steps), int(n_max)
    if total_steps < 1:
        raise ConfigError(f"total steps T must be positive, got {total_steps}")
    if not 1 <= n_max <= total_steps:
        raise ConfigError(f"n_max must satisfy 1 <= n_max <= T={total_steps}, got {n_max}")
    times = np.arange(n_max, 0, -1, dtype=np.float64) / total_steps
    times.setflags(write=False)
    return TimeGrid(times=times, dt=-1.0 / total_steps, total_steps=total_steps, active_steps=n_max)


def _check_shapes(a, b, what: str):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def add_noise(x, noise, t: float):
    """
    Forward noising ``(1 - t) x + t n`` (linear interpolation between data and noise).

    >>> add_noise(2.0, 0.0, 0.25)
    1.5
    """
    _check_shapes(x, noise, "add_noise")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return (1.0 - t) * x + t * noise


def euler_update(x, delta_v, dt: float):
    """
    One explicit Euler step ``x + delta_v * dt``.

    >>> round(euler_update(1.0, 2.0, -0.2), 12)
    0.6
    """
    _check_shapes(x, delta_v, "euler_update")
    if not np.isfinite(dt):
        raise ValueError(f"dt must be finite, got {dt}")
    return x + delta_v * dt
