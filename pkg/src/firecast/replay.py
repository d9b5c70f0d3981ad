"""FIFO trajectory replay buffer and minibatch window sampling.

A stored trajectory is a run of consecutive weeks. A sampled window spans
``K + T`` consecutive frames of one trajectory: the first K frames are the
unroll inputs, frames 1..K are the one-step observation targets, and frames
T..K+T-1 are the fire targets for the K states produced by the unroll
(state j, which has seen frames < j, predicts the fire map at week j + T).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, LengthError, SamplingError


@dataclass
class Trajectory:
    """Consecutive weeks of (observation, ground-truth fire) pairs."""

    obs: np.ndarray  # [M, C, H, W]
    fire: np.ndarray  # [M, H, W] binary
    start_week: int

    def __post_init__(self):
        self.obs = np.asarray(self.obs, dtype=np.float32)
        self.fire = np.asarray(self.fire, dtype=np.float32)
        if self.obs.ndim != 4 or self.fire.ndim != 3:
            raise DimensionError(
                f"trajectory arrays must be [M, C, H, W] and [M, H, W], "
                f"got {self.obs.shape} and {self.fire.shape}"
            )
        if self.obs.shape[0] != self.fire.shape[0] or self.obs.shape[2:] != self.fire.shape[1:]:
            raise DimensionError(
                f"trajectory obs {self.obs.shape} and fire {self.fire.shape} do not align"
            )

    def __len__(self) -> int:
        return self.obs.shape[0]


@dataclass
class Window:
    """One training window: K+1 obs frames and the K aligned fire targets."""

    obs: np.ndarray  # [K+1, C, H, W]
    fire: np.ndarray  # [K, H, W]
    start_week: int


@dataclass
class Minibatch:
    windows: list[Window]
    origins: list[tuple[int, int]] = field(default_factory=list)  # (entry index, offset)

    def __len__(self) -> int:
        return len(self.windows)

    def obs_stack(self) -> np.ndarray:
        """[L, K+1, C, H, W]"""
        return np.stack([w.obs for w in self.windows])

    def fire_stack(self) -> np.ndarray:
        """[L, K, H, W]"""
        return np.stack([w.fire for w in self.windows])


class TrajectoryBuffer:
    """Bounded FIFO of recent trajectories; eviction is strictly oldest-first."""

    def __init__(self, capacity: int, window_len: int, rng_seed: int = 0):
        if capacity < 1:
            raise LengthError(f"buffer capacity must be >= 1, got {capacity}")
        if window_len < 2:
            raise LengthError(f"window length must be >= 2, got {window_len}")
        self.capacity = capacity
        self.window_len = window_len  # K + T
        self.rng_seed = rng_seed
        self.rng = np.random.default_rng(rng_seed)
        self.entries: deque[Trajectory] = deque()

    def __len__(self) -> int:
        return len(self.entries)


def push(buf: TrajectoryBuffer, traj: Trajectory):
    """Append a trajectory, evicting the oldest entry when over capacity."""
    if len(traj) < buf.window_len:
        raise LengthError(
            f"trajectory of {len(traj)} frames is shorter than the "
            f"window span {buf.window_len}"
        )
    if buf.entries and buf.entries[0].obs.shape[1:] != traj.obs.shape[1:]:
        raise DimensionError(
            f"trajectory frames {traj.obs.shape[1:]} do not match buffer "
            f"frames {buf.entries[0].obs.shape[1:]}"
        )
    buf.entries.append(traj)
    while len(buf.entries) > buf.capacity:
        buf.entries.popleft()


def sample(
    buf: TrajectoryBuffer,
    num_windows: int,
    unroll_len: int,
    horizon: int,
    rng: np.random.Generator | None = None,
) -> Minibatch:
    """Draw ``num_windows`` windows with replacement.

    Two-stage uniform: trajectory uniform among those admitting a window,
    then start offset uniform within the trajectory.
    """
    if rng is None:
        rng = buf.rng
    span = unroll_len + horizon
    if not buf.entries:
        raise SamplingError("cannot sample from an empty buffer")
    admissible = [i for i, t in enumerate(buf.entries) if len(t) >= span]
    if not admissible:
        raise SamplingError(
            f"no stored trajectory admits a window of {span} frames "
            f"(K={unroll_len}, T={horizon})"
        )
    windows = []
    origins = []
    for _ in range(num_windows):
        entry_idx = admissible[int(rng.integers(len(admissible)))]
        traj = buf.entries[entry_idx]
        offset = int(rng.integers(len(traj) - span + 1))
        windows.append(
            Window(
                obs=traj.obs[offset : offset + unroll_len + 1],
                fire=traj.fire[offset + horizon : offset + span],
                start_week=traj.start_week + offset,
            )
        )
        origins.append((entry_idx, offset))
    return Minibatch(windows, origins)
