"""Timestamped rotation sequences and their CSV form."""

from dataclasses import dataclass

import numpy as np

from . import so3
from .errors import InvalidInputError
from .io import atomic_write_text

CSV_HEADER = "t,qw,qx,qy,qz"


@dataclass(frozen=True, eq=False)
class RotationTrajectory:
    """Ordered samples ``(t_k, x_k)`` with strictly increasing timestamps."""

    times: np.ndarray
    rotations: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        rots = np.asarray(self.rotations, dtype=float)
        if times.ndim != 1 or rots.shape != (times.shape[0], 3, 3):
            raise InvalidInputError(
                f"times {times.shape} and rotations {rots.shape} do not describe a trajectory"
            )
        if times.size and not np.all(np.isfinite(times)):
            raise InvalidInputError("timestamps must be finite")
        if np.any(np.diff(times) <= 0):
            raise InvalidInputError("timestamps must be strictly increasing")
        times.setflags(write=False)
        rots.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "rotations", rots)

    def __len__(self):
        return self.times.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return RotationTrajectory(self.times[idx], self.rotations[idx])
        return self.times[idx], self.rotations[idx]

    def equals(self, other):
        return np.array_equal(self.times, other.times) and np.array_equal(
            self.rotations, other.rotations
        )


def trajectory_to_csv(traj):
    q = so3.rotation_to_quat(traj.rotations) if len(traj) else np.zeros((0, 4))
    lines = [CSV_HEADER]
    for t, row in zip(traj.times, q):
        lines.append(",".join(repr(float(v)) for v in (t, *row)))
    return "\n".join(lines) + "\n"


def save_trajectory_csv(path, traj):
    atomic_write_text(path, trajectory_to_csv(traj))


def load_trajectory_csv(path):
    """Read a ``t,qw,qx,qy,qz`` file written by :func:`save_trajectory_csv`."""
    with open(path) as fh:
        header = fh.readline().strip()
        if header.replace(" ", "") != CSV_HEADER:
            raise InvalidInputError(f"{path}: expected header {CSV_HEADER!r}, got {header!r}")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        return RotationTrajectory(np.zeros(0), np.zeros((0, 3, 3)))
    if data.shape[1] != 5:
        raise InvalidInputError(f"{path}: expected 5 columns, got {data.shape[1]}")
    return RotationTrajectory(data[:, 0], so3.quat_to_rotation(data[:, 1:]))
