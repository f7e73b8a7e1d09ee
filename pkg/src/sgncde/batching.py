"""Forecast requests, (history, future) pairs and stacked batches."""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ShapeError
from .trajectory import RotationTrajectory


@dataclass(frozen=True, eq=False)
class ForecastRequest:
    observations: RotationTrajectory
    query_times: np.ndarray

    def __post_init__(self):
        q = np.array(self.query_times, dtype=float).reshape(-1)
        if q.size == 0:
            raise InvalidInputError("no query times")
        if not np.all(np.isfinite(q)) or np.any(np.diff(q) <= 0):
            raise InvalidInputError("query times must be finite and strictly increasing")
        if q[0] <= self.observations.times[-1]:
            raise InvalidInputError("query times must lie after the last observation")
        q.setflags(write=False)
        object.__setattr__(self, "query_times", q)


@dataclass(frozen=True, eq=False)
class ForecastPair:
    """A request plus the clean rotations at its query times."""

    request: ForecastRequest
    target: np.ndarray

    def __post_init__(self):
        if self.target.shape != (len(self.request.query_times), 3, 3):
            raise ShapeError("target must hold one rotation per query time")


@dataclass
class Batch:
    """Equal-length requests stacked along a leading axis.

    Times are shifted so each element's first observation is at zero.
    """

    times: np.ndarray  # (B, H)
    rotations: np.ndarray  # (B, H, 3, 3)
    queries: np.ndarray  # (B, m)
    targets: np.ndarray = None  # (B, m, 3, 3)
    origin: np.ndarray = None  # (B,) subtracted time offset
    cache: dict = field(default_factory=dict)

    @property
    def size(self):
        return self.times.shape[0]

    @property
    def horizon(self):
        return self.queries.shape[1]


def make_batch(items):
    """Stack :class:`ForecastRequest` or :class:`ForecastPair` objects."""
    items = list(items)
    if not items:
        raise InvalidInputError("empty batch")
    reqs = [it.request if isinstance(it, ForecastPair) else it for it in items]
    H = {len(r.observations) for r in reqs}
    m = {len(r.query_times) for r in reqs}
    if len(H) != 1 or len(m) != 1:
        raise ShapeError("batched requests need equal history length and horizon")
    times = np.stack([r.observations.times for r in reqs])
    origin = times[:, 0].copy()
    targets = None
    if all(isinstance(it, ForecastPair) for it in items):
        targets = np.stack([it.target for it in items])
    return Batch(times=times - origin[:, None],
                 rotations=np.stack([r.observations.rotations for r in reqs]),
                 queries=np.stack([r.query_times for r in reqs]) - origin[:, None],
                 targets=targets, origin=origin)
