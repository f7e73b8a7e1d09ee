"""Controlled-differential-equation integration.

A batch is integrated on a common grid of sub-steps: every gap between
consecutive knots (history samples, then query times) is split into ``r``
equal sub-steps and each sub-step is mapped to ``u in [0, 1]``, so
``dz/du = f(z) . dX/dt . (b - a)``. Elements with different timestamps then
share one step sequence. Each sub-step is driven by a single anchor (the one
nearest its midpoint), so the control is smooth inside every solver step
whenever ``r`` is even.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import so3
from .autodiff import Tensor
from .errors import InvalidInputError, OutOfSupportError
from .solvers import MIN_STEP, dopri45, rk4


@dataclass
class SegmentPlan:
    starts: np.ndarray  # (B, S) sub-step start times
    widths: np.ndarray  # (B, S) sub-step durations
    gap: np.ndarray  # (S,) knot gap each sub-step belongs to
    anchor: np.ndarray  # (S,) nearest history sample to the sub-step midpoint
    outputs: np.ndarray  # (m,) sub-step whose end is each query time
    gap_start: np.ndarray  # (B, S) time of the knot opening the gap
    gap_width: np.ndarray  # (B, S)
    r: int

    @classmethod
    def build(cls, times, queries, r):
        times = np.asarray(times, dtype=float)
        queries = np.asarray(queries, dtype=float)
        B, H = times.shape
        m = queries.shape[1]
        knots = np.concatenate([times, queries], axis=1)
        lo, width = knots[:, :-1], np.diff(knots, axis=1)
        G = H + m - 1
        j = np.arange(r)
        starts = (lo[:, :, None] + width[:, :, None] * (j / r)).reshape(B, G * r)
        widths = np.repeat(width / r, r, axis=1)
        gap = np.repeat(np.arange(G), r)
        sub = np.tile(j, G)
        upper = ((sub + 0.5) / r > 0.5) & (gap < H - 1)
        anchor = np.minimum(gap + upper, H - 1)
        outputs = (H - 1 + np.arange(m)) * r + r - 1
        return cls(starts, widths, gap, anchor, outputs, np.repeat(lo, r, axis=1),
                   np.repeat(width, r, axis=1), r)

    @property
    def n_steps(self):
        return self.gap.size

    def stage_times(self):
        """``(B, S, 3)``: start, midpoint and end of every sub-step."""
        return self.starts[..., None] + self.widths[..., None] * np.array([0.0, 0.5, 1.0])


def _hermite_rate(y0, y1, m0, m1, h, s):
    """Time derivative of the cubic Hermite segment at fraction ``s``."""
    d00 = 6 * s * s - 6 * s
    d10 = 3 * s * s - 4 * s + 1
    d01 = -d00
    d11 = 3 * s * s - 2 * s
    return (d00 * y0 + d01 * y1) / h + d10 * m0 + d11 * m1


def backward_slopes(times, values):
    """Knot slopes by backward differences; the first knot reuses the second's."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    d = np.diff(values, axis=-2) / np.diff(times, axis=-1)[..., None]
    return np.concatenate([d[..., :1, :], d], axis=-2)


class HermitePath:
    """C1 cubic Hermite interpolant of 9D rotation samples.

    Knot values are the raw observations, knot slopes backward differences.
    Past the last knot the path continues linearly with the final slope.
    """

    def __init__(self, traj, extrapolate=True):
        if len(traj) < 2:
            raise InvalidInputError("a Hermite path needs at least two knots")
        self.times = np.asarray(traj.times, dtype=float)
        self.values = so3.to_9d(traj.rotations)
        self.slopes = backward_slopes(self.times, self.values)
        self.extrapolate = extrapolate

    @property
    def support(self):
        return float(self.times[0]), float(self.times[-1])

    def breakpoints(self):
        return self.times[1:-1]

    def _locate(self, t):
        t0, tN = self.support
        if t < t0 or (t > tN and not self.extrapolate):
            raise OutOfSupportError(f"t={t} outside [{t0}, {tN}]")
        if t >= tN:
            return None, 0.0, 0.0
        g = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0,
                        len(self.times) - 2))
        h = self.times[g + 1] - self.times[g]
        return g, (t - self.times[g]) / h, h

    def value(self, t):
        g, s, h = self._locate(t)
        if g is None:
            return self.values[-1] + self.slopes[-1] * (t - self.times[-1])
        y0, y1 = self.values[g], self.values[g + 1]
        m0, m1 = self.slopes[g], self.slopes[g + 1]
        return ((2 * s**3 - 3 * s**2 + 1) * y0 + (s**3 - 2 * s**2 + s) * h * m0
                + (-2 * s**3 + 3 * s**2) * y1 + (s**3 - s**2) * h * m1)

    def rate(self, t):
        g, s, h = self._locate(t)
        if g is None:
            return self.slopes[-1].copy()
        return _hermite_rate(self.values[g], self.values[g + 1], self.slopes[g],
                             self.slopes[g + 1], h, s)

    def derivative_9d(self, t):
        return np.concatenate([[1.0], self.rate(t)])


def hermite_stage_rates(times, values, slopes, plan, t):
    """Batched Hermite 9D rates at times ``t`` of shape ``(B, S, k)``.

    Sub-step ``s`` of ``plan`` is evaluated on its own knot gap; past the last
    knot the final slope is returned.
    """
    B, H = times.shape
    g = np.minimum(plan.gap, H - 2)
    inside = plan.gap < H - 1
    s = (t - plan.gap_start[..., None]) / plan.gap_width[..., None]
    y0, y1 = values[:, g, None], values[:, g + 1, None]
    m0, m1 = slopes[:, g, None], slopes[:, g + 1, None]
    h = plan.gap_width[..., None, None]
    rate = _hermite_rate(y0, y1, m0, m1, h, s[..., None])
    tail = np.broadcast_to(slopes[:, -1, None, None, :], rate.shape)
    return np.where(inside[None, :, None, None], rate, tail)


def with_time_channel(rate, widths):
    """Prepend the unit time rate and scale by the sub-step duration."""
    ones = np.ones(rate.shape[:-1] + (1,))
    if isinstance(rate, Tensor):
        out = ad.concat([Tensor(ones), rate], axis=-1)
    else:
        out = np.concatenate([ones, rate], axis=-1)
    return out * widths.reshape(widths.shape + (1,) * (rate.ndim - widths.ndim))


def unroll_rk4(field, z0, controls, outputs):
    """Fixed-step RK4 on the tape over pre-computed stage controls.

    ``controls`` is ``(B, S, 3, c)`` (start, mid, end of each unit sub-step,
    already scaled by the sub-step duration); ``field(z, u)`` returns
    ``f(z) u``. Returns the latent states at the ``outputs`` sub-step ends,
    stacked as ``(B, len(outputs), w)``.
    """
    wanted = {int(s): i for i, s in enumerate(outputs)}
    found = [None] * len(outputs)
    z = z0
    for s in range(controls.shape[1]):
        ua, um, ub = controls[:, s, 0], controls[:, s, 1], controls[:, s, 2]
        k1 = field(z, ua)
        k2 = field(z + 0.5 * k1, um)
        k3 = field(z + 0.5 * k2, um)
        k4 = field(z + k3, ub)
        z = z + (k1 + 2.0 * (k2 + k3) + k4) * (1.0 / 6.0)
        if s in wanted:
            found[wanted[s]] = z
    return ad.stack(found, axis=1)


def integrate_plan_dopri(field_np, z0, plan, control_at, rtol=1e-5, atol=1e-7):
    """Adaptive integration of a whole plan, segment by segment (numpy only).

    ``control_at(s, u)`` returns the scaled ``(B, c)`` control of sub-step ``s``
    at unit position ``u``. The first trial step is a quarter of the knot
    spacing.
    """
    z = np.array(z0, dtype=float)
    outs = {}
    wanted = set(int(s) for s in plan.outputs)
    h0 = min(1.0, plan.r / 4.0)
    for s in range(plan.n_steps):
        span = float(np.max(plan.widths[:, s]))
        z, _ = dopri45(lambda u, y, s=s: np.einsum("bwc,bc->bw", field_np(y), control_at(s, u)),
                       z, 0.0, 1.0, h0, rtol, atol, min_step=MIN_STEP / max(span, 1e-300))
        if s in wanted:
            outs[s] = z
    return np.stack([outs[int(s)] for s in plan.outputs], axis=1)


def _field_fn(model):
    if hasattr(model, "field_np"):
        return model.field_np
    if callable(model):
        return model
    raise InvalidInputError("model has no vector field")


def _breaks(path, t0, t1):
    if hasattr(path, "breakpoints"):
        cuts = np.asarray(path.breakpoints())
    else:
        cuts = np.asarray(path.switch_times())
    cuts = cuts[(cuts > t0) & (cuts < t1)]
    return np.concatenate([[t0], cuts, [t1]])


def integrate_cde(model, path, t0, t1, z0, mode="dopri45", rk4_steps=2, rtol=1e-5, atol=1e-7,
                  h0=None):
    """``z(t1)`` for ``dz/dt = f(z) dX/dt`` driven by one control path.

    ``model`` supplies ``field_np(z) -> (w, c)`` (or is such a callable) and
    ``path`` supplies ``derivative_9d(t)``. Integration restarts at every
    anchor switch or knot so each solver run sees a smooth control.
    """
    if not t1 > t0:
        raise InvalidInputError(f"need t1 > t0, got [{t0}, {t1}]")
    field = _field_fn(model)

    z = np.array(z0, dtype=float)
    edges = _breaks(path, float(t0), float(t1))
    if h0 is None:
        times = getattr(path, "times", None)
        spacing = float(np.median(np.diff(times))) if times is not None and len(times) > 1 \
            else t1 - t0
        h0 = spacing / 4
    for a, b in zip(edges[:-1], edges[1:]):
        if hasattr(path, "anchor_index"):
            # pin the anchor so segment ends do not pick up the neighbouring polynomial
            k = path.anchor_index(0.5 * (a + b))

            def F(t, z, k=k):
                return field(z) @ path.derivative_9d(t, anchor=k)
        else:
            def F(t, z):
                return field(z) @ path.derivative_9d(t)
        if mode == "rk4":
            z = rk4(F, z, a, b, rk4_steps)
        elif mode == "dopri45":
            z, _ = dopri45(F, z, a, b, h0, rtol, atol)
        else:
            raise InvalidInputError(f"unknown solver mode {mode!r}")
    return z
