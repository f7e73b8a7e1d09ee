"""Explicit Runge-Kutta integrators over numpy arrays.

State arrays may carry leading batch axes; the adaptive solver measures the
error per batch element (RMS over the last axis) and controls the step by the
worst element.
"""

import numpy as np

from .errors import StiffnessError

MIN_STEP = 1e-10

# Dormand-Prince 5(4)
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100,
                1 / 40])
_E = _B5 - _B4


def rk4(F, y0, t0, t1, steps):
    """Classical RK4 with ``steps`` equal steps from ``t0`` to ``t1``."""
    y = np.array(y0, dtype=float)
    h = (t1 - t0) / steps
    for i in range(steps):
        t = t0 + i * h
        k1 = F(t, y)
        k2 = F(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = F(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = F(t + h, y + h * k3)
        y = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def _error_norm(err, y, y_new, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
    ratio = err / scale
    per = np.sqrt(np.mean(ratio * ratio, axis=-1))
    return float(np.max(per)) if per.size else 0.0


def dopri45(F, y0, t0, t1, h0, rtol=1e-5, atol=1e-7, min_step=MIN_STEP, max_steps=100_000):
    """Adaptive Dormand-Prince 4/5 from ``t0`` to ``t1`` with a PI step controller.

    Returns ``(y(t1), stats)`` where ``stats`` counts accepted/rejected steps
    and field evaluations. Raises :class:`StiffnessError` when the step falls
    below ``min_step``.
    """
    y = np.array(y0, dtype=float)
    t = float(t0)
    span = float(t1) - t
    if span <= 0:
        raise ValueError("dopri45 needs t1 > t0")
    h = min(float(h0), span)
    k1 = F(t, y)
    stats = {"accepted": 0, "rejected": 0, "nfev": 1}
    err_prev = 1.0
    safety, alpha, beta = 0.9, 0.7 / 5, 0.4 / 5
    for _ in range(max_steps):
        if h < min_step:
            raise StiffnessError(f"step size {h:.3e} underflow at t={t:.6g}")
        last = t + h >= t1 - 1e-14 * max(1.0, abs(t1))
        if last:
            h = t1 - t
        ks = [k1]
        for i in range(1, 7):
            yi = y + h * sum(a * k for a, k in zip(_A[i], ks) if a != 0.0)
            ks.append(F(t + _C[i] * h, yi))
        stats["nfev"] += 6
        y_new = y + h * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
        err = h * sum(e * k for e, k in zip(_E, ks))
        en = _error_norm(err, y, y_new, rtol, atol)
        if not np.isfinite(en):
            stats["rejected"] += 1
            h *= 0.2
            continue
        if en <= 1.0:
            stats["accepted"] += 1
            t = t1 if last else t + h
            y = y_new
            k1 = ks[6]
            if last:
                return y, stats
            en = max(en, 1e-10)
            fac = safety * en ** (-alpha) * err_prev**beta
            h *= min(10.0, max(0.2, fac))
            err_prev = en
        else:
            stats["rejected"] += 1
            h *= max(0.2, safety * en ** (-1 / 5))
    raise StiffnessError(f"dopri45 exceeded {max_steps} steps")
