"""Savitzky-Golay regression on SO(3).

For every anchor sample ``k`` a quadratic ``p(tau) = rho0 + rho1 tau + rho2 tau^2 / 2``
in the Lie algebra is fit by (weighted) least squares to the relative
rotations ``Log(x_{k+m} x_k^T)`` over a window of ``2n + 1`` samples. The
fitted polynomials define a smooth control path ``phi(t) = Exp(p(t - t_k)) x_k``.
"""

from dataclasses import dataclass
from math import factorial

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import so3
from .errors import (
    InvalidInputError,
    NearAntipodalError,
    OutOfSupportError,
    SingularWindowError,
    WindowError,
)

ORDER = 2
MAX_CONDITION = 1e12
_SOFTPLUS_ONE = float(np.log(np.expm1(1.0)))


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class SGCoefficients:
    rho0: np.ndarray
    rho1: np.ndarray
    rho2: np.ndarray
    anchor_time: float
    anchor_rotation: np.ndarray

    @property
    def rho(self):
        return np.concatenate([self.rho0, self.rho1, self.rho2])

    @classmethod
    def from_vector(cls, rho, anchor_time, anchor_rotation):
        rho = np.asarray(rho, dtype=float)
        if not np.all(np.isfinite(rho)):
            raise InvalidInputError("coefficients must be finite")
        return cls(rho[0:3].copy(), rho[3:6].copy(), rho[6:9].copy(), float(anchor_time),
                   np.asarray(anchor_rotation, dtype=float))


@dataclass(frozen=True)
class SGWindowSystem:
    """Least-squares system for one anchor.

    ``offsets`` are the window offsets ``m`` actually present (clipped at the
    sequence ends); ``A_hat`` has one row per offset.
    """

    A_hat: np.ndarray
    A: np.ndarray
    b: np.ndarray
    offsets: np.ndarray
    half_window: int
    anchor: int
    anchor_time: float
    anchor_rotation: np.ndarray


class SGWeights:
    """Per-offset window weights, positive through a softplus.

    ``raw`` holds one unconstrained value per offset ``m = -n..n``; the
    default raw value gives an effective weight of exactly one.
    """

    def __init__(self, raw):
        raw = np.array(raw, dtype=float)
        if raw.ndim != 1 or raw.size % 2 == 0:
            raise InvalidInputError("weights need an odd number 2n+1 of entries")
        self.raw = raw

    @classmethod
    def uniform(cls, n):
        return cls(np.full(2 * n + 1, _SOFTPLUS_ONE))

    @property
    def half_window(self):
        return self.raw.size // 2

    @property
    def effective(self):
        return softplus(self.raw)

    def copy(self):
        return SGWeights(self.raw.copy())


def design_matrix(tau, order=ORDER):
    """Rows ``[tau^j / j!]`` for ``j = 0..order``."""
    tau = np.asarray(tau, dtype=float)
    return np.stack([tau**j / factorial(j) for j in range(order + 1)], axis=-1)


def _relative_logs(rotations, anchor_rotation, index):
    rel = rotations @ anchor_rotation.T
    try:
        return so3.log_so3(rel)
    except NearAntipodalError as exc:
        raise WindowError(f"near-antipodal relative rotation in window: {exc}", index) from exc


def build_window_system(traj, k, n, p=ORDER):
    """Window system for anchor ``k`` with half-width ``n`` and order ``p``."""
    N = len(traj) - 1
    if not 0 <= k <= N:
        raise InvalidInputError(f"anchor {k} outside [0, {N}]")
    if n < 1:
        raise InvalidInputError("half window must be at least 1")
    lo, hi = max(0, k - n), min(N, k + n)
    idx = np.arange(lo, hi + 1)
    tau = traj.times[idx] - traj.times[k]
    A_hat = design_matrix(tau, p)
    b = _relative_logs(traj.rotations[idx], traj.rotations[k], k).reshape(-1)
    return SGWindowSystem(
        A_hat=A_hat,
        A=np.kron(A_hat, np.eye(3)),
        b=b,
        offsets=idx - k,
        half_window=n,
        anchor=k,
        anchor_time=float(traj.times[k]),
        anchor_rotation=traj.rotations[k],
    )


def _window_weights(sys, w):
    if w is None:
        return np.ones(sys.offsets.size)
    if w.half_window != sys.half_window:
        raise InvalidInputError(
            f"weights for n={w.half_window} used with a window of n={sys.half_window}"
        )
    return w.effective[sys.offsets + sys.half_window]


def _normal_factor(sys, w_pts):
    Wd = np.repeat(w_pts, 3)
    AtW = sys.A.T * Wd
    M = AtW @ sys.A
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise SingularWindowError(f"normal matrix condition number {cond:.3g}", sys.anchor)
    try:
        return cho_factor(M), AtW
    except LinAlgError as exc:
        raise SingularWindowError("normal matrix not positive definite", sys.anchor) from exc


def solve_coefficients(sys, w=None):
    """``rho = (A^T W A)^{-1} A^T W b`` by Cholesky; ``w=None`` means ``W = I``."""
    factor, AtW = _normal_factor(sys, _window_weights(sys, w))
    rho = cho_solve(factor, AtW @ sys.b)
    return SGCoefficients.from_vector(rho, sys.anchor_time, sys.anchor_rotation)


def solve_coefficients_grad(sys, w, upstream_grad):
    """Gradient of ``upstream_grad . rho`` with respect to ``w.raw``.

    Uses ``d rho / d w_i = M^{-1} A_i^T (b_i - A_i rho)`` chained through the
    softplus. Offsets outside the (clipped) window get zero gradient.
    """
    if w is None:
        raise InvalidInputError("gradient requires explicit weights")
    w_pts = _window_weights(sys, w)
    factor, AtW = _normal_factor(sys, w_pts)
    rho = cho_solve(factor, AtW @ sys.b)
    v = cho_solve(factor, np.asarray(upstream_grad, dtype=float))
    resid = (sys.b - sys.A @ rho).reshape(-1, 3)
    Av = (sys.A @ v).reshape(-1, 3)
    g_eff = np.sum(Av * resid, axis=1)
    grad = np.zeros_like(w.raw)
    pos = sys.offsets + sys.half_window
    grad[pos] = g_eff * sigmoid(w.raw[pos])
    return grad


def eval_polynomial(c, t):
    """Value and time derivative of the anchor polynomial at absolute time ``t``."""
    tau = t - c.anchor_time
    value = c.rho0 + c.rho1 * tau + 0.5 * c.rho2 * tau * tau
    return value, c.rho1 + c.rho2 * tau


def control_state(rho, tau, anchor_rotation):
    """Path rotation and its time derivative for stacked coefficients.

    ``rho`` is ``(..., 9)``, ``tau`` is ``(...)`` and ``anchor_rotation`` is
    ``(..., 3, 3)``. The spatial angular velocity is ``J_l(p) p'``.
    """
    rho = np.asarray(rho, dtype=float)
    tau = np.asarray(tau, dtype=float)[..., None]
    r0, r1, r2 = rho[..., 0:3], rho[..., 3:6], rho[..., 6:9]
    p = r0 + r1 * tau + 0.5 * r2 * tau * tau
    pdot = r1 + r2 * tau
    phi = so3.exp_so3(p) @ anchor_rotation
    omega = (so3.left_jacobian(p) @ pdot[..., None])[..., 0]
    return phi, so3.hat(omega) @ phi


class ControlPath:
    """Piecewise SG path: each query uses the anchor nearest in time.

    Ties go to the lower anchor. Queries past the last sample continue the
    final anchor's polynomial when ``extrapolate`` is set.
    """

    def __init__(self, coefficients, extrapolate=True):
        if not coefficients:
            raise InvalidInputError("control path needs at least one anchor")
        self.coefficients = list(coefficients)
        self.times = np.array([c.anchor_time for c in self.coefficients])
        self.rho = np.stack([c.rho for c in self.coefficients])
        self.anchors = np.stack([c.anchor_rotation for c in self.coefficients])
        self.extrapolate = extrapolate

    @property
    def support(self):
        return float(self.times[0]), float(self.times[-1])

    def anchor_index(self, t):
        t0, tN = self.support
        if t < t0:
            raise OutOfSupportError(f"t={t} before path start {t0}")
        if t > tN and not self.extrapolate:
            raise OutOfSupportError(f"t={t} after path end {tN} and extrapolation is off")
        j = int(np.searchsorted(self.times, t, side="left"))
        if j == 0:
            return 0
        if j >= len(self.times):
            return len(self.times) - 1
        return j - 1 if t - self.times[j - 1] <= self.times[j] - t else j

    def switch_times(self):
        """Times where the active anchor changes (midpoints between anchors)."""
        return 0.5 * (self.times[1:] + self.times[:-1])

    def state(self, t, anchor=None):
        """Rotation and rate at ``t``; ``anchor`` overrides the nearest-anchor rule."""
        k = self.anchor_index(t) if anchor is None else anchor
        return control_state(self.rho[k], t - self.times[k], self.anchors[k])

    def value(self, t, anchor=None):
        return self.state(t, anchor)[0]

    def derivative_9d(self, t, anchor=None):
        _, dphi = self.state(t, anchor)
        return np.concatenate([[1.0], so3.to_9d(dphi)])


def path_value(path, t):
    return path.value(t)


def path_derivative_9d(path, t):
    """``(1, vec(d phi / dt))``: time channel followed by the row-major 9D rate."""
    return path.derivative_9d(t)


def fit_path(traj, n, w=None, extrapolate=True):
    """Fit one coefficient set per sample; boundary windows are clipped."""
    if len(traj) < 2:
        raise InvalidInputError("need at least two samples to fit a path")
    if w is not None and w.half_window != n:
        raise InvalidInputError(f"weights have n={w.half_window}, fit requested n={n}")
    coeffs = []
    for k in range(len(traj)):
        sys = build_window_system(traj, k, n)
        coeffs.append(solve_coefficients(sys, w))
    return ControlPath(coeffs, extrapolate=extrapolate)


class WindowBank:
    """All anchor windows of a batch of equal-length trajectories.

    Precomputes the design rows and relative logs once so coefficients and
    their weight gradients can be evaluated repeatedly as the weights change.
    Relies on ``A = A_hat kron I3`` and ``W = diag(w) kron I3`` so every
    9x9 normal system reduces to a 3x3 one shared by the three axes.
    """

    def __init__(self, times, rotations, n):
        times = np.asarray(times, dtype=float)
        rotations = np.asarray(rotations, dtype=float)
        if times.ndim == 1:
            times, rotations = times[None], rotations[None]
        B, H = times.shape
        self.n = n
        m = np.arange(-n, n + 1)
        k = np.arange(H)
        idx = k[:, None] + m[None, :]
        self.mask = (idx >= 0) & (idx < H)
        cidx = np.clip(idx, 0, H - 1)
        tau = times[:, cidx] - times[:, k, None]
        self.A_hat = design_matrix(tau) * self.mask[None, :, :, None]
        rel = rotations[:, cidx] @ np.swapaxes(rotations, -1, -2)[:, :, None]
        try:
            logs = so3.log_so3(rel)
        except NearAntipodalError:
            angles = so3.rotation_angle(rel)
            bad = np.argwhere(angles >= np.pi - so3.ANTIPODAL_MARGIN)[0]
            raise WindowError("near-antipodal relative rotation in window", int(bad[1])) from None
        self.b = logs * self.mask[None, :, :, None]
        self.shape = (B, H)

    def _system(self, raw):
        w = softplus(np.asarray(raw, dtype=float)) * self.mask
        AtW = np.swapaxes(self.A_hat * w[None, :, :, None], -1, -2)
        M = AtW @ self.A_hat
        cond = np.linalg.cond(M)
        if not np.all(np.isfinite(cond)) or np.any(cond > MAX_CONDITION):
            bad = np.argwhere(~(cond <= MAX_CONDITION))[0]
            raise SingularWindowError("ill-conditioned normal matrix", int(bad[1]))
        return M, AtW

    def solve(self, raw):
        """Coefficients ``(B, H, 9)`` ordered ``[rho0; rho1; rho2]``."""
        M, AtW = self._system(raw)
        P = np.linalg.solve(M, AtW @ self.b)
        return P.reshape(self.shape + (9,))

    def vjp(self, raw, grad_rho):
        """Gradient w.r.t. ``raw`` of ``sum(grad_rho * solve(raw))``."""
        raw = np.asarray(raw, dtype=float)
        M, AtW = self._system(raw)
        P = np.linalg.solve(M, AtW @ self.b)
        V = np.linalg.solve(np.swapaxes(M, -1, -2), grad_rho.reshape(self.shape + (3, 3)))
        resid = self.b - self.A_hat @ P
        AV = self.A_hat @ V
        g_eff = np.sum(AV * resid, axis=(-1,)) * self.mask
        return g_eff.sum(axis=(0, 1)) * sigmoid(raw)
