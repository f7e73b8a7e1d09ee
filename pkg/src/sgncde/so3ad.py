"""SO(3) maps as tape operations.

The Rodrigues-type coefficients are written as functions of ``s = theta^2``
so they stay smooth at the origin; below ``theta = 0.1`` a truncated series
replaces the closed forms.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import make_node

TAYLOR_SWITCH = 0.01  # in s = theta^2

# series coefficients in s
_A = (1.0, -1 / 6, 1 / 120, -1 / 5040, 1 / 362880)
_B = (1 / 2, -1 / 24, 1 / 720, -1 / 40320, 1 / 3628800)
_C = (1 / 6, -1 / 120, 1 / 5040, -1 / 362880, 1 / 39916800)


def _poly(c, s):
    out = np.zeros_like(s)
    for coef in reversed(c):
        out = out * s + coef
    return out


def _dpoly(c, s):
    return _poly([k * c[k] for k in range(1, len(c))], s)


def _closed(s):
    th = np.sqrt(s)
    sn, cs = np.sin(th), np.cos(th)
    A = sn / th
    B = (1 - cs) / s
    C = (th - sn) / (s * th)
    dA = (th * cs - sn) / (2 * s * th)
    dB = (th * sn - 2 * (1 - cs)) / (2 * s * s)
    dC = (th * (1 - cs) - 3 * (th - sn)) / (2 * s * s * th)
    return (A, B, C), (dA, dB, dC)


def coefficients_np(s):
    """``A, B, C`` and their s-derivatives for ``s = theta^2``."""
    s = np.asarray(s, dtype=float)
    small = s < TAYLOR_SWITCH
    safe = np.where(small, 1.0, s)
    vals, ders = _closed(safe)
    vals = tuple(np.where(small, _poly(c, s), v) for c, v in zip((_A, _B, _C), vals))
    ders = tuple(np.where(small, _dpoly(c, s), d) for c, d in zip((_A, _B, _C), ders))
    return vals, ders


def coefficients(s):
    """Tape versions of ``sin t / t``, ``(1 - cos t) / t^2``, ``(t - sin t) / t^3``."""
    vals, ders = coefficients_np(s.data)
    return tuple(make_node(v, (s,), lambda g, d=d: (g * d,)) for v, d in zip(vals, ders))


def _col(x):
    return x.reshape(*x.shape, 1)


def rotation_rate(rho, tau, anchor):
    """``vec(d phi / dt)`` for anchor polynomials, as a tape value.

    ``rho`` is a ``(..., 9)`` tensor, ``tau`` a matching ``(...)`` array of
    offsets from the anchor time and ``anchor`` the ``(..., 3, 3)`` anchor
    rotations. Returns ``(..., 9)`` row-major.
    """
    tau = np.asarray(tau, dtype=float)[..., None]
    r0, r1, r2 = rho[..., 0:3], rho[..., 3:6], rho[..., 6:9]
    p = r0 + r1 * tau + r2 * (0.5 * tau * tau)
    pdot = r1 + r2 * tau
    A, B, C = coefficients((p * p).sum(axis=-1))
    c1 = ad.cross(p, pdot)
    omega = pdot + _col(B) * c1 + _col(C) * ad.cross(p, c1)
    P = ad.hat(p)
    E = np.eye(3) + _col(_col(A)) * P + _col(_col(B)) * (P @ P)
    dphi = ad.hat(omega) @ (E @ anchor)
    return dphi.reshape(*dphi.shape[:-2], 9)


def gram_schmidt(v6, eps=1e-12):
    """Tape Gram-Schmidt of ``(..., 6)`` into rotations ``(..., 3, 3)``.

    Returns the rotations and a boolean mask of degenerate inputs; degenerate
    entries are computed with a unit stand-in norm and must be replaced.
    """
    a1, a2 = v6[..., 0:3], v6[..., 3:6]
    n1 = ad.frobenius_norm(a1, axis=-1, keepdims=True)
    bad1 = n1.data[..., 0] <= eps
    b1 = a1 / ad.where(n1.data > eps, n1, 1.0)
    u2 = a2 - (b1 * a2).sum(axis=-1, keepdims=True) * b1
    n2 = ad.frobenius_norm(u2, axis=-1, keepdims=True)
    bad = bad1 | (n2.data[..., 0] <= eps)
    b2 = u2 / ad.where(n2.data > eps, n2, 1.0)
    b3 = ad.cross(b1, b2)
    return ad.stack([b1, b2, b3], axis=-1), bad
