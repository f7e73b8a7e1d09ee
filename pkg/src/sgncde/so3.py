"""Rotation group primitives.

Rotations are plain ``(3, 3)`` float arrays and tangent vectors are ``(3,)``
arrays. Most functions also accept stacks with arbitrary leading dimensions.
"""

import numpy as np

from .errors import Degenerate6DError, InvalidInputError, NearAntipodalError

SMALL_ANGLE = 1e-4
ANTIPODAL_MARGIN = 1e-6
SKEW_TOL = 1e-9


def hat(v):
    """Map ``(..., 3)`` vectors to ``(..., 3, 3)`` skew-symmetric matrices."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m):
    """Inverse of :func:`hat`. Raises if ``m`` is not skew-symmetric."""
    m = np.asarray(m, dtype=float)
    if m.shape[-2:] != (3, 3):
        raise InvalidInputError(f"expected (..., 3, 3) matrix, got {m.shape}")
    asym = np.abs(m + np.swapaxes(m, -1, -2)).max(initial=0.0)
    if asym > SKEW_TOL:
        raise InvalidInputError(f"matrix is not skew-symmetric (residual {asym:.3g})")
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _exp_coeffs(theta):
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    th2 = theta * theta
    a = np.where(small, 1.0 - th2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - th2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    return a, b


def exp_so3(v):
    """Rodrigues exponential of ``(..., 3)`` tangent vectors."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    a, b = _exp_coeffs(theta)
    K = hat(v)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def rotation_angle(R):
    """Rotation angle in ``[0, pi]`` computed with atan2 for accuracy at both ends."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R, axis1=-2, axis2=-1)
    skew = np.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]],
        axis=-1,
    )
    return np.arctan2(0.5 * np.linalg.norm(skew, axis=-1), 0.5 * (tr - 1.0))


def log_so3(R):
    """Principal logarithm as a tangent vector.

    Raises :class:`NearAntipodalError` when the rotation angle is within
    ``1e-6`` of pi, where the principal branch is not well defined.
    """
    R = np.asarray(R, dtype=float)
    theta = rotation_angle(R)
    if np.any(theta >= np.pi - ANTIPODAL_MARGIN):
        raise NearAntipodalError(
            f"rotation angle {float(np.max(theta)):.9f} too close to pi for Log"
        )
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    coeff = np.where(small, 0.5 + theta * theta / 12.0, safe / (2.0 * np.sin(safe)))
    skew = np.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]],
        axis=-1,
    )
    return coeff[..., None] * skew


def left_jacobian(v):
    """Left Jacobian ``J_l`` with ``d/dt Exp(p) = hat(J_l(p) p') Exp(p)``."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    th2 = theta * theta
    b = np.where(small, 0.5 - th2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    c = np.where(small, 1.0 / 6.0 - th2 / 120.0, (safe - np.sin(safe)) / safe**3)
    K = hat(v)
    return np.eye(3) + b[..., None, None] * K + c[..., None, None] * (K @ K)


def geodesic_error(R1, R2):
    """Rotational geodesic error ``2 asin(||R2 - R1||_F / (2 sqrt 2))`` in radians."""
    diff = np.asarray(R2, dtype=float) - np.asarray(R1, dtype=float)
    x = np.linalg.norm(diff, axis=(-2, -1)) / (2.0 * np.sqrt(2.0))
    return 2.0 * np.arcsin(np.clip(x, 0.0, 1.0))


def gram_schmidt(nu1, nu2):
    """Rotation whose first two columns are the orthonormalized ``nu1``, ``nu2``."""
    nu1 = np.asarray(nu1, dtype=float)
    nu2 = np.asarray(nu2, dtype=float)
    n1 = np.linalg.norm(nu1, axis=-1, keepdims=True)
    if np.any(n1 <= 1e-12):
        raise Degenerate6DError("first 6D column has zero norm")
    e1 = nu1 / n1
    u2 = nu2 - np.sum(e1 * nu2, axis=-1, keepdims=True) * e1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 <= 1e-12):
        raise Degenerate6DError("6D columns are parallel")
    e2 = u2 / n2
    e3 = np.cross(e1, e2)
    return np.stack([e1, e2, e3], axis=-1)


def to_9d(R):
    """Row-major flattening ``(..., 3, 3) -> (..., 9)``."""
    R = np.asarray(R, dtype=float)
    return R.reshape(R.shape[:-2] + (9,))


def from_9d(x):
    x = np.asarray(x, dtype=float)
    return x.reshape(x.shape[:-1] + (3, 3))


def to_6d(R):
    """First two columns ``(nu1, nu2)`` of each rotation."""
    R = np.asarray(R, dtype=float)
    return R[..., :, 0].copy(), R[..., :, 1].copy()


def is_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=float)
    ortho = np.linalg.norm(np.swapaxes(R, -1, -2) @ R - np.eye(3), axis=(-2, -1))
    det = np.linalg.det(R)
    return bool(np.all(ortho <= tol) and np.all(np.abs(det - 1.0) <= tol))


def project_to_so3(m):
    """Nearest rotation in Frobenius norm, via SVD with determinant correction."""
    m = np.asarray(m, dtype=float)
    U, s, Vt = np.linalg.svd(m)
    if np.any(s[..., -1] <= 1e-12 * np.maximum(s[..., 0], 1e-300)):
        raise InvalidInputError("cannot project a singular matrix onto SO(3)")
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.ones(s.shape)
    D[..., -1] = d
    return (U * D[..., None, :]) @ Vt


def quat_to_rotation(q):
    """Unit quaternion ``(w, x, y, z)`` to rotation matrix."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def rotation_to_quat(R):
    """Rotation matrix to unit quaternion ``(w, x, y, z)`` with ``w >= 0``.

    Uses the largest-diagonal branch for stability.
    """
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = np.empty((flat.shape[0], 4))
    for i, m in enumerate(flat):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        cand = np.array([tr, m[0, 0], m[1, 1], m[2, 2]])
        k = int(np.argmax(cand))
        if k == 0:
            s = 2.0 * np.sqrt(1.0 + tr)
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif k == 1:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif k == 2:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        q /= np.linalg.norm(q)
        out[i] = -q if q[0] < 0 else q
    return out.reshape(R.shape[:-2] + (4,))


def sample_uniform_rotation(rng, size=None):
    """Haar-uniform rotation(s) from three uniforms (Shoemake's construction)."""
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    u1, u2, u3 = rng.random((3,) + shape)
    a = np.sqrt(1.0 - u1)
    b = np.sqrt(u1)
    q = np.stack(
        [
            b * np.cos(2 * np.pi * u3),
            a * np.sin(2 * np.pi * u2),
            a * np.cos(2 * np.pi * u2),
            b * np.sin(2 * np.pi * u3),
        ],
        axis=-1,
    )
    return quat_to_rotation(q)
