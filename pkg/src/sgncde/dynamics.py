"""Rotational rigid-body simulation used to generate training data.

Integrates ``R' = R hat(w)`` and ``w' = J^{-1}(tau - w x J w)`` with a fourth
order Runge-Kutta-Munthe-Kaas scheme. Everything is vectorised over a leading
batch axis so many trajectories can be stepped together.
"""

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import so3
from .errors import ConfigError, InvalidInputError
from .io import read_key_values
from .trajectory import RotationTrajectory

VARIANTS = ("free", "linear_control", "config_dependent", "damped")
MOMENT_RANGE = (0.5, 3.0)
OMEGA_SIGMA = 2.0
OMEGA_MIN = 0.5


@dataclass(frozen=True)
class TorqueModel:
    variant: str = "free"
    gain: np.ndarray = field(default_factory=lambda: 0.3 * np.eye(3))
    dipole: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    field_strength: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    damping: float = 0.2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}")


@dataclass(frozen=True)
class SimState:
    R: np.ndarray
    omega: np.ndarray
    t: float = 0.0


def _torque(model, R, omega):
    if model.variant == "free":
        return np.zeros_like(omega)
    if model.variant == "linear_control":
        return -omega @ np.asarray(model.gain).T
    if model.variant == "damped":
        return -model.damping * omega
    # dipole fixed in the body, field fixed in the world
    b_body = (np.swapaxes(R, -1, -2) @ np.asarray(model.field_strength))
    return np.cross(np.broadcast_to(model.dipole, b_body.shape), b_body)


def torque(model, state):
    """External body-frame torque for ``state``."""
    return _torque(model, np.asarray(state.R, float), np.asarray(state.omega, float))


def _omega_dot(model, R, w, J, Jinv):
    Jw = (J @ w[..., None])[..., 0]
    rhs = _torque(model, R, w) - np.cross(w, Jw)
    return (Jinv @ rhs[..., None])[..., 0]


def _dexpinv(theta, w):
    c = np.cross(theta, w)
    return w + 0.5 * c + np.cross(theta, c) / 12.0


def _rkmk4(R, w, J, Jinv, model, dt):
    a1 = _omega_dot(model, R, w, J, Jinv)
    k1 = w
    w2 = w + 0.5 * dt * a1
    th2 = 0.5 * dt * k1
    R2 = R @ so3.exp_so3(th2)
    k2 = _dexpinv(th2, w2)
    a2 = _omega_dot(model, R2, w2, J, Jinv)
    w3 = w + 0.5 * dt * a2
    th3 = 0.5 * dt * k2
    R3 = R @ so3.exp_so3(th3)
    k3 = _dexpinv(th3, w3)
    a3 = _omega_dot(model, R3, w3, J, Jinv)
    w4 = w + dt * a3
    th4 = dt * k3
    R4 = R @ so3.exp_so3(th4)
    k4 = _dexpinv(th4, w4)
    a4 = _omega_dot(model, R4, w4, J, Jinv)
    theta = dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    w_new = w + dt / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
    return so3.project_to_so3(R @ so3.exp_so3(theta)), w_new


def step(state, J, model, dt):
    """Advance one step of length ``dt``; the rotation is re-projected onto SO(3)."""
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    J = np.asarray(J, dtype=float)
    R, w = _rkmk4(np.asarray(state.R, float), np.asarray(state.omega, float), J,
                  np.linalg.inv(J), model, dt)
    return SimState(R, w, state.t + dt)


def rollout(R0, omega0, J, model, dt, n_steps, every=1):
    """Integrate (batched) states; returns ``(R, omega)`` every ``every`` steps.

    Output arrays have shape ``(n_steps // every + 1, ...)`` with the initial
    state first.
    """
    R = np.asarray(R0, dtype=float)
    w = np.asarray(omega0, dtype=float)
    J = np.asarray(J, dtype=float)
    Jinv = np.linalg.inv(J)
    Rs, ws = [R], [w]
    for i in range(1, n_steps + 1):
        R, w = _rkmk4(R, w, J, Jinv, model, dt)
        if i % every == 0:
            Rs.append(R)
            ws.append(w)
    return np.stack(Rs), np.stack(ws)


def check_inertia(J, tol=1e-12):
    J = np.asarray(J, dtype=float)
    if J.shape != (3, 3) or np.abs(J - J.T).max() > tol:
        return False
    lam = np.linalg.eigvalsh(J)
    return bool(lam[0] > 0 and lam[0] + lam[1] >= lam[2] * (1 - 1e-12))


def sample_principal_moments(rng):
    """Log-uniform moments in ``MOMENT_RANGE`` satisfying the triangle inequality.

    Returns the moments and the number of rejected draws.
    """
    lo, hi = np.log(MOMENT_RANGE[0]), np.log(MOMENT_RANGE[1])
    rejected = 0
    while True:
        lam = np.exp(rng.uniform(lo, hi, 3))
        s = np.sort(lam)
        if s[0] + s[1] >= s[2]:
            return lam, rejected
        rejected += 1


def sample_inertia(rng):
    """Random inertia tensor: physical principal moments, uniformly random axes."""
    lam, _ = sample_principal_moments(rng)
    Q = so3.sample_uniform_rotation(rng)
    J = Q @ np.diag(lam) @ Q.T
    return 0.5 * (J + J.T)


def sample_initial_conditions(rng, omega_min=OMEGA_MIN, sigma=OMEGA_SIGMA):
    """Uniform orientation and Gaussian angular velocity with ``|w| >= omega_min``."""
    if omega_min <= 0:
        raise InvalidInputError("omega_min must be positive")
    R = so3.sample_uniform_rotation(rng)
    w, _ = draw_angular_velocity(rng, omega_min, sigma)
    return SimState(R, w, 0.0)


def draw_angular_velocity(rng, omega_min=OMEGA_MIN, sigma=OMEGA_SIGMA):
    """Isotropic Gaussian draw rejected while ``|w| < omega_min``; also returns attempts."""
    attempts = 0
    while True:
        attempts += 1
        w = sigma * rng.normal(size=3)
        if np.linalg.norm(w) >= omega_min:
            return w, attempts


def corrupt(traj, sigma, rng):
    """Tangent Gaussian noise ``Exp(eps_k) x_k`` with ``eps_k ~ N(0, sigma^2 I)``."""
    if sigma < 0:
        raise InvalidInputError("sigma must be non-negative")
    if sigma == 0:
        return RotationTrajectory(traj.times.copy(), traj.rotations.copy())
    eps = sigma * rng.normal(size=(len(traj), 3))
    return RotationTrajectory(traj.times.copy(), so3.exp_so3(eps) @ traj.rotations)


def subsample_irregular(traj, drop_prob, jitter, rng):
    """Drop samples independently and jitter the kept timestamps.

    Each kept timestamp moves by at most ``min(jitter, 0.49 * gap)`` where
    ``gap`` is the distance to its nearest kept neighbour, so order is kept.
    """
    if not 0 <= drop_prob < 1:
        raise InvalidInputError("drop_prob must be in [0, 1)")
    if jitter < 0:
        raise InvalidInputError("jitter must be non-negative")
    keep = rng.random(len(traj)) >= drop_prob
    times = traj.times[keep].copy()
    rots = traj.rotations[keep].copy()
    if jitter > 0 and times.size:
        gaps = np.diff(times)
        left = np.concatenate([[np.inf], gaps])
        right = np.concatenate([gaps, [np.inf]])
        bound = np.minimum(jitter, 0.49 * np.minimum(left, right))
        if times.size == 1:
            bound = np.array([jitter])
        times = times + rng.uniform(-1.0, 1.0, times.size) * bound
    return RotationTrajectory(times, rots)


@dataclass(frozen=True)
class ScenarioConfig:
    variant: str = "free"
    duration_s: float = 3.0
    dt: float = 1e-3
    sample_hz: float = 40.0
    noise_sigma: float = 0.0
    drop_prob: float = 0.0
    jitter: float = 0.0
    seed: int = 0
    gain: float = 0.3
    damping: float = 0.2
    field_strength: float = 1.0
    dipole_strength: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}")
        if self.duration_s <= 0 or self.dt <= 0 or self.sample_hz <= 0:
            raise ConfigError("duration_s, dt and sample_hz must be positive")
        if self.noise_sigma < 0 or self.jitter < 0 or not 0 <= self.drop_prob < 1:
            raise ConfigError("noise_sigma, jitter must be >= 0 and drop_prob in [0, 1)")
        ratio = 1.0 / (self.dt * self.sample_hz)
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError("1 / (dt * sample_hz) must be a positive integer")
        if self.damping < 0 or self.gain < 0:
            raise ConfigError("gain and damping must be non-negative")

    @property
    def steps_per_sample(self):
        return int(round(1.0 / (self.dt * self.sample_hz)))

    @property
    def n_samples(self):
        return int(np.floor(self.duration_s * self.sample_hz + 1e-9)) + 1

    def torque_model(self):
        return TorqueModel(
            variant=self.variant,
            gain=self.gain * np.eye(3),
            dipole=np.array([self.dipole_strength, 0.0, 0.0]),
            field_strength=np.array([0.0, 0.0, self.field_strength]),
            damping=self.damping,
        )

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    @classmethod
    def from_mapping(cls, values):
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown scenario key {key!r}")
            typ = known[key]
            try:
                if typ is str:
                    kwargs[key] = str(raw).strip()
                elif typ is int:
                    kwargs[key] = int(raw)
                else:
                    kwargs[key] = float(raw)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        return cls.from_mapping(read_key_values(path))


@dataclass(frozen=True, eq=False)
class SimulationResult:
    config: ScenarioConfig
    clean: RotationTrajectory
    observed: RotationTrajectory
    omega: np.ndarray
    inertia: np.ndarray


def _draw_physics(seed):
    rng = np.random.default_rng(seed)
    J = sample_inertia(rng)
    s0 = sample_initial_conditions(rng)
    return J, s0


def simulate_batch(configs):
    """Simulate many scenarios; configs sharing timing are stepped together."""
    configs = list(configs)
    results = [None] * len(configs)
    groups = {}
    for i, cfg in enumerate(configs):
        key = (cfg.variant, cfg.duration_s, cfg.dt, cfg.sample_hz, cfg.gain, cfg.damping,
               cfg.field_strength, cfg.dipole_strength)
        groups.setdefault(key, []).append(i)
    for idx in groups.values():
        cfg0 = configs[idx[0]]
        phys = [_draw_physics(configs[i].seed) for i in idx]
        J = np.stack([p[0] for p in phys])
        R0 = np.stack([p[1].R for p in phys])
        w0 = np.stack([p[1].omega for p in phys])
        every = cfg0.steps_per_sample
        n_steps = (cfg0.n_samples - 1) * every
        Rs, ws = rollout(R0, w0, J, cfg0.torque_model(), cfg0.dt, n_steps, every)
        times = np.arange(cfg0.n_samples) / cfg0.sample_hz
        for j, i in enumerate(idx):
            cfg = configs[i]
            clean = RotationTrajectory(times, Rs[:, j])
            noise_rng = np.random.default_rng([cfg.seed, 1])
            observed = corrupt(clean, cfg.noise_sigma, noise_rng)
            if cfg.drop_prob > 0 or cfg.jitter > 0:
                observed = subsample_irregular(observed, cfg.drop_prob, cfg.jitter, noise_rng)
            results[i] = SimulationResult(cfg, clean, observed, ws[:, j], J[j])
    return results


def simulate(config):
    """Ground-truth and observed trajectories for one seeded scenario."""
    return simulate_batch([config])[0]
