import numpy as np
import pytest

from sgncde import so3
from sgncde.errors import OutOfSupportError, SingularWindowError, WindowError
from sgncde.sgfilter import (
    SGCoefficients,
    SGWeights,
    WindowBank,
    build_window_system,
    eval_polynomial,
    fit_path,
    path_derivative_9d,
    path_value,
    solve_coefficients,
    solve_coefficients_grad,
)
from sgncde.trajectory import RotationTrajectory


def constant_traj(n_samples=15, dt=0.1, seed=0):
    R = so3.sample_uniform_rotation(np.random.default_rng(seed))
    return RotationTrajectory(np.arange(n_samples) * dt, np.repeat(R[None], n_samples, axis=0))


def window_traj(rho_star, n, dt, rng, jitter=0.0):
    """Noiseless samples ``Exp(p(t_m - t_k)) x_k`` around a centred anchor."""
    x_k = so3.sample_uniform_rotation(rng)
    times = np.arange(-n, n + 1) * dt
    if jitter:
        times = times + rng.uniform(-jitter, jitter, times.size) * dt
        times[n] = 0.0
    c = SGCoefficients.from_vector(rho_star, 0.0, x_k)
    rots = np.stack([so3.exp_so3(eval_polynomial(c, t)[0]) @ x_k for t in times])
    return RotationTrajectory(times, rots)


def single_axis_traj(n_samples, dt, axis, a, c, seed=0):
    """``x(t) = Exp((a t + c t^2 / 2) u) x0``; windows are exactly quadratic."""
    x0 = so3.sample_uniform_rotation(np.random.default_rng(seed))
    t = np.arange(n_samples) * dt
    angle = a * t + 0.5 * c * t * t
    return RotationTrajectory(t, so3.exp_so3(angle[:, None] * axis) @ x0), (a, c)


def random_rho_star(rng, scale=(0.0, 2.0, 5.0)):
    return np.concatenate([scale[0] * rng.normal(size=3), scale[1] * rng.normal(size=3),
                           scale[2] * rng.normal(size=3)])


def test_build_window_system_shapes_and_layout():
    traj = constant_traj(10, 0.1)
    sys = build_window_system(traj, 4, 2)
    m = np.arange(-2, 3)
    expected = np.stack([np.ones(5), m * 0.1, 0.5 * (m * 0.1) ** 2], axis=1)
    assert sys.A_hat.shape == (5, 3)
    assert np.allclose(sys.A_hat, expected, rtol=0, atol=1e-15)
    assert sys.A.shape == (15, 9)
    assert np.array_equal(sys.A, np.kron(sys.A_hat, np.eye(3)))
    assert np.array_equal(sys.b, np.zeros(15))


def test_boundary_windows_are_clipped():
    traj = constant_traj(10, 0.1)
    assert list(build_window_system(traj, 0, 3).offsets) == [0, 1, 2, 3]
    assert list(build_window_system(traj, 9, 3).offsets) == [-3, -2, -1, 0]


def test_near_antipodal_window_errors():
    times = np.arange(5) * 0.1
    rots = np.stack([np.eye(3)] * 4 + [np.diag([1.0, -1.0, -1.0])])
    with pytest.raises(WindowError) as exc:
        build_window_system(RotationTrajectory(times, rots), 2, 2)
    assert exc.value.index == 2


def test_solve_zero_rhs():
    sys = build_window_system(constant_traj(), 5, 3)
    assert np.array_equal(solve_coefficients(sys).rho, np.zeros(9))


@pytest.mark.parametrize("n", [2, 3, 5])
def test_exact_recovery(n):
    rng = np.random.default_rng(n)
    for _ in range(100):
        rho_star = random_rho_star(rng, scale=(0.0, 1.0, 3.0))
        traj = window_traj(rho_star, n, 0.04, rng, jitter=0.3)
        rho = solve_coefficients(build_window_system(traj, n, n)).rho
        assert np.abs(rho - rho_star).max() < 1e-8


def test_uniform_weights_match_unweighted():
    rng = np.random.default_rng(11)
    traj = window_traj(random_rho_star(rng), 3, 0.05, rng)
    noisy = RotationTrajectory(
        traj.times, so3.exp_so3(0.05 * rng.normal(size=(7, 3))) @ traj.rotations
    )
    sys = build_window_system(noisy, 3, 3)
    plain = solve_coefficients(sys).rho
    for c in [0.1, 1.0, 7.5]:
        w = SGWeights(np.full(7, np.log(np.expm1(c))))
        assert np.abs(solve_coefficients(sys, w).rho - plain).max() < 1e-10


def test_weight_scaling_invariance():
    rng = np.random.default_rng(12)
    traj = RotationTrajectory(
        np.arange(11) * 0.03, so3.exp_so3(0.3 * rng.normal(size=(11, 3)))
    )
    sys = build_window_system(traj, 5, 5)
    eff = np.exp(rng.normal(size=11))
    base = solve_coefficients(sys, SGWeights(np.log(np.expm1(eff)))).rho
    for c in [1e-2, 3.0, 50.0]:
        rho = solve_coefficients(sys, SGWeights(np.log(np.expm1(c * eff)))).rho
        assert np.abs(rho - base).max() < 1e-10


def test_singular_window():
    traj = constant_traj(5, 0.1)
    sys = build_window_system(traj, 0, 1)
    with pytest.raises(SingularWindowError):
        solve_coefficients(sys)


def test_eval_polynomial_examples():
    R = np.eye(3)
    c = SGCoefficients.from_vector(np.arange(9.0), 1.5, R)
    v, d = eval_polynomial(c, 1.5)
    assert np.array_equal(v, c.rho0) and np.array_equal(d, c.rho1)
    c = SGCoefficients.from_vector([0, 0, 0, 0, 0, 1, 0, 0, 0], 0.0, R)
    v, d = eval_polynomial(c, 2.0)
    assert np.array_equal(v, [0, 0, 2]) and np.array_equal(d, [0, 0, 1])
    c = SGCoefficients.from_vector([0, 0, 0, 0, 0, 0, 2, 0, 0], 0.0, R)
    v, d = eval_polynomial(c, 3.0)
    assert np.array_equal(v, [9, 0, 0]) and np.array_equal(d, [6, 0, 0])


def test_path_interpolates_noiseless_polynomial_data():
    axis = np.array([1.0, 2.0, -0.5]) / np.linalg.norm([1.0, 2.0, -0.5])
    traj, (a, c) = single_axis_traj(30, 0.025, axis, 1.3, -2.0)
    path = fit_path(traj, 5)
    for k, coeff in enumerate(path.coefficients):
        t_k = traj.times[k]
        assert np.abs(coeff.rho0).max() < 1e-8
        assert np.abs(coeff.rho1 - (a + c * t_k) * axis).max() < 1e-8
        assert np.abs(coeff.rho2 - c * axis).max() < 1e-8
        assert np.abs(path_value(path, t_k) - traj.rotations[k]).max() < 1e-9


def test_constant_trajectory_path():
    traj = constant_traj(12, 0.05)
    path = fit_path(traj, 3)
    assert all(np.array_equal(c.rho, np.zeros(9)) for c in path.coefficients)
    for t in np.linspace(0, traj.times[-1], 23):
        assert np.array_equal(path_value(path, t), traj.rotations[0])
        d = path_derivative_9d(path, t)
        assert np.array_equal(d, np.concatenate([[1.0], np.zeros(9)]))


def test_constant_velocity_extrapolation():
    rng = np.random.default_rng(13)
    omega = np.array([0.7, -1.1, 2.0])
    x0 = so3.sample_uniform_rotation(rng)
    dt = 0.025
    t = np.arange(20) * dt
    traj = RotationTrajectory(t, so3.exp_so3(t[:, None] * omega) @ x0)
    path = fit_path(traj, 5)
    expected = so3.exp_so3(omega * dt) @ traj.rotations[-1]
    assert np.abs(path_value(path, t[-1] + dt) - expected).max() < 1e-6


def test_out_of_support():
    path = fit_path(constant_traj(8, 0.1), 2)
    with pytest.raises(OutOfSupportError):
        path_value(path, -0.01)
    path.extrapolate = False
    with pytest.raises(OutOfSupportError):
        path_value(path, 0.8)


def test_anchor_selection_nearest_ties_low():
    path = fit_path(constant_traj(5, 0.1), 2)
    assert path.anchor_index(0.05) == 0
    assert path.anchor_index(0.0500001) == 1
    assert path.anchor_index(0.34) == 3
    assert path.anchor_index(5.0) == 4


def noisy_path(seed, n_samples=25, sigma=0.1):
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.uniform(0.02, 0.04, n_samples))
    omega = rng.normal(size=3) * 2
    clean = so3.exp_so3(t[:, None] * omega) @ so3.sample_uniform_rotation(rng)
    noisy = so3.exp_so3(sigma * rng.normal(size=(n_samples, 3))) @ clean
    traj = RotationTrajectory(t, noisy)
    w = SGWeights(rng.normal(size=11))
    return traj, fit_path(traj, 5, w)


def test_path_derivative_matches_finite_differences():
    traj, path = noisy_path(14)
    rng = np.random.default_rng(15)
    h = 1e-5
    switches = path.switch_times()
    for t in rng.uniform(traj.times[0] + 2 * h, traj.times[-1] + 0.2, 100):
        if np.min(np.abs(switches - t)) < 2 * h:
            continue
        d = path_derivative_9d(path, t)
        fd = (so3.to_9d(path_value(path, t + h)) - so3.to_9d(path_value(path, t - h))) / (2 * h)
        assert d[0] == 1.0
        assert np.linalg.norm(d[1:] - fd) <= 1e-5 * np.linalg.norm(fd)
        phi = path_value(path, t)
        dphi = so3.from_9d(d[1:])
        assert np.linalg.norm(dphi @ phi.T + phi @ dphi.T) < 1e-8
        assert so3.is_rotation(phi)


def test_solve_grad_zero_upstream():
    traj, _ = noisy_path(16)
    sys = build_window_system(traj, 3, 5)
    assert np.array_equal(solve_coefficients_grad(sys, SGWeights.uniform(5), np.zeros(9)),
                          np.zeros(11))


def fd_grad(sys, w, u, h=1e-6):
    out = np.zeros_like(w.raw)
    for i in range(w.raw.size):
        wp, wm = w.copy(), w.copy()
        wp.raw[i] += h
        wm.raw[i] -= h
        out[i] = u @ (solve_coefficients(sys, wp).rho - solve_coefficients(sys, wm).rho) / (2 * h)
    return out


def test_solve_grad_matches_finite_differences():
    rng = np.random.default_rng(17)
    for trial in range(10):
        times = np.cumsum(rng.uniform(0.5, 1.5, 7))
        traj = RotationTrajectory(times, so3.exp_so3(0.4 * rng.normal(size=(7, 3))))
        k = 1 + trial % 5  # k=0 and k=6 clip to 3 points: an exact fit
        sys = build_window_system(traj, k, 2)
        w = SGWeights(rng.normal(size=5))
        u = rng.normal(size=9)
        g = solve_coefficients_grad(sys, w, u)
        fd = fd_grad(sys, w, u)
        floor = 1e-6 * np.abs(fd).max()
        assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), floor)) < 1e-5


def test_solve_grad_zero_for_exact_fit():
    rng = np.random.default_rng(18)
    traj = window_traj(random_rho_star(rng, (0.0, 1.0, 2.0)), 2, 0.1, rng)
    sys = build_window_system(traj, 2, 2)
    g = solve_coefficients_grad(sys, SGWeights.uniform(2), rng.normal(size=9))
    assert np.abs(g).max() < 1e-8


def test_window_bank_matches_per_anchor_path():
    rng = np.random.default_rng(19)
    trajs = [noisy_path(s, n_samples=20)[0] for s in range(3)]
    times = np.stack([t.times for t in trajs])
    rots = np.stack([t.rotations for t in trajs])
    w = SGWeights(rng.normal(size=11))
    bank = WindowBank(times, rots, 5)
    rho = bank.solve(w.raw)
    G = rng.normal(size=rho.shape)
    grad = np.zeros(11)
    for b, traj in enumerate(trajs):
        for k in range(20):
            sys = build_window_system(traj, k, 5)
            assert np.abs(solve_coefficients(sys, w).rho - rho[b, k]).max() < 1e-9
            grad += solve_coefficients_grad(sys, w, G[b, k])
    assert np.allclose(bank.vjp(w.raw, G), grad, rtol=1e-8, atol=1e-10)


def test_filtering_reduces_noise():
    rng = np.random.default_rng(20)
    raw_err, filt_err = [], []
    for _ in range(100):
        omega = rng.normal(size=3)
        t = np.arange(30) * 0.025
        clean = so3.exp_so3(t[:, None] * omega) @ so3.sample_uniform_rotation(rng)
        noisy = so3.exp_so3(0.05 * rng.normal(size=(30, 3))) @ clean
        path = fit_path(RotationTrajectory(t, noisy), 5)
        filt = np.stack([path_value(path, tk) for tk in t])
        raw_err.append(so3.geodesic_error(noisy, clean).mean())
        filt_err.append(so3.geodesic_error(filt, clean).mean())
    assert np.mean(filt_err) < np.mean(raw_err)
