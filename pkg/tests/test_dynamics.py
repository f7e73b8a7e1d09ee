import numpy as np
import pytest
from scipy import stats

from sgncde import so3
from sgncde.dynamics import (
    ScenarioConfig,
    SimState,
    TorqueModel,
    check_inertia,
    corrupt,
    draw_angular_velocity,
    rollout,
    sample_inertia,
    sample_initial_conditions,
    sample_principal_moments,
    simulate,
    simulate_batch,
    step,
    subsample_irregular,
    torque,
)
from sgncde.errors import ConfigError
from sgncde.trajectory import RotationTrajectory

HAAR_CDF = lambda x: (x - np.sin(x)) / np.pi  # noqa: E731


def state(R=None, w=(0.0, 0.0, 0.0)):
    return SimState(np.eye(3) if R is None else R, np.asarray(w, float))


def test_torque_examples():
    rng = np.random.default_rng(0)
    s = state(so3.sample_uniform_rotation(rng), rng.normal(size=3))
    assert np.array_equal(torque(TorqueModel("free"), s), np.zeros(3))
    assert np.allclose(torque(TorqueModel("damped", damping=0.5), state(w=(2, 0, 0))), [-1, 0, 0])
    R = so3.sample_uniform_rotation(rng)
    B = np.array([0.3, -0.2, 0.9])
    aligned = TorqueModel("config_dependent", dipole=2.0 * R.T @ B, field_strength=B)
    assert np.abs(torque(aligned, state(R))).max() < 1e-15
    K = np.diag([1.0, 2.0, 3.0])
    assert np.allclose(torque(TorqueModel("linear_control", gain=K), state(w=(1, 1, 1))),
                       [-1, -2, -3])


def test_damped_torque_dissipative():
    rng = np.random.default_rng(1)
    m = TorqueModel("damped", damping=0.3)
    for w in rng.normal(size=(100, 3)):
        assert torque(m, state(w=w)) @ w <= 0


def test_equilibrium_is_fixed():
    R = so3.exp_so3([0.2, 0.1, -0.3])
    s = step(state(R), np.diag([1.0, 2.0, 2.5]), TorqueModel("free"), 0.01)
    assert np.abs(s.R - R).max() < 1e-15
    assert np.array_equal(s.omega, np.zeros(3))


def test_principal_axis_spin_closed_form():
    s = state(w=(0.0, 0.0, 1.0))
    for _ in range(100):
        s = step(s, np.eye(3), TorqueModel("free"), 0.01)
    assert np.abs(s.R - so3.exp_so3([0, 0, 1.0])).max() < 1e-8
    assert abs(s.t - 1.0) < 1e-12


def test_spin_about_eigen_axis_keeps_omega():
    rng = np.random.default_rng(2)
    for _ in range(5):
        J = sample_inertia(rng)
        lam, V = np.linalg.eigh(J)
        w0 = 2.0 * V[:, 1]
        _, ws = rollout(np.eye(3), w0, J, TorqueModel("free"), 1e-3, 2000)
        assert np.abs(ws - w0).max() < 1e-9


def kinetic_energy(J, w):
    return 0.5 * np.einsum("...i,...ij,...j->...", w, J, w)


def test_free_rigid_body_conservation():
    rng = np.random.default_rng(3)
    J = np.stack([sample_inertia(rng) for _ in range(20)])
    R0 = so3.sample_uniform_rotation(rng, 20)
    w0 = np.stack([sample_initial_conditions(rng).omega for _ in range(20)])
    Rs, ws = rollout(R0, w0, J, TorqueModel("free"), 1e-3, 10_000)
    energy = kinetic_energy(J, ws)
    momentum = np.linalg.norm((Rs @ (J @ ws[..., None]))[..., 0], axis=-1)
    assert np.max(np.abs(energy / energy[0] - 1)) < 1e-6
    assert np.max(np.abs(momentum / momentum[0] - 1)) < 1e-6
    ortho = np.linalg.norm(np.swapaxes(Rs, -1, -2) @ Rs - np.eye(3), axis=(-2, -1))
    assert ortho.max() < 1e-9


def test_world_angular_momentum_vector_conserved():
    rng = np.random.default_rng(4)
    J = sample_inertia(rng)
    s = sample_initial_conditions(rng)
    Rs, ws = rollout(s.R, s.omega, J, TorqueModel("free"), 1e-3, 3000)
    L = (Rs @ (J @ ws[..., None]))[..., 0]
    assert np.abs(L - L[0]).max() < 1e-6 * np.linalg.norm(L[0])


def test_intermediate_axis_instability():
    J = np.diag([1.0, 2.0, 3.0])
    model = TorqueModel("free")
    base = np.array([0.0, 3.0, 0.0])
    R_ref, _ = rollout(np.eye(3), base, J, model, 1e-3, 10_000, every=10)
    R_per, _ = rollout(np.eye(3), base + 1e-3 * np.array([1.0, 0.0, 1.0]), J, model, 1e-3,
                       10_000, every=10)
    assert so3.geodesic_error(R_ref, R_per).max() > 0.5


def test_sample_inertia_valid_and_spectrum():
    for seed in range(200):
        J = sample_inertia(np.random.default_rng(seed))
        assert check_inertia(J)
        r = np.random.default_rng(seed)
        lam, _ = sample_principal_moments(r)
        assert np.allclose(np.linalg.eigvalsh(J), np.sort(lam), atol=1e-10, rtol=0)


def test_triangle_rejection_rate_below_half():
    rng = np.random.default_rng(6)
    rejected = sum(sample_principal_moments(rng)[1] for _ in range(20_000))
    assert rejected / (rejected + 20_000) < 0.5


def test_initial_conditions_rejection():
    rng = np.random.default_rng(7)
    attempts = 0
    for _ in range(100_000):
        w, a = draw_angular_velocity(rng, 0.5, 2.0)
        assert np.linalg.norm(w) >= 0.5
        attempts += a
    expected = 1.0 - stats.chi(3).cdf(0.5 / 2.0)
    assert abs(100_000 / attempts - expected) < 0.02


def test_initial_rotation_uniform():
    rng = np.random.default_rng(8)
    Rs = np.stack([sample_initial_conditions(rng, 0.5).R for _ in range(20_000)])
    assert stats.kstest(so3.rotation_angle(Rs), HAAR_CDF).statistic < 0.015
    assert all(np.linalg.norm(sample_initial_conditions(rng, 1.5).omega) >= 1.5
               for _ in range(200))


def test_simulate_damped_speed_decreases():
    res = simulate(ScenarioConfig(variant="damped", duration_s=10.0, damping=0.4, seed=3))
    speed = np.linalg.norm(res.omega, axis=1)
    assert np.all(np.diff(speed) <= 1e-12)
    assert speed[-1] < 0.5 * speed[0]


def test_simulate_timestamps_and_determinism():
    cfg = ScenarioConfig(variant="config_dependent", duration_s=1.0, sample_hz=40, seed=11,
                         noise_sigma=0.05, drop_prob=0.2, jitter=0.002)
    a, b = simulate(cfg), simulate(cfg)
    assert np.allclose(np.diff(a.clean.times), 1 / 40, rtol=0, atol=1e-12)
    assert len(a.clean) == 41
    assert np.all(np.diff(a.observed.times) > 0)
    assert a.clean.equals(b.clean) and a.observed.equals(b.observed)
    assert so3.is_rotation(a.clean.rotations)


def test_simulate_batch_matches_single():
    cfgs = [ScenarioConfig(variant="linear_control", duration_s=0.5, seed=s) for s in range(4)]
    batch = simulate_batch(cfgs)
    for cfg, res in zip(cfgs, batch):
        assert res.clean.equals(simulate(cfg).clean)


@pytest.mark.parametrize("bad", [dict(variant="bogus"), dict(dt=0.0), dict(drop_prob=1.0),
                                 dict(sample_hz=33.0)])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        ScenarioConfig(**bad)


def test_config_from_file(tmp_path):
    p = tmp_path / "s.cfg"
    p.write_text("# scenario\nvariant = damped\nduration_s = 2\nseed = 4  # trailing\n")
    cfg = ScenarioConfig.from_file(p)
    assert cfg.variant == "damped" and cfg.duration_s == 2.0 and cfg.seed == 4
    p.write_text("nonsense = 1\n")
    with pytest.raises(ConfigError):
        ScenarioConfig.from_file(p)


def traj_for_noise(n=10_000):
    rng = np.random.default_rng(9)
    return RotationTrajectory(np.arange(n) * 0.01, so3.sample_uniform_rotation(rng, n))


def test_corrupt():
    traj = traj_for_noise()
    rng = np.random.default_rng(10)
    same = corrupt(traj, 0.0, rng)
    assert same.equals(traj)
    noisy = corrupt(traj, 0.05, rng)
    assert so3.is_rotation(noisy.rotations)
    err = so3.geodesic_error(noisy.rotations, traj.rotations).mean()
    expected = 0.05 * stats.chi(3).mean()
    assert abs(err / expected - 1) < 0.05


def test_subsample_irregular():
    traj = traj_for_noise()
    rng = np.random.default_rng(11)
    assert subsample_irregular(traj, 0.0, 0.0, rng).equals(traj)
    out = subsample_irregular(traj, 0.3, 0.01, rng)
    assert np.all(np.diff(out.times) > 0)
    assert abs(len(out) / len(traj) - 0.7) < 0.02
