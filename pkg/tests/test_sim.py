import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshfuse.core import ContractError
from meshfuse.mesh import MeshConfig, OutlierModel, RangeSample, simulate_mesh
from meshfuse.models import GRAVITY, BaroParams, ImuNoise, RangeBiasTable, pressure_to_height
from meshfuse.sim import (
    NEES_BOUND_3DOF,
    Trajectory,
    TrajectorySpec,
    average_nees_interval,
    compute_nees,
    evaluate_ranges,
    fit_error_distribution,
    generate_trajectory,
    orientation_rmse_deg,
    position_rmse,
    synthesize_baro,
    synthesize_imu,
    trajectory_errors,
)
from oracles import reintegrate


@pytest.fixture(scope="module")
def gt():
    return generate_trajectory()


class TestTrajectory:
    def test_rest_boundaries(self, gt):
        np.testing.assert_allclose(gt.v[0], 0.0, atol=1e-12)
        np.testing.assert_allclose(gt.v[-1], 0.0, atol=1e-12)
        np.testing.assert_allclose(gt.p[0], gt.p[-1], atol=1e-9)

    def test_top_height(self, gt):
        assert gt.p[:, 2].max() == pytest.approx(TrajectorySpec().top_height, abs=1e-9)
        assert gt.p[:, 2].min() == pytest.approx(0.0, abs=1e-12)

    def test_duration_and_phases(self, gt):
        spec = TrajectorySpec()
        assert spec.duration == 140.0
        np.testing.assert_allclose(spec.phase_times, [5, 15, 115, 130, 140])
        assert len(gt) == 14001

    def test_velocity_matches_position_differences(self):
        traj = Trajectory(TrajectorySpec())
        t = np.arange(0.0, 140.0, 1e-3)
        ks = traj.evaluate(t)
        v_fd = np.gradient(ks.p, t, axis=0, edge_order=2)
        moving = np.linalg.norm(ks.v, axis=1) > 0.05
        rel = np.linalg.norm(v_fd[moving] - ks.v[moving], axis=1) / np.linalg.norm(ks.v[moving], axis=1)
        assert rel.max() < 1e-4
        a_fd = np.gradient(ks.v, t, axis=0, edge_order=2)
        assert np.max(np.abs(a_fd - ks.a)) < 1e-4

    def test_body_rate_matches_attitude_differences(self):
        traj = Trajectory(TrajectorySpec())
        t = np.linspace(20.0, 100.0, 50)
        h = 1e-5
        R0, R1 = traj.evaluate(t - h).R, traj.evaluate(t + h).R
        # R^T dR/dt = skew(omega)
        W = np.einsum("nji,njk->nik", traj.evaluate(t).R, (R1 - R0) / (2 * h))
        omega_fd = np.stack([W[:, 2, 1], W[:, 0, 2], W[:, 1, 0]], axis=1)
        np.testing.assert_allclose(omega_fd, traj.evaluate(t).omega, atol=1e-7)

    def test_spec_contracts(self):
        with pytest.raises(ContractError):
            TrajectorySpec(top_height=20.0)
        with pytest.raises(ContractError):
            TrajectorySpec(spiral_duration=0.0)
        with pytest.raises(ContractError):
            TrajectorySpec(rate=30.0)

    def test_point_at_interpolates(self, gt):
        p = gt.point_at(0.5 * (gt.t[100] + gt.t[101]))
        np.testing.assert_allclose(p, 0.5 * (gt.p[100] + gt.p[101]))
        assert gt.point_at(-1.0) is None and gt.point_at(1e4) is None


class TestImuSynthesis:
    def test_hover_reading_is_reaction_to_gravity(self):
        traj = Trajectory(TrajectorySpec())
        readings, _, _ = synthesize_imu(traj, rate=100.0, t_end=4.0)
        for r in readings:
            np.testing.assert_allclose(r.acc, [0.0, 0.0, GRAVITY], atol=1e-12)
            np.testing.assert_allclose(r.gyro, 0.0, atol=1e-12)

    def test_sample_count(self):
        traj = Trajectory(TrajectorySpec())
        readings, b_w, b_a = synthesize_imu(traj, rate=200.0)
        assert abs(len(readings) - 140.0 * 200.0) <= 1
        assert b_w.shape == b_a.shape == (len(readings), 3)
        with pytest.raises(ContractError):
            synthesize_imu(traj, rate=50.0)

    def test_noiseless_reintegration_recovers_trajectory(self):
        traj = Trajectory(TrajectorySpec())
        readings, _, _ = synthesize_imu(traj, rate=1000.0)
        k0 = traj.evaluate(0.0)
        from meshfuse.core import rotmat_to_quat

        p, v, _ = reintegrate(readings, k0.p[0], k0.v[0], rotmat_to_quat(k0.R[0]))
        assert np.linalg.norm(p - traj.evaluate(readings[-1].t).p[0]) < 1e-3

    def test_noise_statistics(self):
        traj = Trajectory(TrajectorySpec())
        noise = ImuNoise(acc_noise=0.05, gyro_noise=0.005, acc_bias_walk=0.0, gyro_bias_walk=0.0)
        readings, _, _ = synthesize_imu(traj, 100.0, noise, np.random.default_rng(0), t_end=4.9)
        acc = np.array([r.acc for r in readings]) - [0, 0, GRAVITY]
        assert np.std(acc) == pytest.approx(0.05 * np.sqrt(100.0), rel=0.1)

    def test_seeded_determinism(self):
        traj = Trajectory(TrajectorySpec())
        a, _, _ = synthesize_imu(traj, 100.0, ImuNoise(), np.random.default_rng(3), t_end=2.0)
        b, _, _ = synthesize_imu(traj, 100.0, ImuNoise(), np.random.default_rng(3), t_end=2.0)
        assert all(np.array_equal(x.acc, y.acc) for x, y in zip(a, b))


def test_baro_synthesis_matches_height():
    traj = Trajectory(TrajectorySpec())
    params = BaroParams(p_IP=np.array([0.0, 0.0, 0.1]))
    data = synthesize_baro(traj, params, rate=10.0, sigma_p=0.0)
    h = pressure_to_height(data[:, 1], 101325.0, params.reference_temperature)
    ks = traj.evaluate(data[:, 0])
    np.testing.assert_allclose(h, ks.p[:, 2] + ks.R[:, 2, :] @ params.p_IP, atol=1e-6)


def _range_stream(gamma=0.2, sigma=0.0, outliers=0.0, seed=0, t_end=40.0, nodes=(100, 101, 102)):
    gt = generate_trajectory()
    anchors = {101: np.array([-6.0, 0.0, 1.0]), 102: np.array([6.0, 6.0, 3.0])}
    tags = {100: np.array([0.15, 0.0, 0.05])}
    biases = RangeBiasTable({(100, 101): (gamma, 1.0)})
    pos = lambda n, t: anchors[n] if n in anchors else gt.point_at(t, tags[n])
    samples = list(simulate_mesh(MeshConfig(list(nodes), 0.01), pos, 0.0, t_end, biases, sigma,
                                 OutlierModel(outliers), np.random.default_rng(seed)))
    return samples, gt, anchors, tags


class TestRangeEvaluation:
    def test_noiseless_constant_bias(self):
        samples, gt, anchors, tags = _range_stream()
        ev = evaluate_ranges(samples, gt, anchors, tags)
        assert ev.pairs[(100, 101)].gamma == pytest.approx(0.2, abs=1e-9)
        assert ev.pairs[(101, 100)].gamma == pytest.approx(0.2, abs=1e-9)
        assert ev.pairs[(100, 102)].gamma == pytest.approx(0.0, abs=1e-9)
        assert len(ev.pairs) == 6

    def test_noise_level(self):
        samples, gt, anchors, tags = _range_stream(0.0, 0.1, t_end=140.0, nodes=(100, 101))
        st_ = evaluate_ranges(samples, gt, anchors, tags).pairs[(100, 101)]
        assert st_.n >= 5000
        assert 0.09 <= st_.sigma <= 0.11

    def test_outlier_count(self):
        samples, gt, anchors, tags = _range_stream(0.0, 0.1, 0.15, t_end=140.0)
        for st_ in evaluate_ranges(samples, gt, anchors, tags).pairs.values():
            assert 0.12 * st_.n_total <= st_.n_outliers <= 0.18 * st_.n_total

    def test_gate_and_skipped(self):
        samples, gt, anchors, tags = _range_stream(t_end=1.0)
        samples.append(RangeSample(0.5, 100, 101, 50.0))
        samples.append(RangeSample(500.0, 100, 101, 5.0))
        samples.append(RangeSample(0.5, 100, 999, 5.0))
        ev = evaluate_ranges(samples, gt, anchors, tags)
        assert ev.skipped == 2
        assert ev.pairs[(100, 101)].n_gated == 1
        with pytest.raises(ContractError):
            evaluate_ranges(samples, gt, anchors, tags, bin_width=0.0)

    def test_histogram_bin_width(self):
        samples, gt, anchors, tags = _range_stream(0.0, 0.1, t_end=20.0)
        st_ = evaluate_ranges(samples, gt, anchors, tags, bin_width=0.02).pairs[(100, 101)]
        counts, edges = st_.histogram
        np.testing.assert_allclose(np.diff(edges), 0.02)
        assert counts.sum() == st_.n

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 1000))
    def test_fit_is_order_invariant(self, seed):
        rng = np.random.default_rng(seed)
        e = np.concatenate([rng.normal(0.1, 0.1, 300), rng.uniform(0.5, 3.0, 40)])
        a = fit_error_distribution(e)
        b = fit_error_distribution(rng.permutation(e))
        assert a["gamma"] == b["gamma"] and a["sigma"] == b["sigma"] and a["n"] == b["n"]


class TestNees:
    def test_examples(self):
        assert compute_nees(np.zeros(3), np.eye(3)) == 0.0
        assert compute_nees(np.ones(3), np.eye(3)) == pytest.approx(3.0)
        assert NEES_BOUND_3DOF == pytest.approx(13.93, abs=0.01)
        with pytest.raises(ContractError):
            compute_nees(np.ones(3), np.zeros((3, 3)))
        with pytest.raises(ContractError):
            compute_nees(np.ones(3), np.eye(2))

    def test_monte_carlo_consistency(self):
        rng = np.random.default_rng(42)
        A = rng.normal(size=(3, 3))
        P = A @ A.T + 0.1 * np.eye(3)
        L = np.linalg.cholesky(P)
        lo, hi = average_nees_interval(3, 50)
        assert lo < 3.0 < hi
        # each 50-run average falls inside the 95% interval 95% of the time
        inside = []
        for _ in range(200):
            nees = [compute_nees(L @ rng.standard_normal(3), P) for _ in range(50)]
            inside.append(lo <= np.mean(nees) <= hi)
        assert 0.90 <= np.mean(inside) <= 0.99


def test_ground_truth_as_estimate_gives_zero_error(gt):
    means = np.hstack([gt.p, gt.v, gt.q, np.zeros((len(gt), 6))])
    pos, rot = trajectory_errors(gt.t[::10], means[::10], gt)
    assert pos == 0.0 and rot == pytest.approx(0.0, abs=1e-12)
    assert position_rmse(gt.p, gt.p) == 0.0
    assert orientation_rmse_deg(gt.q[:5], gt.q[:5]) == pytest.approx(0.0, abs=1e-12)


def test_orientation_rmse_known_angle():
    from meshfuse.core import quat_exp

    q1 = quat_exp(np.array([0.0, 0.0, np.radians(10.0)]))
    assert orientation_rmse_deg(q1[None], np.array([[1.0, 0, 0, 0]])) == pytest.approx(10.0)
