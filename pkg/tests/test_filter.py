import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshfuse.core import Belief, ContractError, MeasurementRecord
from meshfuse.filter import (
    DuplicateInstanceError,
    InstanceHandler,
    SensorType,
    Strategy,
    UnknownInstanceError,
)
from meshfuse.models import ImuReading, ImuState, range_observation_anchor_anchor
from oracles import (
    build_handler,
    compare_with_monolithic,
    random_stream,
    run_handler,
    run_monolithic,
    to_record,
)


def _event_time(ev):
    return ev[1].t if ev[0] == "imu" else ev[1]


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dp_matches_monolithic_ekf(seed):
    init, events = random_stream(seed, n_anchors=3, duration=0.6)
    h = run_handler(init, events, "dp")
    assert compare_with_monolithic(h, run_monolithic(init, events)) < 1e-9


def test_dah_equals_dp_when_every_update_involves_all_states():
    init, events = random_stream(5, n_anchors=1, late_anchor=False)
    events = [e for e in events if e[0] == "imu" or (e[0] == "range" and e[2] == 100)]
    assert sum(e[0] == "range" for e in events) > 20
    dp = run_handler(init, events, "dp")
    dah = run_handler(init, events, "dah")
    _, m1, P1 = dp.joint()
    _, m2, P2 = dah.joint()
    assert np.max(np.abs(m1 - m2)) < 1e-12 and np.max(np.abs(P1 - P2)) < 1e-12


def _static_handler(strategy):
    init, _ = random_stream(2, n_anchors=3, late_anchor=False)
    h = build_handler(init, strategy)
    h.propagate(ImuReading(0.0, [0, 0, 9.81], [0, 0, 0]))
    return h


def test_dah_leaves_uninvolved_beliefs_untouched():
    h = _static_handler("dah")
    # correlate everything first
    h.update(MeasurementRecord(0.01, 100, [5.0], [[0.09]], other_id=101))
    h.update(MeasurementRecord(0.02, 100, [5.0], [[0.09]], other_id=102))
    h.update(MeasurementRecord(0.03, 100, [5.0], [[0.09]], other_id=103))
    imu_before = h.belief(1)
    other_before = h.belief(103)
    assert h.update(MeasurementRecord(0.03, 101, [7.0], [[0.09]], other_id=102))
    assert h.belief(1) is imu_before
    assert h.belief(103) is other_before


def test_dah_factor_correction():
    h = _static_handler("dah")
    for k, a in enumerate((101, 102, 103)):
        h.update(MeasurementRecord(0.01 * (k + 1), 100, [5.0], [[0.09]], other_id=a))
    ids, _, P = h.joint([101, 102])
    bias = h.biases.get(101, 102, (0.0, 1.0))
    obs = range_observation_anchor_anchor(h.belief(101).mean, h.belief(102).mean, bias, 7.0, 0.3,
                                          anchor_i=101, anchor_j=102)
    H = np.hstack([obs.blocks[101], obs.blocks[102]])
    K = P @ H.T @ np.linalg.inv(H @ P @ H.T + obs.R)
    old = {(i, k): h.cross_covariance(i, k) for i in (101, 102) for k in (1, 103)}
    h.update(MeasurementRecord(0.03, 101, [7.0], [[0.09]], other_id=102))
    for a, i in enumerate((101, 102)):
        M = np.eye(3) - K[3 * a:3 * a + 3] @ H[:, 3 * a:3 * a + 3]
        for k in (1, 103):
            np.testing.assert_allclose(h.cross_covariance(i, k), M @ old[i, k], atol=1e-12)


def test_dp_is_centralized_after_partial_updates():
    h = _static_handler("dp")
    h.update(MeasurementRecord(0.01, 101, [7.0], [[0.09]], other_id=102))
    before = h.belief(103)
    h.update(MeasurementRecord(0.02, 100, [5.0], [[0.09]], other_id=101))
    # DP writes every belief, including uninvolved ones
    assert h.belief(103) is not before


class TestRegistry:
    def test_duplicate_and_unknown(self):
        h = _static_handler("dah")
        with pytest.raises(DuplicateInstanceError):
            h.register_instance(101, SensorType.UWB_ANCHOR, Belief(101, 0.0, np.zeros(3), np.eye(3)))
        with pytest.raises(UnknownInstanceError):
            h.instance(999)
        with pytest.raises(UnknownInstanceError):
            h.update(MeasurementRecord(0.5, 100, [5.0], [[0.09]], other_id=999))
        with pytest.raises(UnknownInstanceError):
            h.remove_instance(999)

    def test_contracts(self):
        h = InstanceHandler("dp")
        with pytest.raises(ContractError):
            h.propagate(ImuReading(0.0, [0, 0, 9.81], [0, 0, 0]))
        with pytest.raises(ContractError):
            h.register_instance(0, SensorType.UWB_TAG)
        with pytest.raises(ContractError):
            h.register_instance(5, SensorType.UWB_ANCHOR)
        with pytest.raises(ContractError):
            h.register_instance(5, SensorType.UWB_ANCHOR, Belief(5, 0.0, np.zeros(4), np.eye(4)))
        with pytest.raises(ContractError):
            h.register_instance(5, SensorType.UWB_ANCHOR, Belief(5, 0.0, np.zeros(3), -np.eye(3)))
        with pytest.raises(ContractError):
            h.register_instance(1, SensorType.IMU, Belief(1, 0.0, np.zeros(3), np.eye(3)))
        h.register_instance(1, SensorType.IMU, Belief(1, 0.0, ImuState().to_vector(), np.eye(15)))
        with pytest.raises(ContractError):
            h.register_instance(2, SensorType.IMU, Belief(2, 0.0, ImuState().to_vector(), np.eye(15)))
        with pytest.raises(ContractError):
            h.remove_instance(1)
        with pytest.raises(ValueError):
            InstanceHandler("central")

    def test_register_mid_run_starts_uncorrelated(self):
        h = _static_handler("dah")
        h.propagate(ImuReading(0.5, [0, 0, 9.81], [0, 0, 0]))
        h.register_instance(150, SensorType.UWB_ANCHOR, Belief(150, 0.0, np.array([1.0, 2.0, 3.0]), np.eye(3)))
        assert h.instance(150).registered_at == 0.5
        for j in (1, 101, 102, 103):
            np.testing.assert_array_equal(h.cross_covariance(150, j), 0.0)
        assert h.stateful_ids() == [1, 101, 102, 103, 150]

    def test_remove_drops_factors(self):
        h = _static_handler("dah")
        h.update(MeasurementRecord(0.01, 100, [5.0], [[0.09]], other_id=101))
        h.remove_instance(101)
        assert 101 not in h.instance(1).factor_table
        assert h.stateful_ids() == [1, 102, 103]
        assert h.update(MeasurementRecord(0.02, 100, [5.0], [[0.09]], other_id=102))

    def test_stateless_instances_carry_no_belief(self):
        h = _static_handler("dah")
        assert h.instance(100).dim == 0
        with pytest.raises(ContractError):
            h.belief(100)


def test_imu_out_of_order_raises():
    h = _static_handler("dah")
    h.propagate(ImuReading(0.1, [0, 0, 9.81], [0, 0, 0]))
    with pytest.raises(ContractError):
        h.propagate(ImuReading(0.05, [0, 0, 9.81], [0, 0, 0]))
    assert h.diagnostics["imu_out_of_sequence"] == 1


def _arrival_order(events, seed, max_delay):
    rng = np.random.default_rng(seed)
    arrivals = []
    for k, ev in enumerate(events):
        t = _event_time(ev)
        delay = 0.0 if ev[0] == "imu" else rng.uniform(0.0, max_delay)
        arrivals.append((t + delay, 0 if ev[0] == "imu" else 1, k))
    return [events[k] for _, _, k in sorted(arrivals)]


@pytest.mark.parametrize("strategy", ["dp", "dah"])
def test_out_of_sequence_replay_matches_in_order(strategy):
    init, events = random_stream(9, n_anchors=3, duration=2.0, late_anchor=False)
    ref = run_handler(init, events, strategy)
    shuffled = run_handler(init, _arrival_order(events, 1, 0.3), strategy)
    assert shuffled.diagnostics["replayed"] > 10
    _, m1, P1 = ref.joint()
    _, m2, P2 = shuffled.joint()
    assert np.max(np.abs(m1 - m2)) < 1e-9 and np.max(np.abs(P1 - P2)) < 1e-9


def test_stale_measurement_is_dropped():
    init, events = random_stream(3, duration=0.2, late_anchor=False)
    h = build_handler(init, "dah", history_window=5.0)
    for k in range(701):
        h.propagate(ImuReading(k * 0.01, [0, 0, 9.81], [0, 0, 0]))
    before = h.belief(1)
    assert not h.update(MeasurementRecord(1.0, 100, [5.0], [[0.09]], other_id=101))
    assert h.diagnostics["dropped_stale"] == 1
    assert h.belief(1) is before


def test_measurement_before_registration_is_dropped():
    h = _static_handler("dah")
    h.propagate(ImuReading(1.0, [0, 0, 9.81], [0, 0, 0]))
    h.register_instance(150, SensorType.UWB_ANCHOR, Belief(150, 1.0, np.array([4.0, 0.0, 0.0]), np.eye(3)))
    h.propagate(ImuReading(1.1, [0, 0, 9.81], [0, 0, 0]))
    assert not h.update(MeasurementRecord(0.9, 100, [4.0], [[0.09]], other_id=150))
    assert h.diagnostics["dropped_stale"] == 1
    assert h.update(MeasurementRecord(1.05, 100, [4.0], [[0.09]], other_id=150))


def test_history_is_truncated_to_window():
    h = _static_handler("dah")
    for k in range(1, 1001):
        h.propagate(ImuReading(k * 0.01, [0, 0, 9.81], [0, 0, 0]))
    assert h.instance(1).belief_history.oldest_time >= 10.0 - 5.0 - 0.6


def test_gate_rejects_gross_outlier():
    init, _ = random_stream(2, n_anchors=3, late_anchor=False)
    h = build_handler(init, "dah", gate_probability=0.999)
    h.propagate(ImuReading(0.0, [0, 0, 9.81], [0, 0, 0]))
    assert not h.update(MeasurementRecord(0.01, 100, [500.0], [[0.01]], other_id=101))
    assert h.diagnostics["gated"] == 1


def test_geometry_rejection_counted():
    h = _static_handler("dah")
    p = h.belief(1).mean[0:3]
    h.register_instance(150, SensorType.UWB_ANCHOR, Belief(150, 0.0, p + [0.0, 0.0, 0.01], np.eye(3) * 0.01))
    h.instance(100).constants["p_IT"] = np.zeros(3)
    assert not h.update(MeasurementRecord(0.01, 100, [0.05], [[0.09]], other_id=150))
    assert h.diagnostics["rejected_geometry"] == 1


def test_tag_tag_range_is_skipped_and_missing_bias_counted():
    h = _static_handler("dah")
    h.register_instance(105, SensorType.UWB_TAG, constants={"p_IT": np.zeros(3)})
    assert not h.update(MeasurementRecord(0.01, 100, [0.3], [[0.09]], other_id=105))
    assert h.diagnostics["uninformative_range"] == 1
    h.default_bias = None
    h.biases = type(h.biases)()
    assert not h.update(MeasurementRecord(0.02, 100, [5.0], [[0.09]], other_id=101))
    assert h.diagnostics["missing_bias"] == 1


def test_timings_recorded():
    init, events = random_stream(4, duration=0.3, late_anchor=False)
    h = run_handler(init, events, "dp")
    kinds = {s.kind for s in h.timings}
    assert {"propagate", "range"} <= kinds
    assert all(s.seconds >= 0 for s in h.timings)
    assert Strategy("dah") is Strategy.DAH
