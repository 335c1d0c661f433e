import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from meshfuse.core import (
    Belief,
    ContractError,
    FactorTable,
    MeasurementRecord,
    NoBeliefError,
    Pose,
    SlidingHistory,
    UnitQuaternion,
    boxminus,
    boxplus,
    check_psd,
    quat_exp,
    quat_log,
    quat_mul,
    quat_to_rotmat,
    reconstruct_cross,
    rotation_angle_deg,
    rotmat_to_quat,
    skew,
    so3_exp,
    so3_right_jacobian,
)

finite = st.floats(-3.0, 3.0, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)


def scipy_quat(q):
    return Rotation.from_quat([q[1], q[2], q[3], q[0]])


def imu_mean(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return np.concatenate([rng.normal(size=6), q, rng.normal(scale=0.01, size=6)])


@given(vec3)
def test_quat_exp_matches_scipy(phi):
    R = quat_to_rotmat(quat_exp(phi))
    np.testing.assert_allclose(R, Rotation.from_rotvec(phi).as_matrix(), atol=1e-12)


@given(vec3, vec3)
def test_quat_mul_matches_scipy(a, b):
    qa, qb = quat_exp(a), quat_exp(b)
    expected = (scipy_quat(qa) * scipy_quat(qb)).as_matrix()
    np.testing.assert_allclose(quat_to_rotmat(quat_mul(qa, qb)), expected, atol=1e-12)


@given(arrays(np.float64, 3, elements=st.floats(-1.7, 1.7)))
def test_log_inverts_exp(phi):
    # principal branch only
    if np.linalg.norm(phi) >= np.pi - 1e-6:
        return
    np.testing.assert_allclose(quat_log(quat_exp(phi)), phi, atol=1e-9)


@given(vec3)
def test_rotmat_quat_roundtrip(phi):
    R = so3_exp(phi)
    np.testing.assert_allclose(quat_to_rotmat(rotmat_to_quat(R)), R, atol=1e-12)
    assert rotmat_to_quat(R)[0] >= 0.0


def test_skew_is_cross_product():
    a, b = np.array([1.0, -2.0, 0.5]), np.array([0.3, 0.1, -4.0])
    np.testing.assert_allclose(skew(a) @ b, np.cross(a, b))


def test_right_jacobian_first_order():
    # Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)
    phi, d = np.array([0.4, -0.7, 1.1]), np.array([1e-6, -2e-6, 1.5e-6])
    lhs = so3_exp(phi + d)
    rhs = so3_exp(phi) @ so3_exp(so3_right_jacobian(phi) @ d)
    np.testing.assert_allclose(lhs, rhs, atol=1e-11)


def test_unit_quaternion_and_pose():
    q = UnitQuaternion.from_rotvec(np.array([0.0, 0.0, np.pi / 2]))
    np.testing.assert_allclose(q.rotate(np.array([1.0, 0.0, 0.0])), [0.0, 1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose((q * q.inverse()).as_array(), [1, 0, 0, 0], atol=1e-12)
    pose = Pose(np.array([1.0, 2.0, 3.0]), q)
    np.testing.assert_allclose(pose.transform(np.array([1.0, 0.0, 0.0])), [1.0, 3.0, 3.0], atol=1e-12)
    assert rotation_angle_deg(q.matrix()) == pytest.approx(90.0)
    with pytest.raises(ContractError):
        UnitQuaternion.from_array(np.zeros(4))


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_boxplus_boxminus_roundtrip(seed):
    rng = np.random.default_rng(seed)
    x = imu_mean(rng)
    d = rng.normal(scale=0.3, size=15)
    np.testing.assert_allclose(boxminus(boxplus(x, d), x), d, atol=1e-9)
    a = rng.normal(size=3)
    np.testing.assert_allclose(boxminus(boxplus(a, a), a), a)


def test_boxplus_dimension_mismatch():
    with pytest.raises(ContractError):
        boxplus(np.zeros(16), np.zeros(3))
    with pytest.raises(ContractError):
        boxminus(np.zeros(3), np.zeros(4))


def test_boxplus_zero_is_identity():
    x = imu_mean(np.random.default_rng(1))
    np.testing.assert_allclose(boxplus(x, np.zeros(15)), x, atol=1e-15)


def test_check_psd():
    check_psd(np.eye(3))
    with pytest.raises(ContractError):
        check_psd(np.diag([1.0, -1.0, 1.0]))
    with pytest.raises(ContractError):
        check_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_reconstruct_cross():
    rng = np.random.default_rng(0)
    S_ij, S_ji = rng.normal(size=(15, 3)), rng.normal(size=(3, 3))
    np.testing.assert_allclose(reconstruct_cross(S_ij, S_ji), S_ij @ S_ji.T)
    with pytest.raises(ContractError):
        reconstruct_cross(S_ij, rng.normal(size=(3, 4)))


def test_belief_and_record_contracts():
    with pytest.raises(ContractError):
        Belief(0, 0.0, np.zeros(3), np.eye(3))
    with pytest.raises(ContractError):
        Belief(1, 0.0, np.zeros(3), np.ones((3, 4)))
    with pytest.raises(ContractError):
        MeasurementRecord(float("nan"), 1, [1.0], [[1.0]])
    rec = MeasurementRecord(1.0, 100, 5.0, 0.01, other_id=101)
    assert rec.z.shape == (1,) and rec.R.shape == (1, 1)


class TestSlidingHistory:
    def test_floor_query_and_replace(self):
        h = SlidingHistory()
        for t in (0.0, 1.0, 2.0):
            h.insert(t, f"b{t}")
        assert h.query(1.5) == "b1.0"
        assert h.query(2.0) == "b2.0"
        h.insert(1.0, "new")
        assert h.query(1.2) == "new" and len(h) == 3
        with pytest.raises(NoBeliefError):
            h.query(-0.1)

    def test_out_of_order_insert_keeps_sorted(self):
        h = SlidingHistory()
        for t in (3.0, 1.0, 2.0, 0.5):
            h.insert(t, t)
        assert h.timestamps == [0.5, 1.0, 2.0, 3.0]

    def test_capacity_evicts_oldest(self):
        h = SlidingHistory(capacity=3)
        for t in range(5):
            h.insert(float(t), t)
        assert h.timestamps == [2.0, 3.0, 4.0]
        with pytest.raises(ContractError):
            SlidingHistory(capacity=0)

    def test_truncate_keeps_floor_entry(self):
        h = SlidingHistory()
        for t in (0.0, 1.0, 2.0, 3.0):
            h.insert(t, t)
        h.truncate(1.5)
        assert h.timestamps == [1.0, 2.0, 3.0]
        assert h.query(1.5) == 1.0

    def test_max_age(self):
        h = SlidingHistory(max_age=1.0)
        for t in np.arange(0.0, 5.0, 0.25):
            h.insert(float(t), t)
        assert h.oldest_time >= 4.75 - 1.0 - 0.25
        assert h.query(3.8) == pytest.approx(3.75)

    def test_drop_after_and_empty(self):
        h = SlidingHistory()
        with pytest.raises(NoBeliefError):
            h.latest()
        for t in (0.0, 1.0, 2.0):
            h.insert(t, t)
        h.drop_after(1.0)
        assert h.timestamps == [0.0, 1.0] and h.latest_time == 1.0

    @given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=40), st.floats(0, 100))
    def test_query_is_floor(self, times, q):
        h = SlidingHistory()
        for t in times:
            h.insert(t, t)
        floor = [t for t in times if t <= q]
        if floor:
            assert h.query(q) == max(floor)
        else:
            with pytest.raises(NoBeliefError):
                h.query(q)


def test_factor_table():
    ft = FactorTable(owner_id=1)
    ft.set(5, 0.0, np.eye(3))
    ft.set(5, 1.0, 2 * np.eye(3))
    assert 5 in ft and ft.others() == [5]
    np.testing.assert_allclose(ft.get(5), 2 * np.eye(3))
    np.testing.assert_allclose(ft.get(5, 0.5), np.eye(3))
    ft.drop_after(0.5)
    np.testing.assert_allclose(ft.get(5), np.eye(3))
    ft.remove(5)
    assert 5 not in ft
