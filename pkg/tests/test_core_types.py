import math
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
import hypothesis.strategies as st
from hypothesis.extra.numpy import arrays

from magslam.core_types import (
    CsvFormatError,
    ImuRecord,
    MagRecord,
    NavState,
    Quaternion,
    quat_compose,
    quat_to_rotmat,
    read_imu_csv,
    read_mag_csv,
    right_jacobian,
    right_jacobian_inv,
    write_imu_csv,
    write_mag_csv,
)

finite = st.floats(-10, 10, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)
rotvec = arrays(np.float64, 3, elements=st.floats(-3, 3, allow_nan=False))
unit_q = arrays(np.float64, 4, elements=st.floats(-1, 1, allow_nan=False)).filter(
    lambda a: np.linalg.norm(a) > 1e-3
).map(lambda a: Quaternion.from_array(a / np.linalg.norm(a)))


def test_identity_compose_is_exact():
    q = Quaternion.from_rotvec((0.3, -0.2, 0.9))
    r = quat_compose(Quaternion.identity(), q)
    assert np.max(np.abs(r.as_array() - q.as_array())) <= 1e-15


def test_compose_with_conjugate_is_identity():
    q = Quaternion.from_rotvec((1.0, 2.0, -0.5))
    np.testing.assert_allclose(quat_compose(q, q.conjugate()).as_array(), [1, 0, 0, 0], atol=1e-15)


def test_quarter_turns_about_z_add():
    qz = Quaternion.from_axis_angle((0, 0, 1), math.pi / 2)
    half = quat_compose(qz, qz)
    np.testing.assert_allclose(quat_to_rotmat(half), np.diag([-1.0, -1.0, 1.0]), atol=1e-15)


def test_rotmat_special_cases():
    np.testing.assert_array_equal(quat_to_rotmat(Quaternion.identity()), np.eye(3))
    R = quat_to_rotmat(Quaternion.from_axis_angle((0, 0, 1), math.pi))
    np.testing.assert_allclose(R, np.diag([-1.0, -1.0, 1.0]), atol=1e-15)


@given(unit_q)
def test_rotmat_is_proper_orthogonal(q):
    R = quat_to_rotmat(q)
    assert np.max(np.abs(R.T @ R - np.eye(3))) <= 1e-12
    assert abs(np.linalg.det(R) - 1.0) <= 1e-12


@given(unit_q, unit_q)
def test_rotmat_of_product_is_product_of_rotmats(a, b):
    np.testing.assert_allclose(quat_to_rotmat(quat_compose(a, b)), quat_to_rotmat(a) @ quat_to_rotmat(b), atol=1e-10)


@given(unit_q, unit_q, unit_q)
def test_compose_is_associative(a, b, c):
    left = quat_compose(quat_compose(a, b), c).as_array()
    right = quat_compose(a, quat_compose(b, c)).as_array()
    # q and -q are the same rotation
    assert min(np.max(np.abs(left - right)), np.max(np.abs(left + right))) <= 1e-12


@given(unit_q, unit_q)
def test_compose_result_is_unit(a, b):
    assert abs(quat_compose(a, b).norm() - 1.0) <= 1e-9


@given(unit_q, vec3)
def test_rotation_preserves_norm(q, v):
    assert abs(np.linalg.norm(q.rotate(v)) - np.linalg.norm(v)) <= 1e-12 * max(1.0, np.linalg.norm(v))


@given(arrays(np.float64, 3, elements=st.floats(-3.0, 3.0, allow_nan=False)).filter(lambda v: np.linalg.norm(v) < 3.1))
def test_rotvec_round_trip(v):
    np.testing.assert_allclose(Quaternion.from_rotvec(v).to_rotvec(), v, atol=1e-10)


@given(rotvec)
def test_right_jacobian_inverse(phi):
    np.testing.assert_allclose(right_jacobian(phi) @ right_jacobian_inv(phi), np.eye(3), atol=1e-9)


def test_right_jacobian_matches_finite_differences():
    # Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)
    phi = np.array([0.4, -0.7, 0.2])
    h = 1e-6
    Jr = right_jacobian(phi)
    base = Quaternion.from_rotvec(phi)
    for i in range(3):
        d = np.zeros(3)
        d[i] = h
        plus = (base.conjugate() * Quaternion.from_rotvec(phi + d)).to_rotvec()
        minus = (base.conjugate() * Quaternion.from_rotvec(phi - d)).to_rotvec()
        np.testing.assert_allclose((plus - minus) / (2 * h), Jr[:, i], atol=1e-8)


def test_navstate_validation():
    s = NavState(0.0)
    assert np.all(s.p == 0) and s.q == Quaternion.identity()
    with pytest.raises(ValueError):
        NavState(0.0, p=(1.0, 2.0))
    with pytest.raises(ValueError):
        NavState(0.0, q=Quaternion(2.0, 0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        s.p[0] = 1.0


def test_record_invariants():
    with pytest.raises(ValueError):
        ImuRecord(0.1, Quaternion.identity(), (0, 0, 0), 0.0)
    with pytest.raises(ValueError):
        MagRecord(0.0, (1, 2, 3), 0.0)


@given(st.lists(st.tuples(rotvec, vec3, st.floats(1e-4, 1.0)), min_size=1, max_size=8))
def test_imu_csv_round_trip_is_exact(rows):
    path = Path(tempfile.mkdtemp()) / "imu.csv"
    t = 0.0
    recs = []
    for rv, dv, T in rows:
        t += T
        recs.append(ImuRecord(t, Quaternion.from_rotvec(rv), dv, T))
    write_imu_csv(path, recs)
    back = read_imu_csv(path)
    for a, b in zip(recs, back):
        assert a.t == b.t and a.T == b.T
        np.testing.assert_array_equal(a.dq.as_array(), b.dq.as_array())
        np.testing.assert_array_equal(a.dv, b.dv)


def test_mag_csv_round_trip(tmp_path):
    recs = [MagRecord(0.1 * k, (k, -k, 0.5), 0.01) for k in range(4)]
    write_mag_csv(tmp_path / "mag.csv", recs)
    back = read_mag_csv(tmp_path / "mag.csv")
    assert [r.t for r in back] == [r.t for r in recs]
    assert open(tmp_path / "mag.csv").readline().strip() == "t,mx,my,mz,sigma"


def test_malformed_row_reports_line_number(tmp_path):
    p = tmp_path / "mag.csv"
    p.write_text("t,mx,my,mz,sigma\n0.0,1,2,3,0.1\n0.1,1,x,3,0.1\n")
    with pytest.raises(CsvFormatError) as err:
        read_mag_csv(p)
    assert err.value.line == 3
    assert ":3" in str(err.value)


def test_wrong_header_is_rejected(tmp_path):
    p = tmp_path / "imu.csv"
    p.write_text("t,a,b\n")
    with pytest.raises(CsvFormatError):
        read_imu_csv(p)
