import numpy as np

from rigidreg.geom3d import (
    RigidTransform,
    apply_transform,
    axis_angle_matrix,
    center,
    generate_shape,
    rotation_error_deg,
)
from rigidreg.icp import IcpConfig, icp
from rigidreg.trainer import TrainConfig, half_turn_trials

import pytest


def test_identity_converges_immediately():
    x = generate_shape("torus", 256, 0)
    res = icp(x, x)
    assert res.iterations == 1 and res.mse <= 1e-24 and res.converged


def test_small_rotation_recovered():
    x = center(generate_shape("gaussian_blobs", 256, 1))
    R = axis_angle_matrix([0.3, -0.5, 0.8], np.deg2rad(5))
    res = icp(x, apply_transform(x, RigidTransform(R, np.zeros(3))), IcpConfig(max_iters=50))
    assert res.iterations <= 50
    assert rotation_error_deg(res.transform.R, R) <= 0.5
    assert res.transform.is_valid(1e-9)


def test_mse_history_non_increasing():
    x = center(generate_shape("cube", 256, 2))
    R = axis_angle_matrix([1, 1, 0], np.deg2rad(40))
    res = icp(x, apply_transform(x, RigidTransform(R, np.array([0.1, 0, 0]))))
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        IcpConfig(max_iters=0)
    with pytest.raises(ValueError):
        IcpConfig(tol=0)


def test_half_turn_on_plane_defeats_icp():
    icp_err, _ = half_turn_trials(None, TrainConfig(registrar="icp"), n_trials=5)
    assert all(e > 30 for e in icp_err)
