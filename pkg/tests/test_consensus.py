import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from planted import planted_bag, planted_problem
from rigidreg.consensus import (
    consensus_register,
    degenerate_groups,
    dump_experiments,
    full_register,
    kabsch,
    registration_error,
    topk_register,
)
from rigidreg.geom3d import (
    RigidTransform,
    apply_transform,
    axis_angle_matrix,
    chamfer,
    random_rotation,
    random_transform,
    rotation_error_deg,
)


def test_kabsch_identity():
    src = np.random.default_rng(0).normal(size=(10, 3))
    T = kabsch(src, src)
    assert np.abs(T.R - np.eye(3)).max() <= 1e-12
    assert np.abs(T.t).max() <= 1e-12


def test_kabsch_quarter_turn_with_translation():
    src = np.random.default_rng(1).normal(size=(10, 3))
    R = axis_angle_matrix([0, 0, 1], np.pi / 2)
    t = np.array([1.0, 2.0, 3.0])
    T = kabsch(src, src @ R.T + t)
    assert np.abs(T.R - R).max() <= 1e-9
    assert np.abs(T.t - t).max() <= 1e-9


def test_kabsch_errors():
    with pytest.raises(ValueError):
        kabsch(np.zeros((4, 3)), np.zeros((5, 3)))
    with pytest.raises(ValueError):
        kabsch(np.zeros((2, 3)), np.zeros((2, 3)))


def test_kabsch_planar_reflective_case_stays_proper():
    rng = np.random.default_rng(2)
    src = np.c_[rng.normal(size=(20, 2)), np.zeros(20)]
    dst = src * [1, 1, -1] + rng.normal(scale=0.1, size=(20, 3))
    dst_mirror = src * [-1, 1, 1]
    for d in (dst, dst_mirror):
        R = kabsch(src, d).R
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)
        assert np.abs(R.T @ R - np.eye(3)).max() <= 1e-9


def test_kabsch_noisy_matches_random_restart_optimum():
    rng = np.random.default_rng(3)
    sigma = 0.01
    src = rng.normal(size=(100, 3))
    T0 = random_transform(180, 1.0, rng)
    dst = apply_transform(src, T0) + rng.normal(scale=sigma, size=(100, 3))
    T = kabsch(src, dst)
    res = np.sqrt(np.mean(np.sum((apply_transform(src, T) - dst) ** 2, axis=1)))
    assert res <= 3 * sigma

    def cost(v):
        R = Rotation.from_rotvec(v[:3]).as_matrix()
        return np.sum((src @ R.T + v[3:] - dst) ** 2)

    best = None
    for _ in range(20):
        v0 = np.r_[Rotation.random(random_state=rng).as_rotvec(), rng.normal(size=3)]
        r = minimize(cost, v0, method="BFGS", options={"gtol": 1e-10})
        if best is None or r.fun < best.fun:
            best = r
    R_opt = Rotation.from_rotvec(best.x[:3]).as_matrix()
    assert cost(np.r_[Rotation.from_matrix(T.R).as_rotvec(), T.t]) <= best.fun + 1e-9
    assert rotation_error_deg(T.R, T0.R) <= rotation_error_deg(R_opt, T0.R) + 1e-4


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_kabsch_is_equivariant_under_common_rotation(seed):
    rng = np.random.default_rng(seed)
    src = rng.normal(size=(12, 3))
    dst = rng.normal(size=(12, 3))
    G = random_rotation(180, rng)
    R = kabsch(src, dst).R
    RG = kabsch(src @ G.T, dst @ G.T).R
    assert np.abs(RG - G @ R @ G.T).max() <= 1e-9
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


def test_degenerate_group_detection():
    line = np.outer(np.arange(4.0), [1, 2, 3])[None]
    same = np.ones((1, 3, 3))
    generic = np.random.default_rng(4).normal(size=(1, 5, 3))
    assert degenerate_groups(np.concatenate([line[:, :3], same])).all()
    assert not degenerate_groups(generic)[0]


def _perfect(seed, n=64):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 3))
    T = random_transform(180, 0.5, rng)
    return x, apply_transform(x, T), np.eye(n), T, rng


def test_consensus_perfect_correspondences_every_group_exact():
    x, y, P, T, rng = _perfect(5)
    bag = rng.integers(0, 64, size=32)
    T_hat, results = consensus_register(x, y, P, bag, 8, rng)
    assert len(results) == 8 and all(len(r.group) == 4 for r in results)
    for r in results + [type(results[0])(T_hat, 0.0, results[0].group)]:
        assert np.abs(r.transform.R - T.R).max() <= 1e-9
        assert np.abs(r.transform.t - T.t).max() <= 1e-9


def test_single_group_equals_kabsch_on_bag():
    x, y, _, _, rng = _perfect(6)
    y = y + rng.normal(scale=0.05, size=y.shape)
    P = np.eye(64)
    bag = rng.integers(0, 64, size=20)
    T_hat, _ = consensus_register(x, y, P, bag, 1, rng)
    ref = kabsch(x[bag], y[bag])
    assert np.abs(T_hat.R - ref.R).max() <= 1e-12


def test_full_register_is_consensus_on_all_points():
    x, y, P, T, rng = planted_problem(0, n=64)
    T_full = full_register(x, y, P)
    T_cons, _ = consensus_register(x, y, P, np.arange(64), 1, rng)
    assert np.abs(T_full.R - T_cons.R).max() <= 1e-12
    x, y, P, T, _ = _perfect(7)
    assert np.abs(full_register(x, y, P).R - T.R).max() <= 1e-9


def test_consensus_errors_and_argmin_contract():
    x, y, P, _, rng = planted_problem(1, n=64)
    with pytest.raises(ValueError):
        consensus_register(x, y, P, np.arange(8), 3, rng)
    bag = planted_bag(P, rng, 0.5)
    T_hat, results = consensus_register(x, y, P, bag, 8, rng)
    best = chamfer(apply_transform(x, T_hat), y)
    assert all(best <= r.score + 1e-15 for r in results)


def test_consensus_deterministic_for_fixed_seed():
    x, y, P, _, _ = planted_problem(2, n=64)
    a, _ = consensus_register(x, y, P, np.arange(64), 8, np.random.default_rng(3))
    b, _ = consensus_register(x, y, P, np.arange(64), 8, np.random.default_rng(3))
    assert a.R.tobytes() == b.R.tobytes()


def test_threads_do_not_change_result():
    x, y, P, _, _ = planted_problem(3, n=128)
    a, ra = consensus_register(x, y, P, np.arange(128), 16, np.random.default_rng(0), threads=1)
    b, rb = consensus_register(x, y, P, np.arange(128), 16, np.random.default_rng(0), threads=4)
    assert a.R.tobytes() == b.R.tobytes()
    assert [r.score for r in ra] == [r.score for r in rb]


def test_all_degenerate_groups_fall_back_to_bag():
    x = np.outer(np.arange(10.0), [1, 0, 0]) + [0, 0, 1]
    x[9] = [0, 5, 0]
    P = np.eye(10)
    bag = np.array([0, 1, 2, 3, 4, 5, 9])
    rng = np.random.default_rng(0)
    T_hat, results = consensus_register(x, x, P, bag[:6], 2, rng)
    assert all(np.isinf(r.score) for r in results)
    assert np.abs(T_hat.R - kabsch(x[bag[:6]], x[bag[:6]]).R).max() <= 1e-12


def test_planted_corruption_consensus_usually_beats_full():
    wins = 0
    for seed in range(200, 220):
        x, y, P, T, rng = planted_problem(seed, n=1024)
        T_c, _ = consensus_register(x, y, P, planted_bag(P, rng), 8, rng)
        T_f = full_register(x, y, P)
        wins += rotation_error_deg(T_c.R, T.R) < rotation_error_deg(T_f.R, T.R)
    assert wins >= 18


def test_topk_examples():
    x, y, P, T, _ = _perfect(8, n=20)
    assert np.abs(topk_register(x, y, P, 20).R - full_register(x, y, P).R).max() <= 1e-12
    y2 = y.copy()
    y2[4] += 10.0
    P2 = np.eye(20)
    P2[4, 4] = 0.1
    T2 = topk_register(x, y2, P2, 19)
    assert np.abs(T2.R - T.R).max() <= 1e-9
    with pytest.raises(ValueError):
        topk_register(x, y, P, 2)


def test_topk_matches_sort_then_solve_oracle():
    rng = np.random.default_rng(9)
    x, y = rng.normal(size=(30, 3)), rng.normal(size=(30, 3))
    P = rng.uniform(-1, 1, size=(30, 30))
    p_m = [max(0.0, max(row)) for row in P]
    order = sorted(range(30), key=lambda i: (-p_m[i], i))[:10]
    pi = [int(np.argmax(P[i])) for i in order]
    ref = kabsch(x[order], y[pi])
    assert np.abs(topk_register(x, y, P, 10).R - ref.R).max() <= 1e-12


def test_dump_and_registration_error(tmp_path):
    x, y, P, T, rng = _perfect(10)
    _, results = consensus_register(x, y, P, np.arange(12), 3, rng)
    dump_experiments(tmp_path / "e.json", results)
    import json

    data = json.loads((tmp_path / "e.json").read_text())
    assert len(data) == 3 and len(data[0]["R"]) == 9
    assert registration_error(T, T, x) == 0.0
    assert registration_error(RigidTransform.identity(), RigidTransform(np.eye(3), [3.0, 4, 0]), x) == pytest.approx(5.0)
