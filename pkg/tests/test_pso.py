import csv

import numpy as np
import pytest

from cardioseg.pso import (Dimension, SearchSpace, Swarm, init_swarm, optimize,
                           pso_step, write_leaderboard)


def sphere(pos: dict) -> float:
    return sum(v * v for v in pos.values())


def space_2d():
    return SearchSpace([Dimension("x", -5.0, 5.0), Dimension("y", -5.0, 5.0)])


class TestSearchSpace:
    def test_dimension_validation(self):
        with pytest.raises(ValueError):
            Dimension("x", 2.0, 1.0)
        with pytest.raises(ValueError):
            Dimension("x", -1.0, 1.0, scale="log")
        with pytest.raises(ValueError):
            Dimension("x", 0.0, 1.0, scale="sqrt")
        with pytest.raises(ValueError):
            SearchSpace([])

    def test_log_round_trip(self):
        d = Dimension("lr", 1e-5, 1e-2, scale="log")
        for v in (1e-5, 1e-3, 1e-2):
            assert abs(d.to_value(d.to_internal(v)) - v) < 1e-12 * v

    def test_encode_decode(self):
        s = SearchSpace([Dimension("a", 0.0, 1.0), Dimension("lr", 1e-4, 1e-1, scale="log")])
        u = s.encode({"a": 0.5, "lr": 1e-2})
        dec = s.decode(u)
        assert abs(dec["a"] - 0.5) < 1e-15
        assert abs(dec["lr"] - 1e-2) < 1e-15


class TestPsoStep:
    def test_fixed_point_at_global_best(self):
        space = space_2d()
        rng = np.random.default_rng(0)
        swarm = init_swarm(space, sphere, 3, rng)
        # pin particle 0 exactly at the global best with zero velocity
        swarm.positions[0] = swarm.gbest_pos.copy()
        swarm.pbest_pos[0] = swarm.gbest_pos.copy()
        swarm.pbest_val[0] = swarm.gbest_val
        swarm.velocities[0] = 0.0
        before = swarm.positions[0].copy()
        pso_step(swarm, space, sphere, rng)
        np.testing.assert_array_equal(swarm.positions[0], before)

    def test_all_zero_coefficients_freeze_swarm(self):
        space = space_2d()
        rng = np.random.default_rng(1)
        swarm = init_swarm(space, sphere, 4, rng, w=0.0, c1=0.0, c2=0.0)
        before = swarm.positions.copy()
        pso_step(swarm, space, sphere, rng)
        np.testing.assert_array_equal(swarm.positions, before)

    def test_one_step_matches_hand_trace(self):
        # 2 particles, 1-D; replay the exact update by hand with the same rng
        space = SearchSpace([Dimension("x", -4.0, 4.0)])
        rng = np.random.default_rng(7)
        swarm = init_swarm(space, sphere, 2, rng)
        x = swarm.positions.copy()
        v = swarm.velocities.copy()
        pb = swarm.pbest_pos.copy()
        gb = swarm.gbest_pos.copy()
        # the replay rng must consume the same init draw of shape (2,1)
        rng_replay = np.random.default_rng(7)
        rng_replay.uniform(np.array([-4.0]), np.array([4.0]), size=(2, 1))
        expected_x = np.empty_like(x)
        expected_v = np.empty_like(v)
        for i in range(2):
            r1 = rng_replay.uniform(size=1)
            r2 = rng_replay.uniform(size=1)
            expected_v[i] = (0.729 * v[i] + 1.49445 * r1 * (pb[i] - x[i])
                             + 1.49445 * r2 * (gb - x[i]))
            expected_x[i] = np.clip(x[i] + expected_v[i], -4.0, 4.0)
        pso_step(swarm, space, sphere, rng)
        np.testing.assert_allclose(swarm.positions, expected_x, atol=1e-12)
        np.testing.assert_allclose(swarm.velocities, expected_v, atol=1e-12)

    def test_nonfinite_objective_keeps_previous_best(self):
        space = space_2d()
        rng = np.random.default_rng(3)
        calls = {"n": 0}

        def sometimes_nan(pos):
            calls["n"] += 1
            return float("nan") if calls["n"] > 4 else sphere(pos)

        swarm = init_swarm(space, sometimes_nan, 4, rng)
        pb = swarm.pbest_val.copy()
        pso_step(swarm, space, sometimes_nan, rng)
        np.testing.assert_array_equal(swarm.pbest_val, pb)
        lo, hi = space.bounds()
        assert np.all(swarm.positions >= lo) and np.all(swarm.positions <= hi)


class TestOptimize:
    def test_sphere_convergence(self):
        space = space_2d()
        _, best, history = optimize(space, sphere, n_particles=30, n_iters=200, seed=0)
        assert best <= 1e-3

    def test_history_monotone(self):
        space = space_2d()
        _, _, history = optimize(space, sphere, n_particles=10, n_iters=50, seed=1)
        assert all(a >= b for a, b in zip(history, history[1:]))
        assert len(history) == 51

    def test_constant_objective(self):
        space = space_2d()
        _, best, history = optimize(space, lambda p: 4.2, n_particles=5, n_iters=10, seed=2)
        assert best == 4.2
        assert all(h == 4.2 for h in history)

    def test_seeded_determinism(self):
        space = space_2d()
        a = optimize(space, sphere, 8, 20, seed=9)
        b = optimize(space, sphere, 8, 20, seed=9)
        assert a[1] == b[1] and a[2] == b[2] and a[0] == b[0]

    def test_positions_always_in_box(self):
        space = SearchSpace([Dimension("x", 0.5, 1.5), Dimension("lr", 1e-4, 1e-2, scale="log")])
        best_pos, _, _ = optimize(space, lambda p: p["x"] + p["lr"], 6, 30, seed=4)
        assert 0.5 <= best_pos["x"] <= 1.5
        assert 1e-4 <= best_pos["lr"] <= 1e-2 * (1 + 1e-12)

    def test_injected_incumbent_never_lost(self):
        space = space_2d()
        incumbent = {"x": 0.01, "y": -0.01}
        _, best, history = optimize(space, sphere, 6, 10, seed=5, inject=incumbent)
        assert best <= sphere(incumbent) + 1e-15
        assert history[0] <= sphere(incumbent) + 1e-15

    def test_too_few_particles(self):
        with pytest.raises(ValueError):
            optimize(space_2d(), sphere, 1, 5)


def test_leaderboard_sorted(tmp_path):
    space = space_2d()
    trace = []
    optimize(space, sphere, 4, 5, seed=6, trace=trace)
    path = tmp_path / "board.csv"
    write_leaderboard(path, trace, space.names)
    with open(path) as f:
        rows = list(csv.DictReader(f))
    objectives = [float(r["objective"]) for r in rows]
    assert objectives == sorted(objectives)
    assert set(rows[0]) == {"iteration", "particle", "x", "y", "objective"}
