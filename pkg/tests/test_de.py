import math

import numpy as np
import pytest

from cloudattack.de import (Bounds, DEConfig, EvalInfo, RunResult, crossover,
                            initialize, mutate, run, select)


def sphere(x):
    return float(np.sum(x * x))


class TestBounds:
    def test_validation(self):
        with pytest.raises(ValueError):
            Bounds(np.array([0.0, 1.0]), np.array([1.0, 0.5]))
        with pytest.raises(ValueError):
            Bounds(np.zeros(3), np.ones(2))

    def test_dim(self):
        assert Bounds(np.zeros(7), np.ones(7)).dim == 7


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            DEConfig(np=3)
        with pytest.raises(ValueError):
            DEConfig(cr=1.5)
        with pytest.raises(ValueError):
            DEConfig(f=0.0)


class TestInitialize:
    def test_degenerate_interval(self):
        bounds = Bounds(np.array([2.0, -1.0]), np.array([2.0, -1.0]))
        pop = initialize(bounds, 10, np.random.default_rng(0))
        np.testing.assert_array_equal(pop, np.tile([2.0, -1.0], (10, 1)))

    def test_within_bounds(self):
        bounds = Bounds(np.array([-3.0, 0.5]), np.array([-1.0, 4.0]))
        pop = initialize(bounds, 200, np.random.default_rng(1))
        assert np.all(pop >= bounds.lower) and np.all(pop <= bounds.upper)

    def test_mean_near_midpoint(self):
        bounds = Bounds(np.array([-2.0]), np.array([6.0]))
        pop = initialize(bounds, 10_000, np.random.default_rng(2))
        assert abs(pop.mean() - 2.0) < 0.1


class TestMutate:
    def test_identical_population(self):
        pop = np.tile([1.0, 2.0], (6, 1))
        v = mutate(pop, 0, 0.5, np.random.default_rng(0))
        np.testing.assert_array_equal(v, [1.0, 2.0])

    def test_f_zero_returns_donor(self):
        rng = np.random.default_rng(1)
        pop = rng.random((6, 3))
        v = mutate(pop, 2, 1e-300, np.random.default_rng(2))
        assert any(np.allclose(v, pop[j]) for j in range(6) if j != 2)

    def test_donors_exclude_base(self):
        # base row is poisoned; with exclusion it can never contaminate the mutant
        pop = np.zeros((4, 1))
        pop[1] = 1000.0
        rng = np.random.default_rng(3)
        for _ in range(50):
            v = mutate(pop, 1, 0.5, rng, exclude_base=True)
            assert abs(v[0]) < 1.0

    def test_clamped_to_bounds(self):
        bounds = Bounds(np.array([0.0]), np.array([1.0]))
        pop = np.array([[0.0], [1.0], [0.9], [0.1]])
        rng = np.random.default_rng(4)
        for i in range(4):
            for _ in range(20):
                v = mutate(pop, i, 3.0, rng, bounds=bounds)
                assert 0.0 <= v[0] <= 1.0

    def test_distribution_matches_simulation_oracle(self):
        """Mutant components follow x1 + f * (x2 - x3) over distinct triplets."""
        rng = np.random.default_rng(5)
        pop = rng.random((8, 1)) * 4 - 2
        f = 0.5
        i = 3
        samples = np.array([mutate(pop, i, f, np.random.default_rng(10_000 + k))[0]
                            for k in range(20_000)])

        import random as pyrandom
        sim_rng = pyrandom.Random(99)
        candidates = [j for j in range(8) if j != i]
        sim = []
        for _ in range(20_000):
            x1, x2, x3 = sim_rng.sample(candidates, 3)
            sim.append(pop[x1, 0] + f * (pop[x2, 0] - pop[x3, 0]))
        sim = np.array(sim)

        assert abs(samples.mean() - sim.mean()) < 0.03
        assert abs(samples.std() - sim.std()) < 0.03
        grid = np.linspace(min(sim.min(), samples.min()),
                           max(sim.max(), samples.max()), 21)
        ecdf_a = np.array([(samples <= g).mean() for g in grid])
        ecdf_b = np.array([(sim <= g).mean() for g in grid])
        assert np.abs(ecdf_a - ecdf_b).max() < 0.02


class TestCrossover:
    def test_cr_one_takes_mutant(self):
        rng = np.random.default_rng(0)
        r, v = rng.random(50), rng.random(50)
        np.testing.assert_array_equal(crossover(r, v, 1.0, np.random.default_rng(1)), v)

    def test_cr_zero_keeps_parent(self):
        rng = np.random.default_rng(2)
        r, v = rng.random(50), rng.random(50)
        # the uniform draw is taken from (0, 1], so rand <= 0 never fires
        np.testing.assert_array_equal(crossover(r, v, 0.0, np.random.default_rng(3)), r)

    def test_take_rate_matches_cr(self):
        r = np.zeros(100_000)
        v = np.ones(100_000)
        u = crossover(r, v, 0.3, np.random.default_rng(4))
        assert abs(u.mean() - 0.3) < 0.01

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            crossover(np.zeros(3), np.zeros(4), 0.5, np.random.default_rng(0))


class TestSelect:
    def test_tie_favors_trial(self):
        r, u = np.zeros(2), np.ones(2)
        survivor, fit, trial_won = select(r, u, 1.0, 1.0)
        assert trial_won and fit == 1.0
        np.testing.assert_array_equal(survivor, u)

    def test_infinite_trial_loses(self):
        survivor, fit, trial_won = select(np.zeros(2), np.ones(2), 0.5, math.inf)
        assert not trial_won
        assert fit == 0.5

    def test_nan_treated_as_infinite(self):
        survivor, fit, trial_won = select(np.zeros(2), np.ones(2), 0.5, math.nan)
        assert not trial_won

    def test_generation_mean_fitness_never_increases(self):
        """One full mutate/cross/select generation on a random landscape."""
        rng = np.random.default_rng(6)
        a = rng.standard_normal((5, 5))
        quadratic = lambda x: float(x @ a @ x + np.sum(x**2))
        bounds = Bounds(np.full(5, -2.0), np.full(5, 2.0))
        pop = initialize(bounds, 20, rng)
        fit = np.array([quadratic(x) for x in pop])
        for _ in range(10):
            new_pop, new_fit = pop.copy(), fit.copy()
            for i in range(20):
                v = mutate(pop, i, 0.5, rng, bounds=bounds)
                u = crossover(pop[i], v, 0.8, rng)
                new_pop[i], new_fit[i], _ = select(pop[i], u, fit[i], quadratic(u))
            assert new_fit.mean() <= fit.mean() + 1e-12
            pop, fit = new_pop, new_fit


class TestRun:
    def test_sphere_reference(self):
        # threshold pinned by a pre-build reference run: seed 0 reaches ~1e-16
        bounds = Bounds(np.full(10, -5.0), np.full(10, 5.0))
        cfg = DEConfig(np=50, cr=0.8, f=0.5, max_evals=20_000, seed=0)
        result = run(sphere, bounds, cfg)
        assert result.best_fitness < 1e-2
        assert result.evaluations == 20_000

    def test_always_true_stop(self):
        bounds = Bounds(np.zeros(3), np.ones(3))
        cfg = DEConfig(np=5, max_evals=100, seed=1)
        result = run(sphere, bounds, cfg, stop=lambda info: True)
        assert result.success
        assert result.evaluations == 1

    def test_history_non_increasing(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal(8)
        bounds = Bounds(np.full(8, -1.0), np.full(8, 1.0))
        cfg = DEConfig(np=10, max_evals=500, seed=2)
        result = run(lambda x: float(np.cos(x @ a) + 0.1 * x @ x), bounds, cfg)
        assert all(b <= a_ for a_, b in zip(result.history, result.history[1:]))

    def test_all_evaluated_vectors_within_bounds(self):
        bounds = Bounds(np.array([-1.0, 2.0]), np.array([0.5, 3.0]))
        seen = []

        def fitness(x):
            seen.append(x.copy())
            return sphere(x)

        run(fitness, bounds, DEConfig(np=8, max_evals=400, seed=3))
        arr = np.array(seen)
        assert len(arr) == 400
        assert np.all(arr >= bounds.lower) and np.all(arr <= bounds.upper)

    def test_exact_evaluation_count(self):
        calls = [0]

        def fitness(x):
            calls[0] += 1
            return sphere(x)

        bounds = Bounds(np.zeros(4), np.ones(4))
        result = run(fitness, bounds, DEConfig(np=6, max_evals=123, seed=4))
        assert calls[0] == result.evaluations == 123

    def test_deterministic(self):
        bounds = Bounds(np.full(5, -2.0), np.full(5, 2.0))
        cfg = DEConfig(np=10, max_evals=300, seed=5)
        r1 = run(sphere, bounds, cfg)
        r2 = run(sphere, bounds, cfg)
        np.testing.assert_array_equal(r1.best, r2.best)
        assert r1.best_fitness == r2.best_fitness
        assert r1.history == r2.history
        assert r1.generations == r2.generations

    def test_best_tracks_trials_not_just_survivors(self):
        # a trial that loses selection can still be the global best seen so far
        values = iter([5.0, 4.0, 3.0, 2.5, 1.0, 9.9] * 1000)
        recorded = []

        def fitness(x):
            v = next(values)
            recorded.append((x.copy(), v))
            return v

        bounds = Bounds(np.zeros(2), np.ones(2))
        result = run(fitness, bounds, DEConfig(np=4, max_evals=20, seed=6))
        best_seen = min(v for _, v in recorded)
        assert result.best_fitness == best_seen

    def test_budget_smaller_than_population(self):
        bounds = Bounds(np.zeros(3), np.ones(3))
        with pytest.raises(ValueError):
            run(sphere, bounds, DEConfig(np=50, max_evals=10, seed=0))

    def test_stop_info_fields(self):
        infos = []

        def stop(info: EvalInfo):
            infos.append(info)
            return False

        bounds = Bounds(np.zeros(2), np.ones(2))
        run(sphere, bounds, DEConfig(np=4, max_evals=10, seed=7), stop=stop)
        assert len(infos) == 10
        assert infos[0].evaluations == 1
        assert infos[-1].evaluations == 10
        assert all(i.best_fitness <= i.last_fitness or
                   math.isnan(i.last_fitness) for i in infos)

    def test_nan_fitness_loses(self):
        # NaN-returning region must never take over the population
        def fitness(x):
            return math.nan if x[0] > 0.5 else float(x[0])

        bounds = Bounds(np.zeros(1), np.ones(1))
        result = run(fitness, bounds, DEConfig(np=6, max_evals=200, seed=8))
        assert result.best[0] <= 0.5
        assert not math.isnan(result.best_fitness)
