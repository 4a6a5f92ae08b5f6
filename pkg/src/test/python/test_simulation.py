import numpy as np
import pytest

from src.main.python.core.numerics import MatrixTrajectory, TimeGrid, VectorTrajectory
from src.main.python.models.problem import DmPartition, as_nf, make_problem
from src.main.python.models.schema import load_problem
from src.main.python.services.centralized_solver import (
    CentralizedStrategy, centralized_gain, solve_riccati_lqf,
)
from src.main.python.services.decentralized_solver import (
    make_strategy, solve_dm_riccati_set, solve_mean_field,
)
from src.main.python.services.simulation import (
    ClosedLoopEnsemble, build_closed_loop, compute_cost_exact, cost_report, ensemble_to_frame,
    estimate_cost_mc, exact_cost_breakdown, simulate_closed_loop,
)
from src.main.python.utils.errors import (
    EmptyEnsembleError, PreconditionError, SimulationDivergedError,
)


def decentralized(problem, **picard):
    riccati = solve_dm_riccati_set(problem)
    return make_strategy(problem, riccati, solve_mean_field(problem, riccati, **picard))


def zero_control(problem):
    grid = problem.grid
    return CentralizedStrategy(gain=MatrixTrajectory.constant(grid, np.zeros((problem.d, problem.n))),
                               offset=VectorTrajectory.constant(grid, np.zeros(problem.d)),
                               partition=problem.partition)


def ornstein_uhlenbeck(n_steps=200, rate=1.0):
    return make_problem(TimeGrid(1.0, n_steps), DmPartition.single(1, 1, 1), A=[[-rate]], B=[[1.0]],
                        G=[[1.0]], H=[[1.0]], R=[[1.0]], M_T=[[0.0]], x0_mean=[0.0], x0_cov=[[0.0]])


class TestClosedLoop:
    def test_filter_rows_see_only_own_noise(self, two_dm):
        problem = two_dm()
        system = build_closed_loop(problem, decentralized(problem))
        assert system.dim == 6 and system.kind == "decentralized"
        G = system.G_cl.values
        assert np.all(G[:, 2:4, 1] == 0.0)
        assert np.all(G[:, 4:6, 0] == 0.0)
        np.testing.assert_array_equal(G[:, 0:2], problem.G.values)
        np.testing.assert_array_equal(system.mean0, np.tile(problem.x0_mean, 3))
        assert np.all(system.cov0[2:, :] == 0.0)

    def test_centralized_stack_is_the_state(self, two_dm):
        problem = two_dm()
        system = build_closed_loop(problem, centralized_gain(solve_riccati_lqf(problem), problem))
        assert system.dim == 2 and system.kind == "centralized"

    def test_normal_form_extras_rejected(self, scalar_lq):
        problem = scalar_lq(T=1.0, n_steps=50, b=[1.0])
        with pytest.raises(PreconditionError):
            build_closed_loop(problem, zero_control(problem))

    def test_lifted_problem_accepted(self, two_dm):
        problem = two_dm()
        strategy = centralized_gain(solve_riccati_lqf(problem), problem)
        assert build_closed_loop(as_nf(problem), strategy).dim == 2


class TestSimulation:
    def test_zero_system_stays_at_zero(self, decoupled):
        problem = decoupled(x0_mean=(0.0, 0.0))
        problem = problem.with_updates(G=MatrixTrajectory.constant(problem.grid, np.zeros((2, 2))))
        ensemble = simulate_closed_loop(problem, decentralized(problem), n_paths=5, seed=1)
        assert np.all(ensemble.x == 0.0)
        assert all(np.all(u == 0.0) for u in ensemble.u)
        report = cost_report(problem, decentralized(problem), ensemble)
        assert report.j_mc == 0.0 and report.j_exact == 0.0 and report.j_se == 0.0

    def test_single_dm_filter_is_the_state(self):
        problem = make_problem(TimeGrid(1.0, 100), DmPartition.single(2, 1, 2), A=[[-0.5, 0.3], [0.2, -0.4]],
                               B=[[1.0], [0.5]], G=np.diag([0.5, 0.4]), H=np.eye(2), R=[[1.0]],
                               M_T=np.eye(2), x0_mean=[1.0, -0.5], x0_cov=np.zeros((2, 2)))
        ensemble = simulate_closed_loop(problem, decentralized(problem), n_paths=20, seed=3)
        assert np.max(np.abs(ensemble.xhat[0] - ensemble.x)) <= 1e-10

    def test_filters_start_at_prior_mean(self, two_dm):
        problem = two_dm()
        ensemble = simulate_closed_loop(problem, decentralized(problem), n_paths=50, seed=2)
        for xhat in ensemble.xhat:
            assert np.all(xhat[:, 0] == problem.x0_mean)
        assert np.std(ensemble.x[:, 0, 0]) > 0.0

    def test_ornstein_uhlenbeck_variance(self):
        problem = ornstein_uhlenbeck()
        ensemble = simulate_closed_loop(problem, zero_control(problem), n_paths=10000, seed=11)
        variance = np.var(ensemble.x[:, -1, 0], ddof=1)
        expected = 0.5 * (1.0 - np.exp(-2.0))
        assert abs(variance - expected) <= 3.0 * expected * np.sqrt(2.0 / 9999)

    def test_controls_recomputed_from_filters(self, two_dm):
        problem = two_dm()
        strategy = decentralized(problem)
        ensemble = simulate_closed_loop(problem, strategy, n_paths=7, seed=5)
        for i in (1, 2):
            np.testing.assert_allclose(ensemble.u[i - 1], strategy.controls(i, ensemble.xhat[i - 1]), atol=1e-14)

    def test_paths_independent_of_chunking(self, two_dm):
        problem = two_dm()
        strategy = decentralized(problem)
        a = simulate_closed_loop(problem, strategy, n_paths=40, seed=9, chunk_size=7, max_workers=1)
        b = simulate_closed_loop(problem, strategy, n_paths=40, seed=9, chunk_size=512, max_workers=4)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.dW, b.dW)
        assert ensemble_to_frame(a).to_csv(index=False) == ensemble_to_frame(b).to_csv(index=False)

    def test_prefix_of_larger_ensemble(self, two_dm):
        problem = two_dm()
        strategy = decentralized(problem)
        small = simulate_closed_loop(problem, strategy, n_paths=5, seed=9)
        large = simulate_closed_loop(problem, strategy, n_paths=12, seed=9)
        np.testing.assert_array_equal(small.x, large.x[:5])

    def test_seed_changes_paths(self, two_dm):
        problem = two_dm()
        strategy = decentralized(problem)
        a = simulate_closed_loop(problem, strategy, n_paths=3, seed=1)
        b = simulate_closed_loop(problem, strategy, n_paths=3, seed=2)
        assert not np.array_equal(a.x, b.x)

    def test_default_scheme_is_euler_maruyama(self, two_dm):
        problem = two_dm(n_steps=20)
        strategy = decentralized(problem)
        ensemble = simulate_closed_loop(problem, strategy, n_paths=4, seed=1)
        assert ensemble.scheme == "euler"

        # one explicit Euler-Maruyama step of the stacked closed loop
        system = build_closed_loop(problem, strategy)
        z = np.concatenate([ensemble.x[:, 0], *(xhat[:, 0] for xhat in ensemble.xhat)], axis=1)
        A, b, G = system.A_cl.values[0], system.b_cl.values[0], system.G_cl.values[0]
        step = z + problem.grid.h * (z @ A.T + b) + ensemble.dW[:, 0] @ G.T
        np.testing.assert_allclose(ensemble.x[:, 1], step[:, :2], rtol=1e-12, atol=1e-14)

    def test_rk4_scheme_is_an_option(self, two_dm):
        problem = two_dm(n_steps=20)
        strategy = decentralized(problem)
        euler = simulate_closed_loop(problem, strategy, n_paths=4, seed=1)
        rk4 = simulate_closed_loop(problem, strategy, n_paths=4, seed=1, scheme="rk4")
        assert rk4.scheme == "rk4"
        np.testing.assert_array_equal(rk4.dW, euler.dW)
        np.testing.assert_array_equal(rk4.x[:, 0], euler.x[:, 0])
        assert not np.array_equal(rk4.x[:, 1:], euler.x[:, 1:])

    def test_draws_follow_the_path_layout(self, two_dm):
        problem = two_dm(n_steps=12)
        seed, n, m, h = 5, problem.n, problem.m, problem.grid.h
        ensemble = simulate_closed_loop(problem, zero_control(problem), n_paths=6, seed=seed, chunk_size=4)
        for p in range(6):
            stream = np.random.Generator(np.random.Philox(key=np.array([seed, p], dtype=np.uint64)))
            draws = stream.standard_normal(n + 12 * m)
            np.testing.assert_array_equal(ensemble.dW[p], np.sqrt(h) * draws[n:].reshape(12, m))
            expected_x0 = np.asarray(problem.x0_mean) + np.sqrt(0.1) * draws[:n]
            np.testing.assert_allclose(ensemble.x[p, 0], expected_x0, rtol=1e-12, atol=1e-14)

    def test_blow_up_reports_path_and_node(self):
        problem = make_problem(TimeGrid(1.0, 4), DmPartition.single(1, 1, 1), A=[[1e200]], B=[[1.0]],
                               G=[[0.0]], H=[[1.0]], R=[[1.0]], M_T=[[0.0]], x0_mean=[1.0], x0_cov=[[0.0]])
        with pytest.raises(SimulationDivergedError) as info:
            simulate_closed_loop(problem, zero_control(problem), n_paths=2, seed=0, scheme="euler")
        assert info.value.path == 0
        assert info.value.node == 2

    @pytest.mark.parametrize("options", [dict(n_paths=0), dict(scheme="midpoint")])
    def test_rejects_bad_options(self, two_dm, options):
        problem = two_dm()
        with pytest.raises(PreconditionError):
            simulate_closed_loop(problem, zero_control(problem), **options)

    def test_frame_layout(self, two_dm):
        problem = two_dm(n_steps=10)
        ensemble = simulate_closed_loop(problem, decentralized(problem), n_paths=3, seed=0)
        frame = ensemble_to_frame(ensemble)
        assert list(frame.columns) == ["path", "t", "x_1", "x_2", "xhat1_1", "xhat1_2", "xhat2_1", "xhat2_2",
                                       "u1_1", "u2_1"]
        assert len(frame) == 3 * 11
        assert frame["path"].iloc[11] == 1 and frame["t"].iloc[11] == 0.0


class TestCosts:
    def test_value_function_of_deterministic_problem(self, scalar_lq):
        problem = scalar_lq()
        strategy = centralized_gain(solve_riccati_lqf(problem), problem)
        assert abs(compute_cost_exact(problem, strategy) - 0.5 * np.tanh(2.0)) <= 1e-6

    def test_noise_adds_integrated_cost_to_go(self, scalar_lq):
        problem = scalar_lq(noise=1.0)
        strategy = centralized_gain(solve_riccati_lqf(problem), problem)
        expected = 0.5 * np.tanh(2.0) + 0.5 * np.log(np.cosh(2.0))
        assert abs(compute_cost_exact(problem, strategy) - expected) <= 1e-5

    def test_deterministic_equivalence(self, two_dm):
        problem = two_dm(noise=(0.0, 0.0), x0_var=0.0)
        strategy = decentralized(problem, tol=1e-12, max_iter=500)
        ensemble = simulate_closed_loop(problem, strategy, n_paths=2, seed=0, scheme="rk4")
        report = cost_report(problem, strategy, ensemble)
        assert abs(report.j_mc - report.j_exact) <= 1e-8
        assert report.j_se <= 1e-12

    def test_monte_carlo_brackets_exact_cost(self, two_dm):
        problem = two_dm(n_steps=100)
        strategy = decentralized(problem)
        report = cost_report(problem, strategy, simulate_closed_loop(problem, strategy, n_paths=4000, seed=17,
                                                                      scheme="rk4"))
        assert report.mc_consistent()
        assert report.n_paths == 4000
        assert set(report.breakdown) == {"mc_running", "mc_terminal", "exact_running", "exact_terminal"}

    def test_standard_error_shrinks_with_paths(self):
        problem = ornstein_uhlenbeck(n_steps=50)
        strategy = zero_control(problem)
        few = estimate_cost_mc(simulate_closed_loop(problem, strategy, n_paths=100, seed=4), problem)
        many = estimate_cost_mc(simulate_closed_loop(problem, strategy, n_paths=10000, seed=4), problem)
        assert 6.0 <= few.j_se / many.j_se <= 16.0

    def test_euler_weak_error_halves_with_step(self):
        # stiff OU on a coarse grid: the O(h) bias of the noisy cost dwarfs the Monte Carlo error
        errors, spreads = [], []
        for n_steps in (10, 20):
            problem = ornstein_uhlenbeck(n_steps=n_steps, rate=4.0)
            strategy = zero_control(problem)
            ensemble = simulate_closed_loop(problem, strategy, n_paths=20000, seed=23, scheme="euler")
            report = cost_report(problem, strategy, ensemble)
            errors.append(abs(report.j_mc - report.j_exact))
            spreads.append(report.j_se)
        assert errors[0] > 10.0 * spreads[0]
        assert errors[0] > errors[1]
        assert 1.5 <= errors[0] / errors[1] <= 3.0

    @pytest.mark.slow
    def test_bundled_example_brackets_exact_cost(self, problem_dir):
        problem, problem_file = load_problem(problem_dir / "two_dm_example.json")
        strategy = decentralized(problem, **problem_file.run.picard.model_dump())
        ensemble = simulate_closed_loop(problem, strategy, n_paths=10000, seed=problem_file.run.seed)
        assert ensemble.scheme == "euler"
        report = cost_report(problem, strategy, ensemble)
        assert abs(report.j_mc - report.j_exact) <= 3.0 * report.j_se

    def test_exact_breakdown_without_terminal_weight(self):
        problem = ornstein_uhlenbeck()
        exact = exact_cost_breakdown(problem, zero_control(problem))
        assert exact.terminal == 0.0
        assert exact.total == exact.running > 0.0

    def test_single_path_has_zero_standard_error(self):
        problem = ornstein_uhlenbeck(n_steps=20)
        report = estimate_cost_mc(simulate_closed_loop(problem, zero_control(problem), n_paths=1, seed=0), problem)
        assert report.j_se == 0.0

    def test_empty_ensemble(self, two_dm):
        problem = two_dm(n_steps=10)
        empty = ClosedLoopEnsemble(grid=problem.grid, seed=0, scheme="euler", kind="centralized",
                                   x=np.zeros((0, 11, 2)), xhat=(), u=(np.zeros((0, 11, 1)), np.zeros((0, 11, 1))),
                                   dW=np.zeros((0, 10, 2)))
        with pytest.raises(EmptyEnsembleError):
            estimate_cost_mc(empty, problem)
