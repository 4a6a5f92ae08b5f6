import json

import numpy as np
import pytest

from src.main.python.core.numerics import MatrixTrajectory, TimeGrid
from src.main.python.models.problem import (
    DmPartition, LqfProblem, NfProblem, SubsystemBlocks, as_nf, assemble_augmented, dm_slice,
    make_problem, scale_coupling, validate,
)
from src.main.python.models.schema import load_problem
from src.main.python.utils.errors import ConfigurationError, ProblemValidationError

GRID = TimeGrid(1.0, 10)
PAIR = DmPartition((1, 1), (1, 1), (1, 1))


def build(**overrides):
    data = dict(A=np.zeros((2, 2)), B=np.eye(2), G=np.eye(2), H=np.eye(2), R=np.eye(2), M_T=np.zeros((2, 2)))
    data.update(overrides)
    return make_problem(GRID, PAIR, **data)


class TestPartition:
    def test_slices(self):
        part = DmPartition((2, 1), (1, 2), (2, 1))
        assert (part.N, part.n, part.d, part.m) == (2, 3, 3, 3)
        assert part.state_slice(2) == slice(2, 3)
        assert part.decision_slice(2) == slice(1, 3)
        assert part.index_maps()["noise"] == (slice(0, 2), slice(2, 3))

    @pytest.mark.parametrize("dims", [((1, 1), (1,), (1, 1)), ((), (), ()), ((1, 0), (1, 1), (1, 1))])
    def test_rejects_bad_dimensions(self, dims):
        with pytest.raises(ProblemValidationError):
            DmPartition(*dims)

    def test_dm_out_of_range(self):
        with pytest.raises(ProblemValidationError) as info:
            PAIR.state_slice(3)
        assert info.value.kind == "index_out_of_range"
        assert info.value.dm == 3


class TestValidation:
    def test_valid_problem_is_annotated(self):
        problem = build()
        assert isinstance(problem, LqfProblem)
        assert problem.validated
        assert problem.index_maps["decision"] == (slice(0, 1), slice(1, 2))
        assert validate(problem) is problem

    def test_singular_R_reports_node(self):
        R = np.broadcast_to(np.eye(2), (GRID.n_nodes, 2, 2)).copy()
        R[7] = np.diag([1.0, 0.0])
        with pytest.raises(ProblemValidationError) as info:
            build(R=R)
        assert info.value.kind == "not_positive_definite"
        assert info.value.node == 7
        assert info.value.exit_code == 2

    def test_dimension_mismatch(self):
        with pytest.raises(ProblemValidationError) as info:
            build(B=np.ones((2, 3)))
        assert info.value.kind == "dimension_mismatch"

    def test_H_must_be_psd(self):
        with pytest.raises(ProblemValidationError) as info:
            build(H=np.diag([1.0, -0.1]))
        assert info.value.kind == "not_psd"

    def test_R_must_be_symmetric(self):
        with pytest.raises(ProblemValidationError) as info:
            build(R=[[1.0, 0.1], [0.0, 1.0]])
        assert info.value.kind == "not_symmetric"

    def test_noise_must_be_block_diagonal(self):
        with pytest.raises(ProblemValidationError) as info:
            build(G=[[1.0, 0.2], [0.0, 1.0]])
        assert info.value.kind == "invalid_noise_structure"
        assert info.value.dm == 1

    def test_time_varying_coefficients(self):
        A = np.stack([[[0.0, t], [0.0, 0.0]] for t in GRID.times])
        problem = build(A=A)
        assert not problem.A.is_constant
        assert problem.A.values[10, 0, 1] == 1.0

    def test_as_nf_lifts_with_zero_terms(self):
        nf = as_nf(build())
        assert isinstance(nf, NfProblem)
        assert nf.has_zero_E()
        assert not np.any(nf.b.values)
        assert len(nf.kappa) == 2 and len(nf.s_coef) == 2
        assert nf.N_T.shape == (2,)

    def test_nf_terms_need_one_entry_per_channel(self):
        with pytest.raises(ProblemValidationError):
            build(kappa=[np.zeros((2, 2))])


class TestAugmentation:
    def test_decoupled_is_block_diagonal(self):
        problem = assemble_augmented(
            [SubsystemBlocks(1, 1, 1, A={1: [[-1.0]]}, B={1: [[2.0]]}, G=[[0.5]]),
             SubsystemBlocks(1, 1, 1, A={2: [[0.3]]}, B={2: [[1.0]]}, G=[[0.4]])],
            GRID, np.eye(2), np.eye(2), np.zeros((2, 2)))
        np.testing.assert_array_equal(problem.A.values[0], np.diag([-1.0, 0.3]))
        np.testing.assert_array_equal(problem.B.values[0], np.diag([2.0, 1.0]))
        np.testing.assert_array_equal(problem.G.values[0], np.diag([0.5, 0.4]))

    def test_cross_blocks_land_in_place(self):
        problem = assemble_augmented(
            [SubsystemBlocks(2, 1, 1, A={1: np.eye(2), 2: [[0.5], [0.0]]}, B={1: [[1.0], [0.0]]}, G=[[1.0], [0.0]]),
             SubsystemBlocks(1, 1, 1, A={2: [[-1.0]]}, B={1: [[0.7]], 2: [[1.0]]}, G=[[0.2]])],
            GRID, np.eye(3), np.eye(2), np.zeros((3, 3)))
        expected_B = [[1.0, 0.0], [0.0, 0.0], [0.7, 1.0]]
        np.testing.assert_array_equal(problem.B.values[4], expected_B)
        np.testing.assert_array_equal(problem.A.values[4][:, 2], [0.5, 0.0, -1.0])
        np.testing.assert_array_equal(dm_slice(problem, 1).B_i.values[0], [[1.0], [0.0], [0.7]])

    def test_chain_keeps_missing_blocks_zero(self):
        subsystems = [SubsystemBlocks(1, 1, 1, A={1: [[0.1]], 2: [[0.2]]}, B={1: [[1.0]]}),
                      SubsystemBlocks(1, 1, 1, A={2: [[0.1]], 3: [[0.2]]}, B={2: [[1.0]]}),
                      SubsystemBlocks(1, 1, 1, A={3: [[0.1]]}, B={3: [[1.0]]})]
        problem = assemble_augmented(subsystems, GRID, np.eye(3), np.eye(3), np.zeros((3, 3)))
        assert problem.A.values[0, 0, 2] == 0.0
        assert problem.A.values[0, 1, 2] == 0.2

    def test_inconsistent_block(self):
        with pytest.raises(ProblemValidationError):
            assemble_augmented([SubsystemBlocks(1, 1, 1, A={1: np.eye(2)})], GRID,
                               np.eye(1), np.eye(1), np.zeros((1, 1)))

    def test_unknown_column_subsystem(self):
        with pytest.raises(ProblemValidationError) as info:
            assemble_augmented([SubsystemBlocks(1, 1, 1, A={2: [[1.0]]})], GRID,
                               np.eye(1), np.eye(1), np.zeros((1, 1)))
        assert info.value.kind == "index_out_of_range"


class TestSlicing:
    def test_slices_reassemble_R(self):
        rng = np.random.default_rng(3)
        D = rng.normal(size=(3, 3))
        R = D @ D.T + np.eye(3)
        part = DmPartition((1, 1, 1), (1, 1, 1), (1, 1, 1))
        problem = make_problem(GRID, part, np.zeros((3, 3)), np.eye(3), np.eye(3), np.eye(3), R, np.eye(3))
        rebuilt = np.zeros((3, 3))
        for i in range(1, 4):
            blocks = dm_slice(problem, i)
            rebuilt[i - 1, i - 1] = blocks.R_ii.values[0, 0, 0]
            for j, R_ij in blocks.R_ij.items():
                rebuilt[i - 1, j - 1] = R_ij.values[0, 0, 0]
        np.testing.assert_array_equal(rebuilt, R)

    def test_block_diagonal_R_has_zero_cross_blocks(self):
        blocks = dm_slice(build(R=np.diag([1.0, 2.0])), 2)
        assert blocks.R_ii.values[0, 0, 0] == 2.0
        assert not np.any(blocks.R_ij[1].values)
        np.testing.assert_array_equal(blocks.G_i.values[0], [[0.0], [1.0]])


class TestCouplingScale:
    def test_scales_off_diagonal_blocks(self):
        problem = build(A=[[0.0, 2.0], [4.0, 1.0]], R=[[1.0, 0.5], [0.5, 1.0]])
        half = scale_coupling(problem, 0.5)
        np.testing.assert_array_equal(half.A.values[0], [[0.0, 1.0], [2.0, 1.0]])
        np.testing.assert_array_equal(half.R.values[0], [[1.0, 0.25], [0.25, 1.0]])
        assert half.validated

    def test_zero_gives_block_diagonal(self):
        problem = scale_coupling(build(R=[[1.0, 0.5], [0.5, 1.0]]), 0.0)
        assert problem.R.values[0, 0, 1] == 0.0

    def test_single_target(self):
        problem = build(A=[[0.0, 2.0], [4.0, 1.0]], R=[[1.0, 0.5], [0.5, 1.0]])
        scaled = scale_coupling(problem, 0.0, target="R")
        np.testing.assert_array_equal(scaled.A.values, problem.A.values)
        assert scaled.R.values[0, 0, 1] == 0.0

    def test_unknown_target(self):
        with pytest.raises(ProblemValidationError):
            scale_coupling(build(), 0.5, target="G")


class TestLoader:
    def test_bundled_two_dm(self, problem_dir):
        problem, problem_file = load_problem(problem_dir / "two_dm_example.json")
        assert isinstance(problem, LqfProblem) and not isinstance(problem, NfProblem)
        assert problem.N == 2
        assert problem.grid.n_steps == 400
        assert problem_file.run.seed == 20240101

    def test_bundled_subsystem_form(self, problem_dir):
        problem, _ = load_problem(problem_dir / "decoupled.json")
        np.testing.assert_array_equal(problem.A.values[0], np.diag([-0.5, 0.3]))
        np.testing.assert_array_equal(problem.B.values[0], np.diag([1.0, 0.8]))

    def test_bundled_normal_form(self, problem_dir):
        problem, problem_file = load_problem(problem_dir / "scalar_nf.json")
        assert isinstance(problem, NfProblem)
        assert np.all(problem.b.values == 1.0)
        assert problem_file.run.mode == "centralized"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError) as info:
            load_problem(tmp_path / "nope.json")
        assert info.value.kind == "invalid_config"

    def test_bad_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigurationError):
            load_problem(path)

    def test_dynamics_required(self, tmp_path, problem_dir):
        document = json.loads((problem_dir / "two_dm_example.json").read_text())
        del document["matrices"]["A"]
        path = tmp_path / "p.json"
        path.write_text(json.dumps(document))
        with pytest.raises(ConfigurationError) as info:
            load_problem(path)
        assert info.value.exit_code == 2

    def test_dynamics_given_twice(self, tmp_path, problem_dir):
        document = json.loads((problem_dir / "two_dm_example.json").read_text())
        document["subsystems"] = [{"A": {"1": [[1.0]]}}, {"A": {"2": [[1.0]]}}]
        path = tmp_path / "p.json"
        path.write_text(json.dumps(document))
        with pytest.raises(ConfigurationError):
            load_problem(path)
