#!/usr/bin/env python3
"""
Problem Model

Linear-quadratic (LQF) and normal-form (NF) team problems, the partition of the
augmented state / decision / noise vectors among decision makers (DMs), validation,
assembly from subsystem blocks and per-DM slicing.

DM indices are 1-based everywhere in this module's public functions.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.numerics import MatrixTrajectory, TimeGrid, VectorTrajectory
from ..utils.config import get_settings
from ..utils.errors import ProblemValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DmPartition:
    """Dimensions owned by each decision maker"""

    state_dims: Tuple[int, ...]
    decision_dims: Tuple[int, ...]
    noise_dims: Tuple[int, ...]

    def __post_init__(self):
        for name in ("state_dims", "decision_dims", "noise_dims"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        sizes = {len(self.state_dims), len(self.decision_dims), len(self.noise_dims)}
        if len(sizes) != 1 or not self.state_dims:
            raise ProblemValidationError("Partition lists must have one positive entry per DM")
        if min(self.state_dims + self.decision_dims + self.noise_dims) <= 0:
            raise ProblemValidationError("Partition dimensions must be positive")

    @classmethod
    def single(cls, n: int, d: int, m: int) -> "DmPartition":
        return cls((n,), (d,), (m,))

    @property
    def N(self) -> int:
        return len(self.state_dims)

    @property
    def n(self) -> int:
        return sum(self.state_dims)

    @property
    def d(self) -> int:
        return sum(self.decision_dims)

    @property
    def m(self) -> int:
        return sum(self.noise_dims)

    def _slice(self, dims: Tuple[int, ...], i: int) -> slice:
        self.check_dm(i)
        start = sum(dims[:i - 1])
        return slice(start, start + dims[i - 1])

    def check_dm(self, i: int) -> None:
        if not 1 <= i <= self.N:
            raise ProblemValidationError(f"DM index {i} outside 1..{self.N}", kind="index_out_of_range", dm=i)

    def state_slice(self, i: int) -> slice:
        return self._slice(self.state_dims, i)

    def decision_slice(self, i: int) -> slice:
        return self._slice(self.decision_dims, i)

    def noise_slice(self, i: int) -> slice:
        return self._slice(self.noise_dims, i)

    def index_maps(self) -> Dict[str, Tuple[slice, ...]]:
        dms = range(1, self.N + 1)
        return {
            "state": tuple(self.state_slice(i) for i in dms),
            "decision": tuple(self.decision_slice(i) for i in dms),
            "noise": tuple(self.noise_slice(i) for i in dms),
        }


@dataclass(frozen=True, eq=False)
class LqfProblem:
    """Linear dynamics with additive noise and quadratic pay-off"""

    grid: TimeGrid
    A: MatrixTrajectory
    B: MatrixTrajectory
    G: MatrixTrajectory
    H: MatrixTrajectory
    R: MatrixTrajectory
    M_T: np.ndarray
    x0_mean: np.ndarray
    x0_cov: np.ndarray
    partition: DmPartition
    validated: bool = False
    index_maps: Optional[Dict[str, Tuple[slice, ...]]] = None

    @property
    def N(self) -> int:
        return self.partition.N

    @property
    def n(self) -> int:
        return self.partition.n

    @property
    def d(self) -> int:
        return self.partition.d

    @property
    def m(self) -> int:
        return self.partition.m

    def with_updates(self, **changes) -> "LqfProblem":
        """Copy with replaced fields, validated again"""
        return validate(replace(self, validated=False, index_maps=None, **changes))


@dataclass(frozen=True, eq=False)
class NfProblem(LqfProblem):
    """Normal form: LQF plus affine terms and state/control dependent diffusion columns"""

    b: Optional[VectorTrajectory] = None
    F: Optional[VectorTrajectory] = None
    E: Optional[MatrixTrajectory] = None
    m_lin: Optional[VectorTrajectory] = None
    N_T: Optional[np.ndarray] = None
    kappa: Tuple[MatrixTrajectory, ...] = field(default_factory=tuple)
    s_coef: Tuple[MatrixTrajectory, ...] = field(default_factory=tuple)

    def has_zero_E(self) -> bool:
        return self.E is None or not np.any(self.E.values)


AnyProblem = Union[LqfProblem, NfProblem]


@dataclass(frozen=True)
class DmBlocks:
    """Per-DM views of the augmented matrices"""

    dm: int
    B_i: MatrixTrajectory
    R_ii: MatrixTrajectory
    R_ij: Dict[int, MatrixTrajectory]
    G_ii: MatrixTrajectory
    G_i: MatrixTrajectory


@dataclass(frozen=True)
class SubsystemBlocks:
    """
    One subsystem's row of blocks: A[j] is A_ij (n_i x n_j), B[j] is B_ij (n_i x d_j),
    G is G_ii (n_i x m_i). Missing A/B entries are zero blocks. Blocks are constant
    matrices or node-sampled stacks.
    """

    state_dim: int
    decision_dim: int
    noise_dim: int
    A: Mapping[int, np.ndarray] = field(default_factory=dict)
    B: Mapping[int, np.ndarray] = field(default_factory=dict)
    G: Optional[np.ndarray] = None


def as_matrix_trajectory(grid: TimeGrid, value, name: str) -> MatrixTrajectory:
    """Constant matrix or per-node stack of matrices -> MatrixTrajectory"""
    if isinstance(value, MatrixTrajectory):
        return value
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as e:
        raise ProblemValidationError(f"{name}: not a rectangular numeric array ({e})") from e
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim == 2:
        return MatrixTrajectory.constant(grid, arr)
    if arr.ndim == 3 and arr.shape[0] == grid.n_nodes:
        return MatrixTrajectory(grid, arr)
    raise ProblemValidationError(
        f"{name}: expected a matrix or {grid.n_nodes} per-node matrices, got shape {arr.shape}")


def as_vector_trajectory(grid: TimeGrid, value, name: str) -> VectorTrajectory:
    """Constant vector or per-node stack of vectors -> VectorTrajectory"""
    if isinstance(value, VectorTrajectory):
        return value
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError) as e:
        raise ProblemValidationError(f"{name}: not a rectangular numeric array ({e})") from e
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim == 1:
        return VectorTrajectory.constant(grid, arr)
    if arr.ndim == 2 and arr.shape[0] == grid.n_nodes:
        return VectorTrajectory(grid, arr)
    raise ProblemValidationError(
        f"{name}: expected a vector or {grid.n_nodes} per-node vectors, got shape {arr.shape}")


def _check_shape(name: str, actual: Tuple[int, ...], expected: Tuple[int, ...]) -> None:
    if tuple(actual) != tuple(expected):
        raise ProblemValidationError(f"{name} has shape {tuple(actual)}, expected {tuple(expected)}",
                                     kind="dimension_mismatch")


def _check_grid(name: str, traj, grid: TimeGrid) -> None:
    if traj.grid != grid:
        raise ProblemValidationError(f"{name} is sampled on a different grid", kind="dimension_mismatch")


def _check_symmetric(name: str, values: np.ndarray) -> None:
    tol = get_settings().SYMMETRY_TOLERANCE
    gap = np.abs(values - np.swapaxes(values, -1, -2))
    scale = np.maximum(1.0, np.abs(values).max(axis=(-1, -2)))
    worst = gap.max(axis=(-1, -2)) / scale
    if np.any(worst > tol):
        bad = np.atleast_1d(worst > tol)
        node = int(np.argmax(bad)) if worst.ndim else None
        raise ProblemValidationError(f"{name} is not symmetric" + (f" at node {node}" if node is not None else ""),
                                     kind="not_symmetric", node=node)


def _check_definite(name: str, values: np.ndarray, strict: bool) -> None:
    settings = get_settings()
    sym = 0.5 * (values + np.swapaxes(values, -1, -2))
    eigs = np.linalg.eigvalsh(sym)
    mins = eigs.min(axis=-1)
    if strict:
        failing = np.atleast_1d(mins < settings.PD_TOLERANCE)
        kind, label = "not_positive_definite", "positive definite"
    else:
        failing = np.atleast_1d(mins < -settings.PSD_TOLERANCE)
        kind, label = "not_psd", "positive semidefinite"
    if np.any(failing):
        node = int(np.argmax(failing)) if mins.ndim else None
        eig = float(np.atleast_1d(mins)[node or 0])
        where = f" at node {node}" if node is not None else ""
        raise ProblemValidationError(f"{name} is not {label}{where} (min eigenvalue {eig:.3e})",
                                     kind=kind, node=node)


def validate(problem: AnyProblem) -> AnyProblem:
    """
    Check dimensions, grids, noise structure and definiteness; return the problem
    marked as validated and annotated with the partition's index maps.
    """
    if problem.validated:
        return problem

    grid = problem.grid
    part = problem.partition
    n, d, m = part.n, part.d, part.m

    for name, expected in (("A", (n, n)), ("B", (n, d)), ("G", (n, m)), ("H", (n, n)), ("R", (d, d))):
        traj = getattr(problem, name)
        _check_grid(name, traj, grid)
        _check_shape(name, traj.shape, expected)
    M_T = np.atleast_2d(np.array(problem.M_T, dtype=float))
    x0_mean = np.atleast_1d(np.array(problem.x0_mean, dtype=float))
    x0_cov = np.atleast_2d(np.array(problem.x0_cov, dtype=float))
    _check_shape("M_T", M_T.shape, (n, n))
    _check_shape("x0.mean", x0_mean.shape, (n,))
    _check_shape("x0.cov", x0_cov.shape, (n, n))
    for name, arr in (("M_T", M_T), ("x0.mean", x0_mean), ("x0.cov", x0_cov)):
        if not np.all(np.isfinite(arr)):
            raise ProblemValidationError(f"{name} contains non-finite entries", kind="dimension_mismatch")

    # noise of subsystem i may only drive subsystem i
    for i in range(1, part.N + 1):
        for j in range(1, part.N + 1):
            if i != j and np.any(problem.G.values[:, part.state_slice(i), part.noise_slice(j)]):
                raise ProblemValidationError(f"G block ({i},{j}) is nonzero; noise must be block-diagonal",
                                             kind="invalid_noise_structure", dm=i)

    _check_symmetric("R", problem.R.values)
    _check_definite("R", problem.R.values, strict=True)
    _check_symmetric("H", problem.H.values)
    _check_definite("H", problem.H.values, strict=False)
    _check_symmetric("M_T", M_T)
    _check_definite("M_T", M_T, strict=False)
    _check_symmetric("x0.cov", x0_cov)
    _check_definite("x0.cov", x0_cov, strict=False)

    changes = dict(M_T=M_T, x0_mean=x0_mean, x0_cov=x0_cov)
    if isinstance(problem, NfProblem):
        changes.update(_validated_nf_terms(problem))

    logger.debug(f"Validated problem with N={part.N}, n={n}, d={d}, m={m}, n_steps={grid.n_steps}")
    return replace(problem, validated=True, index_maps=part.index_maps(), **changes)


def _validated_nf_terms(problem: NfProblem) -> Dict[str, object]:
    grid = problem.grid
    n, d, m = problem.n, problem.d, problem.m
    zeros_n = VectorTrajectory.constant(grid, np.zeros(n))
    terms: Dict[str, object] = {
        "b": problem.b if problem.b is not None else zeros_n,
        "F": problem.F if problem.F is not None else zeros_n,
        "E": problem.E if problem.E is not None else MatrixTrajectory.constant(grid, np.zeros((d, n))),
        "m_lin": problem.m_lin if problem.m_lin is not None else VectorTrajectory.constant(grid, np.zeros(d)),
        "N_T": np.zeros(n) if problem.N_T is None else np.atleast_1d(np.array(problem.N_T, dtype=float)),
    }
    for name, expected in (("b", (n,)), ("F", (n,)), ("E", (d, n)), ("m", (d,))):
        traj = terms["m_lin" if name == "m" else name]
        _check_grid(name, traj, grid)
        _check_shape(name, traj.shape, expected)
    _check_shape("N_T", terms["N_T"].shape, (n,))

    kappa = tuple(problem.kappa) or tuple(MatrixTrajectory.constant(grid, np.zeros((n, n))) for _ in range(m))
    s_coef = tuple(problem.s_coef) or tuple(MatrixTrajectory.constant(grid, np.zeros((n, d))) for _ in range(m))
    if len(kappa) != m or len(s_coef) != m:
        raise ProblemValidationError(f"kappa and s need one entry per noise channel ({m})",
                                     kind="dimension_mismatch")
    for idx, (kap, s) in enumerate(zip(kappa, s_coef), start=1):
        _check_shape(f"kappa[{idx}]", kap.shape, (n, n))
        _check_shape(f"s[{idx}]", s.shape, (n, d))
    terms["kappa"] = kappa
    terms["s_coef"] = s_coef
    return terms


def ensure_validated(problem: AnyProblem) -> AnyProblem:
    return problem if problem.validated else validate(problem)


def as_nf(problem: AnyProblem) -> NfProblem:
    """Lift an LQF problem to NF with all extra terms zero"""
    if isinstance(problem, NfProblem):
        return ensure_validated(problem)
    base = {name: getattr(problem, name) for name in
            ("grid", "A", "B", "G", "H", "R", "M_T", "x0_mean", "x0_cov", "partition")}
    return validate(NfProblem(**base))


def make_problem(grid: TimeGrid, partition: DmPartition, A, B, G, H, R, M_T,
                 x0_mean=None, x0_cov=None, **nf_terms) -> AnyProblem:
    """Build and validate a problem from constant or node-sampled arrays"""
    n = partition.n
    fields = dict(
        grid=grid,
        A=as_matrix_trajectory(grid, A, "A"),
        B=as_matrix_trajectory(grid, B, "B"),
        G=as_matrix_trajectory(grid, G, "G"),
        H=as_matrix_trajectory(grid, H, "H"),
        R=as_matrix_trajectory(grid, R, "R"),
        M_T=np.atleast_2d(np.array(M_T, dtype=float)),
        x0_mean=np.zeros(n) if x0_mean is None else np.atleast_1d(np.array(x0_mean, dtype=float)),
        x0_cov=np.zeros((n, n)) if x0_cov is None else np.atleast_2d(np.array(x0_cov, dtype=float)),
        partition=partition,
    )
    nf_terms = {k: v for k, v in nf_terms.items() if v is not None}
    if not nf_terms:
        return validate(LqfProblem(**fields))

    for name in ("b", "F", "m_lin"):
        if name in nf_terms:
            nf_terms[name] = as_vector_trajectory(grid, nf_terms[name], name)
    if "E" in nf_terms:
        nf_terms["E"] = as_matrix_trajectory(grid, nf_terms["E"], "E")
    for name in ("kappa", "s_coef"):
        if name in nf_terms:
            nf_terms[name] = tuple(as_matrix_trajectory(grid, v, f"{name}[{k}]")
                                   for k, v in enumerate(nf_terms[name], start=1))
    return validate(NfProblem(**fields, **nf_terms))


def assemble_augmented(subsystems: Sequence[SubsystemBlocks], grid: TimeGrid, H, R, M_T,
                       x0_mean=None, x0_cov=None) -> LqfProblem:
    """
    Stack per-subsystem blocks into the augmented A = [A_ij], B = [B_ij] (column block j
    is DM j's input matrix B^(j)) and block-diagonal G.
    """
    partition = DmPartition(
        tuple(s.state_dim for s in subsystems),
        tuple(s.decision_dim for s in subsystems),
        tuple(s.noise_dim for s in subsystems),
    )
    N, n, d, m = partition.N, partition.n, partition.d, partition.m
    A = np.zeros((grid.n_nodes, n, n))
    B = np.zeros((grid.n_nodes, n, d))
    G = np.zeros((grid.n_nodes, n, m))

    def place(target, rows, cols, block, name, shape):
        traj = as_matrix_trajectory(grid, block, name)
        if traj.shape != shape:
            raise ProblemValidationError(f"Inconsistent block {name}: shape {traj.shape}, expected {shape}",
                                         kind="dimension_mismatch")
        target[:, rows, cols] = traj.values

    for i, sub in enumerate(subsystems, start=1):
        rows = partition.state_slice(i)
        for label, blocks, target, col_slice, col_dims in (
                ("A", sub.A, A, partition.state_slice, partition.state_dims),
                ("B", sub.B, B, partition.decision_slice, partition.decision_dims)):
            for j, block in blocks.items():
                j = int(j)
                if not 1 <= j <= N:
                    raise ProblemValidationError(f"{label}_{i}{j} refers to missing subsystem {j}",
                                                 kind="index_out_of_range", dm=j)
                place(target, rows, col_slice(j), block, f"{label}_{i}{j}", (sub.state_dim, col_dims[j - 1]))
        if sub.G is not None:
            place(G, rows, partition.noise_slice(i), sub.G, f"G_{i}{i}", (sub.state_dim, sub.noise_dim))

    logger.info(f"Assembled augmented system: N={N}, n={n}, d={d}, m={m}")
    return make_problem(grid, partition, A, B, G, H, R, M_T, x0_mean, x0_cov)


def dm_slice(problem: AnyProblem, i: int) -> DmBlocks:
    """(B^(i), R_ii, {R_ij}_{j != i}, G_ii) plus the n x m_i noise column block G^(i)"""
    part = problem.partition
    part.check_dm(i)
    grid = problem.grid
    rows_d = part.decision_slice(i)
    R = problem.R.values
    return DmBlocks(
        dm=i,
        B_i=MatrixTrajectory(grid, problem.B.values[:, :, rows_d]),
        R_ii=MatrixTrajectory(grid, R[:, rows_d, rows_d]),
        R_ij={j: MatrixTrajectory(grid, R[:, rows_d, part.decision_slice(j)])
              for j in range(1, part.N + 1) if j != i},
        G_ii=MatrixTrajectory(grid, problem.G.values[:, part.state_slice(i), part.noise_slice(i)]),
        G_i=MatrixTrajectory(grid, problem.G.values[:, :, part.noise_slice(i)]),
    )


COUPLING_TARGETS = ("all", "A", "B", "H", "R", "M_T")


def scale_coupling(problem: AnyProblem, rho: float, target: str = "all") -> AnyProblem:
    """Multiply the off-diagonal partition blocks of the chosen matrices by rho"""
    if target not in COUPLING_TARGETS:
        raise ProblemValidationError(f"Unknown coupling target {target!r}", kind="invalid_config")
    part = problem.partition
    N = part.N

    def scaled(values: np.ndarray, row_slice, col_slice) -> np.ndarray:
        out = np.array(values, dtype=float)
        for i in range(1, N + 1):
            for j in range(1, N + 1):
                if i != j:
                    out[..., row_slice(i), col_slice(j)] *= rho
        return out

    changes = {}
    grid = problem.grid
    if target in ("all", "A"):
        changes["A"] = MatrixTrajectory(grid, scaled(problem.A.values, part.state_slice, part.state_slice))
    if target in ("all", "B"):
        changes["B"] = MatrixTrajectory(grid, scaled(problem.B.values, part.state_slice, part.decision_slice))
    if target in ("all", "H"):
        changes["H"] = MatrixTrajectory(grid, scaled(problem.H.values, part.state_slice, part.state_slice))
    if target in ("all", "R"):
        changes["R"] = MatrixTrajectory(grid, scaled(problem.R.values, part.decision_slice, part.decision_slice))
    if target in ("all", "M_T"):
        changes["M_T"] = scaled(problem.M_T, part.state_slice, part.state_slice)
    return problem.with_updates(**changes)
