#!/usr/bin/env python3
"""
Decentralized Solver Service

Team-optimal strategies when DM i only sees its own Brownian motion W^i. Each DM has a
Riccati operator K^i; the DMs are coupled through the offsets r^i (backward), the mean
state x_bar (forward) and the mean decisions u_bar (algebraic, one block system per node).
The coupled system is solved by damped Picard iteration over u_bar, or monolithically by
collocation.
"""

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy.integrate import solve_bvp
from scipy.linalg import LinAlgError, LinAlgWarning, cho_factor, cho_solve, lu_factor

from ..core.numerics import (
    BACKWARD, FORWARD, LinearRK4Propagator, MatrixTrajectory, VectorTrajectory, matmul,
    terminal_transitions,
)
from ..models.problem import AnyProblem, DmPartition, dm_slice, ensure_validated
from ..utils.config import get_settings
from ..utils.errors import ConvergenceError, PreconditionError, SingularCouplingError, SingularMatrixError
from .centralized_solver import input_weight, riccati_residual, solve_riccati

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DmRiccatiSet:
    """Per-DM Riccati operators K^i with their input weights and residual certificates"""

    K: Tuple[MatrixTrajectory, ...]
    residuals: Tuple[float, ...]
    S: Tuple[MatrixTrajectory, ...]
    Rinv_Bt: Tuple[MatrixTrajectory, ...]

    @property
    def N(self) -> int:
        return len(self.K)


@dataclass(frozen=True, eq=False)
class MeanFieldSolution:
    r: Tuple[VectorTrajectory, ...]
    x_bar: VectorTrajectory
    u_bar: Tuple[VectorTrajectory, ...]
    iterations: int
    final_residual: float
    damping: float
    converged: bool = True
    residual_history: Tuple[float, ...] = ()
    method: str = "picard"

    def u_bar_stacked(self) -> np.ndarray:
        return np.concatenate([u.values for u in self.u_bar], axis=1)


@dataclass(frozen=True, eq=False)
class DecentralizedStrategy:
    """
    u^i(t) = gains[i](t) xhat^i + offsets[i](t), where the gain is -R_ii^-1 B^(i)* K^i and the
    offset -R_ii^-1 (B^(i)* r^i + sum_{j != i} R_ij u_bar^j) carries the signaling terms.
    """

    riccati: DmRiccatiSet
    mean_field: MeanFieldSolution
    gains: Tuple[MatrixTrajectory, ...]
    offsets: Tuple[VectorTrajectory, ...]
    partition: DmPartition

    def control(self, i: int, k: int, xhat: np.ndarray) -> np.ndarray:
        return self.gains[i - 1].values[k] @ np.asarray(xhat, dtype=float) + self.offsets[i - 1].values[k]

    def controls(self, i: int, xhat_paths: np.ndarray) -> np.ndarray:
        """Vectorized over paths: xhat_paths has shape (paths, nodes, n)"""
        gain = self.gains[i - 1].values
        return np.einsum("kij,pkj->pki", gain, xhat_paths) + self.offsets[i - 1].values

    @property
    def mean_controls(self) -> Tuple[VectorTrajectory, ...]:
        return self.mean_field.u_bar

    def perturbed(self, i: int, gain_delta: np.ndarray, offset_delta: np.ndarray) -> "DecentralizedStrategy":
        """Add constant perturbations to DM i's gain and offset; filters keep the nominal u_bar"""
        gains = list(self.gains)
        offsets = list(self.offsets)
        gains[i - 1] = gains[i - 1] + np.asarray(gain_delta, dtype=float)
        offsets[i - 1] = offsets[i - 1] + np.asarray(offset_delta, dtype=float)
        return replace(self, gains=tuple(gains), offsets=tuple(offsets))


def _solve_one(problem: AnyProblem, i: int):
    blocks = dm_slice(problem, i)
    S, Rinv_Bt = input_weight(blocks.B_i, blocks.R_ii, dm=i)
    K = solve_riccati(problem.A, S, problem.H, problem.M_T)
    return K, S, Rinv_Bt


def solve_dm_riccati(problem: AnyProblem, i: int) -> MatrixTrajectory:
    """K^i' + A*K^i + K^i A - K^i B^(i) R_ii^-1 B^(i)* K^i + H = 0, K^i(T) = M_T"""
    problem = ensure_validated(problem)
    problem.partition.check_dm(i)
    return _solve_one(problem, i)[0]


def solve_dm_riccati_set(problem: AnyProblem, max_workers: Optional[int] = None) -> DmRiccatiSet:
    """All per-DM Riccati operators, solved concurrently, with residual certificates"""
    problem = ensure_validated(problem)
    workers = max_workers or get_settings().MAX_WORKERS
    dms = range(1, problem.N + 1)
    try:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda i: _solve_one(problem, i), dms))
    except Exception as e:
        logger.error(f"Per-DM Riccati solve failed: {e}")
        raise

    residuals = tuple(riccati_residual(K, problem.A, S, problem.H) for K, S, _ in results)
    tol = get_settings().RICCATI_RESIDUAL_TOL
    for i, res in zip(dms, residuals):
        if res > tol:
            logger.warning(f"DM {i} Riccati residual {res:.3e} above tolerance")
    logger.info(f"Solved {problem.N} per-DM Riccati equations (max residual {max(residuals):.3e})")
    return DmRiccatiSet(K=tuple(K for K, _, _ in results), residuals=residuals,
                        S=tuple(S for _, S, _ in results), Rinv_Bt=tuple(RB for _, _, RB in results))


def coupling_matrix(problem: AnyProblem) -> MatrixTrajectory:
    """
    Nodewise block matrix whose row block i is R_ii^-1 [R_i1 ... R_iN] (identity on the
    diagonal block), i.e. the left-hand side of the mean-decision equations.
    """
    part = problem.partition
    grid = problem.grid
    R = problem.R.values
    gamma = np.empty((grid.n_nodes, part.d, part.d))
    for i in range(1, part.N + 1):
        rows = part.decision_slice(i)
        for k in range(grid.n_nodes):
            try:
                factor = cho_factor(R[k, rows, rows])
            except LinAlgError as e:
                raise SingularMatrixError(f"R_{i}{i} is not invertible at node {k}: {e}", node=k, dm=i) from e
            gamma[k, rows, :] = cho_solve(factor, R[k, rows, :])
        gamma[:, rows, rows] = np.eye(rows.stop - rows.start)
    return MatrixTrajectory(grid, gamma)


class MeanFieldSystem:
    """Precomputed operators of the coupled (r, x_bar, u_bar) equations"""

    def __init__(self, problem: AnyProblem, riccati: DmRiccatiSet):
        self.problem = problem
        self.riccati = riccati
        part = problem.partition
        grid = problem.grid
        self.grid = grid
        self.gamma = coupling_matrix(problem)

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LinAlgWarning)
            for k in range(grid.n_nodes):
                lu, _ = lu_factor(self.gamma.values[k])
                pivots = np.abs(np.diag(lu))
                if not np.all(np.isfinite(lu)) or pivots.min() <= 1e-12 * max(1.0, pivots.max()):
                    raise SingularCouplingError(f"Mean-decision block system is singular at node {k}", node=k)

        A_star = -np.swapaxes(problem.A.values, 1, 2)
        phi_T = terminal_transitions(problem.A).values
        self.integral_terms: List[MatrixTrajectory] = []
        self.fields: List[MatrixTrajectory] = []
        self.r_props: List[LinearRK4Propagator] = []
        self.KC: List[MatrixTrajectory] = []
        self.D: List[MatrixTrajectory] = []
        for i in range(1, part.N + 1):
            K, S, Rinv_Bt = riccati.K[i - 1], riccati.S[i - 1], riccati.Rinv_Bt[i - 1]
            # int_t^T Phi*(s,t) H Psi_i(s,t) ds = K^i(t) - Phi*(T,t) M_T Psi_i(T,t)
            psi_T = terminal_transitions(problem.A - matmul(S, K)).values
            terminal = np.swapaxes(phi_T, 1, 2) @ problem.M_T @ psi_T
            integral = MatrixTrajectory(grid, K.values - terminal)
            self.integral_terms.append(integral)
            kernel = terminal + integral.values
            field = MatrixTrajectory(grid, A_star + kernel @ S.values)
            self.fields.append(field)
            self.r_props.append(LinearRK4Propagator(field, BACKWARD))
            rows = part.decision_slice(i)
            # r^i is forced by sum_{j != i} (B^(j) - B^(i) R_ii^-1 R_ij) u_bar^j = C_i u_bar
            B_i = problem.B.values[:, :, rows]
            C = problem.B.values - B_i @ self.gamma.values[:, rows, :]
            C[:, :, rows] = 0.0
            self.KC.append(MatrixTrajectory(grid, kernel @ C))
            self.D.append(Rinv_Bt)
        self.x_prop = LinearRK4Propagator(problem.A, FORWARD)

    def sweep_r(self, u: VectorTrajectory) -> List[VectorTrajectory]:
        n = self.problem.n
        out = []
        for prop, KC in zip(self.r_props, self.KC):
            nodes = -np.einsum("kij,kj->ki", KC.values, u.values)
            mids = -np.einsum("kij,kj->ki", KC.midpoints, u.midpoints)
            out.append(prop.solve_with_offsets(np.zeros(n), prop.forcing_terms(nodes, mids)))
        return out

    def sweep_x(self, u: VectorTrajectory) -> VectorTrajectory:
        B = self.problem.B
        nodes = np.einsum("kij,kj->ki", B.values, u.values)
        mids = np.einsum("kij,kj->ki", B.midpoints, u.midpoints)
        return self.x_prop.solve_with_offsets(self.problem.x0_mean, self.x_prop.forcing_terms(nodes, mids))

    def stacked_drive(self, r: List[VectorTrajectory], x_bar: VectorTrajectory) -> np.ndarray:
        """[R_ii^-1 B^(i)* (K^i x_bar + r^i)]_i at every node"""
        parts = []
        for K, D, r_i in zip(self.riccati.K, self.D, r):
            adjoint = np.einsum("kij,kj->ki", K.values, x_bar.values) + r_i.values
            parts.append(np.einsum("kij,kj->ki", D.values, adjoint))
        return np.concatenate(parts, axis=1)

    def mean_decisions(self, r: List[VectorTrajectory], x_bar: VectorTrajectory) -> np.ndarray:
        drive = self.stacked_drive(r, x_bar)
        return -np.linalg.solve(self.gamma.values, drive[..., None])[..., 0]

    def split(self, u: np.ndarray) -> Tuple[VectorTrajectory, ...]:
        part = self.problem.partition
        return tuple(VectorTrajectory(self.grid, u[:, part.decision_slice(i)]) for i in range(1, part.N + 1))


def solve_mean_field(problem: AnyProblem, riccati: DmRiccatiSet, max_iter: Optional[int] = None,
                     tol: Optional[float] = None, damping: Optional[float] = None,
                     method: str = "picard") -> MeanFieldSolution:
    """
    Damped Picard iteration over u_bar:
      (a) r^i backward given u_bar, (b) x_bar forward given u_bar,
      (c) u_bar_new from the nodewise block system, (d) u_bar <- (1 - damping) u_bar + damping u_bar_new,
    until the sup-norm change is at most tol.
    """
    if method == "collocation":
        return solve_mean_field_collocation(problem, riccati)
    if method != "picard":
        raise PreconditionError(f"Unknown mean-field method {method!r}")

    settings = get_settings()
    max_iter = max_iter or settings.PICARD_MAX_ITER
    tol = tol or settings.PICARD_TOL
    damping = damping or settings.PICARD_DAMPING
    if not 0 < damping <= 1:
        raise PreconditionError(f"Damping must lie in (0, 1], got {damping}")

    problem = ensure_validated(problem)
    try:
        system = MeanFieldSystem(problem, riccati)
    except Exception as e:
        logger.error(f"Mean-field setup failed: {e}")
        raise

    grid = problem.grid
    u = np.zeros((grid.n_nodes, problem.d))
    history: List[float] = []
    residual = np.inf
    for iteration in range(1, max_iter + 1):
        u_traj = VectorTrajectory(grid, u)
        r = system.sweep_r(u_traj)
        x_bar = system.sweep_x(u_traj)
        u_new = system.mean_decisions(r, x_bar)
        residual = float(np.max(np.abs(u_new - u)))
        history.append(residual)
        logger.debug(f"Picard iteration {iteration}: residual {residual:.3e}")
        if residual <= tol:
            logger.info(f"Mean field converged in {iteration} iterations (residual {residual:.3e})")
            return MeanFieldSolution(r=tuple(r), x_bar=x_bar, u_bar=system.split(u_new), iterations=iteration,
                                     final_residual=residual, damping=damping, converged=True,
                                     residual_history=tuple(history), method="picard")
        u = (1.0 - damping) * u + damping * u_new

    logger.error(f"Mean field did not converge in {max_iter} iterations (residual {residual:.3e})")
    raise ConvergenceError(
        f"Picard iteration did not reach tol={tol:g} in {max_iter} iterations (final residual {residual:.3e}); "
        f"retry with smaller damping", final_residual=residual, iterations=max_iter)


def solve_fixed_point_general(problem: AnyProblem, riccati: DmRiccatiSet, **opts) -> MeanFieldSolution:
    """N-DM mean-field fixed point (N >= 2), same contract as solve_mean_field"""
    problem = ensure_validated(problem)
    if problem.N < 2:
        raise PreconditionError(f"General fixed point needs at least two DMs, got {problem.N}")
    return solve_mean_field(problem, riccati, **opts)


def solve_mean_field_collocation(problem: AnyProblem, riccati: DmRiccatiSet,
                                 tol: float = 1e-10) -> MeanFieldSolution:
    """
    Monolithic solve of the linear boundary-value system in Y = (r^1, ..., r^N, x_bar) with
    u_bar eliminated algebraically, by scipy's collocation solver on the grid mesh.
    """
    problem = ensure_validated(problem)
    system = MeanFieldSystem(problem, riccati)
    part = problem.partition
    grid = problem.grid
    n, N, d = problem.n, part.N, problem.d
    dim = n * (N + 1)

    # u_bar = U_x x_bar + U_r r, from the block system
    W = -np.linalg.inv(system.gamma.values)
    drive_x = np.concatenate([D.values @ K.values for D, K in zip(system.D, riccati.K)], axis=1)
    drive_r = np.zeros((grid.n_nodes, d, n * N))
    for i in range(1, N + 1):
        drive_r[:, part.decision_slice(i), (i - 1) * n:i * n] = system.D[i - 1].values
    U_x = W @ drive_x
    U_r = W @ drive_r

    J = np.zeros((grid.n_nodes, dim, dim))
    for i in range(N):
        rows = slice(i * n, (i + 1) * n)
        J[:, rows, rows] += system.fields[i].values
        J[:, rows, :n * N] -= system.KC[i].values @ U_r
        J[:, rows, n * N:] = -system.KC[i].values @ U_x
    J[:, n * N:, n * N:] = problem.A.values + problem.B.values @ U_x
    J[:, n * N:, :n * N] = problem.B.values @ U_r
    field = MatrixTrajectory(grid, J)

    def fun(t, y):
        return np.einsum("kij,jk->ik", field.sample(t), y)

    def fun_jac(t, y):
        return np.moveaxis(field.sample(t), 0, -1)

    def bc(ya, yb):
        return np.concatenate([yb[:n * N], ya[n * N:] - problem.x0_mean])

    def bc_jac(ya, yb):
        d_a = np.zeros((dim, dim))
        d_b = np.zeros((dim, dim))
        d_b[:n * N, :n * N] = np.eye(n * N)
        d_a[n * N:, n * N:] = np.eye(n)
        return d_a, d_b

    result = solve_bvp(fun, bc, grid.times, np.zeros((dim, grid.n_nodes)), fun_jac=fun_jac, bc_jac=bc_jac,
                       tol=tol, max_nodes=max(100000, 20 * grid.n_nodes), bc_tol=1e-12)
    if not result.success:
        logger.error(f"Collocation solve failed: {result.message}")
        raise ConvergenceError(f"Collocation solve failed: {result.message}",
                               final_residual=float(np.max(result.rms_residuals)), iterations=int(result.niter))

    Y = result.sol(grid.times).T
    r = [VectorTrajectory(grid, Y[:, i * n:(i + 1) * n]) for i in range(N)]
    x_bar = VectorTrajectory(grid, Y[:, n * N:])
    u_bar = system.mean_decisions(r, x_bar)
    residual = float(np.max(result.rms_residuals))
    logger.info(f"Collocation mean field solved ({result.niter} Newton iterations, residual {residual:.3e})")
    return MeanFieldSolution(r=tuple(r), x_bar=x_bar, u_bar=system.split(u_bar), iterations=int(result.niter),
                             final_residual=residual, damping=1.0, converged=True,
                             residual_history=(residual,), method="collocation")


def make_strategy(problem: AnyProblem, riccati: DmRiccatiSet, mean_field: MeanFieldSolution) -> DecentralizedStrategy:
    """Per-DM affine maps in the DM's own filter state"""
    problem = ensure_validated(problem)
    if not mean_field.converged:
        raise PreconditionError("Strategy needs a converged mean field")
    part = problem.partition
    grid = problem.grid
    gamma = coupling_matrix(problem).values
    u_bar = mean_field.u_bar_stacked()

    gains, offsets = [], []
    for i in range(1, part.N + 1):
        rows = part.decision_slice(i)
        Rinv_Bt = riccati.Rinv_Bt[i - 1].values
        gains.append(MatrixTrajectory(grid, -(Rinv_Bt @ riccati.K[i - 1].values)))
        # R_ii^-1 sum_{j != i} R_ij u_bar^j
        signaling = np.einsum("kij,kj->ki", gamma[:, rows, :], u_bar) - u_bar[:, rows]
        offset = -np.einsum("kij,kj->ki", Rinv_Bt, mean_field.r[i - 1].values) - signaling
        offsets.append(VectorTrajectory(grid, offset))

    logger.info(f"Assembled decentralized strategy for {part.N} DMs")
    return DecentralizedStrategy(riccati=riccati, mean_field=mean_field, gains=tuple(gains),
                                 offsets=tuple(offsets), partition=part)


def detuned_riccati(riccati: DmRiccatiSet, dm: int, shift: Optional[float] = None,
                    scale: Optional[float] = None) -> DmRiccatiSet:
    """Copy of the set with K^dm replaced by scale * K^dm + shift * I"""
    K = list(riccati.K)
    values = K[dm - 1].values * (1.0 if scale is None else scale)
    if shift is not None:
        values = values + shift * np.eye(values.shape[1])
    K[dm - 1] = MatrixTrajectory(K[dm - 1].grid, values)
    return replace(riccati, K=tuple(K))
