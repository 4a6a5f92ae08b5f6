#!/usr/bin/env python3
"""
Simulation Service

Closed-loop simulation of the true augmented state together with every DM's filter,
and evaluation of the quadratic pay-off both by Monte Carlo and exactly from the
moment ODEs of the stacked linear-Gaussian closed loop.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.integrate import trapezoid

from ..core.numerics import (
    FORWARD, LinearRK4Propagator, MatrixTrajectory, TimeGrid, VectorTrajectory, check_covariance,
    propagate_covariance, propagate_mean,
)
from ..models.problem import AnyProblem, NfProblem, ensure_validated
from ..utils.config import get_settings
from ..utils.errors import (
    EmptyEnsembleError, NonFiniteCostError, PreconditionError, ProblemValidationError,
    SimulationDivergedError,
)
from .centralized_solver import CentralizedStrategy
from .decentralized_solver import DecentralizedStrategy

logger = logging.getLogger(__name__)

Strategy = Union[DecentralizedStrategy, CentralizedStrategy]
SCHEMES = ("euler", "rk4")


@dataclass(frozen=True, eq=False)
class ClosedLoopSystem:
    """
    Stacked closed loop z' = A_cl z + b_cl + G_cl W' with controls u = control_map z + control_offset.

    For decentralized strategies z = (x, xhat^1, ..., xhat^N); for centralized ones z = x.
    """

    A_cl: MatrixTrajectory
    b_cl: VectorTrajectory
    G_cl: MatrixTrajectory
    mean0: np.ndarray
    cov0: np.ndarray
    control_map: MatrixTrajectory
    control_offset: VectorTrajectory
    n: int
    n_filters: int

    @property
    def dim(self) -> int:
        return self.A_cl.rows

    @property
    def kind(self) -> str:
        return "decentralized" if self.n_filters else "centralized"

    def state(self, z: np.ndarray) -> np.ndarray:
        return z[..., :self.n]

    def filter(self, z: np.ndarray, i: int) -> np.ndarray:
        return z[..., i * self.n:(i + 1) * self.n]


@dataclass(frozen=True, eq=False)
class ClosedLoopEnsemble:
    """Per-path node-sampled trajectories; arrays are (paths, nodes, ...)"""

    grid: TimeGrid
    seed: int
    scheme: str
    kind: str
    x: np.ndarray
    xhat: Tuple[np.ndarray, ...]
    u: Tuple[np.ndarray, ...]
    dW: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]

    def u_stacked(self) -> np.ndarray:
        return np.concatenate(self.u, axis=2)


class CostReport(BaseModel):
    j_mc: Optional[float] = None
    j_se: Optional[float] = Field(None, ge=0)
    j_exact: Optional[float] = None
    n_paths: int = 0
    breakdown: Dict[str, float] = {}

    def mc_consistent(self, n_se: float = 3.0) -> Optional[bool]:
        """|j_mc - j_exact| <= n_se * j_se, when both estimates are present"""
        if self.j_mc is None or self.j_exact is None or self.j_se is None:
            return None
        return abs(self.j_mc - self.j_exact) <= n_se * self.j_se


@dataclass(frozen=True)
class ExactCost:
    total: float
    running: float
    terminal: float


def _require_lqf(problem: AnyProblem) -> None:
    if not isinstance(problem, NfProblem):
        return
    extras = [problem.b, problem.F, problem.E, problem.m_lin, *problem.kappa, *problem.s_coef]
    if any(t is not None and np.any(t.values) for t in extras) or (
            problem.N_T is not None and np.any(problem.N_T)):
        raise PreconditionError("Closed-loop simulation and costs cover LQF problems (no NF extras)")


def build_closed_loop(problem: AnyProblem, strategy: Strategy) -> ClosedLoopSystem:
    """Assemble the stacked closed loop for either strategy kind"""
    problem = ensure_validated(problem)
    _require_lqf(problem)
    grid = problem.grid
    n, d, m = problem.n, problem.d, problem.m
    A, B, G = problem.A.values, problem.B.values, problem.G.values
    part = problem.partition
    P0 = check_covariance(problem.x0_cov, "x0.cov")

    if isinstance(strategy, CentralizedStrategy):
        if strategy.gain.shape != (d, n) or strategy.gain.grid != grid:
            raise ProblemValidationError("Centralized strategy does not conform to the problem grid/dimensions")
        gain, offset = strategy.gain.values, strategy.offset.values
        return ClosedLoopSystem(
            A_cl=MatrixTrajectory(grid, A + B @ gain),
            b_cl=VectorTrajectory(grid, np.einsum("kij,kj->ki", B, offset)),
            G_cl=problem.G, mean0=np.array(problem.x0_mean, dtype=float), cov0=P0,
            control_map=strategy.gain, control_offset=strategy.offset, n=n, n_filters=0)

    if not isinstance(strategy, DecentralizedStrategy):
        raise PreconditionError(f"Unsupported strategy type {type(strategy).__name__}")
    N = part.N
    if len(strategy.gains) != N or strategy.gains[0].grid != grid:
        raise ProblemValidationError("Decentralized strategy does not conform to the problem grid/partition")

    dim = n * (N + 1)
    A_cl = np.zeros((grid.n_nodes, dim, dim))
    b_cl = np.zeros((grid.n_nodes, dim))
    G_cl = np.zeros((grid.n_nodes, dim, m))
    Lam = np.zeros((grid.n_nodes, d, dim))
    c = np.zeros((grid.n_nodes, d))
    u_bar = strategy.mean_field.u_bar_stacked()

    A_cl[:, :n, :n] = A
    G_cl[:, :n, :] = G
    for i in range(1, N + 1):
        cols_d = part.decision_slice(i)
        cols_w = part.noise_slice(i)
        block = slice(i * n, (i + 1) * n)
        B_i = B[:, :, cols_d]
        L_i = strategy.gains[i - 1].values
        c_i = strategy.offsets[i - 1].values
        BL = B_i @ L_i
        Bc = np.einsum("kij,kj->ki", B_i, c_i)

        A_cl[:, :n, block] = BL
        A_cl[:, block, block] = A + BL
        b_cl[:, :n] += Bc
        # DM i's filter sees its own realized control and the others' mean controls
        others = u_bar.copy()
        others[:, cols_d] = 0.0
        b_cl[:, block] = Bc + np.einsum("kij,kj->ki", B, others)
        G_cl[:, block, cols_w] = G[:, :, cols_w]
        Lam[:, cols_d, block] = L_i
        c[:, cols_d] = c_i

    mean0 = np.tile(np.asarray(problem.x0_mean, dtype=float), N + 1)
    cov0 = np.zeros((dim, dim))
    cov0[:n, :n] = P0
    return ClosedLoopSystem(
        A_cl=MatrixTrajectory(grid, A_cl), b_cl=VectorTrajectory(grid, b_cl),
        G_cl=MatrixTrajectory(grid, G_cl), mean0=mean0, cov0=cov0,
        control_map=MatrixTrajectory(grid, Lam), control_offset=VectorTrajectory(grid, c), n=n, n_filters=N)


def _step_maps(system: ClosedLoopSystem, scheme: str) -> Tuple[np.ndarray, np.ndarray]:
    """Per-step affine drift maps z -> P_k z + q_k of the chosen scheme"""
    grid = system.A_cl.grid
    if scheme == "rk4":
        prop = LinearRK4Propagator(system.A_cl, FORWARD)
        return prop.P, prop.forcing_terms(system.b_cl.values, system.b_cl.midpoints)
    eye = np.eye(system.dim)
    return eye + grid.h * system.A_cl.values[:-1], grid.h * system.b_cl.values[:-1]


def _spectral_sqrt(P0: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(P0)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _path_normals(seed: int, paths: range, size: int) -> np.ndarray:
    """
    Standard normals of each path from its own Philox stream keyed by (seed, path).

    Row r holds the first `size` draws of path paths[r], laid out as in simulate_closed_loop.
    """
    out = np.empty((len(paths), size))
    for row, p in enumerate(paths):
        gen = np.random.Generator(np.random.Philox(key=np.array([seed, p], dtype=np.uint64)))
        out[row] = gen.standard_normal(size)
    return out


def _simulate_chunk(system: ClosedLoopSystem, P: np.ndarray, q: np.ndarray, x0_root: np.ndarray,
                    seed: int, paths: range) -> Tuple[np.ndarray, np.ndarray]:
    grid = system.A_cl.grid
    n, m = system.n, system.G_cl.cols
    normals = _path_normals(seed, paths, n + grid.n_steps * m)
    dW = np.sqrt(grid.h) * normals[:, n:].reshape(len(paths), grid.n_steps, m)

    z = np.empty((len(paths), grid.n_nodes, system.dim))
    z[:, 0] = system.mean0
    x0 = system.mean0[:n] + np.einsum("ij,pj->pi", x0_root, normals[:, :n])
    z[:, 0, :n] = x0
    G = system.G_cl.values
    for k in range(grid.n_steps):
        z[:, k + 1] = (np.einsum("ij,pj->pi", P[k], z[:, k]) + q[k]
                       + np.einsum("ij,pj->pi", G[k], dW[:, k]))

    if not np.all(np.isfinite(z)):
        bad = ~np.all(np.isfinite(z), axis=2)
        row, node = np.argwhere(bad)[0]
        raise SimulationDivergedError(f"Non-finite state on path {paths[row]} at node {node}",
                                      path=int(paths[row]), node=int(node))
    return z, dW


def simulate_closed_loop(problem: AnyProblem, strategy: Strategy, n_paths: Optional[int] = None,
                         seed: Optional[int] = None, scheme: Optional[str] = None,
                         chunk_size: Optional[int] = None, max_workers: Optional[int] = None
                         ) -> ClosedLoopEnsemble:
    """
    Simulate n_paths closed-loop trajectories on the problem grid.

    scheme "euler" (default) steps z_{k+1} = z_k + h (A_cl z_k + b_cl) + G_cl dW_k; "rk4" keeps
    the same increments but replaces the drift by the RK4 map of the mean ODE.

    Random draw layout: path p owns one Philox stream keyed by (seed, p) and consumes
    n + n_steps * m standard normals from it, in order:

        draws[0:n]                     initial-state normals, x0 = x0_mean + P0^(1/2) draws[0:n]
        draws[n + k*m + c]             increment of noise channel c on step k,
                                       dW[p, k, c] = sqrt(h) * draws[n + k*m + c]

    Channels are never keyed separately, so a path's draws do not depend on chunk size or
    worker count, and changing n_steps or m reshuffles the increments of every path.
    """
    settings = get_settings()
    n_paths = settings.MC_N_PATHS if n_paths is None else n_paths
    seed = settings.MC_SEED if seed is None else seed
    scheme = scheme or settings.MC_SCHEME
    chunk_size = chunk_size or settings.MC_CHUNK_SIZE
    workers = max_workers or settings.MAX_WORKERS
    if n_paths < 1:
        raise PreconditionError(f"n_paths must be >= 1, got {n_paths}")
    if scheme not in SCHEMES:
        raise PreconditionError(f"Unknown scheme {scheme!r}, expected one of {SCHEMES}")

    problem = ensure_validated(problem)
    system = build_closed_loop(problem, strategy)
    P, q = _step_maps(system, scheme)
    x0_root = _spectral_sqrt(system.cov0[:system.n, :system.n])
    chunks = [range(s, min(s + chunk_size, n_paths)) for s in range(0, n_paths, chunk_size)]

    logger.info(f"Simulating {n_paths} {system.kind} paths ({scheme}, seed {seed}, {len(chunks)} chunks)")
    try:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda paths: _simulate_chunk(system, P, q, x0_root, seed, paths), chunks))
    except Exception as e:
        logger.error(f"Closed-loop simulation failed: {e}")
        raise

    z = np.concatenate([r[0] for r in results], axis=0)
    dW = np.concatenate([r[1] for r in results], axis=0)
    part = problem.partition
    x = system.state(z)
    if isinstance(strategy, DecentralizedStrategy):
        xhat = tuple(system.filter(z, i) for i in range(1, part.N + 1))
        u = tuple(strategy.controls(i, xhat[i - 1]) for i in range(1, part.N + 1))
    else:
        xhat = ()
        u_all = np.einsum("kij,pkj->pki", strategy.gain.values, x) + strategy.offset.values
        u = tuple(u_all[:, :, part.decision_slice(i)] for i in range(1, part.N + 1))

    return ClosedLoopEnsemble(grid=problem.grid, seed=seed, scheme=scheme, kind=system.kind,
                              x=np.ascontiguousarray(x), xhat=tuple(np.ascontiguousarray(v) for v in xhat),
                              u=u, dW=dW)


def estimate_cost_mc(ensemble: ClosedLoopEnsemble, problem: AnyProblem) -> CostReport:
    """Per-path trapezoidal pay-off, averaged over paths with its standard error"""
    if ensemble.n_paths == 0:
        raise EmptyEnsembleError("Cannot estimate a cost from an empty ensemble")
    problem = ensure_validated(problem)
    x = ensemble.x
    u = ensemble.u_stacked()
    state_cost = np.einsum("pki,kij,pkj->pk", x, problem.H.values, x)
    control_cost = np.einsum("pki,kij,pkj->pk", u, problem.R.values, u)
    running = trapezoid(0.5 * (state_cost + control_cost), ensemble.grid.times, axis=1)
    terminal = 0.5 * np.einsum("pi,ij,pj->p", x[:, -1], problem.M_T, x[:, -1])
    total = running + terminal
    if not np.all(np.isfinite(total)):
        path = int(np.argmax(~np.isfinite(total)))
        raise NonFiniteCostError(f"Non-finite pay-off on path {path}", path=path)

    se = float(np.std(total, ddof=1) / np.sqrt(ensemble.n_paths)) if ensemble.n_paths > 1 else 0.0
    return CostReport(j_mc=float(np.mean(total)), j_se=se, n_paths=ensemble.n_paths,
                      breakdown={"mc_running": float(np.mean(running)), "mc_terminal": float(np.mean(terminal))})


def exact_cost_breakdown(problem: AnyProblem, strategy: Strategy) -> ExactCost:
    """Pay-off from the mean and covariance ODEs of the stacked closed loop"""
    problem = ensure_validated(problem)
    system = build_closed_loop(problem, strategy)
    n = system.n
    grid = problem.grid
    try:
        mean = propagate_mean(system.A_cl, system.b_cl, system.mean0).values
        cov = propagate_covariance(system.A_cl, system.G_cl, system.cov0).values
    except Exception as e:
        logger.error(f"Moment propagation failed: {e}")
        raise

    Lam = system.control_map.values
    c = system.control_offset.values
    R = problem.R.values
    H = problem.H.values
    RLam = R @ Lam
    control_weight = np.swapaxes(Lam, 1, 2) @ RLam
    mx, Pxx = mean[:, :n], cov[:, :n, :n]
    u_mean = np.einsum("kij,kj->ki", Lam, mean) + c

    state_term = np.einsum("kii->k", H @ Pxx) + np.einsum("ki,kij,kj->k", mx, H, mx)
    control_term = np.einsum("kii->k", control_weight @ cov) + np.einsum("ki,kij,kj->k", u_mean, R, u_mean)
    running = float(trapezoid(0.5 * (state_term + control_term), grid.times))
    terminal = 0.5 * float(np.trace(problem.M_T @ Pxx[-1]) + mx[-1] @ problem.M_T @ mx[-1])
    total = running + terminal
    if not np.isfinite(total):
        raise NonFiniteCostError("Exact pay-off is not finite")
    return ExactCost(total=total, running=running, terminal=terminal)


def compute_cost_exact(problem: AnyProblem, strategy: Strategy) -> float:
    return exact_cost_breakdown(problem, strategy).total


def cost_report(problem: AnyProblem, strategy: Strategy, ensemble: Optional[ClosedLoopEnsemble] = None
                ) -> CostReport:
    """Monte Carlo estimate (when an ensemble is given) together with the exact cost"""
    exact = exact_cost_breakdown(problem, strategy)
    report = estimate_cost_mc(ensemble, problem) if ensemble is not None else CostReport()
    breakdown = dict(report.breakdown, exact_running=exact.running, exact_terminal=exact.terminal)
    return report.model_copy(update={"j_exact": exact.total, "breakdown": breakdown})


def ensemble_to_frame(ensemble: ClosedLoopEnsemble) -> pd.DataFrame:
    """One row per (path, node): path, t, x_k, xhat{i}_k, u{i}_k (components 1-based)"""
    P, K = ensemble.n_paths, ensemble.grid.n_nodes
    columns: Dict[str, np.ndarray] = {
        "path": np.repeat(np.arange(P), K),
        "t": np.tile(ensemble.grid.times, P),
    }

    def add(prefix: str, values: np.ndarray) -> None:
        flat = values.reshape(P * K, -1)
        for j in range(flat.shape[1]):
            columns[f"{prefix}_{j + 1}"] = flat[:, j]

    add("x", ensemble.x)
    for i, xhat in enumerate(ensemble.xhat, start=1):
        add(f"xhat{i}", xhat)
    for i, u in enumerate(ensemble.u, start=1):
        add(f"u{i}", u)
    return pd.DataFrame(columns)
