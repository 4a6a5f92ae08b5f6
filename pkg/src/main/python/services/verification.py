#!/usr/bin/env python3
"""
Verification Service

Certificates for solver output: the Hamiltonian and its control gradient, conditional
stationarity of each DM's decision (closed form, plus a regression diagnostic),
person-by-person optimality by finite differences of the exact cost, the
centralized-versus-decentralized cost ordering and mean-field fixed-point residuals.
"""

import json
import logging
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel
from scipy.integrate import cumulative_trapezoid

from ..core.numerics import VectorTrajectory, adjoint_kernel, fundamental_matrices, matmul
from ..models.problem import AnyProblem, as_nf, ensure_validated
from ..utils.config import get_settings
from ..utils.errors import NonFiniteCostError, OrderingViolationError, PreconditionError
from .centralized_solver import CentralizedStrategy, centralized_gain, solve_riccati_lqf
from .decentralized_solver import (
    DecentralizedStrategy, DmRiccatiSet, MeanFieldSolution, MeanFieldSystem, make_strategy,
    solve_dm_riccati_set, solve_mean_field,
)
from .simulation import ClosedLoopEnsemble, compute_cost_exact, simulate_closed_loop

logger = logging.getLogger(__name__)

Strategy = Union[DecentralizedStrategy, CentralizedStrategy]


class StationarityReport(BaseModel):
    method: str
    residuals: List[float]
    max_residual: float
    tolerance: Optional[float] = None
    passed: Optional[bool] = None
    n_paths: int


class PbpEntry(BaseModel):
    dm: int
    direction: int
    eps: float
    first_derivative: float
    second_derivative: float
    passed: bool


class PbpReport(BaseModel):
    family: str
    j0: float
    eps_list: List[float]
    first_tol: float
    second_tol: float
    entries: List[PbpEntry]
    max_abs_first: float
    min_second: float
    passed: bool


class CostComparison(BaseModel):
    j_centralized: float
    j_decentralized: float
    gap: float
    gap_relative: float
    tolerance: float
    ordered: bool
    rho: Optional[float] = None


class VerificationReport(BaseModel):
    stationarity: StationarityReport
    regression: Optional[StationarityReport] = None
    pbp: PbpReport
    comparison: Optional[CostComparison] = None
    mean_field: Optional[Dict[str, float]] = None
    passed: bool

    def to_json(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True, indent=2)


# Hamiltonian

def _diffusion(nf, t: float, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """sigma(t, x, u), one column G^(i) + kappa_i x + s_i u per noise channel"""
    sigma = np.array(nf.G.at(t), dtype=float)
    for i, (kap, s) in enumerate(zip(nf.kappa, nf.s_coef)):
        sigma[:, i] += kap.at(t) @ x + s.at(t) @ u
    return sigma


def hamiltonian(t: float, x, psi, Q, u, problem: AnyProblem) -> float:
    """<f, psi> + tr(Q* sigma) + l for the normal-form data (LQF lifted with zero extras)"""
    nf = as_nf(problem)
    x, psi, u = (np.asarray(v, dtype=float) for v in (x, psi, u))
    Q = np.asarray(Q, dtype=float).reshape(nf.n, nf.m)
    drift = nf.A.at(t) @ x + nf.B.at(t) @ u + nf.b.at(t)
    running = (0.5 * x @ nf.H.at(t) @ x + 0.5 * u @ nf.R.at(t) @ u + u @ nf.E.at(t) @ x
               + nf.F.at(t) @ x + nf.m_lin.at(t) @ u)
    return float(drift @ psi + np.sum(Q * _diffusion(nf, t, x, u)) + running)


def hamiltonian_gradient_u(t: float, x, psi, Q, u, problem: AnyProblem) -> np.ndarray:
    """B* psi + R u + E x + m + sum_i s_i* Q^(i)"""
    nf = as_nf(problem)
    x, psi, u = (np.asarray(v, dtype=float) for v in (x, psi, u))
    Q = np.asarray(Q, dtype=float).reshape(nf.n, nf.m)
    grad = nf.B.at(t).T @ psi + nf.R.at(t) @ u + nf.E.at(t) @ x + nf.m_lin.at(t)
    for i, s in enumerate(nf.s_coef):
        grad = grad + s.at(t).T @ Q[:, i]
    return grad


# Stationarity

def _ensemble_for(problem: AnyProblem, strategy: Strategy, ensemble: Optional[ClosedLoopEnsemble],
                  n_paths: Optional[int], seed: Optional[int]) -> ClosedLoopEnsemble:
    if ensemble is not None:
        return ensemble
    n_paths = n_paths or get_settings().VERIFY_N_PATHS
    return simulate_closed_loop(problem, strategy, n_paths=n_paths, seed=seed)


def check_stationarity_closed_form(problem: AnyProblem, strategy: Strategy,
                                   ensemble: Optional[ClosedLoopEnsemble] = None,
                                   n_paths: Optional[int] = None, seed: Optional[int] = None,
                                   tolerance: Optional[float] = None) -> StationarityReport:
    """
    Conditional gradient R_ii u^i + B^(i)* (K^i xhat^i + r^i) + sum_{j != i} R_ij u_bar^j along
    simulated filter paths, with K^i solved afresh and r^i, u_bar taken from the strategy.
    Centralized strategies are checked against R u + B* K x on the state paths.
    """
    problem = ensure_validated(problem)
    tolerance = get_settings().STATIONARITY_TOL if tolerance is None else tolerance
    ensemble = _ensemble_for(problem, strategy, ensemble, n_paths, seed)
    part = problem.partition
    B, R = problem.B.values, problem.R.values
    residuals = []

    if isinstance(strategy, DecentralizedStrategy):
        reference = solve_dm_riccati_set(problem)
        u_bar = strategy.mean_field.u_bar_stacked()
        for i in range(1, part.N + 1):
            rows = part.decision_slice(i)
            psi_hat = (np.einsum("kij,pkj->pki", reference.K[i - 1].values, ensemble.xhat[i - 1])
                       + strategy.mean_field.r[i - 1].values)
            others = u_bar.copy()
            others[:, rows] = 0.0
            grad = (np.einsum("kij,pkj->pki", R[:, rows, rows], ensemble.u[i - 1])
                    + np.einsum("kji,pkj->pki", B[:, :, rows], psi_hat)
                    + np.einsum("kij,kj->ki", R[:, rows, :], others))
            residuals.append(float(np.max(np.abs(grad))))
    else:
        K = solve_riccati_lqf(problem).K.values
        psi = np.einsum("kij,pkj->pki", K, ensemble.x)
        grad = np.einsum("kij,pkj->pki", R, ensemble.u_stacked()) + np.einsum("kji,pkj->pki", B, psi)
        residuals = [float(np.max(np.abs(grad[..., part.decision_slice(i)]))) for i in range(1, part.N + 1)]

    worst = max(residuals)
    passed = worst <= tolerance
    logger.info(f"Closed-form stationarity: max residual {worst:.3e} ({'pass' if passed else 'FAIL'})")
    return StationarityReport(method="closed-form", residuals=residuals, max_residual=worst,
                              tolerance=tolerance, passed=passed, n_paths=ensemble.n_paths)


def _quadratic_features(states: np.ndarray) -> np.ndarray:
    """[1, s, s_a s_b (a <= b)] per row"""
    n = states.shape[1]
    upper = np.triu_indices(n)
    products = (states[:, :, None] * states[:, None, :])[:, upper[0], upper[1]]
    return np.hstack([np.ones((states.shape[0], 1)), states, products])


def check_stationarity_regression(problem: AnyProblem, strategy: Strategy,
                                  ensemble: Optional[ClosedLoopEnsemble] = None,
                                  n_paths: Optional[int] = None, seed: Optional[int] = None
                                  ) -> StationarityReport:
    """
    Diagnostic: regress the pathwise conditional gradient on degree-2 polynomials of each
    DM's information state, node by node, and report the largest fitted value.

    The pathwise adjoint representative is
        Y(t) = Phi*(T,t) M_T x(T) + int_t^T Phi*(s,t) H(s) x(s) ds.
    Monte Carlo noise makes the result approximate; no pass/fail is attached.
    """
    problem = ensure_validated(problem)
    ensemble = _ensemble_for(problem, strategy, ensemble, n_paths, seed)
    part = problem.partition
    grid = problem.grid
    x = ensemble.x
    u = ensemble.u_stacked()

    Ft = np.swapaxes(fundamental_matrices(problem.A).values, 1, 2)
    integrand = np.einsum("kij,kjl,pkl->pki", Ft, problem.H.values, x)
    running = cumulative_trapezoid(integrand, grid.times, axis=1, initial=0.0)
    terminal = np.einsum("ij,jl,pl->pi", Ft[-1], problem.M_T, x[:, -1])
    inner = terminal[:, None, :] + running[:, -1:, :] - running
    Y = np.linalg.solve(Ft[None], inner[..., None])[..., 0]

    residuals = []
    for i in range(1, part.N + 1):
        rows = part.decision_slice(i)
        target = (np.einsum("kji,pkj->pki", problem.B.values[:, :, rows], Y)
                  + np.einsum("kij,pkj->pki", problem.R.values[:, rows, :], u))
        info = ensemble.xhat[i - 1] if ensemble.xhat else x
        worst = 0.0
        for k in range(grid.n_nodes):
            design = _quadratic_features(info[:, k])
            coef, *_ = np.linalg.lstsq(design, target[:, k], rcond=None)
            worst = max(worst, float(np.max(np.abs(design @ coef))))
        residuals.append(worst)

    logger.info(f"Regression stationarity diagnostic: max fitted gradient {max(residuals):.3e}")
    return StationarityReport(method="regression", residuals=residuals, max_residual=max(residuals),
                              n_paths=ensemble.n_paths)


# Person-by-person optimality

def perturbation_directions(strategy: Strategy, dm: int, count: int, seed: int):
    """Seeded (gain, offset) directions for DM dm, each of unit joint norm"""
    part = strategy.partition
    d_i, n = part.decision_dims[dm - 1], part.n
    rng = np.random.default_rng([seed, dm])
    directions = []
    for _ in range(count):
        gain = rng.standard_normal((d_i, n))
        offset = rng.standard_normal(d_i)
        norm = np.sqrt(np.sum(gain ** 2) + np.sum(offset ** 2))
        directions.append((gain / norm, offset / norm))
    return directions


def check_pbp_optimality(problem: AnyProblem, strategy: Strategy, eps_list: Optional[Sequence[float]] = None,
                         n_directions: Optional[int] = None, seed: Optional[int] = None,
                         first_tol: Optional[float] = None, second_tol: Optional[float] = None) -> PbpReport:
    """
    Unilateral deviations u^i -> (L_i + delta Gamma) xhat^i + (c_i + delta c): central first and
    second differences of the exact cost at delta = 0, for every DM, direction and eps.
    """
    settings = get_settings()
    eps_list = list(eps_list or settings.PBP_EPS)
    n_directions = n_directions or settings.PBP_DIRECTIONS
    seed = settings.MC_SEED if seed is None else seed
    first_tol = settings.PBP_FIRST_TOL if first_tol is None else first_tol
    second_tol = settings.PBP_SECOND_TOL if second_tol is None else second_tol
    problem = ensure_validated(problem)

    j0 = compute_cost_exact(problem, strategy)
    entries = []
    for dm in range(1, problem.N + 1):
        for idx, (gain, offset) in enumerate(perturbation_directions(strategy, dm, n_directions, seed), start=1):
            for eps in eps_list:
                j_plus = compute_cost_exact(problem, strategy.perturbed(dm, eps * gain, eps * offset))
                j_minus = compute_cost_exact(problem, strategy.perturbed(dm, -eps * gain, -eps * offset))
                if not np.isfinite(j_plus) or not np.isfinite(j_minus):
                    raise NonFiniteCostError(f"Non-finite cost under perturbation of DM {dm}", dm=dm)
                first = (j_plus - j_minus) / (2.0 * eps)
                second = (j_plus - 2.0 * j0 + j_minus) / eps ** 2
                entries.append(PbpEntry(dm=dm, direction=idx, eps=eps, first_derivative=first,
                                        second_derivative=second,
                                        passed=abs(first) <= first_tol and second >= -second_tol))
        logger.debug(f"PBP directions for DM {dm} evaluated")

    max_first = max(abs(e.first_derivative) for e in entries)
    min_second = min(e.second_derivative for e in entries)
    passed = all(e.passed for e in entries)
    logger.info(f"PBP check: max |J'| {max_first:.3e}, min J'' {min_second:.3e} ({'pass' if passed else 'FAIL'})")
    return PbpReport(
        family="additive perturbation delta*(Gamma, c) of DM i's gain on its filter state and its offset; "
               "seeded unit-norm directions",
        j0=j0, eps_list=eps_list, first_tol=first_tol, second_tol=second_tol, entries=entries,
        max_abs_first=max_first, min_second=min_second, passed=passed)


# Information structures

def solve_decentralized(problem: AnyProblem, **mean_field_options: Any) -> DecentralizedStrategy:
    """Per-DM Riccati set, mean field and strategy in one call"""
    riccati = solve_dm_riccati_set(problem)
    mean_field = solve_mean_field(problem, riccati, **mean_field_options)
    return make_strategy(problem, riccati, mean_field)


def compare_information_structures(problem: AnyProblem, strict: bool = True, tolerance: Optional[float] = None,
                                   rho: Optional[float] = None, **mean_field_options: Any) -> CostComparison:
    """Exact costs of the centralized and decentralized optima; J_c <= J_d + tol is expected"""
    tolerance = get_settings().ORDERING_TOL if tolerance is None else tolerance
    problem = ensure_validated(problem)
    j_c = compute_cost_exact(problem, centralized_gain(solve_riccati_lqf(problem), problem))
    j_d = compute_cost_exact(problem, solve_decentralized(problem, **mean_field_options))
    gap = j_d - j_c
    ordered = gap >= -tolerance
    comparison = CostComparison(j_centralized=j_c, j_decentralized=j_d, gap=gap,
                                gap_relative=gap / max(abs(j_c), np.finfo(float).tiny), tolerance=tolerance,
                                ordered=ordered, rho=rho)
    if not ordered:
        logger.error(f"Cost ordering violated: J_c={j_c:.12g} > J_d={j_d:.12g}")
        if strict:
            raise OrderingViolationError(
                f"Centralized cost {j_c:.12g} exceeds decentralized cost {j_d:.12g} by {-gap:.3e}")
    logger.info(f"J_centralized={j_c:.10g}, J_decentralized={j_d:.10g}, gap={gap:.3e}")
    return comparison


# Mean-field certificate

def mean_field_residuals(problem: AnyProblem, riccati: DmRiccatiSet, mean_field: MeanFieldSolution
                         ) -> Dict[str, float]:
    """
    Nodewise residuals of the three defining equation sets at the returned solution, plus
    the gap between the integral coefficients int_t^T Phi* H Psi_i taken from the identity
    with K^i and the same integrals by direct quadrature.
    """
    problem = ensure_validated(problem)
    if not mean_field.converged:
        raise PreconditionError("Residuals need a converged mean field")
    system = MeanFieldSystem(problem, riccati)
    grid = problem.grid

    u = mean_field.u_bar_stacked()
    u_traj = VectorTrajectory(grid, u)
    r = system.sweep_r(u_traj)
    x_bar = system.sweep_x(u_traj)
    block = np.einsum("kij,kj->ki", system.gamma.values, u) + system.stacked_drive(
        list(mean_field.r), mean_field.x_bar)

    kernel = 0.0
    for K, S, integral in zip(riccati.K, riccati.S, system.integral_terms):
        A_K = problem.A - matmul(S, K)
        quadrature = adjoint_kernel(problem.A, A_K, np.zeros_like(problem.M_T), problem.H)
        kernel = max(kernel, float(np.max(np.abs(quadrature.values - integral.values))))

    return {
        "block_system": float(np.max(np.abs(block))),
        "offset_equation": max(float(np.max(np.abs(a.values - b.values))) for a, b in zip(r, mean_field.r)),
        "mean_state_equation": float(np.max(np.abs(x_bar.values - mean_field.x_bar.values))),
        "kernel_identity": kernel,
        "iterations": float(mean_field.iterations),
        "final_residual": float(mean_field.final_residual),
    }
