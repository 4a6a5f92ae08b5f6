#!/usr/bin/env python3
"""
Centralized Solver Service

Full-information optimal strategies: the LQF Riccati equation and its feedback gain,
the normal-form generalized Riccati equation with its affine offset, and the adjoint
operators Sigma / beta whose combination psi = Sigma x + beta represents the adjoint
process.
"""

import logging
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from ..core.numerics import (
    BACKWARD, LinearRK4Propagator, MatrixTrajectory, VectorTrajectory, adjoint_kernel,
    integrate_ode, matmul,
)
from ..models.problem import AnyProblem, DmPartition, as_nf, ensure_validated
from ..utils.config import get_settings
from ..utils.errors import PreconditionError, SingularInnerMatrixError, SingularMatrixError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """K(t) on the grid, the gain -R^-1 B* K and the half-step residual certificate"""

    K: MatrixTrajectory
    gain: MatrixTrajectory
    residual_max: float


@dataclass(frozen=True, eq=False)
class NfSolution:
    K: MatrixTrajectory
    r: VectorTrajectory
    gain: MatrixTrajectory
    feed_forward: VectorTrajectory
    inner_min_eigenvalue: float


@dataclass(frozen=True, eq=False)
class AdjointOperators:
    """Sigma(t), beta(t) and the additive-noise part Q_blocks(t) = Sigma(t) G(t) of Q"""

    Sigma: MatrixTrajectory
    beta: VectorTrajectory
    Q_blocks: MatrixTrajectory
    problem: AnyProblem

    def psi(self, k: int, x: np.ndarray) -> np.ndarray:
        return self.Sigma.values[k] @ x + self.beta.values[k]

    def Q(self, k: int, x: Optional[np.ndarray] = None, u: Optional[np.ndarray] = None) -> np.ndarray:
        """Q(t_k) = Sigma(t_k) [kappa_i x + s_i u + G^(i)]_i, one column per noise channel"""
        nf = as_nf(self.problem)
        x = np.zeros(nf.n) if x is None else np.asarray(x, dtype=float)
        u = np.zeros(nf.d) if u is None else np.asarray(u, dtype=float)
        columns = nf.G.values[k].copy()
        for i, (kap, s) in enumerate(zip(nf.kappa, nf.s_coef)):
            columns[:, i] += kap.values[k] @ x + s.values[k] @ u
        return self.Sigma.values[k] @ columns


@dataclass(frozen=True, eq=False)
class CentralizedStrategy:
    """Full state feedback u = gain(t) x + offset(t)"""

    gain: MatrixTrajectory
    offset: VectorTrajectory
    partition: DmPartition

    def __call__(self, k: int, x: np.ndarray) -> np.ndarray:
        return self.gain.values[k] @ np.asarray(x, dtype=float) + self.offset.values[k]

    def dm_gain(self, i: int) -> np.ndarray:
        return self.gain.values[:, self.partition.decision_slice(i), :]

    def perturbed(self, i: int, gain_delta: np.ndarray, offset_delta: np.ndarray) -> "CentralizedStrategy":
        """Add constant perturbations to DM i's rows of the gain and offset"""
        rows = self.partition.decision_slice(i)
        gain = np.array(self.gain.values)
        offset = np.array(self.offset.values)
        gain[:, rows, :] += gain_delta
        offset[:, rows] += offset_delta
        return replace(self, gain=MatrixTrajectory(self.gain.grid, gain),
                       offset=VectorTrajectory(self.offset.grid, offset))


def input_weight(B: MatrixTrajectory, R: MatrixTrajectory, dm: Optional[int] = None
                 ) -> Tuple[MatrixTrajectory, MatrixTrajectory]:
    """S = B R^-1 B* and R^-1 B* nodewise, by Cholesky factorization"""
    grid = B.grid
    Rinv_Bt = np.empty((grid.n_nodes, R.rows, B.rows))
    for k in range(grid.n_nodes):
        try:
            factor = cho_factor(R.values[k])
        except LinAlgError as e:
            label = "R" if dm is None else f"R_{dm}{dm}"
            raise SingularMatrixError(f"{label} is not invertible at node {k}: {e}", node=k, dm=dm) from e
        Rinv_Bt[k] = cho_solve(factor, B.values[k].T)
    S = B.values @ Rinv_Bt
    S = 0.5 * (S + np.swapaxes(S, 1, 2))
    return MatrixTrajectory(grid, S), MatrixTrajectory(grid, Rinv_Bt)


def solve_riccati(A: MatrixTrajectory, S: MatrixTrajectory, H: MatrixTrajectory,
                  M_T: np.ndarray) -> MatrixTrajectory:
    """Backward RK4 solve of K' + A*K + KA - KSK + H = 0, K(T) = M_T"""

    def rhs(t, K):
        KA = K @ A.at(t)
        return -(KA.T + KA - K @ S.at(t) @ K + H.at(t))

    return integrate_ode(rhs, M_T, A.grid, BACKWARD, symmetric=True)


def riccati_residual(K: MatrixTrajectory, A: MatrixTrajectory, S: MatrixTrajectory,
                     H: MatrixTrajectory) -> float:
    """Max Frobenius norm of the Riccati residual on the half-step grid (K from its spline)"""
    times = K.grid.refined().times
    Kt = K.spline(times)
    dK = K.derivative_at(times)
    At = A.sample(times)
    KA = Kt @ At
    residual = dK + np.swapaxes(KA, 1, 2) + KA - Kt @ S.sample(times) @ Kt + H.sample(times)
    return float(np.max(np.linalg.norm(residual, axis=(1, 2))))


def solve_riccati_lqf(problem: AnyProblem) -> RiccatiSolution:
    """Centralized LQF Riccati solution with gain -R^-1 B* K"""
    try:
        problem = ensure_validated(problem)
        S, Rinv_Bt = input_weight(problem.B, problem.R)
        K = solve_riccati(problem.A, S, problem.H, problem.M_T)
        gain = MatrixTrajectory(K.grid, -(Rinv_Bt.values @ K.values))
        residual = riccati_residual(K, problem.A, S, problem.H)
    except Exception as e:
        logger.error(f"Centralized Riccati solve failed: {e}")
        raise

    if residual > get_settings().RICCATI_RESIDUAL_TOL:
        logger.warning(f"Riccati residual {residual:.3e} above tolerance; consider a finer grid")
    logger.info(f"Solved centralized Riccati equation (residual {residual:.3e})")
    return RiccatiSolution(K=K, gain=gain, residual_max=residual)


def centralized_gain(sol: RiccatiSolution, problem: AnyProblem) -> CentralizedStrategy:
    """Linear state feedback u = -R^-1 B* K x"""
    grid = sol.gain.grid
    return CentralizedStrategy(gain=sol.gain, offset=VectorTrajectory.constant(grid, np.zeros(sol.gain.rows)),
                               partition=problem.partition)


def _noise_cross_term(nf, K: np.ndarray, k: int) -> np.ndarray:
    """sum_i s_i* K G^(i) at node k"""
    total = np.zeros(nf.d)
    for i, s in enumerate(nf.s_coef):
        total += s.values[k].T @ K @ nf.G.values[k][:, i]
    return total


def solve_nf(problem: AnyProblem, include_noise_cross_term: bool = False) -> NfSolution:
    """
    Generalized Riccati equation of the normal form (E = 0) and the affine offset r.

    The feedback is u = -(R + sum s_i* K s_i)^-1 {(B*K + sum s_i* K kappa_i) x + m + B* r}.
    With include_noise_cross_term the affine part also carries sum_i s_i* K G^(i).
    """
    nf = as_nf(problem)
    if not nf.has_zero_E():
        raise PreconditionError("The normal-form closed-form solution requires E = 0")
    grid = nf.grid
    kappa, s_coef = nf.kappa, nf.s_coef

    def inner_and_coupling(t, K):
        """R + sum s_i* K s_i and B*K + sum s_i* K kappa_i at time t"""
        inner = nf.R.at(t).copy()
        L = nf.B.at(t).T @ K
        for kap, s in zip(kappa, s_coef):
            s_t = s.at(t)
            sK = s_t.T @ K
            inner += sK @ s_t
            L = L + sK @ kap.at(t)
        return inner, L

    def factorize(t, inner):
        try:
            return cho_factor(inner)
        except LinAlgError as e:
            node = grid.nearest_node(t)
            raise SingularInnerMatrixError(f"R + sum s*Ks is singular near node {node}: {e}", node=node) from e

    def riccati_rhs(t, K):
        inner, L = inner_and_coupling(t, K)
        KA = K @ nf.A.at(t)
        out = KA.T + KA + nf.H.at(t) - L.T @ cho_solve(factorize(t, inner), L)
        for kap in kappa:
            kap_t = kap.at(t)
            out = out + kap_t.T @ K @ kap_t
        return -out

    try:
        K = integrate_ode(riccati_rhs, nf.M_T, grid, BACKWARD, symmetric=True)

        factors = []
        gain = np.empty((grid.n_nodes, nf.d, nf.n))
        cross = np.zeros((grid.n_nodes, nf.d))
        forcing = np.empty((grid.n_nodes, nf.n))
        inner_min = np.inf
        for k, t in enumerate(grid.times):
            Kk = K.values[k]
            inner, L = inner_and_coupling(t, Kk)
            inner_min = min(inner_min, float(np.min(np.linalg.eigvalsh(inner))))
            factors.append(factorize(t, inner))
            gain[k] = -cho_solve(factors[k], L)
            if include_noise_cross_term:
                cross[k] = _noise_cross_term(nf, Kk, k)
            noise_drive = np.zeros(nf.n)
            for i, kap in enumerate(kappa):
                noise_drive += kap.values[k].T @ Kk @ nf.G.values[k][:, i]
            forcing[k] = -(nf.F.values[k] + Kk @ nf.b.values[k] + noise_drive
                           + gain[k].T @ (nf.m_lin.values[k] + cross[k]))

        gain = MatrixTrajectory(grid, gain)
        closed = nf.A.values + nf.B.values @ gain.values
        M = MatrixTrajectory(grid, -np.swapaxes(closed, 1, 2))
        r = LinearRK4Propagator(M, BACKWARD).solve(nf.N_T, VectorTrajectory(grid, forcing))

        feed_forward = np.empty((grid.n_nodes, nf.d))
        for k in range(grid.n_nodes):
            feed_forward[k] = -cho_solve(factors[k], nf.m_lin.values[k] + nf.B.values[k].T @ r.values[k] + cross[k])
    except Exception as e:
        logger.error(f"Normal-form solve failed: {e}")
        raise

    logger.info(f"Solved normal-form Riccati system (min inner eigenvalue {inner_min:.3e})")
    return NfSolution(K=K, r=r, gain=gain, feed_forward=VectorTrajectory(grid, feed_forward),
                      inner_min_eigenvalue=inner_min)


def solve_adjoint_operators(problem: AnyProblem, u_mean: Optional[VectorTrajectory] = None) -> AdjointOperators:
    """
    Sigma' + A*Sigma + Sigma A + sum kappa_i* Sigma kappa_i + H = 0, Sigma(T) = M_T, and
    beta' + A*beta + Sigma b + F + Sigma B u + E* u + sum kappa_i* Sigma (s_i u + G^(i)) = 0,
    beta(T) = N_T, for a deterministic control trajectory u (zero when omitted).
    """
    nf = as_nf(problem)
    grid = nf.grid
    if u_mean is None:
        u_mean = VectorTrajectory.constant(grid, np.zeros(nf.d))

    def sigma_rhs(t, Sig):
        SA = Sig @ nf.A.at(t)
        out = SA.T + SA + nf.H.at(t)
        for kap in nf.kappa:
            kap_t = kap.at(t)
            out = out + kap_t.T @ Sig @ kap_t
        return -out

    try:
        Sigma = integrate_ode(sigma_rhs, nf.M_T, grid, BACKWARD, symmetric=True)

        forcing = np.empty((grid.n_nodes, nf.n))
        for k in range(grid.n_nodes):
            Sk, u = Sigma.values[k], u_mean.values[k]
            drive = Sk @ (nf.b.values[k] + nf.B.values[k] @ u) + nf.F.values[k] + nf.E.values[k].T @ u
            for i, (kap, s) in enumerate(zip(nf.kappa, nf.s_coef)):
                drive += kap.values[k].T @ Sk @ (s.values[k] @ u + nf.G.values[k][:, i])
            forcing[k] = -drive
        M = MatrixTrajectory(grid, -np.swapaxes(nf.A.values, 1, 2))
        beta = LinearRK4Propagator(M, BACKWARD).solve(nf.N_T, VectorTrajectory(grid, forcing))
    except Exception as e:
        logger.error(f"Adjoint operator solve failed: {e}")
        raise

    logger.info("Solved adjoint operators Sigma and beta")
    return AdjointOperators(Sigma=Sigma, beta=beta, Q_blocks=matmul(Sigma, nf.G), problem=nf)


def kernel_representation_lqf(problem: AnyProblem, riccati: RiccatiSolution,
                              adjoint: Optional[AdjointOperators] = None) -> MatrixTrajectory:
    """
    Sigma(t) - int_t^T Phi*(s,t) Sigma(s) B R^-1 B* K(s) Psi_K(s,t) ds, with Psi_K the
    transition operator of A - B R^-1 B* K. Equals K(t) up to quadrature error.
    """
    problem = ensure_validated(problem)
    if adjoint is None:
        adjoint = solve_adjoint_operators(problem)
    S, _ = input_weight(problem.B, problem.R)
    SK = matmul(S, riccati.K)
    A_K = problem.A - SK
    weight = matmul(adjoint.Sigma, SK) * -1.0
    correction = adjoint_kernel(problem.A, A_K, np.zeros((problem.n, problem.n)), weight)
    return adjoint.Sigma + correction
