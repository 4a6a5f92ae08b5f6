#!/usr/bin/env python3
"""
Numerical Core

Time grid, node-sampled trajectories and the fixed-step RK4 machinery every solver
is built on: generic ODE integration, precomputed linear propagators, transition
operators, kernel quadrature and covariance propagation.

All integrations run on one uniform TimeGrid so that trajectories coming from
different equations are aligned node by node. Coefficients are evaluated at RK4
midpoints by interpolating their node samples (cubic spline by default, linear on
request through MIDPOINT_INTERPOLATION).
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import CubicSpline

from ..utils.config import get_settings
from ..utils.errors import IntegrationDivergedError, InvalidCovarianceError, ProblemValidationError

logger = logging.getLogger(__name__)

FORWARD = "forward"
BACKWARD = "backward"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform discretization of [t0, t0 + T]"""

    T: float
    n_steps: int
    t0: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.T) or self.T <= 0:
            raise ProblemValidationError(f"Horizon must be positive, got {self.T}", kind="invalid_grid")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ProblemValidationError(f"n_steps must be an integer >= 2, got {self.n_steps}",
                                         kind="invalid_grid")

    @property
    def h(self) -> float:
        return self.T / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    @cached_property
    def times(self) -> np.ndarray:
        times = self.t0 + self.h * np.arange(self.n_nodes)
        times[-1] = self.t0 + self.T
        times.flags.writeable = False
        return times

    @cached_property
    def midpoint_times(self) -> np.ndarray:
        mids = self.times[:-1] + 0.5 * self.h
        mids.flags.writeable = False
        return mids

    def refined(self) -> "TimeGrid":
        """Half-step grid: every node and midpoint of this grid is a node"""
        return TimeGrid(self.T, 2 * self.n_steps, self.t0)

    def nearest_node(self, t: float) -> int:
        k = int(round((t - self.t0) / self.h))
        return min(max(k, 0), self.n_steps)


class _Trajectory:
    """Node-sampled trajectory with read-only values of shape (n_nodes, *item_shape)"""

    item_ndim = 0

    def __init__(self, grid: TimeGrid, values, interpolation: Optional[str] = None):
        values = np.array(values, dtype=float)
        if values.ndim != self.item_ndim + 1 or values.shape[0] != grid.n_nodes:
            raise ProblemValidationError(
                f"{type(self).__name__} expects {grid.n_nodes} nodes of rank {self.item_ndim}, "
                f"got array of shape {values.shape}")
        finite = np.isfinite(values.reshape(grid.n_nodes, -1)).all(axis=1)
        if not finite.all():
            node = int(np.argmin(finite))
            raise IntegrationDivergedError(f"Non-finite trajectory value at node {node}", node=node)
        values.flags.writeable = False
        self.grid = grid
        self.values = values
        self.interpolation = interpolation or get_settings().MIDPOINT_INTERPOLATION
        self._midpoints: Optional[np.ndarray] = None
        self._spline: Optional[CubicSpline] = None

    @classmethod
    def constant(cls, grid: TimeGrid, value):
        value = np.asarray(value, dtype=float)
        return cls(grid, np.broadcast_to(value, (grid.n_nodes,) + value.shape))

    @classmethod
    def from_function(cls, grid: TimeGrid, fn: Callable[[float], np.ndarray]):
        return cls(grid, np.stack([np.asarray(fn(t), dtype=float) for t in grid.times]))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape[1:]

    @cached_property
    def is_constant(self) -> bool:
        return bool(np.all(self.values == self.values[0]))

    def __len__(self) -> int:
        return self.values.shape[0]

    def node(self, k: int) -> np.ndarray:
        return self.values[k]

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.values[-1]

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))

    @property
    def spline(self) -> CubicSpline:
        if self._spline is None:
            self._spline = CubicSpline(self.grid.times, self.values, axis=0)
        return self._spline

    @property
    def midpoints(self) -> np.ndarray:
        """Values at the centre of every step, shape (n_steps, *item_shape)"""
        if self._midpoints is None:
            if self.is_constant:
                mids = np.array(np.broadcast_to(self.values[0], (self.grid.n_steps,) + self.shape))
            elif self.interpolation == "linear":
                mids = 0.5 * (self.values[:-1] + self.values[1:])
            else:
                mids = self.spline(self.grid.midpoint_times)
            mids.flags.writeable = False
            self._midpoints = mids
        return self._midpoints

    def at(self, t: float) -> np.ndarray:
        """Value at time t: exact at nodes, cached at midpoints, interpolated elsewhere"""
        grid = self.grid
        s = 2.0 * (t - grid.t0) / grid.h
        j = int(round(s))
        if abs(s - j) < 1e-7 and 0 <= j <= 2 * grid.n_steps:
            if j % 2 == 0:
                return self.values[j // 2]
            return self.midpoints[j // 2]
        return self.sample(np.array([t]))[0]

    def sample(self, times: np.ndarray) -> np.ndarray:
        """Vectorized interpolation at arbitrary times inside the grid"""
        times = np.clip(np.asarray(times, dtype=float), self.grid.t0, self.grid.t0 + self.grid.T)
        if self.is_constant:
            return np.array(np.broadcast_to(self.values[0], times.shape + self.shape))
        if self.interpolation == "linear":
            s = (times - self.grid.t0) / self.grid.h
            k = np.minimum(np.floor(s).astype(int), self.grid.n_steps - 1)
            w = (s - k).reshape(times.shape + (1,) * self.item_ndim)
            return (1.0 - w) * self.values[k] + w * self.values[k + 1]
        return self.spline(times)

    def derivative_at(self, times: np.ndarray) -> np.ndarray:
        """Time derivative of the interpolating cubic spline"""
        return self.spline(np.asarray(times, dtype=float), 1)

    def _like(self, values):
        return type(self)(self.grid, values, self.interpolation)

    def __add__(self, other):
        other_values = other.values if isinstance(other, _Trajectory) else other
        return self._like(self.values + other_values)

    def __sub__(self, other):
        other_values = other.values if isinstance(other, _Trajectory) else other
        return self._like(self.values - other_values)

    def __mul__(self, scalar: float):
        return self._like(self.values * scalar)

    __rmul__ = __mul__


class MatrixTrajectory(_Trajectory):
    """Matrix-valued trajectory, one (rows x cols) matrix per node"""

    item_ndim = 2

    @property
    def rows(self) -> int:
        return self.values.shape[1]

    @property
    def cols(self) -> int:
        return self.values.shape[2]

    def transpose(self) -> "MatrixTrajectory":
        return self._like(np.swapaxes(self.values, 1, 2))

    def symmetrized(self) -> "MatrixTrajectory":
        return self._like(0.5 * (self.values + np.swapaxes(self.values, 1, 2)))

    def asymmetry(self) -> float:
        return float(np.max(np.abs(self.values - np.swapaxes(self.values, 1, 2)), initial=0.0))

    def min_eigenvalue(self) -> float:
        return float(np.min(np.linalg.eigvalsh(0.5 * (self.values + np.swapaxes(self.values, 1, 2)))))


class VectorTrajectory(_Trajectory):
    """Vector-valued trajectory, one vector per node"""

    item_ndim = 1

    @property
    def dim(self) -> int:
        return self.values.shape[1]


Trajectory = Union[MatrixTrajectory, VectorTrajectory]
VectorField = Callable[[float, np.ndarray], np.ndarray]


def matmul(*factors: MatrixTrajectory) -> MatrixTrajectory:
    """Nodewise product of matrix trajectories"""
    values = factors[0].values
    for factor in factors[1:]:
        values = values @ factor.values
    return MatrixTrajectory(factors[0].grid, values, factors[0].interpolation)


def apply(matrix: MatrixTrajectory, vector: VectorTrajectory) -> VectorTrajectory:
    """Nodewise matrix-vector product"""
    return VectorTrajectory(matrix.grid, np.einsum("kij,kj->ki", matrix.values, vector.values),
                            matrix.interpolation)


def _wrap(grid: TimeGrid, values: np.ndarray) -> Trajectory:
    if values.ndim == 2:
        return VectorTrajectory(grid, values)
    return MatrixTrajectory(grid, values)


def _first_bad_node(values: np.ndarray, order: Sequence[int]) -> Optional[int]:
    for k in order:
        if not np.all(np.isfinite(values[k])):
            return int(k)
    return None


def _rk4_segment(rhs: VectorField, y0: np.ndarray, grid: TimeGrid, k_from: int, k_to: int,
                 symmetric: bool = False) -> np.ndarray:
    """RK4 from node k_from to node k_to (either order); returns states indexed by node offset"""
    step = 1 if k_to >= k_from else -1
    hs = step * grid.h
    times = grid.times
    states = np.empty((abs(k_to - k_from) + 1,) + y0.shape)
    y = y0
    states[0] = y
    with np.errstate(over="ignore", invalid="ignore"):
        for idx, k in enumerate(range(k_from, k_to, step), start=1):
            t = times[k]
            t_mid = t + 0.5 * hs
            t_end = times[k + step]
            k1 = rhs(t, y)
            k2 = rhs(t_mid, y + 0.5 * hs * k1)
            k3 = rhs(t_mid, y + 0.5 * hs * k2)
            k4 = rhs(t_end, y + hs * k3)
            y = y + (hs / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if symmetric:
                y = 0.5 * (y + y.T)
            if not np.all(np.isfinite(y)):
                node = k + step
                raise IntegrationDivergedError(f"Integration diverged at node {node}", node=node)
            states[idx] = y
    return states


def integrate_ode(rhs: VectorField, y0, grid: TimeGrid, direction: str = FORWARD,
                  symmetric: bool = False) -> Trajectory:
    """
    Classical RK4 on the whole grid.

    Args:
        rhs: vector field rhs(t, y), evaluated at nodes and midpoints
        y0: initial value (forward) or terminal value y(T) (backward)
        grid: shared time grid
        direction: "forward" from node 0 or "backward" from node n_steps
        symmetric: re-symmetrize matrix states after every step

    Returns:
        VectorTrajectory for vector (or scalar) states, MatrixTrajectory for matrix states
    """
    y0 = np.atleast_1d(np.array(y0, dtype=float))
    if direction not in (FORWARD, BACKWARD):
        raise ValueError(f"Unknown direction {direction!r}")
    start = 0 if direction == FORWARD else grid.n_steps
    if not np.all(np.isfinite(y0)):
        raise IntegrationDivergedError(f"Non-finite initial value at node {start}", node=start)

    if direction == FORWARD:
        states = _rk4_segment(rhs, y0, grid, 0, grid.n_steps, symmetric)
    else:
        states = _rk4_segment(rhs, y0, grid, grid.n_steps, 0, symmetric)[::-1]
    return _wrap(grid, states)


class LinearRK4Propagator:
    """
    Per-step affine maps of classical RK4 for the linear field y' = M(t) y + f(t).

    One RK4 step from node a to node b = a +/- 1 is
        y_b = P y_a + Qa f(t_a) + Qm f(t_mid) + Qb f(t_b)
    with P, Qa, Qm, Qb depending on M only. Precomputing them turns every further
    sweep into one matrix product per step.
    """

    def __init__(self, M: MatrixTrajectory, direction: str = FORWARD):
        if direction not in (FORWARD, BACKWARD):
            raise ValueError(f"Unknown direction {direction!r}")
        grid = M.grid
        self.grid = grid
        self.direction = direction
        dim = M.rows
        eye = np.eye(dim)

        # step k joins nodes k and k+1; start/end depend on direction
        if direction == FORWARD:
            hs, m_start, m_end = grid.h, M.values[:-1], M.values[1:]
        else:
            hs, m_start, m_end = -grid.h, M.values[1:], M.values[:-1]
        m_mid = M.midpoints

        k2_y = m_mid @ (eye + 0.5 * hs * m_start)
        k2_a = 0.5 * hs * m_mid
        k3_y = m_mid @ (eye + 0.5 * hs * k2_y)
        k3_a = 0.5 * hs * (m_mid @ k2_a)
        k3_m = eye + 0.5 * hs * m_mid
        k4_y = m_end @ (eye + hs * k3_y)
        k4_a = hs * (m_end @ k3_a)
        k4_m = hs * (m_end @ k3_m)

        self.P = eye + (hs / 6.0) * (m_start + 2.0 * k2_y + 2.0 * k3_y + k4_y)
        self.Qa = (hs / 6.0) * (eye + 2.0 * k2_a + 2.0 * k3_a + k4_a)
        self.Qm = (hs / 6.0) * (2.0 * eye + 2.0 * k3_m + k4_m)
        self.Qb = (hs / 6.0) * np.broadcast_to(eye, self.P.shape)

    def forcing_terms(self, nodes: np.ndarray, mids: np.ndarray) -> np.ndarray:
        """Per-step affine offsets for forcing sampled at nodes and midpoints"""
        if self.direction == FORWARD:
            f_start, f_end = nodes[:-1], nodes[1:]
        else:
            f_start, f_end = nodes[1:], nodes[:-1]
        if nodes.ndim == 2:
            f_start, mids, f_end = f_start[..., None], mids[..., None], f_end[..., None]
            return (self.Qa @ f_start + self.Qm @ mids + self.Qb @ f_end)[..., 0]
        return self.Qa @ f_start + self.Qm @ mids + self.Qb @ f_end

    def solve(self, y0, forcing: Optional[Trajectory] = None) -> Trajectory:
        """Sweep from y(0) (forward) or y(T) (backward); forcing is an optional trajectory"""
        y = np.array(y0, dtype=float)
        offsets = None
        if forcing is not None:
            offsets = self.forcing_terms(forcing.values, forcing.midpoints)
        return self.solve_with_offsets(y, offsets)

    def solve_with_offsets(self, y0: np.ndarray, offsets: Optional[np.ndarray]) -> Trajectory:
        grid = self.grid
        n = grid.n_steps
        states = np.empty((n + 1,) + y0.shape)
        if self.direction == FORWARD:
            states[0] = y0
            for k in range(n):
                nxt = self.P[k] @ states[k]
                states[k + 1] = nxt if offsets is None else nxt + offsets[k]
            scan = range(n + 1)
        else:
            states[n] = y0
            for k in range(n - 1, -1, -1):
                nxt = self.P[k] @ states[k + 1]
                states[k] = nxt if offsets is None else nxt + offsets[k]
            scan = range(n, -1, -1)
        if not np.all(np.isfinite(states)):
            node = _first_bad_node(states, scan)
            raise IntegrationDivergedError(f"Linear sweep diverged at node {node}", node=node)
        return _wrap(grid, states)


def transition_matrix(A: MatrixTrajectory, s: int, t: int) -> np.ndarray:
    """State-transition matrix Phi(t, s) of x' = A(t) x between grid nodes s and t"""
    grid = A.grid
    for node in (s, t):
        if not 0 <= node <= grid.n_steps:
            raise ProblemValidationError(f"Node {node} outside grid", kind="index_out_of_range")
    eye = np.eye(A.rows)
    if s == t:
        return eye
    states = _rk4_segment(lambda tau, phi: A.at(tau) @ phi, eye, grid, s, t)
    return states[-1]


def fundamental_matrices(A: MatrixTrajectory) -> MatrixTrajectory:
    """Phi(t_k, 0) for every node"""
    return LinearRK4Propagator(A, FORWARD).solve(np.eye(A.rows))


def terminal_transitions(A: MatrixTrajectory) -> MatrixTrajectory:
    """Phi(T, t_k) for every node, by one backward sweep of X' = -A* X, X(T) = I"""
    adjoint = LinearRK4Propagator(A.transpose() * -1.0, BACKWARD).solve(np.eye(A.rows))
    return adjoint.transpose()


def adjoint_kernel(A: MatrixTrajectory, A_K: MatrixTrajectory, terminal: np.ndarray,
                   weight: Optional[MatrixTrajectory] = None) -> MatrixTrajectory:
    """
    Evaluate on every node t

        Phi*(T,t) terminal Psi(T,t) + int_t^T Phi*(s,t) W(s) Psi(s,t) ds

    where Phi and Psi are the transition operators of A and A_K. With Phi(s,t) = F(s)F(t)^-1
    (F fundamental) the integrand factorizes, so a single cumulative trapezoidal pass covers
    all t.
    """
    grid = A.grid
    F = fundamental_matrices(A).values
    G = fundamental_matrices(A_K).values
    Ft = np.swapaxes(F, 1, 2)

    inner = np.broadcast_to(Ft[-1] @ np.asarray(terminal, dtype=float) @ G[-1], F.shape).copy()
    if weight is not None:
        integrand = Ft @ weight.values @ G
        running = cumulative_trapezoid(integrand, grid.times, axis=0, initial=0.0)
        inner += running[-1] - running

    left = np.linalg.solve(Ft, inner)
    result = np.swapaxes(np.linalg.solve(np.swapaxes(G, 1, 2), np.swapaxes(left, 1, 2)), 1, 2)
    return MatrixTrajectory(grid, result)


def check_covariance(P0, label: str = "P0", tolerance: Optional[float] = None) -> np.ndarray:
    """Return P0 as a symmetric array or raise InvalidCovarianceError"""
    settings = get_settings()
    tolerance = settings.PSD_TOLERANCE if tolerance is None else tolerance
    P0 = np.atleast_2d(np.array(P0, dtype=float))
    if P0.shape[0] != P0.shape[1] or not np.all(np.isfinite(P0)):
        raise InvalidCovarianceError(f"{label} must be a finite square matrix, got shape {P0.shape}")
    scale = max(1.0, float(np.max(np.abs(P0), initial=0.0)))
    if np.max(np.abs(P0 - P0.T), initial=0.0) > settings.SYMMETRY_TOLERANCE * scale:
        raise InvalidCovarianceError(f"{label} is not symmetric")
    P0 = 0.5 * (P0 + P0.T)
    min_eig = float(np.min(np.linalg.eigvalsh(P0))) if P0.size else 0.0
    if min_eig < -tolerance:
        raise InvalidCovarianceError(f"{label} is not positive semidefinite (min eigenvalue {min_eig:.3e})")
    return P0


def propagate_covariance(A_cl: MatrixTrajectory, G_cl: MatrixTrajectory, P0,
                         grid: Optional[TimeGrid] = None) -> MatrixTrajectory:
    """Lyapunov ODE P' = A_cl P + P A_cl* + G_cl G_cl*, P(0) = P0, symmetrized every step"""
    grid = grid or A_cl.grid
    P0 = check_covariance(P0)
    noise = matmul(G_cl, G_cl.transpose()).symmetrized()

    def rhs(t, P):
        A = A_cl.at(t)
        AP = A @ P
        return AP + AP.T + noise.at(t)

    return integrate_ode(rhs, P0, grid, FORWARD, symmetric=True)


def propagate_mean(A_cl: MatrixTrajectory, b_cl: Optional[VectorTrajectory], m0) -> VectorTrajectory:
    """Mean ODE m' = A_cl m + b_cl, m(0) = m0"""
    return LinearRK4Propagator(A_cl, FORWARD).solve(np.asarray(m0, dtype=float), b_cl)
