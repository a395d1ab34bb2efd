"""Forward optimal control used to synthesize the controllers being explained.

Horizon convention, used consistently here and in the inverse problem: a
"prediction horizon" of ``H`` samples means ``H - 1`` free inputs with stage
costs ``x(k)' Q x(k) + u(k)' R u(k)`` over ``k = 0..H-2`` and zero terminal
weight, i.e. the value matrices satisfy ``P(H-1) = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConditioningError, DimensionError, SolverError
from .systems import FloatArray, LinearSystem, PendulumParams, Trajectory, _frozen_array


@dataclass(frozen=True, eq=False)
class CostWeights:
    """Quadratic stage cost weights: symmetric PSD ``Q``, symmetric PD ``R``."""

    Q: FloatArray
    R: FloatArray

    def __post_init__(self):
        Q = _frozen_array(self.Q, "Q", 2)
        R = _frozen_array(self.R, "R", 2)
        for name, W in (("Q", Q), ("R", R)):
            if W.shape[0] != W.shape[1]:
                raise DimensionError(f"{name} must be square, got shape {W.shape}")
            asym = np.max(np.abs(W - W.T)) if W.size else 0.0
            if asym > 1e-9 * max(1.0, np.max(np.abs(W))):
                raise ValueError(f"{name} must be symmetric (max asymmetry {asym:.3e})")
        if np.linalg.eigvalsh(Q).min() < -1e-10:
            raise ValueError("Q must be positive semidefinite")
        if np.linalg.eigvalsh(R).min() <= 0.0:
            raise ValueError("R must be positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.R.shape[0]


@dataclass(frozen=True, eq=False)
class GainSchedule:
    """Time-varying LQR solution over a horizon of ``H`` samples.

    ``gains[k]`` is the optimal feedback ``K(k)`` (``u = -K(k) x``) for
    ``k = 0..H-2``; ``value_matrices[k]`` is the cost-to-go matrix ``P(k)``
    for ``k = 0..H-1`` with ``P(H-1) = 0``.
    """

    gains: FloatArray  # (H-1, m, n)
    value_matrices: FloatArray  # (H, n, n)

    def __post_init__(self):
        gains = _frozen_array(self.gains, "gains", 3)
        value_matrices = _frozen_array(self.value_matrices, "value_matrices", 3)
        if value_matrices.shape[0] != gains.shape[0] + 1:
            raise DimensionError("need one more value matrix than gains")
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "value_matrices", value_matrices)

    @property
    def horizon(self) -> int:
        return self.value_matrices.shape[0]


@dataclass(frozen=True, eq=False)
class ReferenceSignal:
    """Per-step state and input references covering a controller horizon."""

    x_ref: FloatArray  # (H, n)
    u_ref: FloatArray  # (H, m)

    def __post_init__(self):
        object.__setattr__(self, "x_ref", _frozen_array(self.x_ref, "x_ref", 2))
        object.__setattr__(self, "u_ref", _frozen_array(self.u_ref, "u_ref", 2))
        if self.x_ref.shape[0] != self.u_ref.shape[0]:
            raise DimensionError("x_ref and u_ref must cover the same horizon")

    @classmethod
    def constant(cls, x_ref, u_ref, horizon: int) -> "ReferenceSignal":
        x_ref = np.asarray(x_ref, dtype=float)
        u_ref = np.asarray(u_ref, dtype=float)
        return cls(
            x_ref=np.tile(x_ref, (horizon, 1)),
            u_ref=np.tile(u_ref, (horizon, 1)),
        )

    @property
    def horizon(self) -> int:
        return self.x_ref.shape[0]


def riccati_solve(sys: LinearSystem, w: CostWeights, H: int) -> GainSchedule:
    """Backward Riccati recursion with zero terminal weight.

    Starting from ``P(H-1) = 0``:

        K(k) = (R + B' P(k+1) B)^-1 B' P(k+1) A
        P(k) = Q + A' P(k+1) A - A' P(k+1) B K(k)

    Each ``P(k)`` is symmetrized to suppress round-off drift.  The schedule
    minimizes the stage cost sum over ``k = 0..H-2`` subject to the dynamics.

    Raises:
        ConditioningError: if ``R + B' P B`` is numerically singular.
    """
    if H < 2:
        raise ValueError(f"horizon must be >= 2, got {H}")
    if w.n != sys.n or w.m != sys.m:
        raise DimensionError(
            f"weights are ({w.n}, {w.m}) but system is ({sys.n}, {sys.m})"
        )
    A, B = sys.A, sys.B
    Q, R = w.Q, w.R
    P = np.zeros((H, sys.n, sys.n))
    K = np.zeros((H - 1, sys.m, sys.n))
    for k in range(H - 2, -1, -1):
        PB = P[k + 1] @ B
        M = R + B.T @ PB
        try:
            np.linalg.cholesky(M)
            K[k] = np.linalg.solve(M, PB.T @ A)
        except np.linalg.LinAlgError as exc:
            raise ConditioningError(
                f"R + B'PB is numerically singular at step {k}"
            ) from exc
        Pk = Q + A.T @ P[k + 1] @ A - A.T @ PB @ K[k]
        P[k] = 0.5 * (Pk + Pk.T)
    return GainSchedule(gains=K, value_matrices=P)


def lqr_closed_loop(sys: LinearSystem, w: CostWeights, x0, N: int) -> Trajectory:
    """Simulate the optimal closed loop under the full-horizon gain schedule."""
    schedule = riccati_solve(sys, w, N)
    x = np.asarray(x0, dtype=float)
    if x.shape != (sys.n,):
        raise DimensionError(f"x0 must have shape ({sys.n},), got {x.shape}")
    states = np.empty((N, sys.n))
    inputs = np.empty((N - 1, sys.m))
    states[0] = x
    for k in range(N - 1):
        u = -schedule.gains[k] @ x
        inputs[k] = u
        x = sys.A @ x + sys.B @ u
        states[k + 1] = x
    return Trajectory(states=states, inputs=inputs)


class StaticFeedbackPolicy:
    """Stationary policy ``u(x) = -K x``."""

    def __init__(self, gain: FloatArray):
        self.gain = np.asarray(gain, dtype=float)

    def __call__(self, x: FloatArray) -> FloatArray:
        return -self.gain @ x


def mpc_policy_lti(sys: LinearSystem, w: CostWeights, T: int) -> StaticFeedbackPolicy:
    """Receding-horizon MPC policy for an unconstrained LTI plant.

    At every step the controller solves the ``T``-sample problem and applies
    the first input, which collapses to the static gain ``K_T(0)``.
    """
    schedule = riccati_solve(sys, w, T)
    return StaticFeedbackPolicy(schedule.gains[0])


def equilibrium_input(p: PendulumParams, theta_r: float) -> float:
    """Torque holding the pendulum fixed at ``(theta_r, 0)``: ``-m g l sin(theta_r)``."""
    return -p.m * p.g * p.l * math.sin(theta_r)


@dataclass(frozen=True)
class NmpcOptions:
    """Solver options for the iterative-linearization tracking solver.

    ``tolerance`` bounds the infinity norm of the input-sequence gradient
    relative to the cost scale (``1 + cost``), so large cost weights do not
    demand stationarity below the floating-point floor.
    """

    max_iterations: int = 50
    tolerance: float = 1e-8
    armijo_slope: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 40


def _plant_jacobians(plant, x, u):
    jac = getattr(plant, "jacobians", None)
    if jac is not None:
        return jac(x, u)
    from .systems import numeric_jacobians

    return numeric_jacobians(plant, x, u)


def _rollout(plant, x0, U):
    X = np.empty((U.shape[0] + 1, x0.shape[0]))
    X[0] = x0
    for k in range(U.shape[0]):
        X[k + 1] = plant.step(X[k], U[k])
    return X

def _tracking_cost(X, U, Q, R, xr, ur):
    dx = X[:-1] - xr
    du = U - ur
    return float(np.einsum("ki,ij,kj->", dx, Q, dx) + np.einsum("ki,ij,kj->", du, R, du))


def _tracking_gradient(plant, X, U, Q, R, xr, ur):
    """Gradient of the tracking cost w.r.t. the input sequence, via the adjoint."""
    T1 = U.shape[0]
    G = np.empty_like(U)
    lam = np.zeros(X.shape[1])
    for k in range(T1 - 1, -1, -1):
        A_k, B_k = _plant_jacobians(plant, X[k], U[k])
        G[k] = 2.0 * R @ (U[k] - ur[k]) + B_k.T @ lam
        lam = 2.0 * Q @ (X[k] - xr[k]) + A_k.T @ lam
    return G


def solve_tracking_ocp(
    plant,
    w: CostWeights,
    x: FloatArray,
    ref: ReferenceSignal,
    T: int,
    u_init: FloatArray,
    opts: NmpcOptions,
) -> FloatArray:
    """Minimize the horizon-``T`` tracking cost by iterative linearization.

    Each iteration linearizes the plant along the current rollout, solves the
    time-varying LQ subproblem by a backward sweep, and applies the update
    with an Armijo backtracking line search until the first-order stationarity
    tolerance is met.  For a linear plant the first iteration lands exactly on
    the LQ optimum.

    Returns the optimal input sequence ``u(0..T-2)``.

    Raises:
        SolverError: if the stationarity tolerance is not reached within
            ``opts.max_iterations``, carrying the final gradient norm.
    """
    if T < 2:
        raise ValueError(f"prediction horizon must be >= 2, got {T}")
    if ref.horizon < T:
        raise DimensionError(f"reference covers {ref.horizon} steps, need {T}")
    xr = ref.x_ref[: T - 1]
    ur = ref.u_ref[: T - 1]
    Q, R = w.Q, w.R
    n, m = plant.n, plant.m

    U = np.array(u_init, dtype=float)
    if U.shape != (T - 1, m):
        raise DimensionError(f"u_init must have shape ({T - 1}, {m}), got {U.shape}")
    X = _rollout(plant, x, U)
    cost = _tracking_cost(X, U, Q, R, xr, ur)
    grad_norm = float("inf")

    for _ in range(opts.max_iterations):
        G = _tracking_gradient(plant, X, U, Q, R, xr, ur)
        grad_norm = float(np.max(np.abs(G)))
        if grad_norm < opts.tolerance * (1.0 + abs(cost)):
            return U

        # Backward sweep of the LQ subproblem along the current rollout.
        d = np.empty((T - 1, m))
        Kfb = np.empty((T - 1, m, n))
        Vx = np.zeros(n)
        Vxx = np.zeros((n, n))
        for k in range(T - 2, -1, -1):
            A_k, B_k = _plant_jacobians(plant, X[k], U[k])
            gx = 2.0 * Q @ (X[k] - xr[k]) + A_k.T @ Vx
            gu = 2.0 * R @ (U[k] - ur[k]) + B_k.T @ Vx
            Hxx = 2.0 * Q + A_k.T @ Vxx @ A_k
            Hux = B_k.T @ Vxx @ A_k
            Huu = 2.0 * R + B_k.T @ Vxx @ B_k
            d[k] = -np.linalg.solve(Huu, gu)
            Kfb[k] = -np.linalg.solve(Huu, Hux)
            Vx = gx + Kfb[k].T @ Huu @ d[k] + Kfb[k].T @ gu + Hux.T @ d[k]
            Vxx = Hxx + Kfb[k].T @ Huu @ Kfb[k] + Kfb[k].T @ Hux + Hux.T @ Kfb[k]
            Vxx = 0.5 * (Vxx + Vxx.T)

        slope = float(np.sum(G * d))
        if -slope <= np.finfo(float).eps * (1.0 + abs(cost)):
            # Predicted decrease is below the cost's round-off floor: the
            # iterate is stationary to machine precision.
            return U
        if slope >= 0.0:
            raise SolverError(
                f"update is not a descent direction (slope {slope:.3e})",
                gradient_norm=grad_norm,
            )

        # Forward pass with feedback, backtracking on the step size.
        alpha = 1.0
        accepted = False
        for _ in range(opts.max_backtracks):
            X_new = np.empty_like(X)
            U_new = np.empty_like(U)
            X_new[0] = X[0]
            for k in range(T - 1):
                U_new[k] = U[k] + alpha * d[k] + Kfb[k] @ (X_new[k] - X[k])
                X_new[k + 1] = plant.step(X_new[k], U_new[k])
            cost_new = _tracking_cost(X_new, U_new, Q, R, xr, ur)
            if cost_new <= cost + opts.armijo_slope * alpha * slope:
                accepted = True
                break
            alpha *= opts.backtrack_factor
        if not accepted:
            raise SolverError(
                "line search failed to decrease the tracking cost",
                gradient_norm=grad_norm,
            )
        decrease = cost - cost_new
        X, U, cost = X_new, U_new, cost_new
        if decrease <= 1e-12 * (1.0 + abs(cost)):
            # Realized progress is below the round-off level of the cost.
            return U

    raise SolverError(
        f"no convergence within {opts.max_iterations} iterations",
        gradient_norm=grad_norm,
    )


class NmpcController:
    """Receding-horizon nonlinear MPC with a warm-start cache.

    The cache holds the previous step's input sequence, shifted by one; a
    controller instance must not be driven from two threads simultaneously.
    """

    def __init__(self, plant, w: CostWeights, T: int, opts: NmpcOptions | None = None):
        self.plant = plant
        self.weights = w
        self.horizon = T
        self.opts = opts if opts is not None else NmpcOptions()
        self._warm: FloatArray | None = None

    def reset(self):
        self._warm = None

    def step(self, x: FloatArray, ref: ReferenceSignal) -> FloatArray:
        if self._warm is None:
            u_init = np.array(ref.u_ref[: self.horizon - 1], dtype=float)
        else:
            u_init = np.vstack([self._warm[1:], self._warm[-1:]])
        U = solve_tracking_ocp(
            self.plant, self.weights, np.asarray(x, dtype=float), ref,
            self.horizon, u_init, self.opts,
        )
        self._warm = U
        return U[0].copy()


def nmpc_step(
    plant,
    w: CostWeights,
    x,
    ref: ReferenceSignal,
    T: int,
    opts: NmpcOptions | None = None,
) -> FloatArray:
    """One cold-start NMPC solve; returns the first input of the optimal sequence."""
    opts = opts if opts is not None else NmpcOptions()
    u_init = np.array(ref.u_ref[: T - 1], dtype=float)
    U = solve_tracking_ocp(plant, w, np.asarray(x, dtype=float), ref, T, u_init, opts)
    return U[0].copy()
