"""The explanation engine: inverse-LQ recovery of cost weights from data.

Given the plant matrices ``(A, B)`` and measured closed-loop trajectories,
the optimality conditions of the finite-horizon LQ problem couple the state
to an adjoint sequence ``lambda``:

    lambda(k) = A' lambda(k+1) + Q x(k),      lambda(N-1) = 0
    u(k)      = -R^-1 B' lambda(k+1)
    x(k+1)    = A x(k) - B R^-1 B' lambda(k+1)

For fixed ``(Q, R)`` and an initial state these equations have a unique
solution, which this module computes by the Riccati sweep
(``lambda(k) = P(k) x(k)``).  The fitting objective is the mean squared
reconstruction error between the measured states and the states these
conditions predict; minimizing it over ``(Q, R)`` yields the recovered
weights.  The trajectory variables are eliminated exactly, so the search is
unconstrained over Cholesky-style factors of ``(Q, R)``; the direct sparse
solve of the coupled boundary-value system is kept as an independent
cross-check (:func:`pmp_boundary_solve`).

Scale ambiguity: ``(alpha Q, alpha R)`` reproduces the data exactly as well
as ``(Q, R)`` for any ``alpha > 0``, so results are normalized, either to
``trace(R) = m`` or to ``R = 1`` for single-input plants.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .control import CostWeights, riccati_solve
from .errors import ConfigError, DimensionError, SolverError
from .rng import STREAM_RESTARTS, gaussian, substream
from .systems import FloatArray, LinearSystem, Trajectory, _frozen_array

STRUCTURES = ("full", "diagonal")
NORMALIZATIONS = ("trace_r", "fix_r_scalar")
GRADIENT_MODES = ("finite_difference", "analytic")

# Ridge added to R's factor product so R stays invertible during the search.
R_RIDGE = 1e-6


@dataclass(frozen=True, eq=False)
class AdjointSequence:
    """Adjoint (costate) sequence ``lambda(0..N-1)`` with ``lambda(N-1) = 0``."""

    lambdas: FloatArray  # (N, n)

    def __post_init__(self):
        lambdas = _frozen_array(self.lambdas, "lambdas", 2)
        if lambdas.shape[0] < 2:
            raise DimensionError("adjoint sequence needs at least 2 entries")
        object.__setattr__(self, "lambdas", lambdas)


@dataclass(frozen=True)
class IocConfig:
    """Configuration of the weight-recovery solver.

    Attributes:
        structure: "full" (dense symmetric factors) or "diagonal".
        normalization: "trace_r" (``trace(R) = m``) or "fix_r_scalar"
            (``R = 1``; single-input plants only).
        restarts: number of optimizer starts; the first starts at identity
            factors, the rest perturb them with seeded Gaussian entries.
        max_iterations: iteration cap per start.
        objective_tolerance: stop when an iteration decreases the objective
            by less than this.
        gradient_mode: "finite_difference" (central differences) or
            "analytic" (forward sensitivities of the Riccati sweep).
        seed: seed for the restart perturbations.
    """

    structure: str = "full"
    normalization: str = "trace_r"
    restarts: int = 1
    max_iterations: int = 500
    objective_tolerance: float = 1e-12
    gradient_mode: str = "finite_difference"
    seed: int = 0

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ConfigError(f"structure must be one of {STRUCTURES}, got {self.structure!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(
                f"normalization must be one of {NORMALIZATIONS}, got {self.normalization!r}"
            )
        if self.gradient_mode not in GRADIENT_MODES:
            raise ConfigError(
                f"gradient_mode must be one of {GRADIENT_MODES}, got {self.gradient_mode!r}"
            )
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.objective_tolerance <= 0.0:
            raise ConfigError("objective_tolerance must be > 0")


@dataclass(frozen=True, eq=False)
class IocResult:
    """Recovered weights plus fit diagnostics."""

    Q_hat: FloatArray
    R_hat: FloatArray
    objective: float
    per_trajectory_rmse: FloatArray
    iterations: int
    restarts_used: int
    converged: bool
    normalization: str

    def __post_init__(self):
        Q = _frozen_array(self.Q_hat, "Q_hat", 2)
        R = _frozen_array(self.R_hat, "R_hat", 2)
        if np.max(np.abs(Q - Q.T)) > 1e-12 * max(1.0, np.max(np.abs(Q))):
            raise ValueError("Q_hat must be symmetric")
        if np.linalg.eigvalsh(Q).min() < -1e-10:
            raise ValueError("Q_hat must be positive semidefinite")
        if np.linalg.eigvalsh(R).min() < R_RIDGE * (1.0 - 1e-9):
            raise ValueError(f"R_hat minimum eigenvalue must be >= {R_RIDGE}")
        if _normalization_residual(CostWeights(Q, R), self.normalization) > 1e-9:
            raise ValueError("normalization constraint violated")
        object.__setattr__(self, "Q_hat", Q)
        object.__setattr__(self, "R_hat", R)
        object.__setattr__(
            self,
            "per_trajectory_rmse",
            _frozen_array(self.per_trajectory_rmse, "per_trajectory_rmse", 1),
        )


def reconstruct_pmp_trajectory(
    sys: LinearSystem, w: CostWeights, x_bar, N: int
) -> tuple[Trajectory, AdjointSequence]:
    """Unique ``(x, u, lambda)`` satisfying the optimality conditions.

    Computed via the Riccati sweep: ``lambda(k) = P(k) x(k)``, which makes the
    state sequence identical to :func:`invlqr.control.lqr_closed_loop`.
    """
    schedule = riccati_solve(sys, w, N)
    x = np.asarray(x_bar, dtype=float)
    if x.shape != (sys.n,):
        raise DimensionError(f"x_bar must have shape ({sys.n},), got {x.shape}")
    states = np.empty((N, sys.n))
    inputs = np.empty((N - 1, sys.m))
    lambdas = np.empty((N, sys.n))
    states[0] = x
    for k in range(N - 1):
        lambdas[k] = schedule.value_matrices[k] @ states[k]
        u = -schedule.gains[k] @ states[k]
        inputs[k] = u
        states[k + 1] = sys.A @ states[k] + sys.B @ u
    lambdas[N - 1] = schedule.value_matrices[N - 1] @ states[N - 1]
    return Trajectory(states=states, inputs=inputs), AdjointSequence(lambdas=lambdas)


def pmp_boundary_solve(
    sys: LinearSystem, w: CostWeights, x_bar, N: int
) -> tuple[Trajectory, AdjointSequence]:
    """Direct sparse solve of the coupled state/adjoint boundary-value system.

    Stacks the ``2 n (N-1)`` unknowns ``x(1..N-1), lambda(1..N-1)`` and solves
    the linear system built from the state update, the adjoint recursion, and
    the terminal condition ``lambda(N-1) = 0``.  Used as an independent
    cross-check of :func:`reconstruct_pmp_trajectory`.
    """
    if N < 2:
        raise ValueError(f"N must be >= 2, got {N}")
    n, m = sys.n, sys.m
    A, B = sys.A, sys.B
    Q = w.Q
    BRB = B @ np.linalg.solve(w.R, B.T)
    x0 = np.asarray(x_bar, dtype=float)

    # Unknown layout: x(k) at (k-1)*n, lambda(k) at n*(N-1) + (k-1)*n, k = 1..N-1.
    size = 2 * n * (N - 1)
    lam_off = n * (N - 1)
    M = scipy.sparse.lil_matrix((size, size))
    rhs = np.zeros(size)
    eye = np.eye(n)

    def xs(k):  # slice of x(k), k >= 1
        return slice((k - 1) * n, k * n)

    def ls(k):  # slice of lambda(k), k >= 1
        return slice(lam_off + (k - 1) * n, lam_off + k * n)

    row = 0
    # State updates: x(k+1) - A x(k) + B R^-1 B' lambda(k+1) = 0, k = 0..N-2.
    for k in range(N - 1):
        r = slice(row, row + n)
        M[r, xs(k + 1)] = eye
        M[r, ls(k + 1)] = BRB
        if k == 0:
            rhs[r] = A @ x0
        else:
            M[r, xs(k)] = -A
        row += n
    # Adjoint recursion: lambda(k) - A' lambda(k+1) - Q x(k) = 0, k = 1..N-2.
    for k in range(1, N - 1):
        r = slice(row, row + n)
        M[r, ls(k)] = eye
        M[r, ls(k + 1)] = -A.T
        M[r, xs(k)] = -Q
        row += n
    # Terminal condition: lambda(N-1) = 0.
    r = slice(row, row + n)
    M[r, ls(N - 1)] = eye
    row += n
    assert row == size

    sol = scipy.sparse.linalg.spsolve(M.tocsr(), rhs)
    states = np.empty((N, n))
    lambdas = np.empty((N, n))
    states[0] = x0
    for k in range(1, N):
        states[k] = sol[xs(k)]
        lambdas[k] = sol[ls(k)]
    lambdas[0] = A.T @ lambdas[1] + Q @ states[0]
    inputs = np.empty((N - 1, m))
    for k in range(N - 1):
        inputs[k] = -np.linalg.solve(w.R, B.T @ lambdas[k + 1])
    return Trajectory(states=states, inputs=inputs), AdjointSequence(lambdas=lambdas)


# ---------------------------------------------------------------------------
# Objective evaluation
# ---------------------------------------------------------------------------


class _StackedData:
    """Measured trajectories grouped by horizon for vectorized reconstruction."""

    def __init__(self, sys: LinearSystem, trajectories):
        self.n = sys.n
        self.m = sys.m
        self.count = len(trajectories)
        groups: dict[int, list[int]] = {}
        for i, traj in enumerate(trajectories):
            if traj.n != sys.n:
                raise DimensionError(
                    f"trajectory {i} has state dimension {traj.n}, system has {sys.n}"
                )
            if traj.m != sys.m:
                raise DimensionError(
                    f"trajectory {i} has input dimension {traj.m}, system has {sys.m}"
                )
            groups.setdefault(traj.horizon, []).append(i)
        # (horizon, original indices, stacked measured states (M_g, N, n))
        self.groups = [
            (N, np.array(idx), np.stack([trajectories[i].states for i in idx]))
            for N, idx in sorted(groups.items())
        ]

    def squared_errors(self, sys: LinearSystem, w: CostWeights) -> FloatArray:
        """Per-trajectory sum over ``k >= 1`` of ``||x_d(k) - x(k)||^2``."""
        out = np.empty(self.count)
        for N, idx, Xd in self.groups:
            schedule = riccati_solve(sys, w, N)
            X = Xd[:, 0, :]
            err = np.zeros(len(idx))
            for k in range(N - 1):
                Acl = sys.A - sys.B @ schedule.gains[k]
                X = X @ Acl.T
                resid = X - Xd[:, k + 1, :]
                err += np.einsum("ij,ij->i", resid, resid)
            out[idx] = err
        return out

    def squared_errors_and_gradient(
        self, sys: LinearSystem, w: CostWeights, dQs, dRs
    ) -> tuple[FloatArray, FloatArray]:
        """Squared errors plus the gradient of their sum along weight directions.

        ``dQs``/``dRs`` are stacks of symmetric direction matrices; the
        gradient is obtained by forward-mode differentiation of the Riccati
        recursion and of the reconstruction rollout.
        """
        A, B = sys.A, sys.B
        Q, R = w.Q, w.R
        p = len(dQs)
        out = np.empty(self.count)
        grad = np.zeros(p)
        for N, idx, Xd in self.groups:
            # Backward sweep with sensitivities.
            K = np.empty((N - 1, self.m, self.n))
            dK = np.empty((N - 1, p, self.m, self.n))
            P1 = np.zeros((self.n, self.n))
            dP1 = np.zeros((p, self.n, self.n))
            for k in range(N - 2, -1, -1):
                PB = P1 @ B
                M = R + B.T @ PB
                K[k] = np.linalg.solve(M, PB.T @ A)
                APB = A.T @ P1 @ B
                for j in range(p):
                    dM = dRs[j] + B.T @ dP1[j] @ B
                    dK[k, j] = np.linalg.solve(M, B.T @ dP1[j] @ A - dM @ K[k])
                    dPn = (
                        dQs[j]
                        + A.T @ dP1[j] @ A
                        - (A.T @ dP1[j] @ B) @ K[k]
                        - APB @ dK[k, j]
                    )
                    dP1[j] = 0.5 * (dPn + dPn.T)
                Pk = Q + A.T @ P1 @ A - APB @ K[k]
                P1 = 0.5 * (Pk + Pk.T)
            # Forward rollout with sensitivities.
            X = Xd[:, 0, :]
            dX = np.zeros((p, len(idx), self.n))
            err = np.zeros(len(idx))
            for k in range(N - 1):
                Acl = A - B @ K[k]
                X_next = X @ Acl.T
                for j in range(p):
                    dX[j] = dX[j] @ Acl.T - X @ dK[k, j].T @ B.T
                X = X_next
                resid = X - Xd[:, k + 1, :]
                err += np.einsum("ij,ij->i", resid, resid)
                for j in range(p):
                    grad[j] += 2.0 * float(np.sum(resid * dX[j]))
            out[idx] = err
        return out, grad


def ioc_objective(sys: LinearSystem, w: CostWeights, data) -> float:
    """Mean squared state reconstruction error over the dataset.

    ``(1/M) sum_i sum_{k>=1} ||x_d^(i)(k) - x^(i)(k)||^2`` where ``x^(i)`` is
    the optimality-condition reconstruction started from the measured first
    sample (the ``k = 0`` term is excluded; it is zero by construction).
    """
    trajectories = tuple(getattr(data, "trajectories", data))
    if len(trajectories) == 0:
        raise ValueError("dataset is empty")
    stacked = _StackedData(sys, trajectories)
    return float(np.sum(stacked.squared_errors(sys, w)) / stacked.count)


# ---------------------------------------------------------------------------
# Weight parameterization and solver
# ---------------------------------------------------------------------------


class _FactorParameterization:
    """Maps a flat parameter vector to ``Q = Lq Lq'`` and ``R = Lr Lr' + ridge``.

    ``Lq``/``Lr`` are lower-triangular ("full") or diagonal ("diagonal"), so
    every parameter vector yields feasible PSD/PD weights and the search stays
    unconstrained.
    """

    def __init__(self, n: int, m: int, structure: str):
        self.n = n
        self.m = m
        if structure == "full":
            self.q_idx = [(r, c) for r in range(n) for c in range(r + 1)]
            self.r_idx = [(r, c) for r in range(m) for c in range(r + 1)]
        else:
            self.q_idx = [(r, r) for r in range(n)]
            self.r_idx = [(r, r) for r in range(m)]
        self.num_params = len(self.q_idx) + len(self.r_idx)

    def initial_theta(self) -> FloatArray:
        theta = np.zeros(self.num_params)
        for j, (r, c) in enumerate(self.q_idx):
            theta[j] = 1.0 if r == c else 0.0
        off = len(self.q_idx)
        for j, (r, c) in enumerate(self.r_idx):
            theta[off + j] = 1.0 if r == c else 0.0
        return theta

    def factors(self, theta: FloatArray) -> tuple[FloatArray, FloatArray]:
        Lq = np.zeros((self.n, self.n))
        Lr = np.zeros((self.m, self.m))
        for j, (r, c) in enumerate(self.q_idx):
            Lq[r, c] = theta[j]
        off = len(self.q_idx)
        for j, (r, c) in enumerate(self.r_idx):
            Lr[r, c] = theta[off + j]
        return Lq, Lr

    def weights(self, theta: FloatArray) -> CostWeights:
        Lq, Lr = self.factors(theta)
        Q = Lq @ Lq.T
        R = Lr @ Lr.T + R_RIDGE * np.eye(self.m)
        return CostWeights(Q=0.5 * (Q + Q.T), R=0.5 * (R + R.T))

    def direction_matrices(self, theta: FloatArray) -> tuple[FloatArray, FloatArray]:
        """Stacks ``dQ/dtheta_j`` and ``dR/dtheta_j`` for all parameters."""
        Lq, Lr = self.factors(theta)
        p = self.num_params
        dQs = np.zeros((p, self.n, self.n))
        dRs = np.zeros((p, self.m, self.m))
        for j, (r, c) in enumerate(self.q_idx):
            E = np.zeros((self.n, self.n))
            E[r, c] = 1.0
            dQs[j] = E @ Lq.T + Lq @ E.T
        off = len(self.q_idx)
        for j, (r, c) in enumerate(self.r_idx):
            E = np.zeros((self.m, self.m))
            E[r, c] = 1.0
            dRs[off + j] = E @ Lr.T + Lr @ E.T
        return dQs, dRs


def _normalization_residual(w: CostWeights, mode: str) -> float:
    if mode == "trace_r":
        return abs(float(np.trace(w.R)) / w.m - 1.0)
    return abs(float(w.R[0, 0]) - 1.0)


def normalize_weights(w: CostWeights, mode: str) -> CostWeights:
    """Rescale ``(Q, R)`` by the common factor that pins down the scale.

    ``trace_r`` divides by ``trace(R)/m``; ``fix_r_scalar`` divides by the
    scalar ``R`` (single-input plants only).  Idempotent.
    """
    if mode not in NORMALIZATIONS:
        raise ConfigError(f"normalization must be one of {NORMALIZATIONS}, got {mode!r}")
    if mode == "fix_r_scalar":
        if w.m != 1:
            raise ConfigError(
                f"fix_r_scalar requires a single-input plant, got m = {w.m}"
            )
        alpha = float(w.R[0, 0])
    else:
        alpha = float(np.trace(w.R)) / w.m
    return CostWeights(Q=w.Q / alpha, R=w.R / alpha)


def _bfgs(
    fun_and_grad,
    theta0,
    max_iterations: int,
    ftol: float,
    gtol: float = 1e-9,
    patience: int = 5,
):
    """BFGS with Armijo backtracking; returns (theta, f, iterations, converged).

    Converged when the gradient norm drops below ``gtol`` or the objective
    decrease stays below ``ftol`` for ``patience`` consecutive iterations
    (a single sub-``ftol`` decrease can be a transient plateau while the
    curvature model is still being built, not convergence).
    """
    theta = np.array(theta0, dtype=float)
    p = theta.size
    H = np.eye(p)
    f, g = fun_and_grad(theta)
    iterations = 0
    stalled = 0
    for _ in range(max_iterations):
        if np.linalg.norm(g) < gtol:
            return theta, f, iterations, True
        direction = -H @ g
        slope = float(g @ direction)
        if slope >= 0.0:
            H = np.eye(p)
            direction = -g
            slope = float(g @ direction)
            if slope == 0.0:
                return theta, f, iterations, True
        alpha = 1.0
        accepted = False
        for _ in range(60):
            theta_new = theta + alpha * direction
            f_new, g_new = fun_and_grad(theta_new)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        iterations += 1
        if not accepted:
            # No decrease found along this direction; drop the curvature
            # model and count the iteration as stalled.
            stalled += 1
            if stalled >= patience:
                return theta, f, iterations, True
            H = np.eye(p)
            continue
        s = theta_new - theta
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            V = np.eye(p) - rho * np.outer(s, y)
            H = V @ H @ V.T + rho * np.outer(s, s)
        decrease = f - f_new
        theta, f, g = theta_new, f_new, g_new
        stalled = stalled + 1 if decrease < ftol else 0
        if stalled >= patience:
            return theta, f, iterations, True
    return theta, f, iterations, False


def solve_ioc(sys: LinearSystem, data, cfg: IocConfig | None = None) -> IocResult:
    """Recover the cost weights that best reproduce the measured trajectories.

    Runs a BFGS search over the factor parameterization from ``cfg.restarts``
    seeded starting points, keeps the best local minimizer of
    :func:`ioc_objective`, and normalizes the result per
    ``cfg.normalization``.  Deterministic given ``cfg.seed`` and the dataset.

    Raises:
        ValueError: on an empty dataset.
        ConfigError: if the normalization mode does not fit the plant.
        SolverError: if every restart fails to produce a finite objective.
    """
    cfg = cfg if cfg is not None else IocConfig()
    trajectories = tuple(getattr(data, "trajectories", data))
    if len(trajectories) == 0:
        raise ValueError("dataset is empty")
    if cfg.normalization == "fix_r_scalar" and sys.m != 1:
        raise ConfigError(
            f"fix_r_scalar requires a single-input plant, got m = {sys.m}"
        )
    stacked = _StackedData(sys, trajectories)
    param = _FactorParameterization(sys.n, sys.m, cfg.structure)
    M = stacked.count

    def objective(theta: FloatArray) -> float:
        w = param.weights(theta)
        return float(np.sum(stacked.squared_errors(sys, w)) / M)

    if cfg.gradient_mode == "analytic":

        def fun_and_grad(theta):
            w = param.weights(theta)
            dQs, dRs = param.direction_matrices(theta)
            err, grad = stacked.squared_errors_and_gradient(sys, w, dQs, dRs)
            return float(np.sum(err) / M), grad / M

    else:

        def fun_and_grad(theta):
            f = objective(theta)
            grad = np.empty(theta.size)
            for j in range(theta.size):
                h = 1e-6 * max(1.0, abs(theta[j]))
                theta_p = theta.copy()
                theta_m = theta.copy()
                theta_p[j] += h
                theta_m[j] -= h
                grad[j] = (objective(theta_p) - objective(theta_m)) / (2.0 * h)
            return f, grad

    rng = substream(cfg.seed, STREAM_RESTARTS)
    best = None
    for restart in range(cfg.restarts):
        theta0 = param.initial_theta()
        if restart > 0:
            theta0 = theta0 + 0.3 * gaussian(rng, param.num_params)
        theta, f, iterations, converged = _bfgs(
            fun_and_grad, theta0, cfg.max_iterations, cfg.objective_tolerance
        )
        if not np.isfinite(f):
            continue
        if best is None or f < best[1]:
            best = (theta, f, iterations, converged)
    if best is None:
        raise SolverError("all restarts diverged", gradient_norm=None)

    theta, _, iterations, converged = best
    weights = normalize_weights(param.weights(theta), cfg.normalization)
    squared = stacked.squared_errors(sys, weights)
    objective_value = float(np.sum(squared) / M)
    samples = np.array([(t.horizon - 1) * t.n for t in trajectories], dtype=float)
    per_trajectory_rmse = np.sqrt(squared / samples)
    constraints_ok = (
        _normalization_residual(weights, cfg.normalization) <= 1e-9
        and np.linalg.eigvalsh(weights.Q).min() >= -1e-10
        and np.linalg.eigvalsh(weights.R).min() >= R_RIDGE * (1.0 - 1e-9)
    )
    return IocResult(
        Q_hat=weights.Q,
        R_hat=weights.R,
        objective=objective_value,
        per_trajectory_rmse=per_trajectory_rmse,
        iterations=iterations,
        restarts_used=cfg.restarts,
        converged=converged and constraints_ok,
        normalization=cfg.normalization,
    )
