"""Discrete-time plant models, closed-loop simulation, and linear system fitting.

Time indexing convention, used by every module and file format: a trajectory
of horizon ``N`` has states ``x(0..N-1)`` and inputs ``u(0..N-2)``, with
``x(k+1) = f(x(k), u(k))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import numpy.typing as npt

from .errors import DimensionError, DivergenceError, IdentifiabilityError
from .rng import STREAM_MEASUREMENT_NOISE, gaussian, substream

FloatArray = npt.NDArray[np.float64]

# Singular values below RANK_RTOL times the largest one count as zero when
# deciding identifiability of the least-squares regressor.
RANK_RTOL = 1e-10


def _frozen_array(value, name: str, ndim: int) -> FloatArray:
    arr = np.array(value, dtype=float)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """Discrete-time LTI plant ``x(k+1) = A x(k) + B u(k)``.

    Attributes:
        A: State matrix, shape (n, n).
        B: Input matrix, shape (n, m).
    """

    A: FloatArray
    B: FloatArray

    def __post_init__(self):
        A = _frozen_array(self.A, "A", 2)
        B = _frozen_array(self.B, "B", 2)
        if A.shape[0] != A.shape[1] or A.shape[0] < 1:
            raise DimensionError(f"A must be square and non-empty, got shape {A.shape}")
        if B.shape[0] != A.shape[0] or B.shape[1] < 1:
            raise DimensionError(
                f"B must have shape ({A.shape[0]}, m) with m >= 1, got {B.shape}"
            )
        if not (np.isfinite(A).all() and np.isfinite(B).all()):
            raise ValueError("system matrices must be finite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class PendulumParams:
    """Inverted pendulum parameters (defaults are the benchmark values).

    Attributes:
        m: Mass [kg].
        g: Gravity [m/s^2].
        l: Length [m].
        d: Damping [N m s].
        tau: Sample time [s].
    """

    m: float = 0.676
    g: float = 9.81
    l: float = 0.45
    d: float = 0.1
    tau: float = 0.02

    def __post_init__(self):
        for name in ("m", "g", "l", "d", "tau"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0.0):
                raise ValueError(f"pendulum parameter {name} must be positive and finite")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One closed-loop run: states ``x(0..N-1)`` and inputs ``u(0..N-2)``."""

    states: FloatArray  # (N, n)
    inputs: FloatArray  # (N-1, m)

    def __post_init__(self):
        states = _frozen_array(self.states, "states", 2)
        inputs = _frozen_array(self.inputs, "inputs", 2)
        if states.shape[0] < 2:
            raise DimensionError("a trajectory needs at least 2 states")
        if inputs.shape[0] != states.shape[0] - 1:
            raise DimensionError(
                f"expected {states.shape[0] - 1} inputs for {states.shape[0]} states, "
                f"got {inputs.shape[0]}"
            )
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)

    @property
    def horizon(self) -> int:
        return self.states.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[1]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True, eq=False)
class OperatingPoint:
    """State/input pair around which behavior is treated as local."""

    x_bar: FloatArray  # (n,)
    u_bar: FloatArray  # (m,)

    def __post_init__(self):
        object.__setattr__(self, "x_bar", _frozen_array(self.x_bar, "x_bar", 1))
        object.__setattr__(self, "u_bar", _frozen_array(self.u_bar, "u_bar", 1))


def second_order_plant() -> LinearSystem:
    """The benchmark second-order fully measurable plant."""
    return LinearSystem(A=[[1.0, 1.0], [-0.5, 1.0]], B=[[0.5, 0.0], [0.0, 0.5]])


def lti_step(sys: LinearSystem, x, u) -> FloatArray:
    """One step of the LTI plant: ``A x + B u``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (sys.n,):
        raise DimensionError(f"x must have shape ({sys.n},), got {x.shape}")
    if u.shape != (sys.m,):
        raise DimensionError(f"u must have shape ({sys.m},), got {u.shape}")
    return sys.A @ x + sys.B @ u


def pendulum_step(p: PendulumParams, x, u: float) -> FloatArray:
    """One step of the pendulum dynamics.

    theta(k+1) = theta(k) + tau * omega(k)
    omega(k+1) = (tau g / l) sin(theta(k)) + (1 - tau d / (m l^2)) omega(k)
                 + (tau / (m l^2)) u(k)
    """
    theta, omega = float(x[0]), float(x[1])
    u = float(u)
    if not (math.isfinite(theta) and math.isfinite(omega) and math.isfinite(u)):
        raise ValueError("pendulum_step requires finite state and input")
    ml2 = p.m * p.l * p.l
    theta_next = theta + p.tau * omega
    omega_next = (
        (p.tau * p.g / p.l) * math.sin(theta)
        + (1.0 - p.tau * p.d / ml2) * omega
        + (p.tau / ml2) * u
    )
    return np.array([theta_next, omega_next])


def pendulum_linearize(p: PendulumParams, theta_bar: float) -> LinearSystem:
    """Analytic Jacobian of the pendulum dynamics at ``(theta_bar, 0)``."""
    ml2 = p.m * p.l * p.l
    A = [
        [1.0, p.tau],
        [(p.tau * p.g / p.l) * math.cos(theta_bar), 1.0 - p.tau * p.d / ml2],
    ]
    B = [[0.0], [p.tau / ml2]]
    return LinearSystem(A=A, B=B)


class LinearPlant:
    """Step-function wrapper around a :class:`LinearSystem`."""

    def __init__(self, sys: LinearSystem):
        self.sys = sys
        self.n = sys.n
        self.m = sys.m

    def step(self, x: FloatArray, u: FloatArray) -> FloatArray:
        return self.sys.A @ x + self.sys.B @ u

    def jacobians(self, x: FloatArray, u: FloatArray) -> tuple[FloatArray, FloatArray]:
        return self.sys.A, self.sys.B


class PendulumPlant:
    """Step-function wrapper around the pendulum dynamics (state = (theta, omega))."""

    def __init__(self, params: PendulumParams | None = None):
        self.params = params if params is not None else PendulumParams()
        self.n = 2
        self.m = 1

    def step(self, x: FloatArray, u: FloatArray) -> FloatArray:
        return pendulum_step(self.params, x, float(u[0]))

    def jacobians(self, x: FloatArray, u: FloatArray) -> tuple[FloatArray, FloatArray]:
        p = self.params
        ml2 = p.m * p.l * p.l
        A = np.array(
            [
                [1.0, p.tau],
                [(p.tau * p.g / p.l) * math.cos(float(x[0])), 1.0 - p.tau * p.d / ml2],
            ]
        )
        B = np.array([[0.0], [p.tau / ml2]])
        return A, B


def numeric_jacobians(
    plant, x: FloatArray, u: FloatArray, eps: float = 1e-6
) -> tuple[FloatArray, FloatArray]:
    """Central-difference Jacobians for plants that only expose ``step``."""
    n, m = plant.n, plant.m
    A = np.empty((n, n))
    B = np.empty((n, m))
    for j in range(n):
        dx = np.zeros(n)
        dx[j] = eps
        A[:, j] = (plant.step(x + dx, u) - plant.step(x - dx, u)) / (2.0 * eps)
    for j in range(m):
        du = np.zeros(m)
        du[j] = eps
        B[:, j] = (plant.step(x, u + du) - plant.step(x, u - du)) / (2.0 * eps)
    return A, B


def simulate_closed_loop(
    plant,
    policy: Callable[[FloatArray], FloatArray],
    x0,
    N: int,
    noise_std: float = 0.0,
    seed: int = 0,
) -> Trajectory:
    """Roll the plant forward ``N - 1`` steps under a state-feedback policy.

    The recorded states are the measurements ``y(k) = x(k) + e(k)`` with
    ``e(k)`` i.i.d. zero-mean Gaussian of standard deviation ``noise_std`` per
    component; the policy is fed the same measurement.  The plant state itself
    evolves noiselessly.  Identical ``(seed, inputs)`` give bit-identical
    output.

    Raises:
        DivergenceError: if a non-finite state is encountered, reporting the
            step index.
    """
    if N < 2:
        raise ValueError(f"N must be >= 2, got {N}")
    if noise_std < 0.0:
        raise ValueError("noise_std must be >= 0")
    n, m = plant.n, plant.m
    x = np.asarray(x0, dtype=float)
    if x.shape != (n,):
        raise DimensionError(f"x0 must have shape ({n},), got {x.shape}")
    rng = substream(seed, STREAM_MEASUREMENT_NOISE)
    states = np.empty((N, n))
    inputs = np.empty((N - 1, m))
    for k in range(N):
        y = x + noise_std * gaussian(rng, n)
        states[k] = y
        if k == N - 1:
            break
        u = np.atleast_1d(np.asarray(policy(y), dtype=float))
        if u.shape != (m,):
            raise DimensionError(f"policy returned shape {u.shape}, expected ({m},)")
        inputs[k] = u
        x = np.asarray(plant.step(x, u), dtype=float)
        if not np.isfinite(x).all():
            raise DivergenceError(f"non-finite state at step {k + 1}", step=k + 1)
    return Trajectory(states=states, inputs=inputs)


def estimate_linear_system(data) -> LinearSystem:
    """Ordinary least-squares fit of ``(A, B)`` from consecutive state pairs.

    Minimizes ``sum_k ||x(k+1) - A x(k) - B u(k)||^2`` over all consecutive
    pairs in all trajectories.  ``data`` may be a dataset object or any
    iterable of :class:`Trajectory`.

    Raises:
        IdentifiabilityError: if the stacked regressor ``[x(k); u(k)]`` is
            rank deficient (smallest singular value below ``RANK_RTOL`` times
            the largest), naming the rank found.
    """
    trajectories: Sequence[Trajectory] = tuple(getattr(data, "trajectories", data))
    if len(trajectories) < 1:
        raise ValueError("need at least one trajectory")
    n = trajectories[0].n
    m = trajectories[0].m
    regressors = []
    targets = []
    for traj in trajectories:
        if traj.n != n or traj.m != m:
            raise DimensionError("trajectories have inconsistent dimensions")
        regressors.append(np.hstack([traj.states[:-1], traj.inputs]))
        targets.append(traj.states[1:])
    Z = np.vstack(regressors)
    Y = np.vstack(targets)
    svals = np.linalg.svd(Z, compute_uv=False)
    rank = int(np.sum(svals > RANK_RTOL * svals[0])) if svals[0] > 0.0 else 0
    if rank < n + m:
        raise IdentifiabilityError(
            f"regressor has rank {rank}, need {n + m}; data is not exciting enough",
            rank=rank,
        )
    theta, *_ = np.linalg.lstsq(Z, Y, rcond=None)
    return LinearSystem(A=theta[:n].T, B=theta[n:].T)
