"""Self-check property suite behind the ``validate`` CLI command.

Checks: serialization round trips, agreement of the Riccati-sweep
reconstruction with the direct boundary-value solve, objective scale
invariance, noiseless weight recovery, and (full mode only) shrinking
recovery error as the trajectory count grows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .control import CostWeights, riccati_solve
from .data_io import (
    Dataset,
    DatasetMeta,
    dataset_equal,
    load_dataset,
    save_dataset,
    to_deviation_coordinates,
)
from .ioc import (
    IocConfig,
    ioc_objective,
    normalize_weights,
    pmp_boundary_solve,
    reconstruct_pmp_trajectory,
    solve_ioc,
)
from .rng import STREAM_VALIDATION, gaussian, substream, uniform
from .systems import LinearSystem, OperatingPoint, Trajectory, second_order_plant
from .control import lqr_closed_loop

TRUE_WEIGHTS = CostWeights(Q=[[0.3, 0.0], [0.0, 0.1]], R=[[1.0, 0.0], [0.0, 1.0]])


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail}


def _random_instance(rng, max_n: int = 4, max_m: int = 2, max_N: int = 40):
    """A random well-posed (system, weights, x0, N) tuple."""
    n = int(rng.integers(1, max_n + 1))
    m = int(rng.integers(1, max_m + 1))
    N = int(rng.integers(3, max_N + 1))
    A = gaussian(rng, n * n).reshape(n, n)
    radius = max(np.abs(np.linalg.eigvals(A)))
    if radius > 0:
        A *= uniform(rng, 0.3, 1.05, ()) / radius
    B = gaussian(rng, n * m).reshape(n, m)
    Lq = 0.5 * gaussian(rng, n * n).reshape(n, n)
    Lr = 0.5 * gaussian(rng, m * m).reshape(m, m)
    Q = Lq @ Lq.T
    R = Lr @ Lr.T + 0.5 * np.eye(m)
    x0 = gaussian(rng, n)
    sys = LinearSystem(A=A, B=B)
    w = CostWeights(Q=0.5 * (Q + Q.T), R=0.5 * (R + R.T))
    return sys, w, x0, N


def check_pmp_riccati_equivalence(
    seed: int, instances: int = 50, perturb: bool = False
) -> CheckResult:
    """Riccati-sweep reconstruction vs the sparse boundary-value solve."""
    rng = substream(seed, STREAM_VALIDATION)
    worst = 0.0
    for _ in range(instances):
        sys, w, x0, N = _random_instance(rng)
        traj_a, adj_a = reconstruct_pmp_trajectory(sys, w, x0, N)
        traj_b, adj_b = pmp_boundary_solve(sys, w, x0, N)
        states_a = traj_a.states + (1e-3 if perturb else 0.0)
        diff = max(
            np.max(np.abs(states_a - traj_b.states)),
            np.max(np.abs(traj_a.inputs - traj_b.inputs)),
            np.max(np.abs(adj_a.lambdas - adj_b.lambdas)),
        )
        worst = max(worst, float(diff))
    return CheckResult(
        name="pmp_riccati_equivalence",
        passed=worst < 1e-8,
        detail=f"max elementwise difference {worst:.3e} over {instances} instances",
    )


def _round_trip_dataset(M: int, N: int, seed: int, noise_std: float = 0.0) -> Dataset:
    """Trajectories generated by the optimal closed loop with known weights."""
    sys = second_order_plant()
    rng = substream(seed, STREAM_VALIDATION)
    trajectories = []
    for i in range(M):
        x0 = uniform(rng, -2.0, 2.0, 2)
        traj = lqr_closed_loop(sys, TRUE_WEIGHTS, x0, N)
        if noise_std > 0.0:
            noise_rng = substream(seed + i, STREAM_VALIDATION)
            states = traj.states + noise_std * gaussian(
                noise_rng, traj.states.size
            ).reshape(traj.states.shape)
            traj = Trajectory(states=states, inputs=traj.inputs)
        trajectories.append(traj)
    meta = DatasetMeta(
        plant_id="lti", controller_id="lqr", seed=seed, noise_std=noise_std, created=""
    )
    return Dataset(trajectories=tuple(trajectories), meta=meta)


def check_serialization_round_trips(seed: int, tmp_dir) -> CheckResult:
    """JSON and CSV round trips plus the deviation-coordinate inverse."""
    from pathlib import Path

    tmp_dir = Path(tmp_dir)
    data = _round_trip_dataset(M=3, N=10, seed=seed, noise_std=0.01)
    json_path = tmp_dir / "round_trip.json"
    save_dataset(data, json_path)
    json_ok = dataset_equal(load_dataset(json_path), data)

    csv_path = tmp_dir / "round_trip.csv"
    save_dataset(data, csv_path)
    loaded = load_dataset(csv_path)
    csv_ok = all(
        np.array_equal(a.states, b.states) and np.array_equal(a.inputs, b.inputs)
        for a, b in zip(loaded.trajectories, data.trajectories)
    )

    op = OperatingPoint(x_bar=[0.3, -0.2], u_bar=[0.1, 0.0])
    inverse = OperatingPoint(x_bar=-op.x_bar, u_bar=-op.u_bar)
    restored = to_deviation_coordinates(to_deviation_coordinates(data, op), inverse)
    dev_ok = all(
        np.max(np.abs(a.states - b.states)) < 1e-14
        and np.max(np.abs(a.inputs - b.inputs)) < 1e-14
        for a, b in zip(restored.trajectories, data.trajectories)
    )
    passed = json_ok and csv_ok and dev_ok
    return CheckResult(
        name="serialization_round_trips",
        passed=passed,
        detail=f"json={json_ok} csv={csv_ok} deviation={dev_ok}",
    )


def check_scale_invariance(seed: int) -> CheckResult:
    """Objective invariance under common weight scaling; idempotent normalization."""
    sys = second_order_plant()
    data = _round_trip_dataset(M=4, N=15, seed=seed, noise_std=0.01)
    base = ioc_objective(sys, TRUE_WEIGHTS, data)
    worst = 0.0
    for alpha in (1e-2, 1.0, 1e2):
        scaled = CostWeights(Q=alpha * TRUE_WEIGHTS.Q, R=alpha * TRUE_WEIGHTS.R)
        value = ioc_objective(sys, scaled, data)
        worst = max(worst, abs(value - base) / base)
    once = normalize_weights(CostWeights(Q=3.0 * TRUE_WEIGHTS.Q, R=3.0 * TRUE_WEIGHTS.R), "trace_r")
    twice = normalize_weights(once, "trace_r")
    idem = max(np.max(np.abs(once.Q - twice.Q)), np.max(np.abs(once.R - twice.R)))
    passed = worst < 1e-10 and idem < 1e-14
    return CheckResult(
        name="scale_invariance",
        passed=passed,
        detail=f"max relative objective deviation {worst:.3e}, idempotence residual {idem:.3e}",
    )


def noiseless_recovery_errors(M: int = 10, N: int = 30, seed: int = 11) -> tuple[float, float]:
    """Relative Frobenius recovery errors (Q, R) on noiseless optimal data."""
    sys = second_order_plant()
    data = _round_trip_dataset(M=M, N=N, seed=seed, noise_std=0.0)
    result = solve_ioc(sys, data, IocConfig(normalization="trace_r", seed=seed))
    truth = normalize_weights(TRUE_WEIGHTS, "trace_r")
    err_q = np.linalg.norm(result.Q_hat - truth.Q) / np.linalg.norm(truth.Q)
    err_r = np.linalg.norm(result.R_hat - truth.R) / np.linalg.norm(truth.R)
    return float(err_q), float(err_r)


def check_noiseless_recovery(seed: int) -> CheckResult:
    err_q, err_r = noiseless_recovery_errors(M=6, N=25, seed=seed)
    passed = err_q < 1e-3 and err_r < 1e-3
    return CheckResult(
        name="noiseless_round_trip_recovery",
        passed=passed,
        detail=f"relative errors Q={err_q:.3e} R={err_r:.3e}",
    )


def consistency_errors(
    trajectory_counts=(5, 15, 30), seeds=(0, 1, 2, 3, 4), N: int = 30, noise_std: float = 0.01
) -> np.ndarray:
    """Mean Q-recovery error per trajectory count, averaged over seeds."""
    sys = second_order_plant()
    truth = normalize_weights(TRUE_WEIGHTS, "trace_r")
    means = []
    for M in trajectory_counts:
        errors = []
        for seed in seeds:
            data = _round_trip_dataset(M=M, N=N, seed=1000 + seed, noise_std=noise_std)
            result = solve_ioc(sys, data, IocConfig(normalization="trace_r", seed=seed))
            errors.append(np.linalg.norm(result.Q_hat - truth.Q))
        means.append(float(np.mean(errors)))
    return np.array(means)


def check_m_consistency(seed: int) -> CheckResult:
    errors = consistency_errors()
    # Nonincreasing within 20% slack per step.
    passed = bool(np.all(errors[1:] <= 1.2 * errors[:-1]))
    detail = "mean recovery errors " + ", ".join(f"{e:.4f}" for e in errors)
    return CheckResult(name="m_consistency", passed=passed, detail=detail)


def run_checks(seed: int = 0, quick: bool = False, perturb_riccati: bool = False, tmp_dir=None) -> dict:
    """Run the suite; returns a JSON-ready summary."""
    import tempfile

    if tmp_dir is None:
        tmp_dir = tempfile.mkdtemp(prefix="invlqr_validate_")
    checks = [
        check_serialization_round_trips(seed, tmp_dir),
        check_pmp_riccati_equivalence(
            seed, instances=10 if quick else 50, perturb=perturb_riccati
        ),
        check_scale_invariance(seed),
        check_noiseless_recovery(seed),
    ]
    if not quick:
        checks.append(check_m_consistency(seed))
    return {
        "seed": seed,
        "quick": quick,
        "all_passed": all(c.passed for c in checks),
        "checks": [c.to_dict() for c in checks],
    }
