"""Command-line front end: generate datasets, explain them, reproduce the
bundled case studies, and run the self-check suite.

Exit codes: 0 success, 2 input/config error, 3 simulation divergence,
4 solver non-convergence; ``validate`` exits 1 when a property check fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import presets, validate as validate_mod
from .control import CostWeights, equilibrium_input, lqr_closed_loop
from .data_io import (
    Dataset,
    generate_dataset,
    load_config,
    load_dataset,
    plant_from_dict,
    save_dataset,
    to_deviation_coordinates,
)
from .errors import (
    ConfigError,
    DivergenceError,
    InvlqrError,
    ParseError,
    SolverError,
    ValidationError,
)
from .ioc import IocConfig, IocResult, solve_ioc
from .data_io import ioc_config_from_dict
from .plots import render_trajectory_figure
from .systems import LinearSystem, OperatingPoint, PendulumParams, estimate_linear_system

EXIT_OK = 0
EXIT_VALIDATE_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_SOLVER = 4


@dataclass(frozen=True, eq=False)
class Report:
    """Explanation summary written by ``explain`` and ``reproduce``."""

    experiment_id: str
    q_hat: np.ndarray
    r_hat: np.ndarray
    baselines: dict | None
    fit_rmse_vs_data: float
    comparison_rmse: dict
    runtime_s: float

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "q_hat": np.asarray(self.q_hat).tolist(),
            "r_hat": np.asarray(self.r_hat).tolist(),
            "baselines": self.baselines,
            "fit_rmse_vs_data": self.fit_rmse_vs_data,
            "comparison_rmse": self.comparison_rmse,
            "runtime_s": self.runtime_s,
        }


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGENCE
    if isinstance(exc, SolverError):
        return EXIT_SOLVER
    return EXIT_CONFIG


def _fail(exc: Exception) -> int:
    print(f"error: {exc}", file=sys.stderr)
    return _exit_code(exc)


@dataclass(frozen=True, eq=False)
class Explanation:
    """Everything the report builders need after one solve."""

    system: LinearSystem
    result: IocResult
    model_data: Dataset  # data in the coordinates the model was fit in
    operating_point: OperatingPoint | None


def _prepare_model_data(data: Dataset) -> tuple[LinearSystem, Dataset, OperatingPoint | None]:
    """Resolve the system matrices the explanation is computed against.

    Nonlinear datasets are shifted to deviation coordinates around the
    recorded operating angle and the matrices come from a least-squares fit;
    for LTI datasets the true matrices stored in the metadata are used
    (falling back to the least-squares fit if the metadata lacks them).
    """
    meta = data.meta
    if meta.plant is not None and meta.plant.get("type") == "pendulum":
        params = plant_from_dict(meta.plant)
        op = meta.operating_point
        if op is None:
            if not meta.controller or "reference" not in meta.controller:
                raise ConfigError(
                    "pendulum dataset lacks a reference angle in its metadata"
                )
            theta_bar = float(meta.controller["reference"]["theta_bar"])
            op = OperatingPoint(
                x_bar=[theta_bar, 0.0],
                u_bar=[equilibrium_input(params, theta_bar)],
            )
            data = to_deviation_coordinates(data, op)
        return estimate_linear_system(data), data, op
    if meta.plant is not None and meta.plant.get("type") == "lti":
        return plant_from_dict(meta.plant), data, None
    return estimate_linear_system(data), data, None


def _explain_dataset(data: Dataset, cfg: IocConfig) -> Explanation:
    system, model_data, op = _prepare_model_data(data)
    result = solve_ioc(system, model_data, cfg)
    return Explanation(system=system, result=result, model_data=model_data, operating_point=op)


def _rms_vs_lqr(system: LinearSystem, weights: CostWeights, data: Dataset) -> float:
    """RMS distance, over all states and steps, between the measured
    trajectories and the optimal closed loop from the same initial states."""
    total = 0.0
    count = 0
    for traj in data.trajectories:
        sim = lqr_closed_loop(system, weights, traj.states[0], traj.horizon)
        diff = sim.states - traj.states
        total += float(np.sum(diff * diff))
        count += diff.size
    return float(np.sqrt(total / count))


def _fit_rmse(result: IocResult, data: Dataset) -> float:
    samples = sum((t.horizon - 1) * t.n for t in data.trajectories)
    return float(np.sqrt(result.objective * len(data.trajectories) / samples))


def _baseline_weights(meta) -> CostWeights | None:
    if not meta.controller:
        return None
    try:
        return CostWeights(Q=meta.controller["Q"], R=meta.controller["R"])
    except (KeyError, ValueError):
        return None


def _build_report(
    experiment_id: str, explanation: Explanation, data: Dataset, runtime_s: float
) -> Report:
    result = explanation.result
    baseline = _baseline_weights(data.meta)
    comparison = {
        "lqr_with_hat": _rms_vs_lqr(
            explanation.system,
            CostWeights(Q=result.Q_hat, R=result.R_hat),
            explanation.model_data,
        )
    }
    baselines_dict = None
    if baseline is not None:
        comparison["lqr_with_mpc_weights"] = _rms_vs_lqr(
            explanation.system, baseline, explanation.model_data
        )
        baselines_dict = {"Q_MPC": baseline.Q.tolist(), "R_MPC": baseline.R.tolist()}
    return Report(
        experiment_id=experiment_id,
        q_hat=result.Q_hat,
        r_hat=result.R_hat,
        baselines=baselines_dict,
        fit_rmse_vs_data=_fit_rmse(result, explanation.model_data),
        comparison_rmse=comparison,
        runtime_s=runtime_s,
    )


def _write_report(report: Report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(config_path, out_path) -> int:
    """Generate a dataset from an experiment config file."""
    try:
        cfg = load_config(config_path)
        data = generate_dataset(cfg)
        save_dataset(data, out_path)
    except (InvlqrError, ValueError, OSError) as exc:
        return _fail(exc)
    print(f"wrote {out_path} ({len(data)} trajectories)")
    return EXIT_OK


def cmd_explain(
    dataset_path,
    ioc_config_path,
    out_report_path,
    structure: str | None = None,
    normalization: str | None = None,
    seed: int | None = None,
) -> int:
    """Recover cost weights from a dataset and write a report."""
    try:
        data = load_dataset(dataset_path)
        if ioc_config_path is not None:
            try:
                with open(ioc_config_path, "r", encoding="utf-8") as fh:
                    raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ParseError(
                    f"{ioc_config_path}: invalid JSON at line {exc.lineno}: {exc.msg}"
                ) from exc
            cfg = ioc_config_from_dict(raw)
        else:
            cfg = IocConfig()
        overrides = {}
        if structure is not None:
            overrides["structure"] = structure
        if normalization is not None:
            overrides["normalization"] = normalization
        if seed is not None:
            overrides["seed"] = seed
        if overrides:
            cfg = replace(cfg, **overrides)

        start = time.perf_counter()
        explanation = _explain_dataset(data, cfg)
        runtime = time.perf_counter() - start
        report = _build_report(Path(dataset_path).stem, explanation, data, runtime)
        _write_report(report, out_report_path)
    except (InvlqrError, ValueError, OSError) as exc:
        return _fail(exc)
    print(f"wrote {out_report_path}")
    if not explanation.result.converged:
        print("error: solver did not converge", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def _write_plot_csv(path, series: dict[str, np.ndarray]):
    n = next(iter(series.values())).shape[1]
    header = ["k", "series"] + [f"x{i}" for i in range(n)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for name, states in series.items():
            for k in range(states.shape[0]):
                writer.writerow([str(k), name] + [repr(v) for v in states[k]])


def cmd_reproduce(case: str, seed: int | None, out_dir) -> int:
    """Run generate -> explain -> compare for a bundled case study."""
    try:
        cfg = presets.case_config(case, seed)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

        data = generate_dataset(cfg)
        save_dataset(data, out / f"{case}_dataset.json")

        start = time.perf_counter()
        explanation = _explain_dataset(data, cfg.ioc)
        runtime = time.perf_counter() - start
        report = _build_report(case, explanation, data, runtime)
        _write_report(report, out / f"{case}_report.json")

        diagonal = None
        if isinstance(cfg.plant, PendulumParams):
            diag_cfg = replace(cfg.ioc, structure="diagonal")
            diag_start = time.perf_counter()
            diag_result = solve_ioc(explanation.system, explanation.model_data, diag_cfg)
            diag_runtime = time.perf_counter() - diag_start
            diagonal = Explanation(
                system=explanation.system,
                result=diag_result,
                model_data=explanation.model_data,
                operating_point=explanation.operating_point,
            )
            diag_report = _build_report(f"{case}_diagonal", diagonal, data, diag_runtime)
            _write_report(diag_report, out / f"{case}_report_diagonal.json")

        # Plot data: the measured first trajectory vs the optimal closed loops
        # under the baseline weights and under the recovered weights.
        measured = data.trajectories[0]
        model_first = explanation.model_data.trajectories[0]
        x0 = model_first.states[0]
        N = model_first.horizon
        offset = (
            explanation.operating_point.x_bar
            if explanation.operating_point is not None
            else np.zeros(measured.n)
        )
        series = {"measured": measured.states}
        baseline = _baseline_weights(data.meta)
        if baseline is not None:
            series["lqr_mpc_weights"] = (
                lqr_closed_loop(explanation.system, baseline, x0, N).states + offset
            )
        hat = CostWeights(Q=explanation.result.Q_hat, R=explanation.result.R_hat)
        series["lqr_ioc_weights"] = (
            lqr_closed_loop(explanation.system, hat, x0, N).states + offset
        )
        if diagonal is not None:
            hat_d = CostWeights(Q=diagonal.result.Q_hat, R=diagonal.result.R_hat)
            series["lqr_ioc_diagonal"] = (
                lqr_closed_loop(explanation.system, hat_d, x0, N).states + offset
            )
        _write_plot_csv(out / f"{case}_plot.csv", series)
        render_trajectory_figure(series, out / f"{case}_trajectories.png", title=case)
    except (InvlqrError, ValueError, OSError) as exc:
        return _fail(exc)
    print(f"wrote reports and plot data to {out}")
    if not explanation.result.converged:
        print("error: solver did not converge", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


def cmd_validate(seed: int = 0, quick: bool = False, perturb_riccati: bool = False) -> int:
    """Run the property suite; print a machine-readable summary."""
    summary = validate_mod.run_checks(seed=seed, quick=quick, perturb_riccati=perturb_riccati)
    print(json.dumps(summary, indent=2))
    if not summary["all_passed"]:
        failed = [c["name"] for c in summary["checks"] if not c["passed"]]
        print(f"failed checks: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VALIDATE_FAILED
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="invlqr",
        description=(
            "Explain black-box feedback controllers by recovering the quadratic "
            "cost weights they implicitly optimize."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="simulate a closed loop into a dataset file")
    p_gen.add_argument("--config", required=True, help="experiment config JSON")
    p_gen.add_argument("--out", required=True, help="output dataset path (.json or .csv)")

    p_exp = sub.add_parser("explain", help="recover cost weights from a dataset")
    p_exp.add_argument("--dataset", required=True, help="dataset path (.json or .csv)")
    p_exp.add_argument("--config", default=None, help="solver config JSON (optional)")
    p_exp.add_argument("--out", required=True, help="output report JSON path")
    p_exp.add_argument("--structure", choices=["full", "diagonal"], default=None)
    p_exp.add_argument("--normalization", choices=["trace_r", "fix_r_scalar"], default=None)
    p_exp.add_argument("--seed", type=int, default=None, help="solver seed override")

    p_rep = sub.add_parser("reproduce", help="run a bundled case study end to end")
    p_rep.add_argument("--case", required=True, choices=list(presets.CASES))
    p_rep.add_argument("--seed", type=int, default=None, help="default: published case seed")
    p_rep.add_argument("--out", required=True, help="output directory")

    p_val = sub.add_parser("validate", help="run the self-check property suite")
    p_val.add_argument("--seed", type=int, default=0)
    p_val.add_argument("--quick", action="store_true", help="noiseless subset only")
    p_val.add_argument(
        "--perturb-riccati",
        action="store_true",
        help="inject a fault to exercise the failure path",
    )

    args = parser.parse_args(argv)
    if args.command == "generate":
        return cmd_generate(args.config, args.out)
    if args.command == "explain":
        return cmd_explain(
            args.dataset,
            args.config,
            args.out,
            structure=args.structure,
            normalization=args.normalization,
            seed=args.seed,
        )
    if args.command == "reproduce":
        return cmd_reproduce(args.case, args.seed, args.out)
    return cmd_validate(args.seed, quick=args.quick, perturb_riccati=args.perturb_riccati)


if __name__ == "__main__":
    sys.exit(main())
