"""Dataset model, deterministic sampling, coordinate transforms, persistence.

File formats (all indices 0-based):

* Dataset JSON bundle::

      {"meta": {"plant_id": ..., "controller_id": ..., "seed": ...,
                "noise_std": ..., "operating_point": null | {"x_bar": [...],
                "u_bar": [...]}, "created": ..., "plant": {...} | null,
                "controller": {...} | null},
       "trajectories": [{"states": [[...]], "inputs": [[...]]}, ...]}

  Floats are written in shortest exact decimal form (at most 17 significant
  digits), so a save/load round trip reproduces every value bit for bit.

* Trajectory CSV: header ``traj_id,k,x0..x{n-1},u0..u{m-1}``; one row per
  sample; the input columns of the final sample of each trajectory are empty.
  The CSV carries trajectories only (no metadata).

* Experiment config JSON: keys ``plant``, ``controller``, ``sampling``,
  ``ioc``; unknown keys are rejected with an error listing them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .control import (
    CostWeights,
    NmpcController,
    ReferenceSignal,
    equilibrium_input,
    mpc_policy_lti,
)
from .errors import ConfigError, DimensionError, DivergenceError, ParseError, ValidationError
from .ioc import IocConfig
from .rng import STREAM_INITIAL_CONDITIONS, STREAM_REFERENCE, gaussian, substream
from .systems import (
    FloatArray,
    LinearPlant,
    LinearSystem,
    OperatingPoint,
    PendulumParams,
    PendulumPlant,
    Trajectory,
    simulate_closed_loop,
)


@dataclass(frozen=True, eq=False)
class DatasetMeta:
    """Provenance of a dataset.

    ``plant`` and ``controller`` hold the full generating specs (same layout
    as the config file sections) so downstream consumers can rebuild the true
    system matrices and the baseline weights.
    """

    plant_id: str
    controller_id: str
    seed: int
    noise_std: float
    created: str
    operating_point: OperatingPoint | None = None
    plant: dict | None = None
    controller: dict | None = None


@dataclass(frozen=True, eq=False)
class Dataset:
    """A collection of closed-loop trajectories with provenance metadata."""

    trajectories: tuple[Trajectory, ...]
    meta: DatasetMeta

    def __post_init__(self):
        trajectories = tuple(self.trajectories)
        if len(trajectories) >= 2:
            n, m = trajectories[0].n, trajectories[0].m
            for i, traj in enumerate(trajectories):
                if traj.n != n or traj.m != m:
                    raise DimensionError(
                        f"trajectory {i} has dimensions ({traj.n}, {traj.m}), "
                        f"expected ({n}, {m})"
                    )
        object.__setattr__(self, "trajectories", trajectories)

    def __len__(self) -> int:
        return len(self.trajectories)


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ControllerConfig:
    """Controller section: horizon, weights, optional angle reference."""

    horizon: int
    weights: CostWeights
    theta_bar: float | None = None

    def __post_init__(self):
        if self.horizon < 2:
            raise ConfigError("controller horizon must be >= 2")


@dataclass(frozen=True, eq=False)
class SamplingConfig:
    """Sampling section: trajectory count, length, bounds, noise, seed."""

    M: int
    N: int
    bounds: FloatArray  # (n, 2) rows of (lower, upper)
    noise_std: float
    reference_perturbation_std: float
    seed: int

    def __post_init__(self):
        bounds = np.array(self.bounds, dtype=float)
        if bounds.ndim != 2 or bounds.shape[1] != 2:
            raise ConfigError(f"bounds must be (n, 2) intervals, got shape {bounds.shape}")
        if not np.isfinite(bounds).all():
            raise ConfigError("bounds must be finite")
        if np.any(bounds[:, 0] > bounds[:, 1]):
            raise ConfigError("each bound must satisfy lower <= upper")
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.N < 2:
            raise ConfigError("N must be >= 2")
        if self.noise_std < 0.0:
            raise ConfigError("noise_std must be >= 0")
        if self.reference_perturbation_std < 0.0:
            raise ConfigError("reference_perturbation_std must be >= 0")
        bounds.setflags(write=False)
        object.__setattr__(self, "bounds", bounds)


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Everything needed to generate a dataset and explain it."""

    plant: LinearSystem | PendulumParams
    controller: ControllerConfig
    sampling: SamplingConfig
    ioc: IocConfig

    def __post_init__(self):
        n = 2 if isinstance(self.plant, PendulumParams) else self.plant.n
        if self.sampling.bounds.shape[0] != n:
            raise ConfigError(
                f"bounds cover {self.sampling.bounds.shape[0]} dimensions, plant has {n}"
            )
        if isinstance(self.plant, PendulumParams):
            if self.controller.theta_bar is None:
                raise ConfigError("pendulum experiments need controller.reference.theta_bar")
        else:
            if self.controller.theta_bar is not None:
                raise ConfigError("reference.theta_bar applies to the pendulum plant only")
            if self.sampling.reference_perturbation_std != 0.0:
                raise ConfigError(
                    "reference_perturbation_std applies to the pendulum plant only"
                )
            if self.controller.weights.n != self.plant.n or (
                self.controller.weights.m != self.plant.m
            ):
                raise ConfigError("controller weights do not match the plant dimensions")


def _check_keys(section: dict, allowed: tuple[str, ...], context: str):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {context} keys: {', '.join(unknown)}")


def plant_to_dict(plant: LinearSystem | PendulumParams) -> dict:
    if isinstance(plant, PendulumParams):
        return {
            "type": "pendulum",
            "m": plant.m,
            "g": plant.g,
            "l": plant.l,
            "d": plant.d,
            "tau": plant.tau,
        }
    return {"type": "lti", "A": plant.A.tolist(), "B": plant.B.tolist()}


def plant_from_dict(d: dict) -> LinearSystem | PendulumParams:
    if not isinstance(d, dict) or "type" not in d:
        raise ConfigError("plant spec must be an object with a 'type' key")
    if d["type"] == "lti":
        _check_keys(d, ("type", "A", "B"), "plant")
        if "A" not in d or "B" not in d:
            raise ConfigError("lti plant spec needs 'A' and 'B'")
        return LinearSystem(A=d["A"], B=d["B"])
    if d["type"] == "pendulum":
        _check_keys(d, ("type", "m", "g", "l", "d", "tau"), "plant")
        defaults = PendulumParams()
        return PendulumParams(
            m=float(d.get("m", defaults.m)),
            g=float(d.get("g", defaults.g)),
            l=float(d.get("l", defaults.l)),
            d=float(d.get("d", defaults.d)),
            tau=float(d.get("tau", defaults.tau)),
        )
    raise ConfigError(f"unknown plant type {d['type']!r}")


def controller_to_dict(c: ControllerConfig) -> dict:
    out = {
        "horizon": c.horizon,
        "Q": c.weights.Q.tolist(),
        "R": c.weights.R.tolist(),
    }
    if c.theta_bar is not None:
        out["reference"] = {"theta_bar": c.theta_bar}
    return out


def controller_from_dict(d: dict) -> ControllerConfig:
    _check_keys(d, ("horizon", "Q", "R", "reference"), "controller")
    for key in ("horizon", "Q", "R"):
        if key not in d:
            raise ConfigError(f"controller section needs '{key}'")
    theta_bar = None
    ref = d.get("reference")
    if ref is not None:
        _check_keys(ref, ("theta_bar",), "controller.reference")
        if "theta_bar" not in ref:
            raise ConfigError("controller.reference needs 'theta_bar'")
        theta_bar = float(ref["theta_bar"])
    return ControllerConfig(
        horizon=int(d["horizon"]),
        weights=CostWeights(Q=d["Q"], R=d["R"]),
        theta_bar=theta_bar,
    )


def ioc_config_to_dict(cfg: IocConfig) -> dict:
    return {
        "structure": cfg.structure,
        "normalization": cfg.normalization,
        "restarts": cfg.restarts,
        "max_iterations": cfg.max_iterations,
        "objective_tolerance": cfg.objective_tolerance,
        "gradient_mode": cfg.gradient_mode,
        "seed": cfg.seed,
    }


def ioc_config_from_dict(d: dict) -> IocConfig:
    allowed = (
        "structure",
        "normalization",
        "restarts",
        "max_iterations",
        "objective_tolerance",
        "gradient_mode",
        "seed",
    )
    _check_keys(d, allowed, "ioc")
    defaults = IocConfig()
    return IocConfig(
        structure=str(d.get("structure", defaults.structure)),
        normalization=str(d.get("normalization", defaults.normalization)),
        restarts=int(d.get("restarts", defaults.restarts)),
        max_iterations=int(d.get("max_iterations", defaults.max_iterations)),
        objective_tolerance=float(d.get("objective_tolerance", defaults.objective_tolerance)),
        gradient_mode=str(d.get("gradient_mode", defaults.gradient_mode)),
        seed=int(d.get("seed", defaults.seed)),
    )


def sampling_to_dict(s: SamplingConfig) -> dict:
    return {
        "M": s.M,
        "N": s.N,
        "bounds": s.bounds.tolist(),
        "noise_std": s.noise_std,
        "reference_perturbation_std": s.reference_perturbation_std,
        "seed": s.seed,
    }


def sampling_from_dict(d: dict) -> SamplingConfig:
    allowed = ("M", "N", "bounds", "noise_std", "reference_perturbation_std", "seed")
    _check_keys(d, allowed, "sampling")
    for key in ("M", "N", "bounds", "seed"):
        if key not in d:
            raise ConfigError(f"sampling section needs '{key}'")
    return SamplingConfig(
        M=int(d["M"]),
        N=int(d["N"]),
        bounds=d["bounds"],
        noise_std=float(d.get("noise_std", 0.0)),
        reference_perturbation_std=float(d.get("reference_perturbation_std", 0.0)),
        seed=int(d["seed"]),
    )


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "plant": plant_to_dict(cfg.plant),
        "controller": controller_to_dict(cfg.controller),
        "sampling": sampling_to_dict(cfg.sampling),
        "ioc": ioc_config_to_dict(cfg.ioc),
    }


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("experiment config must be a JSON object")
    _check_keys(d, ("plant", "controller", "sampling", "ioc"), "config")
    for key in ("plant", "controller", "sampling"):
        if key not in d:
            raise ConfigError(f"config needs a '{key}' section")
    return ExperimentConfig(
        plant=plant_from_dict(d["plant"]),
        controller=controller_from_dict(d["controller"]),
        sampling=sampling_from_dict(d["sampling"]),
        ioc=ioc_config_from_dict(d.get("ioc", {})),
    )


def load_config(path) -> ExperimentConfig:
    """Parse an experiment config JSON file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Sampling and generation
# ---------------------------------------------------------------------------


def sample_initial_conditions(bounds, M: int, seed: int) -> FloatArray:
    """``M`` i.i.d. uniform samples over per-dimension intervals, seeded."""
    bounds = np.asarray(bounds, dtype=float)
    if bounds.ndim != 2 or bounds.shape[1] != 2:
        raise DimensionError(f"bounds must be (n, 2), got shape {bounds.shape}")
    if np.any(bounds[:, 0] > bounds[:, 1]):
        raise ValueError("each bound must satisfy lower <= upper")
    if M < 1:
        raise ValueError("M must be >= 1")
    rng = substream(seed, STREAM_INITIAL_CONDITIONS)
    u = rng.random((M, bounds.shape[0]))
    return bounds[:, 0] + (bounds[:, 1] - bounds[:, 0]) * u


class _PerturbedReferencePolicy:
    """NMPC policy that re-draws the angle reference each control step.

    The reference angle is the operating angle plus a seeded Gaussian
    perturbation; the input reference is the equilibrium torque of the
    perturbed angle.  The reference is held constant over each prediction
    horizon.
    """

    def __init__(
        self,
        controller: NmpcController,
        params: PendulumParams,
        theta_bar: float,
        perturbation_std: float,
        rng,
    ):
        self.controller = controller
        self.params = params
        self.theta_bar = theta_bar
        self.perturbation_std = perturbation_std
        self.rng = rng

    def __call__(self, y: FloatArray) -> FloatArray:
        theta_r = self.theta_bar + self.perturbation_std * gaussian(self.rng, 1)[0]
        ref = ReferenceSignal.constant(
            [theta_r, 0.0],
            [equilibrium_input(self.params, theta_r)],
            self.controller.horizon,
        )
        return self.controller.step(y, ref)


def generate_dataset(cfg: ExperimentConfig, created: str | None = None) -> Dataset:
    """Simulate the configured closed loop from seeded initial conditions.

    Per-trajectory randomness uses substreams keyed by
    ``sampling.seed + trajectory_index``, so trajectory ``i`` is reproducible
    independently of ``M``.  Pass ``created`` to pin the metadata timestamp
    (otherwise the current UTC time is recorded).

    Raises:
        DivergenceError: naming the trajectory index and step if the
            simulation produces a non-finite state.
    """
    sampling = cfg.sampling
    x0s = sample_initial_conditions(sampling.bounds, sampling.M, sampling.seed)
    pendulum = isinstance(cfg.plant, PendulumParams)
    if pendulum:
        plant = PendulumPlant(cfg.plant)
        controller_id = f"nmpc_T{cfg.controller.horizon}"
    else:
        plant = LinearPlant(cfg.plant)
        controller_id = f"mpc_T{cfg.controller.horizon}"
        policy = mpc_policy_lti(cfg.plant, cfg.controller.weights, cfg.controller.horizon)

    trajectories = []
    for i in range(sampling.M):
        if pendulum:
            controller = NmpcController(plant, cfg.controller.weights, cfg.controller.horizon)
            policy = _PerturbedReferencePolicy(
                controller,
                cfg.plant,
                cfg.controller.theta_bar,
                sampling.reference_perturbation_std,
                substream(sampling.seed + i, STREAM_REFERENCE),
            )
        try:
            trajectories.append(
                simulate_closed_loop(
                    plant,
                    policy,
                    x0s[i],
                    sampling.N,
                    noise_std=sampling.noise_std,
                    seed=sampling.seed + i,
                )
            )
        except DivergenceError as exc:
            raise DivergenceError(
                f"trajectory {i} diverged at step {exc.step}", step=exc.step, trajectory=i
            ) from exc

    meta = DatasetMeta(
        plant_id="pendulum" if pendulum else "lti",
        controller_id=controller_id,
        seed=sampling.seed,
        noise_std=sampling.noise_std,
        created=created if created is not None else datetime.now(timezone.utc).isoformat(),
        operating_point=None,
        plant=plant_to_dict(cfg.plant),
        controller=controller_to_dict(cfg.controller),
    )
    return Dataset(trajectories=tuple(trajectories), meta=meta)


def to_deviation_coordinates(data: Dataset, op: OperatingPoint) -> Dataset:
    """Express every state and input relative to the operating point."""
    n = data.trajectories[0].n
    m = data.trajectories[0].m
    if op.x_bar.shape != (n,) or op.u_bar.shape != (m,):
        raise DimensionError(
            f"operating point has shapes ({op.x_bar.shape}, {op.u_bar.shape}), "
            f"data has dimensions ({n}, {m})"
        )
    shifted = tuple(
        Trajectory(states=traj.states - op.x_bar, inputs=traj.inputs - op.u_bar)
        for traj in data.trajectories
    )
    return Dataset(trajectories=shifted, meta=replace(data.meta, operating_point=op))


def dataset_equal(a: Dataset, b: Dataset) -> bool:
    """Exact equality of trajectories and metadata."""
    if len(a) != len(b):
        return False
    for ta, tb in zip(a.trajectories, b.trajectories):
        if not (np.array_equal(ta.states, tb.states) and np.array_equal(ta.inputs, tb.inputs)):
            return False
    ma, mb = a.meta, b.meta
    if (ma.plant_id, ma.controller_id, ma.seed, ma.noise_std, ma.created) != (
        mb.plant_id,
        mb.controller_id,
        mb.seed,
        mb.noise_std,
        mb.created,
    ):
        return False
    if (ma.operating_point is None) != (mb.operating_point is None):
        return False
    if ma.operating_point is not None:
        if not (
            np.array_equal(ma.operating_point.x_bar, mb.operating_point.x_bar)
            and np.array_equal(ma.operating_point.u_bar, mb.operating_point.u_bar)
        ):
            return False
    return ma.plant == mb.plant and ma.controller == mb.controller


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _meta_to_dict(meta: DatasetMeta) -> dict:
    op = None
    if meta.operating_point is not None:
        op = {
            "x_bar": meta.operating_point.x_bar.tolist(),
            "u_bar": meta.operating_point.u_bar.tolist(),
        }
    return {
        "plant_id": meta.plant_id,
        "controller_id": meta.controller_id,
        "seed": meta.seed,
        "noise_std": meta.noise_std,
        "operating_point": op,
        "created": meta.created,
        "plant": meta.plant,
        "controller": meta.controller,
    }


def _meta_from_dict(d: dict, path) -> DatasetMeta:
    required = ("plant_id", "controller_id", "seed", "noise_std", "created")
    for key in required:
        if key not in d:
            raise ParseError(f"{path}: meta is missing field '{key}'")
    op = None
    if d.get("operating_point") is not None:
        raw = d["operating_point"]
        if "x_bar" not in raw or "u_bar" not in raw:
            raise ParseError(f"{path}: operating_point needs 'x_bar' and 'u_bar'")
        op = OperatingPoint(x_bar=raw["x_bar"], u_bar=raw["u_bar"])
    return DatasetMeta(
        plant_id=str(d["plant_id"]),
        controller_id=str(d["controller_id"]),
        seed=int(d["seed"]),
        noise_std=float(d["noise_std"]),
        created=str(d["created"]),
        operating_point=op,
        plant=d.get("plant"),
        controller=d.get("controller"),
    )


def save_dataset(data: Dataset, path):
    """Write a dataset: JSON bundle for ``.json``, trajectory table for ``.csv``."""
    path = Path(path)
    if path.suffix == ".csv":
        _save_csv(data, path)
        return
    bundle = {
        "meta": _meta_to_dict(data.meta),
        "trajectories": [
            {"states": traj.states.tolist(), "inputs": traj.inputs.tolist()}
            for traj in data.trajectories
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(bundle, fh, indent=2)
        fh.write("\n")


def load_dataset(path) -> Dataset:
    """Read a dataset written by :func:`save_dataset`.

    Raises:
        ParseError: malformed file (with line/field context).
        ValidationError: structurally valid file with inconsistent dimensions.
    """
    path = Path(path)
    if path.suffix == ".csv":
        return _load_csv(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict) or "meta" not in raw or "trajectories" not in raw:
        raise ParseError(f"{path}: expected an object with 'meta' and 'trajectories'")
    meta = _meta_from_dict(raw["meta"], path)
    trajectories = []
    for i, entry in enumerate(raw["trajectories"]):
        if "states" not in entry or "inputs" not in entry:
            raise ParseError(f"{path}: trajectory {i} needs 'states' and 'inputs'")
        try:
            trajectories.append(Trajectory(states=entry["states"], inputs=entry["inputs"]))
        except (DimensionError, ValueError) as exc:
            raise ValidationError(f"{path}: trajectory {i}: {exc}") from exc
    dataset = Dataset(trajectories=tuple(trajectories), meta=meta)
    if len(dataset) == 0:
        raise ValidationError(f"{path}: dataset contains no trajectories")
    return dataset


def _save_csv(data: Dataset, path):
    n = data.trajectories[0].n
    m = data.trajectories[0].m
    header = ["traj_id", "k"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for traj_id, traj in enumerate(data.trajectories):
            for k in range(traj.horizon):
                row = [str(traj_id), str(k)] + [repr(v) for v in traj.states[k]]
                if k < traj.horizon - 1:
                    row += [repr(v) for v in traj.inputs[k]]
                else:
                    row += [""] * m
                writer.writerow(row)


def _load_csv(path) -> Dataset:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = rows[0]
    if len(header) < 4 or header[0] != "traj_id" or header[1] != "k":
        raise ParseError(f"{path}: header must start with 'traj_id,k'")
    n = sum(1 for name in header[2:] if name.startswith("x"))
    m = len(header) - 2 - n
    expected = ["traj_id", "k"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)]
    if header != expected or n < 1 or m < 1:
        raise ParseError(f"{path}: header columns must be {','.join(expected)}")

    groups: dict[str, list[tuple[int, list[str]]]] = {}
    order: list[str] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(
                f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}"
            )
        traj_id = row[0]
        try:
            k = int(row[1])
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: invalid k {row[1]!r}") from exc
        if traj_id not in groups:
            groups[traj_id] = []
            order.append(traj_id)
        groups[traj_id].append((k, row[2:]))

    trajectories = []
    for traj_id in order:
        samples = groups[traj_id]
        ks = [k for k, _ in samples]
        if ks != list(range(len(samples))):
            raise ValidationError(
                f"{path}: trajectory {traj_id}: samples must run k = 0..N-1 in order"
            )
        states = np.empty((len(samples), n))
        inputs = np.empty((len(samples) - 1, m))
        for k, fields in samples:
            final = k == len(samples) - 1
            try:
                states[k] = [float(v) for v in fields[:n]]
            except ValueError as exc:
                raise ParseError(
                    f"{path}: trajectory {traj_id}, k={k}: invalid state value"
                ) from exc
            u_fields = fields[n:]
            if final:
                if any(v != "" for v in u_fields):
                    raise ValidationError(
                        f"{path}: trajectory {traj_id}: final sample must have "
                        "empty input columns"
                    )
            else:
                if any(v == "" for v in u_fields):
                    raise ValidationError(
                        f"{path}: trajectory {traj_id}: sample k={k} has empty "
                        "input columns"
                    )
                try:
                    inputs[k] = [float(v) for v in u_fields]
                except ValueError as exc:
                    raise ParseError(
                        f"{path}: trajectory {traj_id}, k={k}: invalid input value"
                    ) from exc
        try:
            trajectories.append(Trajectory(states=states, inputs=inputs))
        except DimensionError as exc:
            raise ValidationError(f"{path}: trajectory {traj_id}: {exc}") from exc

    meta = DatasetMeta(
        plant_id="unknown",
        controller_id="unknown",
        seed=0,
        noise_std=0.0,
        created="",
    )
    return Dataset(trajectories=tuple(trajectories), meta=meta)
