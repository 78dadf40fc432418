"""Command-line entry point: config parsing, dispatch, artifact emission.

Usage::

    compflow --config run.json [--seed 123] [--out DIR] [--replicas K] [--quiet]

The config is strict JSON (UTF-8, unknown keys rejected). Top-level keys:

* ``experiment``: one of averaging | bias | deviation | scgd-compare |
  khasminskii | simulate
* ``problem``: inline problem object (see below) or a path to a JSON file
* ``seed``: master seed (unsigned 64-bit)
* ``output_dir``: artifact directory (optional, default "runs";
  overridable with --out)
* experiment-specific keys, validated per experiment:

  - averaging:    epsilon, eta_grid, horizon, replicas [, record_stride, x0]
  - bias:         q (abs_deviation | squared_deviation | slow_drift), x,
                  eps_grid
  - deviation:    epsilon, eta_grid, horizon, replicas [, n2_mode, x0]
  - scgd-compare: epsilon, eta, num_iters, replicas [, delta_ball, x0]
  - khasminskii:  epsilon, eta_grid, horizon, replicas [, record_stride, x0]
  - simulate:     epsilon, eta, horizon, dt [, x0, y0, record_stride,
                  time_scale (fast | original)]

Problem object keys: dim_x, dim_y, a_mean, b_mean, targets
[, a_noise, a_weights, b_noise, b_weights, target_weights, clip_radius,
sample_budget]; matrices are nested row-major arrays and weights must sum
to 1 within 1e-12.

Each run writes its artifacts plus ``manifest.json`` (config echo, seed,
toolkit version, wall time, status, artifact list) inside the output
directory and nowhere else. Reruns with identical config and seed produce
byte-identical CSV/JSON artifacts (the manifest's wall-time field aside).
Exit status 0 on success; 2 for usage/config errors; 1 for runtime
failures, with a machine-readable error record in the manifest and on
stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import (
    SimulationConfig,
    simulate_coupled_fast_timescale,
    simulate_coupled_original_timescale,
)
from .errors import CompflowError, ConfigurationError
from .experiments import (
    SweepConfig,
    averaging_error_sweep,
    bias_sweep,
    deviation_convergence_test,
    khasminskii_diagnostic,
    scgd_vs_flow,
)
from .problems import drift_b1, load_problem
from .serialize import json_dumps, svg_loglog, trajectory_to_csv
from .streams import derive_rng

__all__ = ["RunConfig", "parse_config", "dispatch", "main"]

_EXPERIMENTS = {
    "averaging": {
        "required": {"epsilon", "eta_grid", "horizon", "replicas"},
        "optional": {"record_stride", "x0"},
    },
    "bias": {
        "required": {"q", "x", "eps_grid"},
        "optional": set(),
    },
    "deviation": {
        "required": {"epsilon", "eta_grid", "horizon", "replicas"},
        "optional": {"n2_mode", "x0"},
    },
    "scgd-compare": {
        "required": {"epsilon", "eta", "num_iters", "replicas"},
        "optional": {"delta_ball", "x0"},
    },
    "khasminskii": {
        "required": {"epsilon", "eta_grid", "horizon", "replicas"},
        "optional": {"record_stride", "x0"},
    },
    "simulate": {
        "required": {"epsilon", "eta", "horizon", "dt"},
        "optional": {"x0", "y0", "record_stride", "time_scale"},
    },
}
_TOP_LEVEL = {"experiment", "problem", "seed", "output_dir"}


@dataclass
class RunConfig:
    """Validated run description."""

    experiment: str
    problem_config: dict
    params: dict
    seed: int
    output_dir: Path

    def echo(self) -> dict:
        return {
            "experiment": self.experiment,
            "problem": self.problem_config,
            "params": self.params,
            "seed": self.seed,
        }


def _fail(field: str, constraint: str):
    raise ConfigurationError(f"{field} {constraint}")


def _positive(params: dict, key: str):
    value = params.get(key)
    if not isinstance(value, (int, float)) or isinstance(value, bool) or value <= 0:
        _fail(key, "must be > 0")


def _positive_grid(params: dict, key: str):
    grid = params.get(key)
    if not isinstance(grid, list) or not grid:
        _fail(key, "must be a nonempty list")
    if any((not isinstance(v, (int, float))) or isinstance(v, bool) or v <= 0 for v in grid):
        _fail(key, "entries must be > 0")


def _positive_int(params: dict, key: str):
    value = params.get(key)
    if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
        _fail(key, "must be a positive integer")


def _validate_params(experiment: str, params: dict) -> dict:
    spec = _EXPERIMENTS[experiment]
    missing = spec["required"] - set(params)
    if missing:
        _fail(sorted(missing)[0], "is required")
    unknown = set(params) - spec["required"] - spec["optional"]
    if unknown:
        raise ConfigurationError(
            f"unknown config keys for experiment {experiment!r}: {sorted(unknown)}"
        )
    if "epsilon" in params:
        _positive(params, "epsilon")
    if "eta" in params:
        _positive(params, "eta")
    if "horizon" in params:
        _positive(params, "horizon")
    if "dt" in params:
        _positive(params, "dt")
    if "delta_ball" in params:
        _positive(params, "delta_ball")
    for key in ("eta_grid", "eps_grid"):
        if key in params:
            _positive_grid(params, key)
    for key in ("replicas", "num_iters", "record_stride"):
        if key in params:
            _positive_int(params, key)
    if "q" in params and params["q"] not in ("abs_deviation", "squared_deviation", "slow_drift"):
        _fail("q", "must be one of abs_deviation, squared_deviation, slow_drift")
    if "n2_mode" in params and params["n2_mode"] not in ("average_of_product", "product_of_averages"):
        _fail("n2_mode", "must be average_of_product or product_of_averages")
    if "time_scale" in params and params["time_scale"] not in ("fast", "original"):
        _fail("time_scale", "must be fast or original")
    return dict(params)


def parse_config(source) -> RunConfig:
    """Parse and validate a run config from a path, JSON text, or dict.

    Strict mode: unknown keys anywhere are rejected, every schema violation
    names the offending field and constraint, and all validation happens
    before any computation starts.
    """
    if isinstance(source, dict):
        raw = dict(source)
    else:
        text = None
        candidate = Path(str(source))
        if candidate.exists():
            text = candidate.read_text(encoding="utf-8")
        elif str(source).lstrip().startswith("{"):
            text = str(source)
        else:
            raise ConfigurationError(f"config file not found: {source}")
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")

    experiment = raw.get("experiment")
    if experiment not in _EXPERIMENTS:
        raise ConfigurationError(
            f"experiment must be one of {sorted(_EXPERIMENTS)} (got {experiment!r})"
        )
    if "problem" not in raw:
        _fail("problem", "is required")
    if "seed" not in raw:
        _fail("seed", "is required")
    seed = raw["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0 or seed >= 2**64:
        _fail("seed", "must be an unsigned 64-bit integer")

    problem_config = raw["problem"]
    if isinstance(problem_config, str):
        path = Path(problem_config)
        if not path.exists():
            raise ConfigurationError(f"problem file not found: {problem_config}")
        problem_config = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(problem_config, dict):
        raise ConfigurationError("problem must be an object or a file path")

    params = {k: v for k, v in raw.items() if k not in _TOP_LEVEL}
    params = _validate_params(experiment, params)
    load_problem(problem_config)  # validate before any computation

    return RunConfig(
        experiment=experiment,
        problem_config=problem_config,
        params=params,
        seed=seed,
        output_dir=Path(raw.get("output_dir", "runs")),
    )


# ---------------------------------------------------------------------------
# experiment runners (return {filename: text})


def _named_observable(problem, name: str):
    if name == "abs_deviation":
        return lambda x, ys: np.linalg.norm(ys - drift_b1(problem, x), axis=-1)
    if name == "squared_deviation":
        return lambda x, ys: np.einsum("...i,...i->...", ys - drift_b1(problem, x),
                                       ys - drift_b1(problem, x))
    return lambda x, ys: problem.moment_oracle.b2(x, ys)


def _sweep_artifacts(stem: str, sweep, xlabel: str) -> dict:
    artifacts = {
        f"{stem}.csv": sweep.to_csv(),
        f"{stem}.json": json_dumps(sweep.to_json_dict()),
    }
    positive = (~sweep.flagged) & (sweep.error_mean > 0)
    if positive.sum() >= 2:
        artifacts[f"{stem}.svg"] = svg_loglog(
            sweep.params[positive], sweep.error_mean[positive],
            slope=sweep.slope, intercept=sweep.intercept,
            title=sweep.experiment_id, xlabel=xlabel, ylabel="error",
        )
    return artifacts


def _run_averaging(problem, config: RunConfig) -> dict:
    p = config.params
    sweep_cfg = SweepConfig(
        horizon=p["horizon"], replicas=p["replicas"], seed=config.seed,
        x0=np.asarray(p.get("x0", problem.minimizer + 1.0), float),
        record_stride=p.get("record_stride", 10),
    )
    sweep = averaging_error_sweep(problem, p["epsilon"], p["eta_grid"], sweep_cfg)
    return _sweep_artifacts("averaging", sweep, "eta")


def _run_bias(problem, config: RunConfig) -> dict:
    p = config.params
    q = _named_observable(problem, p["q"])
    sweep = bias_sweep(problem, q, np.asarray(p["x"], float), p["eps_grid"],
                       seed=config.seed)
    return _sweep_artifacts("bias", sweep, "epsilon")


def _run_deviation(problem, config: RunConfig) -> dict:
    p = config.params
    sweep_cfg = SweepConfig(
        horizon=p["horizon"], replicas=p["replicas"], seed=config.seed,
        x0=np.asarray(p.get("x0", problem.minimizer + 1.0), float),
    )
    report = deviation_convergence_test(
        problem, p["epsilon"], p["eta_grid"], p["horizon"], sweep_cfg,
        n2_mode=p.get("n2_mode", "average_of_product"),
    )
    lines = ["param,error_mean,error_se,replicas,flagged"]
    for i in range(len(report.etas)):
        lines.append(",".join([
            repr(float(report.etas[i])), repr(float(report.gaps[i])),
            repr(float(report.mean_se_max[i])), str(report.replicas), "false",
        ]))
    artifacts = {
        "deviation.csv": "\n".join(lines) + "\n",
        "deviation.json": json_dumps(report.to_json_dict()),
    }
    if np.all(report.gaps > 0):
        artifacts["deviation.svg"] = svg_loglog(
            report.etas, report.gaps, title="deviation",
            xlabel="eta", ylabel="relative covariance gap",
        )
    return artifacts


def _run_scgd_compare(problem, config: RunConfig) -> dict:
    p = config.params
    report = scgd_vs_flow(
        problem, p["epsilon"], p["eta"], p["num_iters"], p["replicas"],
        config.seed,
        x0=np.asarray(p["x0"], float) if "x0" in p else None,
        delta_ball=p.get("delta_ball", 0.1),
    )
    return {"scgd_compare.json": json_dumps(report.to_json_dict())}


def _run_khasminskii(problem, config: RunConfig) -> dict:
    p = config.params
    sweep_cfg = SweepConfig(
        horizon=p["horizon"], replicas=p["replicas"], seed=config.seed,
        x0=np.asarray(p.get("x0", problem.minimizer + 1.0), float),
        record_stride=p.get("record_stride", 10),
    )
    report = khasminskii_diagnostic(problem, p["epsilon"], p["eta_grid"], sweep_cfg)
    artifacts = {"khasminskii.json": json_dumps(report.to_json_dict())}
    artifacts.update(_sweep_artifacts("khasminskii_y", report.y_sweep, "eta"))
    artifacts.update(_sweep_artifacts("khasminskii_x", report.x_sweep, "eta"))
    return artifacts


def _run_simulate(problem, config: RunConfig) -> dict:
    p = config.params
    x0 = np.asarray(p.get("x0", problem.minimizer + 1.0), float)
    y0 = np.asarray(p["y0"], float) if "y0" in p else drift_b1(problem, x0)
    sim_cfg = SimulationConfig(
        eps=p["epsilon"], eta=p["eta"], horizon=p["horizon"], dt=p["dt"],
        x0=x0, y0=y0, seed=config.seed,
        record_stride=p.get("record_stride", 1),
    )
    rng = derive_rng(config.seed, 0)
    if p.get("time_scale", "fast") == "fast":
        traj = simulate_coupled_fast_timescale(problem, sim_cfg, rng)
    else:
        traj = simulate_coupled_original_timescale(problem, sim_cfg, rng)
    summary = {
        "experiment_id": "simulate",
        "rows": len(traj.times),
        "terminal_x": traj.states_x[-1].tolist(),
        "terminal_y": traj.states_y[-1].tolist(),
        "meta": {k: traj.meta[k] for k in sorted(traj.meta)},
        "seed": config.seed,
    }
    return {
        "trajectory.csv": trajectory_to_csv(traj),
        "simulate.json": json_dumps(summary),
    }


_RUNNERS = {
    "averaging": _run_averaging,
    "bias": _run_bias,
    "deviation": _run_deviation,
    "scgd-compare": _run_scgd_compare,
    "khasminskii": _run_khasminskii,
    "simulate": _run_simulate,
}


def dispatch(config: RunConfig, quiet: bool = False) -> int:
    """Run the configured experiment, write artifacts + manifest, return exit status."""
    out = config.output_dir
    started = time.monotonic()
    written = []
    status = "ok"
    error_record = None
    try:
        out.mkdir(parents=True, exist_ok=True)
        problem = load_problem(config.problem_config)
        artifacts = _RUNNERS[config.experiment](problem, config)
        for name, text in sorted(artifacts.items()):
            (out / name).write_text(text, encoding="utf-8")
            written.append(name)
            if not quiet:
                print(f"wrote {out / name}")
    except CompflowError as exc:
        status = "failed"
        error_record = {"type": type(exc).__name__, "message": str(exc)}
    except Exception as exc:  # noqa: BLE001 - the manifest must always be written
        status = "failed"
        error_record = {"type": type(exc).__name__, "message": str(exc)}

    manifest = {
        "status": status,
        "config": config.echo(),
        "seed": config.seed,
        "toolkit_version": __version__,
        "wall_time_seconds": round(time.monotonic() - started, 6),
        "artifacts": written,
    }
    if error_record is not None:
        manifest["error"] = error_record
        manifest["incomplete_artifacts"] = written
        manifest["artifacts"] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json_dumps(manifest), encoding="utf-8")
    except OSError as exc:
        print(json.dumps({"type": "OSError", "message": str(exc)}), file=sys.stderr)
        return 1
    if error_record is not None:
        print(json.dumps(error_record), file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="compflow",
        description="Run a compositional gradient-flow experiment from a JSON config.",
    )
    parser.add_argument("--config", required=True, help="path to the JSON run config")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--replicas", type=int, default=None, help="override replica count")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    args = parser.parse_args(argv)

    try:
        config = parse_config(args.config)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2**64:
                raise ConfigurationError("seed must be an unsigned 64-bit integer")
            config.seed = args.seed
        if args.out is not None:
            config.output_dir = Path(args.out)
        if args.replicas is not None:
            if args.replicas <= 0:
                raise ConfigurationError("replicas must be a positive integer")
            if "replicas" in config.params:
                config.params["replicas"] = args.replicas
    except ConfigurationError as exc:
        print(json.dumps({"type": "ConfigurationError", "message": str(exc)}),
              file=sys.stderr)
        return 2
    return dispatch(config, quiet=args.quiet)


if __name__ == "__main__":
    sys.exit(main())
