"""Replica orchestration, error statistics, and rate-verification experiments.

Five named experiments check the quantitative behavior of the toolkit's
processes at desk scale:

* ``averaging_error_sweep``: sup_t E|X_coupled - X_averaged|^2 versus eta
  (expected to vanish roughly linearly in the eta-dominated regime).
* ``bias_sweep``: |avg_eps(q) - q(x, b1(x))| versus eps (bounded by
  C sqrt(eps); exactly sqrt(eps) for the distance-to-mean observable).
* ``deviation_convergence_test``: empirical covariance of the rescaled
  deviation at the horizon versus the limiting process covariance.
* ``scgd_vs_flow``: the discrete iteration against the coupled diffusion at
  matched times and against the gradient-flow-plus-noise diffusion,
  including first hitting of a ball around the known minimizer.
* ``khasminskii_diagnostic``: frozen-block auxiliary pair errors
  sup_t E|Y - Yhat|^2 and sup_t E|X - Xhat|^2 versus eta.

Every sweep is reproducible byte for byte from (config, master seed): grid
point i uses the derived stream (seed, ordinal, i), reductions run in
replica order, and serialization uses round-trip float formatting. Points
whose error sits within 3x of a noise-free (deterministic) run of the same
step size are flagged as floor-limited and excluded from fits; fits with
max log-residual above 0.5 are marked unreliable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .deviation import limit_deviation_covariance
from .dynamics import (
    coupled_fast_batch,
    coupled_original_batch,
    default_block_length,
    integrate_averaged_ode,
    khasminskii_batch,
    run_scgd_batch,
    sgd_diffusion_batch,
)
from .errors import ConfigurationError
from .gaussian_tools import QuadratureScheme, average_under_invariant
from .problems import QuadraticTestProblem, drift_b1
from .serialize import fmt_float
from .streams import derive_rng

__all__ = [
    "SweepConfig",
    "SweepResult",
    "KhasminskiiReport",
    "DeviationConvergenceReport",
    "ScgdComparisonReport",
    "fit_power_law",
    "averaging_error_sweep",
    "bias_sweep",
    "deviation_convergence_test",
    "scgd_vs_flow",
    "khasminskii_diagnostic",
    "smooth3",
]

_MAX_LOG_RESIDUAL = 0.5
_FLOOR_FACTOR = 3.0


def fit_power_law(xs, ys):
    """Least squares on (log x, log y); returns (slope, intercept, max_residual).

    Natural logarithms; needs >= 3 strictly positive points.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ConfigurationError("fit_power_law needs matching 1-d arrays")
    if len(xs) < 3:
        raise ConfigurationError("fit_power_law needs at least 3 points")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ConfigurationError("fit_power_law needs strictly positive values")
    lx, ly = np.log(xs), np.log(ys)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = np.abs(ly - (slope * lx + intercept)).max()
    return float(slope), float(intercept), float(resid)


def smooth3(values) -> np.ndarray:
    """Moving average with window 3 (shrinking at the edges)."""
    values = np.asarray(values, dtype=float)
    out = np.empty_like(values)
    for i in range(len(values)):
        lo = max(0, i - 1)
        hi = min(len(values), i + 2)
        out[i] = values[lo:hi].mean()
    return out


@dataclass(frozen=True)
class SweepConfig:
    """Shared knobs for the eta/eps sweeps."""

    horizon: float
    replicas: int
    seed: int
    x0: np.ndarray
    y0: Optional[np.ndarray] = None
    record_stride: int = 10
    dt_safety: float = 0.1
    detect_floor: bool = True
    max_divergent_fraction: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        if self.y0 is not None:
            object.__setattr__(self, "y0", np.asarray(self.y0, dtype=float))
        if self.horizon <= 0 or self.replicas < 1:
            raise ConfigurationError("horizon must be > 0 and replicas >= 1")

    def resolved_y0(self, problem) -> np.ndarray:
        if self.y0 is not None:
            return self.y0
        return drift_b1(problem, self.x0)


@dataclass
class SweepResult:
    """Grid of parameter points with error statistics and a fitted rate."""

    experiment_id: str
    params: np.ndarray
    error_mean: np.ndarray
    error_se: np.ndarray
    replica_counts: np.ndarray
    flagged: np.ndarray
    slope: Optional[float]
    intercept: Optional[float]
    max_residual: Optional[float]
    reliable: bool
    seed: int
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        order = np.argsort(self.params)
        if not (np.all(order == np.arange(len(self.params)))
                or np.all(order == np.arange(len(self.params))[::-1])):
            raise ConfigurationError("sweep grid must be sorted")

    def to_csv(self) -> str:
        lines = ["param,error_mean,error_se,replicas,flagged"]
        for i in range(len(self.params)):
            lines.append(",".join([
                fmt_float(self.params[i]),
                fmt_float(self.error_mean[i]),
                fmt_float(self.error_se[i]),
                str(int(self.replica_counts[i])),
                str(bool(self.flagged[i])).lower(),
            ]))
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "params": self.params.tolist(),
            "error_mean": self.error_mean.tolist(),
            "error_se": self.error_se.tolist(),
            "replicas": [int(r) for r in self.replica_counts],
            "flagged": [bool(f) for f in self.flagged],
            "fit": {
                "slope": self.slope,
                "intercept": self.intercept,
                "max_residual": self.max_residual,
                "reliable": self.reliable,
            },
            "seed": self.seed,
            "notes": self.notes,
        }


def _finish_sweep(experiment_id, params, means, ses, counts, flagged, seed, notes):
    params = np.asarray(params, dtype=float)
    means = np.asarray(means, dtype=float)
    keep = ~np.asarray(flagged) & (means > 0)
    slope = intercept = resid = None
    reliable = False
    if keep.sum() >= 3:
        slope, intercept, resid = fit_power_law(params[keep], means[keep])
        reliable = resid <= _MAX_LOG_RESIDUAL
    return SweepResult(
        experiment_id=experiment_id,
        params=params,
        error_mean=means,
        error_se=np.asarray(ses, dtype=float),
        replica_counts=np.asarray(counts, dtype=int),
        flagged=np.asarray(flagged, dtype=bool),
        slope=slope,
        intercept=intercept,
        max_residual=resid,
        reliable=reliable,
        seed=seed,
        notes=notes,
    )


def _sweep_dt(eps: float, eta: float, safety: float) -> float:
    rate = max(eps / eta, 1.0 / eta)  # fast drift rate and the eta/10 rule
    return safety / rate


class _SupSquaredGapObserver:
    """Running sup over record times of E|X - reference(t)|^2 over replicas.

    Divergent replicas (non-finite states) are excluded from the mean and
    counted. Also keeps the standard error at the argmax time.
    """

    def __init__(self, reference_by_step):
        self.reference = reference_by_step
        self.sup = -np.inf
        self.sup_se = 0.0
        self.sup_step = None
        self.divergent = 0
        self.total = None

    def __call__(self, step, t, x, y):
        ref = self.reference.get(step)
        if ref is None:
            return
        gap = x - ref
        sq = np.einsum("ri,ri->r", gap, gap)
        finite = np.isfinite(sq)
        self.total = len(sq)
        self.divergent = int((~finite).sum())
        vals = sq[finite]
        if len(vals) == 0:
            return
        mean = float(vals.mean())
        if mean > self.sup:
            self.sup = mean
            self.sup_se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
            self.sup_step = step


def _averaged_reference(problem, eps, horizon, dt, x0, stride, n_steps):
    traj = integrate_averaged_ode(problem, eps, horizon, dt, x0, record_stride=stride)
    steps = [0]
    steps += [k for k in range(stride, n_steps + 1, stride)]
    if steps[-1] != n_steps:
        steps.append(n_steps)
    if len(steps) != len(traj.times):
        raise ConfigurationError("averaged reference grid mismatch")
    return {s: traj.states_x[i] for i, s in enumerate(steps)}


def averaging_error_sweep(problem, eps: float, eta_grid: Sequence[float],
                          config: SweepConfig) -> SweepResult:
    """sup_t E|X_coupled(t) - X_averaged(t)|^2 per eta, with a fitted slope.

    Fails when more than ``config.max_divergent_fraction`` of replicas
    diverge at any grid point. Floor-limited points (error within 3x the
    error of a noise-free run at the same step) are flagged and excluded
    from the fit.
    """
    etas = np.asarray(sorted(eta_grid, reverse=True), dtype=float)
    if np.any(etas <= 0):
        raise ConfigurationError("eta grid must be positive")
    y0 = config.resolved_y0(problem)
    means, ses, counts, flagged = [], [], [], []
    notes = {"divergent": [], "floor": []}
    for i, eta in enumerate(etas):
        dt = _sweep_dt(eps, eta, config.dt_safety)
        n_steps = max(1, int(math.ceil(config.horizon / dt)))
        dt = config.horizon / n_steps
        reference = _averaged_reference(problem, eps, config.horizon, dt,
                                        config.x0, config.record_stride, n_steps)
        obs = _SupSquaredGapObserver(reference)
        rng = derive_rng(config.seed, 0, i)
        coupled_fast_batch(problem, eps, eta, dt, n_steps, config.x0, y0, rng,
                           config.replicas, observer=obs,
                           observe_stride=config.record_stride)
        if obs.divergent > config.max_divergent_fraction * config.replicas:
            raise ConfigurationError(
                f"{obs.divergent} of {config.replicas} replicas diverged at "
                f"eta = {eta:g}"
            )
        floor = 0.0
        if config.detect_floor:
            fobs = _SupSquaredGapObserver(reference)
            coupled_fast_batch(problem, eps, eta, dt, n_steps, config.x0, y0,
                               derive_rng(config.seed, 0, i, 1), 1,
                               observer=fobs, observe_stride=config.record_stride,
                               noise_scale=0.0)
            floor = max(fobs.sup, 0.0)
        is_floored = obs.sup <= _FLOOR_FACTOR * floor
        means.append(obs.sup)
        ses.append(obs.sup_se)
        counts.append(config.replicas - obs.divergent)
        flagged.append(is_floored)
        notes["divergent"].append(obs.divergent)
        notes["floor"].append(floor)
    return _finish_sweep("averaging", etas, means, ses, counts, flagged,
                         config.seed, notes)


def bias_sweep(problem, q: Callable, x, eps_grid: Sequence[float],
               scheme: Optional[QuadratureScheme] = None,
               seed: int = 0) -> SweepResult:
    """|avg_eps(q)(x) - q(x, b1(x))| per eps, with a fitted slope.

    ``q(x, ys)`` must be vectorized over a (k, m) batch of ys. Vector or
    matrix observables are reduced with the Euclidean/Frobenius norm.
    """
    eps_grid = np.asarray(sorted(eps_grid, reverse=True), dtype=float)
    if np.any(eps_grid <= 0):
        raise ConfigurationError("eps grid must be positive")
    x = np.asarray(x, dtype=float)
    center = drift_b1(problem, x)
    base = np.asarray(q(x, center[None]), dtype=float)[0]
    means, ses = [], []
    for eps in eps_grid:
        avg = average_under_invariant(q, problem, x, eps, scheme)
        if isinstance(avg, tuple):
            avg, se = avg
            ses.append(float(np.linalg.norm(se)))
        else:
            ses.append(0.0)
        means.append(float(np.linalg.norm(np.asarray(avg) - base)))
    flagged = [False] * len(eps_grid)
    return _finish_sweep("bias", eps_grid, means, ses,
                         [1] * len(eps_grid), flagged, seed, {})


@dataclass
class DeviationConvergenceReport:
    """Empirical versus limiting covariance of the rescaled deviation.

    The gap statistic compares the empirical second moment E[Z Z^T] (the
    covariance about the limit's zero mean) with the limiting covariance:
    the rescaled deviation carries an O(sqrt(eta)) mean offset whose decay
    is part of the weak convergence, and the moment about zero sees it
    while the mean-centered covariance saturates at Monte Carlo noise.
    The centered covariances are reported alongside.
    """

    eps: float
    horizon: float
    etas: np.ndarray
    gaps: np.ndarray
    gaps_smoothed: np.ndarray
    cov_limit: np.ndarray
    second_moment_empirical: list
    cov_empirical: list
    mean_abs_max: np.ndarray
    mean_se_max: np.ndarray
    replicas: int
    seed: int

    @property
    def trend_decreasing(self) -> bool:
        return bool(self.gaps_smoothed[0] > self.gaps_smoothed[-1])

    def gap_at_smallest_eta(self) -> float:
        return float(self.gaps[-1])

    def to_json_dict(self) -> dict:
        return {
            "experiment_id": "deviation",
            "eps": self.eps,
            "horizon": self.horizon,
            "etas": self.etas.tolist(),
            "gaps": self.gaps.tolist(),
            "gaps_smoothed": self.gaps_smoothed.tolist(),
            "cov_limit": self.cov_limit.tolist(),
            "second_moment_empirical": [c.tolist() for c in self.second_moment_empirical],
            "cov_empirical": [c.tolist() for c in self.cov_empirical],
            "mean_abs_max": self.mean_abs_max.tolist(),
            "mean_se_max": self.mean_se_max.tolist(),
            "replicas": self.replicas,
            "seed": self.seed,
            "trend_decreasing": self.trend_decreasing,
        }


def deviation_convergence_test(problem, eps: float, eta_grid: Sequence[float],
                               horizon: float, config: SweepConfig,
                               scheme: Optional[QuadratureScheme] = None,
                               n2_mode: str = "average_of_product") -> DeviationConvergenceReport:
    """Empirical Cov of the rescaled deviation at the horizon versus its limit.

    Per eta: the coupled system is simulated over replicas, the deviation
    (X(T) - X_averaged(T))/sqrt(eta) collected, and the Frobenius gap of
    its covariance to the limiting covariance reported, together with the
    gap trend across the (decreasing) eta grid after 3-point smoothing.
    """
    if config.replicas < 500:
        raise ConfigurationError(
            "deviation_convergence_test needs at least 500 replicas "
            "(covariance estimates are statistically meaningless below that)"
        )
    etas = np.asarray(sorted(eta_grid, reverse=True), dtype=float)
    if np.any(etas <= 0):
        raise ConfigurationError("eta grid must be positive")
    y0 = config.resolved_y0(problem)

    # limit side on a fixed reference grid
    ref_steps = 1500
    ref_dt = horizon / ref_steps
    averaged_ref = integrate_averaged_ode(problem, eps, horizon, ref_dt, config.x0)
    cov_limit = limit_deviation_covariance(problem, averaged_ref, eps,
                                           scheme=scheme, n2_mode=n2_mode)[-1]
    lim_norm = float(np.linalg.norm(cov_limit))
    x_ref_T = averaged_ref.states_x[-1]

    gaps, moment_emp, cov_emp, mean_abs, mean_se = [], [], [], [], []
    for i, eta in enumerate(etas):
        dt = _sweep_dt(eps, eta, config.dt_safety)
        n_steps = max(1, int(math.ceil(horizon / dt)))
        dt = horizon / n_steps
        rng = derive_rng(config.seed, 1, i)
        x_T, _ = coupled_fast_batch(problem, eps, eta, dt, n_steps,
                                    config.x0, y0, rng, config.replicas)
        finite = np.all(np.isfinite(x_T), axis=1)
        if (~finite).sum() > config.max_divergent_fraction * config.replicas:
            raise ConfigurationError(
                f"{int((~finite).sum())} replicas diverged at eta = {eta:g}"
            )
        z = (x_T[finite] - x_ref_T) / math.sqrt(eta)
        moment = z.T @ z / len(z)
        gaps.append(float(np.linalg.norm(moment - cov_limit)) / lim_norm)
        moment_emp.append(moment)
        cov_emp.append(np.atleast_2d(np.cov(z.T)))
        mean_abs.append(float(np.abs(z.mean(axis=0)).max()))
        mean_se.append(float((z.std(axis=0, ddof=1) / math.sqrt(len(z))).max()))
    gaps = np.asarray(gaps)
    return DeviationConvergenceReport(
        eps=eps, horizon=horizon, etas=etas, gaps=gaps,
        gaps_smoothed=smooth3(gaps), cov_limit=cov_limit,
        second_moment_empirical=moment_emp, cov_empirical=cov_emp,
        mean_abs_max=np.asarray(mean_abs),
        mean_se_max=np.asarray(mean_se), replicas=config.replicas,
        seed=config.seed,
    )


@dataclass
class ScgdComparisonReport:
    """Discrete iteration versus the coupled diffusion and the SGD diffusion."""

    eps: float
    eta: float
    num_iters: int
    replicas: int
    seed: int
    delta_ball: float
    mean_gap_sup: float          # sup_k |E x_k - E X_coupled(k eta)|
    mean_gap_argmax: int
    hit_fraction: dict
    hit_time_median: dict        # fast-scale time units (iterate index * eta)
    hitting_ratio: float         # SCGD vs SGD diffusion median hitting times

    def to_json_dict(self) -> dict:
        return {
            "experiment_id": "scgd-compare",
            "eps": self.eps,
            "eta": self.eta,
            "num_iters": self.num_iters,
            "replicas": self.replicas,
            "seed": self.seed,
            "delta_ball": self.delta_ball,
            "mean_gap_sup": self.mean_gap_sup,
            "mean_gap_argmax": self.mean_gap_argmax,
            "hit_fraction": self.hit_fraction,
            "hit_time_median": self.hit_time_median,
            "hitting_ratio": self.hitting_ratio,
        }


class _HittingObserver:
    """First step at which each replica enters the ball |x - target| <= radius."""

    def __init__(self, target, radius, replicas):
        self.target = np.asarray(target, float)
        self.radius = radius
        self.hit_step = np.full(replicas, -1, dtype=int)

    def observe(self, step, x):
        gap = np.linalg.norm(x - self.target, axis=1)
        newly = (self.hit_step < 0) & (gap <= self.radius)
        self.hit_step[newly] = step

    def fraction(self):
        return float((self.hit_step >= 0).mean())

    def median_step(self):
        hits = self.hit_step[self.hit_step >= 0]
        return float(np.median(hits)) if len(hits) else math.inf


def scgd_vs_flow(problem: QuadraticTestProblem, eps: float, eta: float,
                 num_iters: int, replicas: int, seed: int,
                 x0=None, y0=None, delta_ball: float = 0.1) -> ScgdComparisonReport:
    """Compare the discrete iteration, the coupled diffusion, and the SGD diffusion.

    Iterate k aligns with original-scale time k, i.e. fast-scale time
    k * eta. Reports (i) the sup over k of the replica-mean path gap between
    the iteration and the coupled original-scale path, and (ii) first
    hitting of the ``delta_ball`` around the known minimizer for all three
    processes (fast-scale time units).
    """
    if not isinstance(problem, QuadraticTestProblem):
        raise ConfigurationError("scgd_vs_flow needs the quadratic test family")
    target = problem.minimizer
    if x0 is None:
        x0 = target + 1.0
    x0 = np.asarray(x0, dtype=float)
    y0 = drift_b1(problem, x0) if y0 is None else np.asarray(y0, dtype=float)

    scgd_means = np.empty((num_iters + 1, problem.dim_x))
    scgd_hit = _HittingObserver(target, delta_ball, replicas)

    def scgd_observer(step, x, y):
        scgd_means[step] = x.mean(axis=0)
        scgd_hit.observe(step, x)

    run_scgd_batch(problem, eps, eta, num_iters, x0, y0,
                   derive_rng(seed, 3, 0), replicas,
                   observer=scgd_observer, observe_stride=1)

    sde_means = np.empty((num_iters + 1, problem.dim_x))
    sde_hit = _HittingObserver(target, delta_ball, replicas)

    def sde_observer(step, t, x, y):
        sde_means[step] = x.mean(axis=0)
        sde_hit.observe(step, x)

    coupled_original_batch(problem, eps, eta, 1.0, num_iters, x0, y0,
                           derive_rng(seed, 3, 1), replicas,
                           observer=sde_observer, observe_stride=1)

    sgd_hit = _HittingObserver(target, delta_ball, replicas)

    def sgd_observer(step, t, x):
        sgd_hit.observe(step, x)

    sgd_diffusion_batch(problem, eta, eta, num_iters, x0,
                        derive_rng(seed, 3, 2), replicas,
                        observer=sgd_observer, observe_stride=1)

    gaps = np.linalg.norm(scgd_means - sde_means, axis=1)
    sup_idx = int(np.argmax(gaps))

    hit_fraction = {
        "scgd": scgd_hit.fraction(),
        "coupled": sde_hit.fraction(),
        "sgd_diffusion": sgd_hit.fraction(),
    }
    hit_time = {
        "scgd": scgd_hit.median_step() * eta,
        "coupled": sde_hit.median_step() * eta,
        "sgd_diffusion": sgd_hit.median_step() * eta,
    }
    ratio = math.inf
    if math.isfinite(hit_time["scgd"]) and math.isfinite(hit_time["sgd_diffusion"]) \
            and hit_time["sgd_diffusion"] > 0:
        ratio = hit_time["scgd"] / hit_time["sgd_diffusion"]
    return ScgdComparisonReport(
        eps=eps, eta=eta, num_iters=num_iters, replicas=replicas, seed=seed,
        delta_ball=delta_ball, mean_gap_sup=float(gaps.max()),
        mean_gap_argmax=sup_idx, hit_fraction=hit_fraction,
        hit_time_median=hit_time, hitting_ratio=float(ratio),
    )


@dataclass
class KhasminskiiReport:
    """Frozen-block auxiliary errors versus eta (fast and slow components)."""

    y_sweep: SweepResult
    x_sweep: SweepResult
    deltas: np.ndarray

    def to_json_dict(self) -> dict:
        return {
            "experiment_id": "khasminskii",
            "deltas": self.deltas.tolist(),
            "y_sweep": self.y_sweep.to_json_dict(),
            "x_sweep": self.x_sweep.to_json_dict(),
        }


class _PairGapObserver:
    """Running sup over record times of E|Y-Yhat|^2 and E|X-Xhat|^2."""

    def __init__(self):
        self.sup_y = -np.inf
        self.sup_y_se = 0.0
        self.sup_x = -np.inf
        self.sup_x_se = 0.0
        self.divergent = 0

    def __call__(self, step, t, x, y, xh, yh):
        if step == 0:
            return
        gy = np.einsum("ri,ri->r", y - yh, y - yh)
        gx = np.einsum("ri,ri->r", x - xh, x - xh)
        finite = np.isfinite(gy) & np.isfinite(gx)
        self.divergent = int((~finite).sum())
        if finite.sum() == 0:
            return
        vy, vx = gy[finite], gx[finite]
        my, mx = float(vy.mean()), float(vx.mean())
        if my > self.sup_y:
            self.sup_y = my
            self.sup_y_se = float(vy.std(ddof=1) / math.sqrt(len(vy))) if len(vy) > 1 else 0.0
        if mx > self.sup_x:
            self.sup_x = mx
            self.sup_x_se = float(vx.std(ddof=1) / math.sqrt(len(vx))) if len(vx) > 1 else 0.0


def khasminskii_diagnostic(problem, eps: float, eta_grid: Sequence[float],
                           config: SweepConfig) -> KhasminskiiReport:
    """Frozen-block pair errors per eta with fitted slopes.

    Block length follows the eta * (ln 1/eta)^{1/4} rule. Both processes of
    each pair share Brownian increments, so the reported gaps isolate the
    block-freezing error.
    """
    etas = np.asarray(sorted(eta_grid, reverse=True), dtype=float)
    if np.any(etas <= 0) or np.any(etas >= 1):
        raise ConfigurationError("eta grid must lie in (0, 1)")
    y0 = config.resolved_y0(problem)
    y_means, y_ses, x_means, x_ses, counts, deltas = [], [], [], [], [], []
    divergents = []
    for i, eta in enumerate(etas):
        dt = _sweep_dt(eps, eta, config.dt_safety)
        n_steps = max(1, int(math.ceil(config.horizon / dt)))
        dt = config.horizon / n_steps
        delta = default_block_length(eta)
        obs = _PairGapObserver()
        khasminskii_batch(problem, eps, eta, dt, n_steps, delta, config.x0, y0,
                          derive_rng(config.seed, 2, i), config.replicas,
                          observer=obs, observe_stride=config.record_stride)
        if obs.divergent > config.max_divergent_fraction * config.replicas:
            raise ConfigurationError(
                f"{obs.divergent} replicas diverged at eta = {eta:g}"
            )
        y_means.append(obs.sup_y)
        y_ses.append(obs.sup_y_se)
        x_means.append(obs.sup_x)
        x_ses.append(obs.sup_x_se)
        counts.append(config.replicas - obs.divergent)
        deltas.append(delta)
        divergents.append(obs.divergent)
    flagged = [False] * len(etas)
    notes = {"divergent": divergents}
    return KhasminskiiReport(
        y_sweep=_finish_sweep("khasminskii_y", etas, y_means, y_ses, counts,
                              flagged, config.seed, notes),
        x_sweep=_finish_sweep("khasminskii_x", etas, x_means, x_ses, counts,
                              flagged, config.seed, notes),
        deltas=np.asarray(deltas),
    )
