"""Time evolution: coupled fast-slow SDE, averaged ODEs, SCGD, and friends.

Two equivalent presentations of the same coupled system are simulated with
Euler-Maruyama:

* fast scale:  dY = (eps/eta)(b1(X) - Y) dt + (eps/sqrt(eta)) sigma1(X) dW1,
               dX = b2(X, Y) dt + sqrt(eta) sigma2(X, Y) dW2
* original scale: dy = eps (b1(x) - y) dt + eps sigma1(x) dW1,
                  dx = eta b2(x, y) dt + eta sigma2(x, y) dW2

They are related by the time substitution t -> t/eta: a fast-scale path on
[0, T] with step dt equals an original-scale path on [0, T/eta] with step
dt/eta when the Brownian increments are matched (scaled by 1/sqrt(eta)),
state for state up to roundoff.

Deterministic limits are integrated with the classical 4th-order one-step
method: the averaged ODE dX = b2bar_eps(X) dt (y replaced by its frozen-X
invariant Gaussian) and the composite gradient flow dX = b2(X, b1(X)) dt.

The discrete two-time-scale iteration

    y_{k+1} = (1 - eps) y_k + eps g_{w_k}(x_k)
    x_{k+1} = x_k - eta grad~g_{w_k}(x_k) grad f_{v_k}(y_{k+1})

is one Euler-Maruyama step of the original-scale system per unit time with
sampled rather than Gaussian noise; iterate k therefore aligns with
original-scale time k (fast-scale time k * eta).

Step-size rules enforced before stepping: the fast-scale simulator needs
dt <= eta/10 and dt * eps / eta <= 0.1 (the fast drift rate is eps/eta);
the original-scale simulator needs dt * eps <= 0.1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, DivergenceError
from .gaussian_tools import QuadratureScheme, average_under_invariant, psd_factor_batched
from .problems import CompositionProblem, QuadraticTestProblem

__all__ = [
    "Trajectory",
    "SimulationConfig",
    "averaged_drift",
    "gradient_flow_drift",
    "simulate_coupled_fast_timescale",
    "simulate_coupled_original_timescale",
    "coupled_fast_batch",
    "coupled_original_batch",
    "sgd_diffusion_batch",
    "khasminskii_batch",
    "integrate_averaged_ode",
    "integrate_gradient_flow",
    "simulate_sgd_diffusion",
    "run_scgd",
    "run_scgd_batch",
    "default_block_length",
    "build_khasminskii_pair",
]

_SLACK = 1.0 + 1e-9


@dataclass
class Trajectory:
    """A recorded path: time grid, slow states, optional fast states.

    ``meta`` carries run parameters (eps, eta, dt, seed, scheme id);
    ``increments`` optionally stores the Brownian increments (keys "dw1",
    "dw2", one row per step) so auxiliary constructions can replay the
    exact noise.
    """

    times: np.ndarray
    states_x: np.ndarray
    states_y: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)
    increments: Optional[dict] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states_x = np.asarray(self.states_x, dtype=float)
        if len(self.times) != len(self.states_x):
            raise ConfigurationError("times and states_x must have equal length")
        if self.states_y is not None:
            self.states_y = np.asarray(self.states_y, dtype=float)
            if len(self.states_y) != len(self.times):
                raise ConfigurationError("times and states_y must have equal length")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ConfigurationError("times must be strictly increasing")

    @property
    def terminal_x(self) -> np.ndarray:
        return self.states_x[-1]


@dataclass(frozen=True)
class SimulationConfig:
    """Run parameters for the stochastic simulators.

    ``horizon`` is rounded to an exact multiple of ``dt`` (the effective
    step is stored in trajectory meta). Scale-specific step rules are
    checked by the simulators, not here, because valid original-scale steps
    (e.g. dt = 1 for iterate comparisons) violate the fast-scale rule.
    """

    eps: float
    eta: float
    horizon: float
    dt: float
    x0: np.ndarray
    y0: np.ndarray
    replicas: int = 1
    seed: int = 0
    record_stride: int = 1

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "y0", np.asarray(self.y0, dtype=float))
        if self.eps < 0 or self.eta < 0:
            raise ConfigurationError("eps and eta must be >= 0")
        if self.dt <= 0:
            raise ConfigurationError("dt must be > 0")
        if self.horizon < self.dt:
            raise ConfigurationError("horizon must be >= dt")
        if self.replicas < 1 or self.record_stride < 1:
            raise ConfigurationError("replicas and record_stride must be >= 1")

    def n_steps(self) -> int:
        return max(1, int(round(self.horizon / self.dt)))

    def dt_eff(self) -> float:
        return self.horizon / self.n_steps()

    def validate_fast(self) -> None:
        if self.eta <= 0:
            raise ConfigurationError("fast-scale simulation needs eta > 0")
        dt = self.dt_eff()
        if dt > self.eta / 10.0 * _SLACK:
            raise ConfigurationError(
                f"fast-scale step rule violated: dt = {dt:g} > eta/10 = {self.eta / 10:g}"
            )
        if self.eps > 0 and dt * self.eps / self.eta > 0.1 * _SLACK:
            raise ConfigurationError(
                f"fast-scale stiffness rule violated: dt*eps/eta = "
                f"{dt * self.eps / self.eta:g} > 0.1"
            )

    def validate_original(self) -> None:
        dt = self.dt_eff()
        if self.eps > 0 and dt * self.eps > 0.1 * _SLACK:
            raise ConfigurationError(
                f"original-scale stiffness rule violated: dt*eps = {dt * self.eps:g} > 0.1"
            )


def _oracle(problem: CompositionProblem):
    if problem.moment_oracle is None:
        raise ConfigurationError(
            "time stepping requires a moment oracle (Monte Carlo moment "
            "estimation per step is not supported)"
        )
    return problem.moment_oracle


# ---------------------------------------------------------------------------
# Euler-Maruyama steps, batched over replicas


def _apply_factor(s, dw):
    """Batched matrix-vector product (..., k, k) x (..., k) -> (..., k)."""
    return np.matmul(s, dw[..., None])[..., 0]


def _fast_step(oracle, x, y, eps, eta, dt, dw1, dw2):
    b1 = oracle.b1(x)
    s1 = psd_factor_batched(oracle.a1(x))
    b2 = oracle.b2(x, y)
    s2 = psd_factor_batched(oracle.a2(x, y))
    y_new = y + (eps / eta) * (b1 - y) * dt \
        + (eps / math.sqrt(eta)) * _apply_factor(s1, dw1)
    x_new = x + b2 * dt + math.sqrt(eta) * _apply_factor(s2, dw2)
    return x_new, y_new


def _original_step(oracle, x, y, eps, eta, dt, dw1, dw2):
    b1 = oracle.b1(x)
    s1 = psd_factor_batched(oracle.a1(x))
    b2 = oracle.b2(x, y)
    s2 = psd_factor_batched(oracle.a2(x, y))
    y_new = y + eps * (b1 - y) * dt + eps * _apply_factor(s1, dw1)
    x_new = x + eta * b2 * dt + eta * _apply_factor(s2, dw2)
    return x_new, y_new


def _simulate_coupled(problem, config: SimulationConfig, rng, step_fn, scheme_id,
                      record_increments: bool):
    oracle = _oracle(problem)
    n, m = problem.dim_x, problem.dim_y
    n_steps = config.n_steps()
    dt = config.dt_eff()
    stride = config.record_stride

    x = config.x0.copy()
    y = config.y0.copy()
    rec_idx = [0]
    xs = [x.copy()]
    ys = [y.copy()]
    dw1s = np.empty((n_steps, m)) if record_increments else None
    dw2s = np.empty((n_steps, n)) if record_increments else None

    sqrt_dt = math.sqrt(dt)
    for k in range(n_steps):
        dw1 = rng.standard_normal(m) * sqrt_dt
        dw2 = rng.standard_normal(n) * sqrt_dt
        if record_increments:
            dw1s[k] = dw1
            dw2s[k] = dw2
        x, y = step_fn(oracle, x, y, config.eps, config.eta, dt, dw1, dw2)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DivergenceError(
                f"state became non-finite at t = {(k + 1) * dt:g}", when=(k + 1) * dt
            )
        if (k + 1) % stride == 0 or k + 1 == n_steps:
            rec_idx.append(k + 1)
            xs.append(x.copy())
            ys.append(y.copy())

    meta = {
        "eps": config.eps, "eta": config.eta, "dt": dt,
        "seed": config.seed, "scheme": scheme_id, "record_stride": stride,
    }
    increments = {"dw1": dw1s, "dw2": dw2s} if record_increments else None
    return Trajectory(
        times=np.asarray(rec_idx, dtype=float) * dt,
        states_x=np.asarray(xs),
        states_y=np.asarray(ys),
        meta=meta,
        increments=increments,
    )


def simulate_coupled_fast_timescale(problem, config: SimulationConfig, rng,
                                    record_increments: bool = False) -> Trajectory:
    """Euler-Maruyama path of the coupled system in the fast time scale."""
    config.validate_fast()
    return _simulate_coupled(problem, config, rng, _fast_step,
                             "euler_maruyama_fast", record_increments)


def simulate_coupled_original_timescale(problem, config: SimulationConfig, rng,
                                        record_increments: bool = False) -> Trajectory:
    """Euler-Maruyama path of the coupled system in the original time scale."""
    config.validate_original()
    return _simulate_coupled(problem, config, rng, _original_step,
                             "euler_maruyama_original", record_increments)


def coupled_fast_batch(problem, eps, eta, dt, n_steps, x0, y0, rng, replicas,
                       observer: Optional[Callable] = None, observe_stride: int = 1,
                       noise_scale: float = 1.0):
    """Vectorized fast-scale Euler-Maruyama over a replica batch.

    State arrays have shape (replicas, dim); each step draws one
    (replicas, dim) increment block per Brownian motion in replica-major
    order from ``rng``. ``observer(step, t, X, Y)`` is invoked every
    ``observe_stride`` steps and at the final step. Divergent replicas
    propagate NaNs; callers mask them. ``noise_scale=0`` gives the
    deterministic skeleton (discretization-floor runs). Returns the
    terminal (X, Y).
    """
    oracle = _oracle(problem)
    n, m = problem.dim_x, problem.dim_y
    x = np.broadcast_to(np.asarray(x0, float), (replicas, n)).copy()
    y = np.broadcast_to(np.asarray(y0, float), (replicas, m)).copy()
    scale = noise_scale * math.sqrt(dt)
    if observer is not None:
        observer(0, 0.0, x, y)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            dw1 = rng.standard_normal((replicas, m)) * scale
            dw2 = rng.standard_normal((replicas, n)) * scale
            x, y = _fast_step(oracle, x, y, eps, eta, dt, dw1, dw2)
            if observer is not None and ((k + 1) % observe_stride == 0 or k + 1 == n_steps):
                observer(k + 1, (k + 1) * dt, x, y)
    return x, y


def coupled_original_batch(problem, eps, eta, dt, n_steps, x0, y0, rng, replicas,
                           observer: Optional[Callable] = None, observe_stride: int = 1):
    """Vectorized original-scale Euler-Maruyama over a replica batch.

    Same conventions as :func:`coupled_fast_batch`.
    """
    oracle = _oracle(problem)
    n, m = problem.dim_x, problem.dim_y
    x = np.broadcast_to(np.asarray(x0, float), (replicas, n)).copy()
    y = np.broadcast_to(np.asarray(y0, float), (replicas, m)).copy()
    sqrt_dt = math.sqrt(dt)
    if observer is not None:
        observer(0, 0.0, x, y)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            dw1 = rng.standard_normal((replicas, m)) * sqrt_dt
            dw2 = rng.standard_normal((replicas, n)) * sqrt_dt
            x, y = _original_step(oracle, x, y, eps, eta, dt, dw1, dw2)
            if observer is not None and ((k + 1) % observe_stride == 0 or k + 1 == n_steps):
                observer(k + 1, (k + 1) * dt, x, y)
    return x, y


def sgd_diffusion_batch(problem, eta, dt, n_steps, x0, rng, replicas,
                        observer: Optional[Callable] = None, observe_stride: int = 1):
    """Vectorized gradient-flow-plus-noise diffusion (constant-factor noise).

    dX = b2(X, b1(X)) dt + sqrt(eta) sigma2(X, b1(X)) dW, Euler-Maruyama.
    """
    oracle = _oracle(problem)
    n = problem.dim_x
    x = np.broadcast_to(np.asarray(x0, float), (replicas, n)).copy()
    sqrt_dt = math.sqrt(dt)
    sqrt_eta = math.sqrt(eta)
    if observer is not None:
        observer(0, 0.0, x)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            b1 = oracle.b1(x)
            drift = oracle.b2(x, b1)
            s2 = psd_factor_batched(oracle.a2(x, b1))
            dw = rng.standard_normal((replicas, n)) * sqrt_dt
            x = x + drift * dt + sqrt_eta * np.einsum("...ij,...j->...i", s2, dw)
            if observer is not None and ((k + 1) % observe_stride == 0 or k + 1 == n_steps):
                observer(k + 1, (k + 1) * dt, x)
    return x


def khasminskii_batch(problem, eps, eta, dt, n_steps, delta, x0, y0, rng, replicas,
                      observer: Optional[Callable] = None, observe_stride: int = 1):
    """Co-simulate the coupled fast-scale pair with its frozen-block auxiliary.

    The true pair (X, Y) and the auxiliary pair (Xhat, Yhat) share every
    Brownian increment; the auxiliary freezes the slow state per replica at
    each block's first grid point and restarts the auxiliary fast state
    from the true one there. ``observer(step, t, x, y, xh, yh)`` runs every
    ``observe_stride`` steps. Returns the terminal (x, y, xh, yh).
    """
    oracle = _oracle(problem)
    if delta <= 0:
        raise ConfigurationError("delta must be > 0")
    n, m = problem.dim_x, problem.dim_y
    x = np.broadcast_to(np.asarray(x0, float), (replicas, n)).copy()
    y = np.broadcast_to(np.asarray(y0, float), (replicas, m)).copy()
    xh = x.copy()
    yh = y.copy()
    x_frozen = x.copy()
    b1_f = oracle.b1(x_frozen)
    s1_f = psd_factor_batched(oracle.a1(x_frozen))
    block = 0
    sqrt_dt = math.sqrt(dt)
    sqrt_eta = math.sqrt(eta)
    if observer is not None:
        observer(0, 0.0, x, y, xh, yh)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            blk = int(k * dt / delta + 1e-12)
            if blk != block:
                block = blk
                x_frozen = x.copy()
                b1_f = oracle.b1(x_frozen)
                s1_f = psd_factor_batched(oracle.a1(x_frozen))
                yh = y.copy()
            dw1 = rng.standard_normal((replicas, m)) * sqrt_dt
            dw2 = rng.standard_normal((replicas, n)) * sqrt_dt
            s2h = psd_factor_batched(oracle.a2(x_frozen, yh))
            xh = xh + oracle.b2(x_frozen, yh) * dt \
                + sqrt_eta * np.einsum("...ij,...j->...i", s2h, dw2)
            yh = yh + (eps / eta) * (b1_f - yh) * dt \
                + (eps / math.sqrt(eta)) * np.einsum("...ij,...j->...i", s1_f, dw1)
            x, y = _fast_step(oracle, x, y, eps, eta, dt, dw1, dw2)
            if observer is not None and ((k + 1) % observe_stride == 0 or k + 1 == n_steps):
                observer(k + 1, (k + 1) * dt, x, y, xh, yh)
    return x, y, xh, yh


# ---------------------------------------------------------------------------
# deterministic limits


def gradient_flow_drift(problem: CompositionProblem, x) -> np.ndarray:
    """-E grad~g_w(x) grad f_v(E g_w(x)): the composite-gradient descent field."""
    oracle = _oracle(problem)
    return np.asarray(oracle.b2(np.asarray(x, float), oracle.b1(np.asarray(x, float))), float)


def averaged_drift(problem: CompositionProblem, x, eps: float,
                   scheme: Optional[QuadratureScheme] = None) -> np.ndarray:
    """Slow drift averaged over the frozen-x invariant Gaussian.

    Reduces to the gradient-flow drift when b2 is affine in y or eps = 0.
    """
    oracle = _oracle(problem)
    if eps == 0.0 or oracle.b2_linear_in_y:
        return gradient_flow_drift(problem, x)
    value = average_under_invariant(
        lambda xx, ys: oracle.b2(xx, ys), problem, x, eps, scheme
    )
    if isinstance(value, tuple):  # monte_carlo scheme returns (mean, se)
        value = value[0]
    return np.asarray(value, float)


def _rk4(drift, x0, horizon, dt, record_stride, meta):
    n_steps = max(1, int(round(horizon / dt)))
    h = horizon / n_steps
    x = np.asarray(x0, dtype=float).copy()
    rec_idx = [0]
    xs = [x.copy()]
    for k in range(n_steps):
        k1 = drift(x)
        k2 = drift(x + 0.5 * h * k1)
        k3 = drift(x + 0.5 * h * k2)
        k4 = drift(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(
                f"state became non-finite at t = {(k + 1) * h:g}", when=(k + 1) * h
            )
        if (k + 1) % record_stride == 0 or k + 1 == n_steps:
            rec_idx.append(k + 1)
            xs.append(x.copy())
    meta = dict(meta, dt=h, record_stride=record_stride)
    return Trajectory(times=np.asarray(rec_idx, float) * h, states_x=np.asarray(xs), meta=meta)


def integrate_averaged_ode(problem, eps: float, horizon: float, dt: float, x0,
                           scheme: Optional[QuadratureScheme] = None,
                           record_stride: int = 1) -> Trajectory:
    """Classical 4th-order integration of dX = b2bar_eps(X) dt."""
    return _rk4(
        lambda x: averaged_drift(problem, x, eps, scheme),
        x0, horizon, dt, record_stride,
        {"eps": eps, "eta": 0.0, "seed": None, "scheme": "rk4_averaged"},
    )


def integrate_gradient_flow(problem, horizon: float, dt: float, x0,
                            record_stride: int = 1) -> Trajectory:
    """Classical 4th-order integration of dX = b2(X, b1(X)) dt.

    On the quadratic family this is the exact gradient flow of the
    composite objective.
    """
    return _rk4(
        lambda x: gradient_flow_drift(problem, x),
        x0, horizon, dt, record_stride,
        {"eps": 0.0, "eta": 0.0, "seed": None, "scheme": "rk4_gradient_flow"},
    )


# ---------------------------------------------------------------------------
# SGD diffusion (gradient-flow drift plus small noise)


def simulate_sgd_diffusion(problem, eps: float, eta: float, horizon: float, dt: float,
                           rng, x0, noise_source: str = "constant_factor",
                           record_stride: int = 1,
                           scheme: Optional[QuadratureScheme] = None) -> Trajectory:
    """d X = b2(X, b1(X)) dt + sqrt(eta) * (noise increment).

    ``constant_factor`` drives the diffusion with sigma2(X, b1(X)) dW, a
    fixed nondegenerate factor evaluated at the tracked inner mean.
    ``limit_deviation`` drives it with increments of the limiting deviation
    process (simulated along the averaged path from the same x0).
    """
    if noise_source not in ("constant_factor", "limit_deviation"):
        raise ConfigurationError(f"unknown noise_source {noise_source!r}")
    oracle = _oracle(problem)
    n = problem.dim_x
    n_steps = max(1, int(round(horizon / dt)))
    h = horizon / n_steps
    sqrt_eta = math.sqrt(eta)

    z_incr = None
    if noise_source == "limit_deviation":
        from . import deviation  # runtime import; deviation depends on dynamics

        averaged = integrate_averaged_ode(problem, eps, horizon, h, x0, scheme)
        z_traj = deviation.simulate_limit_deviation(problem, averaged, eps, rng=rng,
                                                    scheme=scheme)
        z_incr = np.diff(z_traj.states_x, axis=0)

    x = np.asarray(x0, dtype=float).copy()
    rec_idx = [0]
    xs = [x.copy()]
    sqrt_h = math.sqrt(h)
    for k in range(n_steps):
        drift = np.asarray(oracle.b2(x, oracle.b1(x)), float)
        if noise_source == "constant_factor":
            s2 = psd_factor_batched(oracle.a2(x, oracle.b1(x)))
            noise = s2 @ (rng.standard_normal(n) * sqrt_h)
        else:
            noise = z_incr[k]
        x = x + drift * h + sqrt_eta * noise
        if not np.all(np.isfinite(x)):
            raise DivergenceError(
                f"state became non-finite at t = {(k + 1) * h:g}", when=(k + 1) * h
            )
        if (k + 1) % record_stride == 0 or k + 1 == n_steps:
            rec_idx.append(k + 1)
            xs.append(x.copy())
    meta = {"eps": eps, "eta": eta, "dt": h, "seed": None,
            "scheme": f"sgd_diffusion_{noise_source}", "record_stride": record_stride}
    return Trajectory(times=np.asarray(rec_idx, float) * h, states_x=np.asarray(xs), meta=meta)


# ---------------------------------------------------------------------------
# the discrete two-time-scale iteration


def run_scgd(problem, eps: float, eta: float, num_iters: int, x0, y0, rng):
    """Iterate the two-time-scale recursion; returns (xs, ys) arrays.

    xs has shape (num_iters + 1, n), ys (num_iters + 1, m); fresh i.i.d.
    (w, v) pairs per step, the same w in both recursions.
    """
    if not (0.0 < eps <= 1.0):
        raise ConfigurationError("run_scgd requires 0 < eps <= 1")
    if eta < 0:
        raise ConfigurationError("run_scgd requires eta >= 0")
    x = np.asarray(x0, dtype=float).copy()
    y = np.asarray(y0, dtype=float).copy()
    xs = np.empty((num_iters + 1, problem.dim_x))
    ys = np.empty((num_iters + 1, problem.dim_y))
    xs[0], ys[0] = x, y
    for k in range(num_iters):
        w, v = problem.index_sampler(rng)
        y = (1.0 - eps) * y + eps * problem.g(w, x)
        x = x - eta * (problem.grad_g_tilde(w, x) @ problem.grad_f(v, y))
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DivergenceError(f"iterate became non-finite at k = {k + 1}", when=k + 1)
        xs[k + 1], ys[k + 1] = x, y
    return xs, ys


def run_scgd_batch(problem: QuadraticTestProblem, eps, eta, num_iters, x0, y0,
                   rng, replicas, observer: Optional[Callable] = None,
                   observe_stride: int = 1):
    """Vectorized iteration over replicas for the quadratic family.

    Requires finite index atoms with the affine/quadratic structure (the
    per-step maps are gathered by atom index). Returns terminal (X, Y) of
    shape (replicas, dim).
    """
    if not isinstance(problem, QuadraticTestProblem):
        raise ConfigurationError("run_scgd_batch needs the quadratic test family")
    if not (0.0 < eps <= 1.0):
        raise ConfigurationError("run_scgd_batch requires 0 < eps <= 1")
    from .problems import _soft_clip, _soft_clip_jac

    atoms = problem.index_atoms
    a_atoms = problem.a_mean[None] + problem.a_noise if len(problem.a_noise) \
        else problem.a_mean[None]
    b_atoms = problem.b_mean[None] + problem.b_noise if len(problem.b_noise) \
        else problem.b_mean[None]
    ai_idx = np.array([w[0] for w in atoms.w_labels])
    bj_idx = np.array([w[1] for w in atoms.w_labels])
    targets = problem.targets
    clip = problem.clip_radius

    n, m = problem.dim_x, problem.dim_y
    x = np.broadcast_to(np.asarray(x0, float), (replicas, n)).copy()
    y = np.broadcast_to(np.asarray(y0, float), (replicas, m)).copy()
    if observer is not None:
        observer(0, x, y)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(num_iters):
            iw, iv = atoms.sample_indices(rng, replicas)
            a_w = a_atoms[ai_idx[iw]]          # (r, m, n)
            b_w = b_atoms[bj_idx[iw]]          # (r, m)
            c_v = targets[iv]                  # (r, m)
            xa = _soft_clip(x, clip) if clip else x
            g_val = np.einsum("rmn,rn->rm", a_w, xa) + b_w
            y = (1.0 - eps) * y + eps * g_val
            ya = _soft_clip(y, clip) if clip else y
            gf = ya - c_v
            if clip:
                gf = np.einsum("rml,rl->rm", _soft_clip_jac(y, clip), gf)
            step = np.einsum("rmn,rm->rn", a_w, gf)
            if clip:
                step = np.einsum("rnl,rl->rn", _soft_clip_jac(x, clip), step)
            x = x - eta * step
            if observer is not None and ((k + 1) % observe_stride == 0 or k + 1 == num_iters):
                observer(k + 1, x, y)
    return x, y


# ---------------------------------------------------------------------------
# frozen-block auxiliary pair


def default_block_length(eta: float) -> float:
    """Block length eta * (ln(1/eta))^{1/4} for the frozen-block construction."""
    if not (0 < eta < 1):
        raise ConfigurationError("block length rule needs 0 < eta < 1")
    return eta * math.log(1.0 / eta) ** 0.25


def build_khasminskii_pair(problem, coupled_traj: Trajectory,
                           delta: Optional[float] = None):
    """Frozen-block auxiliary processes replayed on a recorded trajectory.

    Within each block [k*delta, (k+1)*delta) the fast recursion is re-run
    with the slow state frozen at the block's left endpoint and restarted
    from the true fast state there; the auxiliary slow process integrates
    the drift/noise evaluated at the frozen slow state and the auxiliary
    fast state. Both reuse the trajectory's recorded Brownian increments
    exactly. Returns (yhat, xhat) arrays matching the trajectory grid.
    """
    if coupled_traj.increments is None:
        raise ConfigurationError(
            "build_khasminskii_pair needs a trajectory recorded with its "
            "noise increments (record_increments=True)"
        )
    if coupled_traj.meta.get("record_stride", 1) != 1:
        raise ConfigurationError(
            "frozen-block replay needs record_stride = 1 so block endpoints "
            "fall on recorded states"
        )
    if coupled_traj.meta.get("scheme") != "euler_maruyama_fast":
        raise ConfigurationError("frozen-block replay expects a fast-scale trajectory")
    oracle = _oracle(problem)
    eps = coupled_traj.meta["eps"]
    eta = coupled_traj.meta["eta"]
    dt = coupled_traj.meta["dt"]
    horizon = coupled_traj.times[-1]
    if delta is None:
        delta = default_block_length(eta)
    if delta <= 0:
        raise ConfigurationError("delta must be > 0")
    if delta > horizon:
        delta = horizon  # single block

    xs = coupled_traj.states_x
    ys = coupled_traj.states_y
    dw1 = coupled_traj.increments["dw1"]
    dw2 = coupled_traj.increments["dw2"]
    n_steps = len(dw1)

    yhat = np.empty_like(ys)
    xhat = np.empty_like(xs)
    yhat[0] = ys[0]
    xhat[0] = xs[0]

    block = 0
    x_frozen = xs[0]
    b1_f = oracle.b1(x_frozen)
    s1_f = psd_factor_batched(oracle.a1(x_frozen))
    yh = ys[0].copy()
    xh = xs[0].copy()
    sqrt_eta = math.sqrt(eta)
    for k in range(n_steps):
        t = k * dt
        blk = int(t / delta + 1e-12)
        if blk != block:
            block = blk
            x_frozen = xs[k]
            b1_f = oracle.b1(x_frozen)
            s1_f = psd_factor_batched(oracle.a1(x_frozen))
            yh = ys[k].copy()  # restart from the true fast state
        s2 = psd_factor_batched(oracle.a2(x_frozen, yh))
        xh = xh + oracle.b2(x_frozen, yh) * dt + sqrt_eta * (s2 @ dw2[k])
        yh = yh + (eps / eta) * (b1_f - yh) * dt \
            + (eps / math.sqrt(eta)) * (s1_f @ dw1[k])
        yhat[k + 1] = yh
        xhat[k + 1] = xh
    return yhat, xhat
