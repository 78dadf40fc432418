"""Normal deviations of the slow motion from its average.

The rescaled gap Z = (X_coupled - X_averaged)/sqrt(eta) converges weakly,
as eta -> 0, to a linear process driven by two independent zero-mean
Gaussian inputs,

    Z_t = int_0^t M(X_s) Z_s ds + N1(t) + N2(t),

where M is the Jacobian of the averaged drift. The covariance of N1 is
assembled from correctors: per slow coordinate k, the solution u_k of the
frozen-x Poisson equation

    L u_k = b2_k(x, y) - b2bar_k(x),    integral of u_k d(mu) = 0,

with L the generator of the frozen-x fast process. N1's covariance rate is
gbar_i^T a1 gbar_j with gbar_k the invariant average of grad_y u_k; N2's
rate is the invariant average of the slow noise covariance (default), or
the product of averaged factors (kept as an alternative mode because the
two differ whenever the slow noise depends on y).

Correctors are solved either in closed form (right-hand sides affine or
quadratic in y, detected by exact finite-difference interpolation) or by
quadrature of the transition semigroup: u = -int_0^infty P_t h dt, with
P_t the exact Gaussian transition of the fast process, panel-wise
Gauss-Legendre in t, truncated once the integrand is negligible, and the
centering constant subtracted at the end.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from .dynamics import Trajectory, averaged_drift
from .errors import ConfigurationError, GridAlignmentError, NotPSDError
from .gaussian_tools import (
    QuadratureScheme,
    default_scheme,
    gauss_hermite_nodes,
    psd_factor,
    psd_factor_batched,
)
from .problems import (
    CompositionProblem,
    QuadraticTestProblem,
    diffusion_cov1,
    drift_b1,
)

__all__ = [
    "Corrector",
    "DeviationStats",
    "ou_generator_apply",
    "solve_corrector",
    "solve_correctors",
    "n1_covariance",
    "n2_covariance",
    "drift_jacobian",
    "rescaled_deviation",
    "simulate_limit_deviation",
    "limit_deviation_covariance",
]


@dataclass(frozen=True)
class Corrector:
    """Poisson-equation solution for one slow coordinate at frozen x.

    ``u(ys)`` and ``grad_y(ys)`` are vectorized over a (k, m) batch;
    ``grad_mean`` is the invariant average of grad_y (the N1 ingredient).
    """

    index: int
    x: np.ndarray
    eps: float
    u: Callable[[np.ndarray], np.ndarray]
    grad_y: Callable[[np.ndarray], np.ndarray]
    grad_mean: np.ndarray
    method: str


# ---------------------------------------------------------------------------
# generator of the frozen-x fast process


def ou_generator_apply(problem: CompositionProblem, x, eps: float,
                       h: Callable, y, fd_step: float = 1e-4) -> float:
    """(eps/2) div(a1(x) grad h) + (b1(x) - y) . grad h at y.

    Derivatives of ``h`` (scalar function of y) are central finite
    differences with the given step; a1 is constant in y so the divergence
    term is trace(a1 Hess h).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m = y.size
    a1 = diffusion_cov1(problem, x)
    b1 = drift_b1(problem, x)
    s = fd_step
    h0 = float(h(y))

    grad = np.zeros(m)
    hess = np.zeros((m, m))
    for i in range(m):
        ei = np.zeros(m)
        ei[i] = s
        hp = float(h(y + ei))
        hm = float(h(y - ei))
        grad[i] = (hp - hm) / (2 * s)
        hess[i, i] = (hp - 2 * h0 + hm) / s**2
    for i in range(m):
        for j in range(i + 1, m):
            ei = np.zeros(m)
            ei[i] = s
            ej = np.zeros(m)
            ej[j] = s
            val = (float(h(y + ei + ej)) - float(h(y + ei - ej))
                   - float(h(y - ei + ej)) + float(h(y - ei - ej))) / (4 * s**2)
            hess[i, j] = hess[j, i] = val
    return float(0.5 * eps * np.sum(a1 * hess) + (b1 - y) @ grad)


# ---------------------------------------------------------------------------
# corrector solvers


def _rhs_for_coordinate(problem, x, eps, k, scheme):
    """Centered RHS h_k(ys) = b2_k(x, ys) - b2bar_k(x), vectorized in y."""
    oracle = problem.moment_oracle
    if oracle is None:
        raise ConfigurationError("solve_corrector needs a moment oracle")
    x = np.asarray(x, dtype=float)
    b2bar = averaged_drift(problem, x, eps, scheme)

    def h(ys):
        ys = np.asarray(ys, dtype=float)
        return np.asarray(oracle.b2(x, ys), float)[..., k] - b2bar[k]

    return h


def _fit_affine_quadratic(h, center, m):
    """Exact-interpolation fit h(y) ~ c0 + a.(y-center) + (y-center)^T Q (y-center).

    Central differences at ``center`` are exact for polynomials of degree
    <= 2; the fit is then verified on random probe points. Returns
    (c0, a, Q) or None when h is not affine-quadratic.
    """
    s = 0.5
    c0 = float(h(center[None])[0])
    a = np.zeros(m)
    q = np.zeros((m, m))
    for i in range(m):
        ei = np.zeros(m)
        ei[i] = s
        hp = float(h((center + ei)[None])[0])
        hm = float(h((center - ei)[None])[0])
        a[i] = (hp - hm) / (2 * s)
        q[i, i] = (hp - 2 * c0 + hm) / (2 * s**2)
    for i in range(m):
        for j in range(i + 1, m):
            ei = np.zeros(m)
            ei[i] = s
            ej = np.zeros(m)
            ej[j] = s
            val = (float(h((center + ei + ej)[None])[0])
                   - float(h((center + ei - ej)[None])[0])
                   - float(h((center - ei + ej)[None])[0])
                   + float(h((center - ei - ej)[None])[0])) / (8 * s**2)
            q[i, j] = q[j, i] = val
    probe_rng = np.random.Generator(np.random.Philox(20240517))
    probes = center + probe_rng.standard_normal((16, m)) * (1.0 + np.abs(center))
    d = probes - center
    fitted = c0 + d @ a + np.einsum("ki,ij,kj->k", d, q, d)
    actual = np.asarray(h(probes), float)
    scale = max(1.0, np.abs(actual).max())
    if np.abs(fitted - actual).max() > 1e-8 * scale:
        return None
    return c0, a, q


def _closed_form_corrector(problem, x, eps, k, h, scheme) -> Optional[Corrector]:
    m = problem.dim_y
    center = drift_b1(problem, x)
    fit = _fit_affine_quadratic(h, center, m)
    if fit is None:
        return None
    _, a, q = fit
    a1 = diffusion_cov1(problem, x)
    const = 0.25 * eps * np.sum(a1 * q)

    def u(ys):
        d = np.asarray(ys, float) - center
        return -(d @ a) - 0.5 * np.einsum("...i,ij,...j->...", d, q, d) + const

    def grad_y(ys):
        d = np.asarray(ys, float) - center
        return -a - d @ q.T

    return Corrector(index=k, x=np.asarray(x, float), eps=eps, u=u,
                     grad_y=grad_y, grad_mean=-a, method="closed_form")


class _SemigroupCorrector:
    """u(y) = -int_0^infty E[h(fast process at t) | y] dt, Gauss-Legendre in t.

    The transition at time t is Gaussian with mean center + (y - center)
    e^{-t} and covariance (eps/2)(1 - e^{-2t}) a1, so each time node is one
    Gauss-Hermite pass. Panels of unit width are accumulated until the
    integrand magnitude stays below tolerance for three consecutive nodes.
    """

    def __init__(self, problem, x, eps, h, scheme, gl_order=16, max_panels=60,
                 tail_tol=1e-10):
        self.h = h
        self.center = drift_b1(problem, x)
        self.m = problem.dim_y
        a1 = diffusion_cov1(problem, x)
        self.s1 = psd_factor(a1)
        self.eps = eps
        if scheme is None:
            scheme = default_scheme(self.m)
        if scheme.kind != "gauss_hermite":
            raise ConfigurationError(
                "semigroup quadrature needs a gauss_hermite scheme"
            )
        self.nodes, self.weights = gauss_hermite_nodes(self.m, scheme.order,
                                                       scheme.node_cap)
        self.gl_nodes, self.gl_weights = np.polynomial.legendre.leggauss(gl_order)
        self.max_panels = max_panels
        self.tail_tol = tail_tol

    def _transition_average(self, ys, t):
        """(P_t h)(ys) for a (B, m) batch at one time node."""
        decay = math.exp(-t)
        spread = math.sqrt(0.5 * self.eps * (1.0 - decay * decay))
        means = self.center + (ys - self.center) * decay          # (B, m)
        pts = means[:, None, :] + spread * (self.nodes @ self.s1.T)[None, :, :]
        flat = pts.reshape(-1, self.m)
        vals = np.asarray(self.h(flat), float).reshape(len(ys), -1)
        return vals @ self.weights

    def u_batch(self, ys) -> np.ndarray:
        ys = np.atleast_2d(np.asarray(ys, dtype=float))
        total = np.zeros(len(ys))
        scale = max(1.0, float(np.abs(self._transition_average(ys, 0.0)).max()))
        quiet = 0
        for panel in range(self.max_panels):
            lo = float(panel)
            for gl_x, gl_w in zip(self.gl_nodes, self.gl_weights):
                t = lo + 0.5 * (gl_x + 1.0)
                vals = self._transition_average(ys, t)
                total += 0.5 * gl_w * vals
                if float(np.abs(vals).max()) < self.tail_tol * scale:
                    quiet += 1
                    if quiet >= 3:
                        return -total
                else:
                    quiet = 0
        raise ConfigurationError(
            "semigroup time quadrature did not converge within "
            f"{self.max_panels} unit panels"
        )


def _semigroup_corrector(problem, x, eps, k, h, scheme) -> Corrector:
    core = _SemigroupCorrector(problem, x, eps, h, scheme)
    m = problem.dim_y
    fd = 1e-5

    raw_u = core.u_batch
    # centering: subtract the invariant average of the raw solution
    inv_spread = math.sqrt(0.5 * eps)
    inv_pts = core.center + inv_spread * (core.nodes @ core.s1.T)
    centering = float(raw_u(inv_pts) @ core.weights)

    def u(ys):
        ys = np.atleast_2d(np.asarray(ys, dtype=float))
        return raw_u(ys) - centering

    def grad_y(ys):
        ys = np.atleast_2d(np.asarray(ys, dtype=float))
        b = len(ys)
        stacked = []
        for i in range(m):
            e = np.zeros(m)
            e[i] = fd
            stacked.append(ys + e)
            stacked.append(ys - e)
        vals = raw_u(np.concatenate(stacked, axis=0))
        grads = np.empty((b, m))
        for i in range(m):
            up = vals[2 * i * b:(2 * i + 1) * b]
            dn = vals[(2 * i + 1) * b:(2 * i + 2) * b]
            grads[:, i] = (up - dn) / (2 * fd)
        return grads

    grad_mean = grad_y(inv_pts).T @ core.weights
    return Corrector(index=k, x=np.asarray(x, float), eps=eps, u=u,
                     grad_y=grad_y, grad_mean=grad_mean,
                     method="semigroup_quadrature")


def solve_corrector(problem, x, eps: float, k: int, method: str = "auto",
                    scheme: Optional[QuadratureScheme] = None) -> Corrector:
    """Solve the frozen-x Poisson equation for slow coordinate k.

    ``method``: "closed_form" (RHS must be affine or quadratic in y),
    "semigroup_quadrature", or "auto" (closed form when the structure
    check passes, semigroup otherwise).
    """
    if not 0 <= k < problem.dim_x:
        raise ConfigurationError(f"coordinate index {k} out of range")
    if eps <= 0:
        raise ConfigurationError("solve_corrector needs eps > 0")
    h = _rhs_for_coordinate(problem, x, eps, k, scheme)
    if method not in ("auto", "closed_form", "semigroup_quadrature"):
        raise ConfigurationError(f"unknown corrector method {method!r}")
    if method in ("auto", "closed_form"):
        corr = _closed_form_corrector(problem, x, eps, k, h, scheme)
        if corr is not None:
            return corr
        if method == "closed_form":
            raise ConfigurationError(
                "closed_form corrector needs a right-hand side affine or "
                "quadratic in y"
            )
    return _semigroup_corrector(problem, x, eps, k, h, scheme)


def solve_correctors(problem, x, eps: float, method: str = "auto",
                     scheme: Optional[QuadratureScheme] = None) -> List[Corrector]:
    """Correctors for all slow coordinates at one frozen x."""
    return [solve_corrector(problem, x, eps, k, method, scheme)
            for k in range(problem.dim_x)]


# ---------------------------------------------------------------------------
# covariances of the two Gaussian inputs


def _cumulative_trapezoid(integrand_at, times):
    out = np.zeros((len(times),) + np.shape(integrand_at(0)))
    prev = np.asarray(integrand_at(0), float)
    for i in range(1, len(times)):
        cur = np.asarray(integrand_at(i), float)
        out[i] = out[i - 1] + 0.5 * (prev + cur) * (times[i] - times[i - 1])
        prev = cur
    return out


def n1_covariance(problem, averaged_traj: Trajectory, eps: float,
                  correctors: Optional[Callable] = None,
                  scheme: Optional[QuadratureScheme] = None) -> np.ndarray:
    """Covariance path of the corrector-driven Gaussian input.

    Entry (i, j) accumulates gbar_i^T a1 gbar_j along the averaged
    trajectory by the trapezoid rule, gbar_k the invariant average of
    grad_y u_k. ``correctors``: optional callable x -> list of Correctors
    (defaults to :func:`solve_correctors` with automatic method choice).
    Returns shape (len(times), n, n).
    """
    factory = correctors or (lambda xx: solve_correctors(problem, xx, eps, "auto", scheme))
    xs = averaged_traj.states_x
    grads = []
    for x in xs:
        cs = factory(x)
        grads.append(np.stack([c.grad_mean for c in cs], axis=1))  # (m, n)

    def integrand(i):
        a1 = diffusion_cov1(problem, xs[i])
        g = grads[i]
        return g.T @ a1 @ g

    return _cumulative_trapezoid(integrand, averaged_traj.times)


def n2_covariance(problem, averaged_traj: Trajectory, eps: float,
                  mode: str = "average_of_product",
                  scheme: Optional[QuadratureScheme] = None) -> np.ndarray:
    """Covariance path of the direct slow-noise Gaussian input.

    ``average_of_product`` integrates the invariant average of
    sigma2 sigma2^T (the quadratic-variation limit of the slow noise);
    ``product_of_averages`` integrates (avg sigma2)(avg sigma2)^T, the
    literal product of averaged factors. The modes coincide exactly when
    the slow noise does not depend on y.
    """
    if mode not in ("average_of_product", "product_of_averages"):
        raise ConfigurationError(f"unknown n2 mode {mode!r}")
    oracle = problem.moment_oracle
    if oracle is None:
        raise ConfigurationError("n2_covariance needs a moment oracle")
    if scheme is None:
        scheme = default_scheme(problem.dim_y)
    if scheme.kind != "gauss_hermite":
        raise ConfigurationError("n2_covariance needs a gauss_hermite scheme")
    nodes, weights = gauss_hermite_nodes(problem.dim_y, scheme.order, scheme.node_cap)
    xs = averaged_traj.states_x

    def integrand(i):
        x = xs[i]
        mean = drift_b1(problem, x)
        spread = psd_factor(0.5 * eps * diffusion_cov1(problem, x))
        pts = mean + nodes @ spread.T
        covs = np.asarray(oracle.a2(x, pts), float)  # (k, n, n)
        if mode == "average_of_product":
            return np.einsum("k,kij->ij", weights, covs)
        factors = psd_factor_batched(covs)
        sbar = np.einsum("k,kij->ij", weights, factors)
        return sbar @ sbar.T

    return _cumulative_trapezoid(integrand, averaged_traj.times)


def drift_jacobian(problem, x, eps: float,
                   scheme: Optional[QuadratureScheme] = None,
                   fd_step: Optional[float] = None) -> np.ndarray:
    """Jacobian of the averaged drift at x.

    Closed form on the (unclipped) quadratic family; otherwise central
    finite differences with step 1e-5 * (1 + |x|).
    """
    x = np.asarray(x, dtype=float)
    if isinstance(problem, QuadraticTestProblem) and problem.clip_radius is None:
        return -problem.hessian
    step = fd_step if fd_step is not None else 1e-5 * (1.0 + np.linalg.norm(x))
    n = problem.dim_x
    jac = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        up = averaged_drift(problem, x + e, eps, scheme)
        dn = averaged_drift(problem, x - e, eps, scheme)
        jac[:, i] = (up - dn) / (2 * step)
    return jac


# ---------------------------------------------------------------------------
# rescaled deviation and its limit


def rescaled_deviation(traj_coupled: Trajectory, traj_averaged: Trajectory,
                       eta: float) -> Trajectory:
    """(X_coupled(t) - X_averaged(t)) / sqrt(eta) on the shared grid."""
    ta = traj_averaged.times
    tc = traj_coupled.times
    if len(ta) != len(tc) or np.max(np.abs(ta - tc)) > 1e-12 * max(1.0, float(tc[-1])):
        raise GridAlignmentError(
            "coupled and averaged trajectories must share the time grid"
        )
    if eta <= 0:
        raise ConfigurationError("eta must be > 0")
    z = (traj_coupled.states_x - traj_averaged.states_x) / math.sqrt(eta)
    meta = dict(traj_coupled.meta, scheme="rescaled_deviation")
    return Trajectory(times=tc.copy(), states_x=z, meta=meta)


def _combined_covariance_path(problem, averaged_traj, eps, scheme, correctors,
                              n2_mode):
    c1 = n1_covariance(problem, averaged_traj, eps, correctors, scheme)
    c2 = n2_covariance(problem, averaged_traj, eps, n2_mode, scheme)
    return c1 + c2


def simulate_limit_deviation(problem, averaged_traj: Trajectory, eps: float,
                             rng: np.random.Generator,
                             dt: Optional[float] = None,
                             scheme: Optional[QuadratureScheme] = None,
                             correctors: Optional[Callable] = None,
                             n2_mode: str = "average_of_product",
                             cov_path: Optional[np.ndarray] = None,
                             jacobian: Optional[Callable] = None,
                             replicas: int = 1):
    """Euler scheme for the limiting deviation process on the averaged grid.

    dZ = M(X_s) Z dt + dN with N increments centered Gaussian of covariance
    C(t_{i+1}) - C(t_i), C the combined input covariance path (precomputable
    via ``cov_path``). Z(0) = 0. Returns a Trajectory when replicas == 1,
    else (times, Z) with Z of shape (len(times), replicas, n).
    """
    times = averaged_traj.times
    xs = averaged_traj.states_x
    if dt is not None:
        grid_dt = float(times[1] - times[0])
        if abs(dt - grid_dt) > 1e-12 * max(1.0, grid_dt):
            raise GridAlignmentError(
                f"dt = {dt:g} does not match the averaged grid step {grid_dt:g}"
            )
    if cov_path is None:
        cov_path = _combined_covariance_path(problem, averaged_traj, eps,
                                             scheme, correctors, n2_mode)
    jac = jacobian or (lambda xx: drift_jacobian(problem, xx, eps, scheme))
    n = problem.dim_x
    z = np.zeros((replicas, n))
    out = np.empty((len(times), replicas, n))
    out[0] = z
    for i in range(len(times) - 1):
        h = times[i + 1] - times[i]
        incr = cov_path[i + 1] - cov_path[i]
        lo = np.linalg.eigvalsh(0.5 * (incr + incr.T)).min()
        if lo < -1e-10 * max(1.0, np.abs(incr).max()):
            raise NotPSDError(
                f"covariance increment over [{times[i]:g}, {times[i + 1]:g}] "
                f"has eigenvalue {lo:.3e}",
                eigenvalue=float(lo),
            )
        factor = psd_factor_batched(0.5 * (incr + incr.T))
        noise = rng.standard_normal((replicas, n)) @ factor.T
        z = z + (z @ jac(xs[i]).T) * h + noise
        out[i + 1] = z
    if replicas == 1:
        meta = {"eps": eps, "eta": 0.0, "dt": float(times[1] - times[0]),
                "seed": None, "scheme": "limit_deviation_euler"}
        return Trajectory(times=times.copy(), states_x=out[:, 0, :], meta=meta)
    return times.copy(), out


def limit_deviation_covariance(problem, averaged_traj: Trajectory, eps: float,
                               scheme: Optional[QuadratureScheme] = None,
                               correctors: Optional[Callable] = None,
                               n2_mode: str = "average_of_product",
                               cov_path: Optional[np.ndarray] = None,
                               jacobian: Optional[Callable] = None) -> np.ndarray:
    """Covariance path of the limiting deviation process.

    Propagates P_{i+1} = (I + M h) P_i (I + M h)^T + (C_{i+1} - C_i), the
    exact second moment of the Euler scheme in
    :func:`simulate_limit_deviation`. Returns shape (len(times), n, n).
    """
    times = averaged_traj.times
    xs = averaged_traj.states_x
    if cov_path is None:
        cov_path = _combined_covariance_path(problem, averaged_traj, eps,
                                             scheme, correctors, n2_mode)
    jac = jacobian or (lambda xx: drift_jacobian(problem, xx, eps, scheme))
    n = problem.dim_x
    p = np.zeros((n, n))
    out = np.empty((len(times), n, n))
    out[0] = p
    eye = np.eye(n)
    for i in range(len(times) - 1):
        h = times[i + 1] - times[i]
        a = eye + jac(xs[i]) * h
        p = a @ p @ a.T + (cov_path[i + 1] - cov_path[i])
        out[i + 1] = p
    return out


# ---------------------------------------------------------------------------
# empirical deviation statistics


@dataclass
class DeviationStats:
    """Empirical mean/covariance of a deviation sample path family."""

    times: np.ndarray
    means: np.ndarray        # (k, n)
    covariances: np.ndarray  # (k, n, n)
    replicas: int
    seed: Optional[int] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.means = np.asarray(self.means, dtype=float)
        self.covariances = np.asarray(self.covariances, dtype=float)
        for c in self.covariances:
            scale = max(1.0, np.abs(c).max())
            sym = 0.5 * (c + c.T)
            if np.abs(c - c.T).max() > 1e-10 * scale:
                raise ConfigurationError("empirical covariance not symmetric")
            lo = np.linalg.eigvalsh(sym).min()
            if lo < -1e-10 * scale:
                raise NotPSDError(
                    f"empirical covariance has eigenvalue {lo:.3e}",
                    eigenvalue=float(lo),
                )

    @classmethod
    def from_samples(cls, times, samples, seed=None):
        """samples: (k, replicas, n) array of deviation states per time."""
        samples = np.asarray(samples, dtype=float)
        means = samples.mean(axis=1)
        centered = samples - means[:, None, :]
        covs = np.einsum("kri,krj->kij", centered, centered) / (samples.shape[1] - 1)
        covs = 0.5 * (covs + np.swapaxes(covs, -1, -2))
        return cls(times=times, means=means, covariances=covs,
                   replicas=samples.shape[1], seed=seed)

    def to_json(self) -> str:
        payload = {
            "times": self.times.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "replicas": self.replicas,
            "seed": self.seed,
        }
        return json.dumps(payload, indent=2, sort_keys=True)
