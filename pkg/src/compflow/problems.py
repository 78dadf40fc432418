"""Composition optimization problems: min_x (E f_v o E g_w)(x).

A :class:`CompositionProblem` bundles the per-index maps ``g_w`` (inner,
vector valued) and ``f_v`` (outer, scalar) with their derivatives, the index
distribution, and optionally a :class:`MomentOracle` giving the first two
moments in closed form:

* ``b1(x)   = E g_w(x)``                          (inner mean, fast drift)
* ``b2(x,y) = -E grad~g_w(x) grad f_v(y)``        (slow drift)
* ``a1(x)   = Cov g_w(x)``                        (fast noise covariance)
* ``a2(x,y) = Cov grad~g_w(x) grad f_v(y)``       (slow noise covariance)

When no oracle is supplied the same quantities are estimated by Monte Carlo
with independent ``w``/``v`` draws from a caller-supplied stream.

The built-in strongly convex test family (:func:`quadratic_problem`) uses
``g_w(x) = A_w x + b_w`` with finitely many, weight-centered noise atoms and
``f_v(y) = 0.5 |y - c_v|^2`` with finitely many targets. Everything is exact
there: moments, the composite minimizer, and the Hessian. An optional smooth
clipping radius saturates both arguments (radial tanh) for experiments that
need globally bounded coefficients; the stored minimizer/Hessian refer to
the unclipped objective.

Problem instances are frozen dataclasses, safe to share across replicas.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, NotPSDError

__all__ = [
    "MomentOracle",
    "FiniteIndexSet",
    "CompositionProblem",
    "QuadraticTestProblem",
    "quadratic_problem",
    "load_problem",
    "objective",
    "drift_b1",
    "drift_b2",
    "diffusion_cov1",
    "diffusion_cov2",
    "diffusion_sigma1",
    "diffusion_sigma2",
    "check_gradients",
]

_WEIGHT_TOL = 1e-12


@dataclass(frozen=True)
class MomentOracle:
    """Closed-form moment maps, vectorized over leading batch axes.

    ``b1``: (..., n) -> (..., m);  ``a1``: (..., n) -> (..., m, m)
    ``b2``: ((..., n), (..., m)) -> (..., n);  ``a2`` likewise to (..., n, n).
    ``b2_linear_in_y`` marks drifts that are affine in y, for which Gaussian
    averaging over y reduces to evaluation at the mean.
    """

    b1: Callable[[np.ndarray], np.ndarray]
    b2: Callable[[np.ndarray, np.ndarray], np.ndarray]
    a1: Callable[[np.ndarray], np.ndarray]
    a2: Callable[[np.ndarray, np.ndarray], np.ndarray]
    b2_linear_in_y: bool = False


@dataclass(frozen=True)
class FiniteIndexSet:
    """Finite discrete index distribution with independent w and v draws."""

    w_labels: tuple
    w_weights: np.ndarray
    v_labels: tuple
    v_weights: np.ndarray

    def __post_init__(self):
        for name in ("w_weights", "v_weights"):
            wts = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, wts)
            if wts.ndim != 1 or wts.size == 0:
                raise ConfigurationError(f"{name} must be a nonempty 1-d array")
            if np.any(wts < 0):
                raise ConfigurationError(f"{name} must be nonnegative")
            if abs(wts.sum() - 1.0) > _WEIGHT_TOL:
                raise ConfigurationError(
                    f"{name} must sum to 1 within {_WEIGHT_TOL:g} "
                    f"(got {wts.sum()!r})"
                )

    def sample(self, rng: np.random.Generator):
        """One (w, v) pair."""
        i = rng.choice(len(self.w_labels), p=self.w_weights)
        j = rng.choice(len(self.v_labels), p=self.v_weights)
        return self.w_labels[i], self.v_labels[j]

    def sample_indices(self, rng: np.random.Generator, size: int):
        """Batched positional indices (iw, iv), each shape (size,)."""
        iw = rng.choice(len(self.w_labels), p=self.w_weights, size=size)
        iv = rng.choice(len(self.v_labels), p=self.v_weights, size=size)
        return iw, iv


@dataclass(frozen=True)
class CompositionProblem:
    """A composition optimization problem with per-index maps.

    ``g(w, x)`` maps to R^m, ``f(v, y)`` to a scalar; ``grad_g_tilde(w, x)``
    is the n x m matrix of component gradients of g_w and ``grad_f(v, y)``
    the gradient m-vector of f_v. ``index_sampler(rng)`` draws one (w, v)
    pair. All randomness enters through caller-supplied streams.
    """

    dim_x: int
    dim_y: int
    index_sampler: Callable[[np.random.Generator], tuple]
    g: Callable[[object, np.ndarray], np.ndarray]
    grad_g_tilde: Callable[[object, np.ndarray], np.ndarray]
    f: Callable[[object, np.ndarray], float]
    grad_f: Callable[[object, np.ndarray], np.ndarray]
    moment_oracle: Optional[MomentOracle] = field(default=None, kw_only=True)
    index_atoms: Optional[FiniteIndexSet] = field(default=None, kw_only=True)
    sample_budget: int = field(default=10_000, kw_only=True)

    def __post_init__(self):
        if self.dim_x < 1 or self.dim_y < 1:
            raise ConfigurationError("dim_x and dim_y must be positive")


# ---------------------------------------------------------------------------
# smooth radial clipping (optional boundedness device for the test family)


def _soft_clip(z: np.ndarray, radius: float) -> np.ndarray:
    """z * R*tanh(|z|/R)/|z|, batched over leading axes; |clip(z)| < R."""
    r = np.linalg.norm(z, axis=-1, keepdims=True)
    s = np.where(r > 1e-12, radius * np.tanh(r / radius) / np.where(r > 0, r, 1.0), 1.0)
    return s * z


def _soft_clip_jac(z: np.ndarray, radius: float) -> np.ndarray:
    """Jacobian of :func:`_soft_clip`: s(r) I + (s'(r)/r) z z^T (symmetric)."""
    z = np.asarray(z, dtype=float)
    k = z.shape[-1]
    r = np.linalg.norm(z, axis=-1, keepdims=True)
    safe = np.where(r > 1e-12, r, 1.0)
    t = np.tanh(safe / radius)
    s = radius * t / safe
    sp = ((1.0 - t * t) * safe - radius * t) / safe**2
    eye = np.eye(k)
    outer = z[..., :, None] * z[..., None, :]
    jac = s[..., None] * eye + (sp / safe)[..., None] * outer
    small = (r <= 1e-12)[..., None]
    return np.where(small, eye, jac)


# ---------------------------------------------------------------------------
# strongly convex quadratic test family


@dataclass(frozen=True)
class QuadraticTestProblem(CompositionProblem):
    """Affine inner maps, quadratic outer maps, exact moment oracles.

    g_w(x) = (a_mean + a_noise[i]) x + (b_mean + b_noise[j]) with the pair
    w = (i, j) drawn from the product of the atom weights, and
    f_v(y) = 0.5 |y - targets[v]|^2. The composite objective is the strongly
    convex quadratic 0.5 |a_mean x + b_mean - c|^2 + const with c the
    weighted target mean; ``minimizer`` and ``hessian`` store its closed
    form (for the unclipped family).
    """

    a_mean: np.ndarray = None
    a_noise: np.ndarray = None
    a_weights: np.ndarray = None
    b_mean: np.ndarray = None
    b_noise: np.ndarray = None
    b_weights: np.ndarray = None
    targets: np.ndarray = None
    target_weights: np.ndarray = None
    target_mean: np.ndarray = None
    minimizer: np.ndarray = None
    hessian: np.ndarray = None
    clip_radius: Optional[float] = None

    def to_config(self) -> dict:
        """JSON-serializable description accepted by :func:`load_problem`."""
        cfg = {
            "dim_x": self.dim_x,
            "dim_y": self.dim_y,
            "a_mean": self.a_mean.tolist(),
            "b_mean": self.b_mean.tolist(),
            "targets": self.targets.tolist(),
            "target_weights": self.target_weights.tolist(),
        }
        if len(self.a_noise):
            cfg["a_noise"] = self.a_noise.tolist()
            cfg["a_weights"] = self.a_weights.tolist()
        if len(self.b_noise):
            cfg["b_noise"] = self.b_noise.tolist()
            cfg["b_weights"] = self.b_weights.tolist()
        if self.clip_radius is not None:
            cfg["clip_radius"] = self.clip_radius
        return cfg


def _check_centered(atoms: np.ndarray, weights: np.ndarray, name: str) -> None:
    mean = np.tensordot(weights, atoms, axes=(0, 0))
    if np.max(np.abs(mean)) > 1e-10:
        raise ConfigurationError(
            f"{name} atoms must have weighted mean 0 (got max |mean| = "
            f"{np.max(np.abs(mean)):.3e}); fold the mean into the mean term"
        )


def quadratic_problem(
    a_mean,
    b_mean,
    targets,
    target_weights=None,
    a_noise=(),
    a_weights=None,
    b_noise=(),
    b_weights=None,
    clip_radius: Optional[float] = None,
    sample_budget: int = 10_000,
) -> QuadraticTestProblem:
    """Build the strongly convex quadratic test family.

    ``a_mean`` is m x n with full column rank (so the composite Hessian
    a_mean^T a_mean is SPD); noise atoms must be weight-centered so that
    E g_w(x) = a_mean x + b_mean exactly. Weights default to uniform.
    """
    a_mean = np.asarray(a_mean, dtype=float)
    if a_mean.ndim != 2:
        raise ConfigurationError("a_mean must be an m x n matrix")
    m, n = a_mean.shape
    b_mean = np.asarray(b_mean, dtype=float).reshape(m)
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if targets.shape[1] != m:
        raise ConfigurationError("targets must be rows of length m")

    def _weights(w, count, name):
        if w is None:
            return np.full(count, 1.0 / count)
        w = np.asarray(w, dtype=float)
        if w.shape != (count,):
            raise ConfigurationError(f"{name} must have length {count}")
        return w

    a_noise = np.asarray(a_noise, dtype=float).reshape(-1, m, n) if len(a_noise) else np.zeros((0, m, n))
    b_noise = np.asarray(b_noise, dtype=float).reshape(-1, m) if len(b_noise) else np.zeros((0, m))
    a_weights = _weights(a_weights, len(a_noise), "a_weights") if len(a_noise) else np.zeros(0)
    b_weights = _weights(b_weights, len(b_noise), "b_weights") if len(b_noise) else np.zeros(0)
    target_weights = _weights(target_weights, len(targets), "target_weights")

    if len(a_noise):
        _check_centered(a_noise, a_weights, "a_noise")
    if len(b_noise):
        _check_centered(b_noise, b_weights, "b_noise")

    hessian = a_mean.T @ a_mean
    eigvals = np.linalg.eigvalsh(hessian)
    if eigvals.min() <= 1e-12 * max(1.0, eigvals.max()):
        raise ConfigurationError(
            "a_mean^T a_mean must be positive definite (strong convexity); "
            f"min eigenvalue {eigvals.min():.3e}"
        )
    c_bar = target_weights @ targets
    minimizer = np.linalg.solve(hessian, a_mean.T @ (c_bar - b_mean))

    # effective atoms: A perturbation index i, b perturbation index j
    a_atoms = a_mean[None] + a_noise if len(a_noise) else a_mean[None]
    a_atom_w = a_weights if len(a_noise) else np.array([1.0])
    b_atoms = b_mean[None] + b_noise if len(b_noise) else b_mean[None]
    b_atom_w = b_weights if len(b_noise) else np.array([1.0])

    w_labels = tuple((i, j) for i in range(len(a_atoms)) for j in range(len(b_atoms)))
    w_weights = np.array([a_atom_w[i] * b_atom_w[j] for (i, j) in w_labels])
    w_weights = w_weights / w_weights.sum()
    v_labels = tuple(range(len(targets)))

    clip = clip_radius

    def g(w, x):
        i, j = w
        arg = _soft_clip(np.asarray(x, float), clip) if clip else np.asarray(x, float)
        return a_atoms[i] @ arg + b_atoms[j]

    def grad_g_tilde(w, x):
        i, _ = w
        if clip:
            return _soft_clip_jac(np.asarray(x, float), clip) @ a_atoms[i].T
        return np.broadcast_to(a_atoms[i].T, (n, m)).copy()

    def f(v, y):
        arg = _soft_clip(np.asarray(y, float), clip) if clip else np.asarray(y, float)
        d = arg - targets[v]
        return 0.5 * float(d @ d)

    def grad_f(v, y):
        y = np.asarray(y, float)
        if clip:
            return _soft_clip_jac(y, clip) @ (_soft_clip(y, clip) - targets[v])
        return y - targets[v]

    def _cx(x):
        return _soft_clip(x, clip) if clip else x

    def b1(x):
        x = np.asarray(x, dtype=float)
        return _cx(x) @ a_mean.T + b_mean

    # x/y-independent covariance pieces, assembled once
    b_cov = np.einsum("j,jm,jl->ml", b_atom_w, b_noise, b_noise) if len(b_noise) else np.zeros((m, m))
    target_cov = np.einsum("v,vm,vl->ml", target_weights,
                           targets - c_bar, targets - c_bar)
    # Cov(A_w^T (y - c_v)) = N-atom outer products in (y - c_bar) plus this
    # constant: the mean-map and noise-atom images of the target spread.
    a2_const = a_mean.T @ target_cov @ a_mean
    for wi, ni in zip(a_weights, a_noise):
        a2_const = a2_const + wi * (ni.T @ target_cov @ ni)

    def a1(x):
        x = np.asarray(x, dtype=float)
        cx = _cx(x)
        cov = np.broadcast_to(b_cov, x.shape[:-1] + (m, m)).copy()
        for wi, ni in zip(a_weights, a_noise):
            u = cx @ ni.T
            cov += wi * (u[..., :, None] * u[..., None, :])
        return cov

    def _outer_grad_mean(y):
        # E_v grad f_v at y, batched: (..., m)
        y = np.asarray(y, dtype=float)
        if clip:
            cy = _soft_clip(y, clip)
            jy = _soft_clip_jac(y, clip)
            return np.einsum("...ml,...l->...m", jy, cy - c_bar)
        return y - c_bar

    def b2(x, y):
        x = np.asarray(x, dtype=float)
        base = -(_outer_grad_mean(y) @ a_mean)
        if clip:
            jx = _soft_clip_jac(x, clip)
            return np.einsum("...nk,...k->...n", jx, base)
        return np.broadcast_to(base, np.broadcast_shapes(x.shape[:-1], base.shape[:-1]) + (n,))

    def _a2_plain(y):
        d = np.asarray(y, dtype=float) - c_bar
        cov = np.broadcast_to(a2_const, d.shape[:-1] + (n, n)).copy()
        for wi, ni in zip(a_weights, a_noise):
            u = d @ ni
            cov += wi * (u[..., :, None] * u[..., None, :])
        return cov

    def _a2_clipped(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        jy = _soft_clip_jac(y, clip)
        q = np.einsum("...ml,...vl->...vm", jy, _soft_clip(y, clip)[..., None, :] - targets)
        sq = np.einsum("v,...vm,...vl->...ml", target_weights, q, q)
        qbar = np.einsum("v,...vm->...m", target_weights, q)
        t = np.einsum("mn,...ml,lp->...np", a_mean, sq, a_mean)
        for wi, ni in zip(a_weights, a_noise):
            t = t + wi * np.einsum("mn,...ml,lp->...np", ni, sq, ni)
        mbar = np.einsum("mn,...m->...n", a_mean, qbar)
        cov = t - mbar[..., :, None] * mbar[..., None, :]
        jx = _soft_clip_jac(x, clip)
        return np.einsum("...ab,...bc,...dc->...ad", jx, cov, jx)

    def a2(x, y):
        if clip:
            return _a2_clipped(x, y)
        d = np.asarray(y, dtype=float)
        cov = _a2_plain(d)
        xb = np.asarray(x, dtype=float).shape[:-1]
        if np.broadcast_shapes(xb, d.shape[:-1]) != d.shape[:-1]:
            cov = np.broadcast_to(cov, np.broadcast_shapes(xb, d.shape[:-1]) + (n, n)).copy()
        return cov

    oracle = MomentOracle(b1=b1, b2=b2, a1=a1, a2=a2, b2_linear_in_y=clip is None)
    atoms = FiniteIndexSet(
        w_labels=w_labels, w_weights=w_weights,
        v_labels=v_labels, v_weights=target_weights,
    )

    return QuadraticTestProblem(
        dim_x=n,
        dim_y=m,
        index_sampler=atoms.sample,
        g=g,
        grad_g_tilde=grad_g_tilde,
        f=f,
        grad_f=grad_f,
        moment_oracle=oracle,
        index_atoms=atoms,
        sample_budget=sample_budget,
        a_mean=a_mean,
        a_noise=a_noise,
        a_weights=a_weights,
        b_mean=b_mean,
        b_noise=b_noise,
        b_weights=b_weights,
        targets=targets,
        target_weights=target_weights,
        target_mean=c_bar,
        minimizer=minimizer,
        hessian=hessian,
        clip_radius=clip_radius,
    )


_PROBLEM_KEYS = {
    "dim_x", "dim_y", "a_mean", "a_noise", "a_weights",
    "b_mean", "b_noise", "b_weights", "targets", "target_weights",
    "clip_radius", "sample_budget",
}


def load_problem(config: dict) -> QuadraticTestProblem:
    """Build a quadratic test problem from a parsed JSON config.

    Required keys: dim_x, dim_y, a_mean, b_mean, targets. Optional:
    a_noise/a_weights, b_noise/b_weights, target_weights, clip_radius,
    sample_budget. Unknown keys are rejected; weights must sum to 1 within
    1e-12. Matrices are nested row-major lists.
    """
    if not isinstance(config, dict):
        raise ConfigurationError("problem config must be a JSON object")
    unknown = set(config) - _PROBLEM_KEYS
    if unknown:
        raise ConfigurationError(f"unknown problem config keys: {sorted(unknown)}")
    for key in ("dim_x", "dim_y", "a_mean", "b_mean", "targets"):
        if key not in config:
            raise ConfigurationError(f"problem config missing required key {key!r}")
    prob = quadratic_problem(
        a_mean=config["a_mean"],
        b_mean=config["b_mean"],
        targets=config["targets"],
        target_weights=config.get("target_weights"),
        a_noise=config.get("a_noise", ()),
        a_weights=config.get("a_weights"),
        b_noise=config.get("b_noise", ()),
        b_weights=config.get("b_weights"),
        clip_radius=config.get("clip_radius"),
        sample_budget=config.get("sample_budget", 10_000),
    )
    if prob.dim_x != config["dim_x"] or prob.dim_y != config["dim_y"]:
        raise ConfigurationError(
            "declared dim_x/dim_y do not match the shape of a_mean "
            f"({prob.dim_y} x {prob.dim_x})"
        )
    return prob


# ---------------------------------------------------------------------------
# moment operations (oracle path with Monte Carlo fallback)


def _require_sampling(problem: CompositionProblem, rng, what: str):
    if rng is None:
        raise ConfigurationError(
            f"{what}: problem has no moment oracle and no random stream was "
            "supplied for Monte Carlo estimation"
        )
    if problem.sample_budget < 1:
        raise ConfigurationError(f"{what}: sample budget must be >= 1")


def _mc_pairs(problem, rng, budget):
    return [problem.index_sampler(rng) for _ in range(budget)]


def drift_b1(problem: CompositionProblem, x, rng=None) -> np.ndarray:
    """E g_w(x); Monte Carlo over the configured budget when no oracle."""
    x = np.asarray(x, dtype=float)
    if problem.moment_oracle is not None:
        return np.asarray(problem.moment_oracle.b1(x), dtype=float)
    _require_sampling(problem, rng, "drift_b1")
    draws = np.stack([problem.g(w, x) for w, _ in _mc_pairs(problem, rng, problem.sample_budget)])
    return draws.mean(axis=0)


def drift_b2(problem: CompositionProblem, x, y, rng=None) -> np.ndarray:
    """-E grad~g_w(x) grad f_v(y) with independent w, v draws."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if problem.moment_oracle is not None:
        return np.asarray(problem.moment_oracle.b2(x, y), dtype=float)
    _require_sampling(problem, rng, "drift_b2")
    total = np.zeros(problem.dim_x)
    for w, v in _mc_pairs(problem, rng, problem.sample_budget):
        total += problem.grad_g_tilde(w, x) @ problem.grad_f(v, y)
    return -total / problem.sample_budget


def diffusion_cov1(problem: CompositionProblem, x, rng=None) -> np.ndarray:
    """Cov g_w(x), the fast-noise covariance (m x m)."""
    x = np.asarray(x, dtype=float)
    if problem.moment_oracle is not None:
        return np.asarray(problem.moment_oracle.a1(x), dtype=float)
    _require_sampling(problem, rng, "diffusion_cov1")
    draws = np.stack([problem.g(w, x) for w, _ in _mc_pairs(problem, rng, problem.sample_budget)])
    centered = draws - draws.mean(axis=0)
    return centered.T @ centered / len(draws)


def diffusion_cov2(problem: CompositionProblem, x, y, rng=None) -> np.ndarray:
    """Cov grad~g_w(x) grad f_v(y), the slow-noise covariance (n x n)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if problem.moment_oracle is not None:
        return np.asarray(problem.moment_oracle.a2(x, y), dtype=float)
    _require_sampling(problem, rng, "diffusion_cov2")
    draws = np.stack([
        problem.grad_g_tilde(w, x) @ problem.grad_f(v, y)
        for w, v in _mc_pairs(problem, rng, problem.sample_budget)
    ])
    centered = draws - draws.mean(axis=0)
    return centered.T @ centered / len(draws)


def _sigma_from_cov(cov: np.ndarray, jitter: float, what: str) -> np.ndarray:
    from .gaussian_tools import psd_factor  # local import, no cycle at call time

    cov = np.asarray(cov, dtype=float)
    if jitter:
        cov = cov + jitter * np.eye(cov.shape[-1])
    try:
        return psd_factor(cov)
    except NotPSDError as exc:
        raise NotPSDError(f"{what}: {exc}", eigenvalue=exc.eigenvalue) from exc


def diffusion_sigma1(problem: CompositionProblem, x, rng=None, jitter: float = 0.0) -> np.ndarray:
    """Symmetric PSD factor S with S S^T = Cov g_w(x)."""
    return _sigma_from_cov(diffusion_cov1(problem, x, rng), jitter, "diffusion_sigma1")


def diffusion_sigma2(problem: CompositionProblem, x, y, rng=None, jitter: float = 0.0) -> np.ndarray:
    """Symmetric PSD factor S with S S^T = Cov grad~g_w(x) grad f_v(y)."""
    return _sigma_from_cov(diffusion_cov2(problem, x, y, rng), jitter, "diffusion_sigma2")


def objective(problem: CompositionProblem, x, rng=None, return_se: bool = False):
    """(E f_v)(E g_w(x)).

    With a moment oracle and finite v atoms the value is exact. The Monte
    Carlo path uses the plug-in estimator f-bar(b1-hat) and returns
    (value, standard error) when ``return_se`` is set; the error combines
    the v-sampling spread with a delta-method term for the inner mean.
    """
    x = np.asarray(x, dtype=float)
    if problem.moment_oracle is not None and problem.index_atoms is not None:
        inner = drift_b1(problem, x)
        atoms = problem.index_atoms
        value = float(sum(
            wt * problem.f(v, inner) for v, wt in zip(atoms.v_labels, atoms.v_weights)
        ))
        return (value, 0.0) if return_se else value

    _require_sampling(problem, rng, "objective")
    budget = problem.sample_budget
    g_draws = np.stack([problem.g(problem.index_sampler(rng)[0], x) for _ in range(budget)])
    inner = g_draws.mean(axis=0)
    inner_se = g_draws.std(axis=0, ddof=1) / np.sqrt(budget)
    f_draws = np.array([problem.f(problem.index_sampler(rng)[1], inner) for _ in range(budget)])
    value = float(f_draws.mean())
    # delta method through the inner mean, FD gradient of the v-averaged f
    step = 1e-5 * (1.0 + np.abs(inner))
    grad = np.zeros(problem.dim_y)
    vs = [problem.index_sampler(rng)[1] for _ in range(min(budget, 256))]
    for i in range(problem.dim_y):
        e = np.zeros(problem.dim_y)
        e[i] = step[i]
        up = np.mean([problem.f(v, inner + e) for v in vs])
        dn = np.mean([problem.f(v, inner - e) for v in vs])
        grad[i] = (up - dn) / (2 * step[i])
    se = float(np.sqrt(f_draws.var(ddof=1) / budget + np.sum((grad * inner_se) ** 2)))
    return (value, se) if return_se else value


def check_gradients(problem: CompositionProblem, rng, n_probes: int = 8,
                    rtol: float = 1e-5, scale: float = 1.0) -> float:
    """Max relative gap between supplied gradients and central differences.

    Probes random (w, v, x, y); raises AssertionError above ``rtol``.
    """
    worst = 0.0
    h = 1e-6
    for _ in range(n_probes):
        w, v = problem.index_sampler(rng)
        x = scale * rng.standard_normal(problem.dim_x)
        y = scale * rng.standard_normal(problem.dim_y)

        jac = problem.grad_g_tilde(w, x)  # n x m
        fd = np.zeros_like(jac)
        for i in range(problem.dim_x):
            e = np.zeros(problem.dim_x)
            e[i] = h
            fd[i, :] = (problem.g(w, x + e) - problem.g(w, x - e)) / (2 * h)
        denom = max(1.0, np.abs(jac).max())
        worst = max(worst, np.abs(jac - fd).max() / denom)

        gf = problem.grad_f(v, y)
        fdf = np.zeros_like(gf)
        for i in range(problem.dim_y):
            e = np.zeros(problem.dim_y)
            e[i] = h
            fdf[i] = (problem.f(v, y + e) - problem.f(v, y - e)) / (2 * h)
        denom = max(1.0, np.abs(gf).max())
        worst = max(worst, np.abs(gf - fdf).max() / denom)
    if worst > rtol:
        raise AssertionError(
            f"supplied gradients disagree with central differences: "
            f"max relative gap {worst:.3e} > {rtol:g}"
        )
    return worst
