"""Exact Gaussian machinery for the frozen-x fast process.

The fast variable, for frozen slow state x, is the mean-reverting linear
diffusion

    d yf = (b1(x) - yf) dt + sqrt(eps) * sigma1(x) dW,

whose invariant law is N(b1(x), (eps/2) a1(x)) and whose transition over any
time span is Gaussian in closed form. This module provides that law
(:func:`invariant_measure`), exact transition sampling (:func:`ou_exact_step`),
the averaging operator that integrates a function of (x, y) over the
invariant law (:func:`average_under_invariant`), and the symmetric PSD
square root used everywhere a covariance must be factored
(:func:`psd_factor`).

Quadrature: Gauss-Hermite tensor rules in whitened coordinates (exact for
polynomials, default for dim_y <= 3) or plain Monte Carlo with a standard
error estimate. Degenerate covariance directions collapse to the mean slice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, NotPSDError
from .problems import CompositionProblem, diffusion_cov1, drift_b1

__all__ = [
    "GaussianMeasure",
    "QuadratureScheme",
    "default_scheme",
    "psd_factor",
    "psd_factor_batched",
    "invariant_measure",
    "ou_exact_step",
    "gauss_hermite_nodes",
    "average_under_invariant",
]


@dataclass(frozen=True)
class GaussianMeasure:
    """Mean vector plus symmetric PSD covariance."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if cov.shape != (mean.size, mean.size):
            raise ConfigurationError("covariance shape does not match mean")
        scale = max(np.abs(cov).max(), 1e-300)
        if np.abs(cov - cov.T).max() > 1e-12 * scale:
            raise ConfigurationError("covariance must be symmetric")
        lo = np.linalg.eigvalsh(cov).min()
        if lo < -1e-10 * scale:
            raise NotPSDError(
                f"covariance has eigenvalue {lo:.3e} below PSD tolerance",
                eigenvalue=lo,
            )

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
        factor = psd_factor(self.cov)
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.standard_normal(shape) @ factor.T + self.mean


@dataclass(frozen=True)
class QuadratureScheme:
    """How to integrate against a Gaussian: tensor Gauss-Hermite or Monte Carlo.

    ``order`` is nodes per dimension (gauss_hermite); ``samples`` the draw
    count (monte_carlo, needs ``rng``). ``node_cap`` bounds the tensor size.
    """

    kind: str = "gauss_hermite"
    order: int = 20
    samples: int = 100_000
    rng: Optional[np.random.Generator] = None
    node_cap: int = 100_000

    def __post_init__(self):
        if self.kind not in ("gauss_hermite", "monte_carlo"):
            raise ConfigurationError(f"unknown quadrature kind {self.kind!r}")
        if self.kind == "gauss_hermite" and self.order < 1:
            raise ConfigurationError("gauss_hermite order must be >= 1")
        if self.kind == "monte_carlo" and self.samples < 2:
            raise ConfigurationError("monte_carlo needs at least 2 samples")


def default_scheme(dim: int) -> QuadratureScheme:
    """Gauss-Hermite order 20 up to dimension 3, Monte Carlo beyond.

    Tensor rules grow as order**dim; past three dimensions the sampling
    estimate is the practical choice.
    """
    if dim <= 3:
        return QuadratureScheme(kind="gauss_hermite", order=20)
    return QuadratureScheme(kind="monte_carlo", samples=100_000)


# ---------------------------------------------------------------------------
# PSD square roots


def psd_factor(cov: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root S with S @ S = symmetrized(cov).

    Eigenvalues in [-1e-10 * |cov|, 0) are clipped to zero; an eigenvalue
    below -1e-6 * |cov| raises :class:`NotPSDError` reporting it.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ConfigurationError("psd_factor expects a square matrix")
    scale = max(np.abs(cov).max(), 1e-300)
    if np.abs(cov - cov.T).max() > 1e-8 * scale:
        raise ConfigurationError("psd_factor expects a (nearly) symmetric matrix")
    sym = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(sym)
    if vals.min() < -1e-6 * scale:
        raise NotPSDError(
            f"matrix is not PSD: eigenvalue {vals.min():.6e} "
            f"(tolerance {-1e-6 * scale:.1e})",
            eigenvalue=float(vals.min()),
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def psd_factor_batched(covs: np.ndarray) -> np.ndarray:
    """Symmetric PSD square roots of a (..., k, k) stack.

    Closed forms for k = 1, 2 (the hot path in the vectorized simulators),
    batched eigendecomposition otherwise. Agrees with :func:`psd_factor`
    entry by entry up to roundoff. Negative eigenvalues are clipped at 0.
    """
    covs = np.asarray(covs, dtype=float)
    k = covs.shape[-1]
    if k == 1:
        return np.sqrt(np.clip(covs, 0.0, None))
    if k == 2:
        a = covs[..., 0, 0]
        b = 0.5 * (covs[..., 0, 1] + covs[..., 1, 0])
        d = covs[..., 1, 1]
        det = np.clip(a * d - b * b, 0.0, None)
        s = np.sqrt(det)
        tr = np.clip(a + d, 0.0, None)
        denom = np.sqrt(np.clip(tr + 2.0 * s, 0.0, None))
        safe = denom > 1e-150
        inv = np.where(safe, 1.0 / np.where(safe, denom, 1.0), 0.0)
        out = np.empty_like(covs)
        out[..., 0, 0] = (np.clip(a, 0.0, None) + s) * inv
        out[..., 1, 1] = (np.clip(d, 0.0, None) + s) * inv
        out[..., 0, 1] = b * inv
        out[..., 1, 0] = b * inv
        return out
    sym = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return np.einsum("...ij,...j,...kj->...ik", vecs, np.sqrt(vals), vecs)


# ---------------------------------------------------------------------------
# invariant law and exact transitions


def invariant_measure(problem: CompositionProblem, x, eps: float, rng=None) -> GaussianMeasure:
    """Stationary law of the frozen-x fast process: N(b1(x), (eps/2) a1(x)).

    eps = 0 degenerates to the point mass at b1(x).
    """
    if eps < 0:
        raise ConfigurationError("eps must be >= 0")
    mean = drift_b1(problem, x, rng)
    cov = 0.5 * eps * diffusion_cov1(problem, x, rng)
    return GaussianMeasure(mean=mean, cov=cov)


def ou_exact_step(problem: CompositionProblem, x_frozen, eps: float, y0,
                  dt: float, rng: np.random.Generator) -> np.ndarray:
    """Exact transition sample of the frozen-x fast process over time dt.

    The law is Gaussian with mean b1 + (y0 - b1) e^{-dt} and covariance
    (eps/2)(1 - e^{-2 dt}) a1(x); no discretization error at any dt.
    ``y0`` may be (m,) or batched (r, m); the output matches.
    """
    if dt < 0:
        raise ConfigurationError("dt must be >= 0")
    y0 = np.asarray(y0, dtype=float)
    b1 = drift_b1(problem, x_frozen)
    mean = b1 + (y0 - b1) * np.exp(-dt)
    var_scale = 0.5 * eps * (1.0 - np.exp(-2.0 * dt))
    if var_scale == 0.0:
        return mean
    factor = psd_factor(var_scale * diffusion_cov1(problem, x_frozen))
    noise = rng.standard_normal(y0.shape)
    return mean + noise @ factor.T


# ---------------------------------------------------------------------------
# averaging operator


def gauss_hermite_nodes(dim: int, order: int, node_cap: int = 100_000):
    """Probabilists' Gauss-Hermite tensor rule for N(0, I_dim).

    Returns (nodes (k, dim), weights (k,)) with weights summing to 1.
    """
    if order**dim > node_cap:
        raise ConfigurationError(
            f"gauss_hermite tensor rule needs {order**dim} nodes "
            f"(cap {node_cap}); use a monte_carlo scheme instead"
        )
    xs, ws = np.polynomial.hermite_e.hermegauss(order)
    ws = ws / ws.sum()
    grids = np.meshgrid(*([xs] * dim), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    wgrids = np.meshgrid(*([ws] * dim), indexing="ij")
    weights = np.ones(nodes.shape[0])
    for g in wgrids:
        weights = weights * g.ravel()
    return nodes, weights


def gaussian_quadrature_points(measure: GaussianMeasure, scheme: QuadratureScheme):
    """Sample/quadrature points and weights for integrating against a Gaussian."""
    if scheme.kind == "gauss_hermite":
        nodes, weights = gauss_hermite_nodes(measure.dim, scheme.order, scheme.node_cap)
        factor = psd_factor(measure.cov)
        return measure.mean + nodes @ factor.T, weights
    if scheme.rng is None:
        raise ConfigurationError("monte_carlo quadrature needs scheme.rng")
    pts = measure.sample(scheme.rng, size=scheme.samples)
    return pts, np.full(scheme.samples, 1.0 / scheme.samples)


def average_under_invariant(q: Callable, problem: CompositionProblem, x,
                            eps: float, scheme: Optional[QuadratureScheme] = None):
    """Average q(x, Y) over the frozen-x invariant Gaussian.

    ``q(x, ys)`` must accept a batch ys of shape (k, m) and return shape
    (k, ...) (scalar, vector or matrix values). Gauss-Hermite returns the
    plain average; monte_carlo returns (average, standard error).
    """
    x = np.asarray(x, dtype=float)
    if scheme is None:
        scheme = default_scheme(problem.dim_y)
    measure = invariant_measure(problem, x, eps)
    points, weights = gaussian_quadrature_points(measure, scheme)
    values = np.asarray(q(x, points), dtype=float)
    if values.shape[0] != points.shape[0]:
        raise ConfigurationError(
            "q must be vectorized over the y batch: expected leading axis "
            f"{points.shape[0]}, got shape {values.shape}"
        )
    wshape = (-1,) + (1,) * (values.ndim - 1)
    mean = np.sum(values * weights.reshape(wshape), axis=0)
    if scheme.kind == "gauss_hermite":
        return mean
    resid = values - mean
    se = np.sqrt(np.sum((resid**2) * weights.reshape(wshape), axis=0) / (scheme.samples - 1))
    return mean, se
