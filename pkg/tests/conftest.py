import numpy as np
import pytest

from compflow.problems import (
    CompositionProblem,
    FiniteIndexSet,
    MomentOracle,
    quadratic_problem,
)

A_MEAN = np.array([[1.0, 0.3], [0.0, 1.5]])
A_NOISE = np.array([[0.2, 0.0], [0.1, 0.3]])
B_MEAN = np.array([0.1, -0.2])
B_NOISE = np.array([0.3, 0.15])
TARGETS = np.array([[1.0, 0.5], [0.4, 1.1]])
TARGET_WEIGHTS = np.array([0.6, 0.4])


def make_quad_problem(**overrides):
    kwargs = dict(
        a_mean=A_MEAN,
        a_noise=[A_NOISE, -A_NOISE],
        b_mean=B_MEAN,
        b_noise=[B_NOISE, -B_NOISE],
        targets=TARGETS,
        target_weights=TARGET_WEIGHTS,
    )
    kwargs.update(overrides)
    return quadratic_problem(**kwargs)


@pytest.fixture(scope="session")
def quad_problem():
    """Standard strongly convex 2x2 family with A- and b-noise."""
    return make_quad_problem()


@pytest.fixture(scope="session")
def quad_nonoise():
    """Deterministic inner map (single atom), two targets."""
    return quadratic_problem(a_mean=A_MEAN, b_mean=B_MEAN,
                             targets=TARGETS, target_weights=TARGET_WEIGHTS)


@pytest.fixture(scope="session")
def quad_target_noise_only():
    """No A-noise: slow-noise covariance independent of y."""
    return quadratic_problem(a_mean=A_MEAN, b_mean=B_MEAN,
                             b_noise=[B_NOISE, -B_NOISE],
                             targets=TARGETS, target_weights=TARGET_WEIGHTS)


@pytest.fixture(scope="session")
def quad_1d():
    """Scalar family: g_w(x) = a x + b_w, f(y) = (y-c)^2/2."""
    return quadratic_problem(a_mean=[[1.2]], b_mean=[0.0],
                             b_noise=[[0.5], [-0.5]], targets=[[0.7]])


def make_constant_slow_problem():
    """Inner map independent of x: the slow state never moves.

    g_w(x) = b_w (two atoms), so grad~g = 0, the slow drift and noise
    vanish, and the fast variable is a pure mean-reverting diffusion.
    """
    b_mean = np.array([0.4, -0.1])
    b_noise = np.array([0.25, 0.1])
    atoms = FiniteIndexSet(
        w_labels=(0, 1), w_weights=np.array([0.5, 0.5]),
        v_labels=(0,), v_weights=np.array([1.0]),
    )
    b_atoms = np.stack([b_mean + b_noise, b_mean - b_noise])
    b_cov = 0.5 * (np.outer(b_noise, b_noise) + np.outer(b_noise, b_noise))

    oracle = MomentOracle(
        b1=lambda x: np.broadcast_to(b_mean, np.asarray(x, float).shape[:-1] + (2,)).copy(),
        b2=lambda x, y: np.zeros(np.broadcast_shapes(np.asarray(x, float).shape[:-1],
                                                     np.asarray(y, float).shape[:-1]) + (2,)),
        a1=lambda x: np.broadcast_to(b_cov, np.asarray(x, float).shape[:-1] + (2, 2)).copy(),
        a2=lambda x, y: np.zeros(np.broadcast_shapes(np.asarray(x, float).shape[:-1],
                                                     np.asarray(y, float).shape[:-1]) + (2, 2)),
        b2_linear_in_y=True,
    )
    return CompositionProblem(
        dim_x=2, dim_y=2,
        index_sampler=atoms.sample,
        g=lambda w, x: b_atoms[w[0] if isinstance(w, tuple) else w].copy(),
        grad_g_tilde=lambda w, x: np.zeros((2, 2)),
        f=lambda v, y: 0.5 * float(y @ y),
        grad_f=lambda v, y: np.asarray(y, float),
        moment_oracle=oracle,
        index_atoms=atoms,
    )


@pytest.fixture(scope="session")
def constant_slow_problem():
    return make_constant_slow_problem()


def make_cubic_problem(alpha=0.4):
    """Affine inner maps with a cubic outer perturbation.

    f_v(y) = 0.5 |y - c_v|^2 + (alpha/3) sum_i y_i^3, so grad f_v(y) =
    (y - c_v) + alpha y*y and the slow drift is quadratic in y: averaging
    over the invariant Gaussian no longer reduces to evaluation at the
    mean. All moments stay exact for the finite atom sets.
    """
    a_mean = A_MEAN
    a_noise = np.stack([A_NOISE, -A_NOISE])
    a_weights = np.array([0.5, 0.5])
    b_mean = B_MEAN
    b_noise = np.stack([B_NOISE, -B_NOISE])
    b_weights = np.array([0.5, 0.5])
    targets = TARGETS
    tw = TARGET_WEIGHTS
    c_bar = tw @ targets
    target_cov = np.einsum("v,vm,vl->ml", tw, targets - c_bar, targets - c_bar)
    b_cov = np.einsum("j,jm,jl->ml", b_weights, b_noise, b_noise)
    a2_const = a_mean.T @ target_cov @ a_mean
    for wi, ni in zip(a_weights, a_noise):
        a2_const = a2_const + wi * (ni.T @ target_cov @ ni)

    atoms = FiniteIndexSet(
        w_labels=tuple((i, j) for i in range(2) for j in range(2)),
        w_weights=np.full(4, 0.25),
        v_labels=(0, 1),
        v_weights=tw,
    )
    a_atoms = a_mean[None] + a_noise
    b_atoms = b_mean[None] + b_noise

    def b1(x):
        return np.asarray(x, float) @ a_mean.T + b_mean

    def a1(x):
        x = np.asarray(x, float)
        cov = np.broadcast_to(b_cov, x.shape[:-1] + (2, 2)).copy()
        for wi, ni in zip(a_weights, a_noise):
            u = x @ ni.T
            cov += wi * (u[..., :, None] * u[..., None, :])
        return cov

    def _outer_grad(y):
        y = np.asarray(y, float)
        return y - c_bar + alpha * y * y

    def b2(x, y):
        base = -(_outer_grad(y) @ a_mean)
        xb = np.asarray(x, float).shape[:-1]
        shape = np.broadcast_shapes(xb, base.shape[:-1]) + (2,)
        return np.broadcast_to(base, shape).copy()

    def a2(x, y):
        d = _outer_grad(y)
        cov = np.broadcast_to(a2_const, d.shape[:-1] + (2, 2)).copy()
        for wi, ni in zip(a_weights, a_noise):
            u = d @ ni
            cov += wi * (u[..., :, None] * u[..., None, :])
        xb = np.asarray(x, float).shape[:-1]
        shape = np.broadcast_shapes(xb, d.shape[:-1]) + (2, 2)
        return np.broadcast_to(cov, shape).copy()

    oracle = MomentOracle(b1=b1, b2=b2, a1=a1, a2=a2, b2_linear_in_y=False)

    def g(w, x):
        i, j = w
        return a_atoms[i] @ np.asarray(x, float) + b_atoms[j]

    def grad_g_tilde(w, x):
        i, _ = w
        return a_atoms[i].T.copy()

    def f(v, y):
        y = np.asarray(y, float)
        d = y - targets[v]
        return 0.5 * float(d @ d) + (alpha / 3.0) * float(np.sum(y**3))

    def grad_f(v, y):
        y = np.asarray(y, float)
        return y - targets[v] + alpha * y * y

    return CompositionProblem(
        dim_x=2, dim_y=2,
        index_sampler=atoms.sample,
        g=g, grad_g_tilde=grad_g_tilde, f=f, grad_f=grad_f,
        moment_oracle=oracle, index_atoms=atoms,
    )


@pytest.fixture(scope="session")
def cubic_problem():
    return make_cubic_problem()
