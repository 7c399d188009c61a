"""MMD against a sample set, its Bayesian-quadrature variance form, and KSD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import _as_points, gram_solve

__all__ = [
    "WeightedParticles",
    "ReferenceSamples",
    "kernel_mean",
    "mmd2_vs_samples",
    "mmd2_from_parts",
    "bq_weights",
    "bq_variance",
    "stein_gram",
    "stein_kernel",
    "ksd",
    "NegativeDiscrepancyError",
]

# round-off allowed below zero before a squared discrepancy counts as a bug
NEG_TOL = 1e-10


class NegativeDiscrepancyError(ArithmeticError):
    pass


@dataclass(frozen=True)
class WeightedParticles:
    """Points (N, d) with arbitrary real weights (N,)."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        P = _as_points(self.points).copy()
        w = np.atleast_1d(np.asarray(self.weights, dtype=float)).copy()
        if P.shape[0] < 1:
            raise ValueError("need at least one particle")
        if w.shape != (P.shape[0],):
            raise ValueError(f"{P.shape[0]} points but weights of shape {w.shape}")
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(w))):
            raise ValueError("particles must be finite")
        P.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", P)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points):
        P = _as_points(points)
        return cls(P, np.full(P.shape[0], 1.0 / P.shape[0]))

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def __len__(self):
        return self.n


@dataclass(frozen=True)
class ReferenceSamples:
    """Samples (M, d) standing in for the target."""

    samples: np.ndarray

    def __post_init__(self):
        S = _as_points(self.samples).copy()
        if S.shape[0] < 1:
            raise ValueError("need at least one reference sample")
        if not np.all(np.isfinite(S)):
            raise ValueError("reference samples must be finite")
        S.setflags(write=False)
        object.__setattr__(self, "samples", S)

    @property
    def n(self):
        return self.samples.shape[0]

    @property
    def dim(self):
        return self.samples.shape[1]

    def __len__(self):
        return self.n


def _samples(ref):
    return ref.samples if isinstance(ref, ReferenceSamples) else _as_points(ref)


def _particles(p):
    if isinstance(p, WeightedParticles):
        return p.points, p.weights
    wp = WeightedParticles.uniform(p)
    return wp.points, wp.weights


def kernel_mean(kernel, points, reference=None):
    """z_i = mean over the reference of k(x_i, y); the points themselves if no reference."""
    P = _as_points(points)
    Y = P if reference is None else _samples(reference)
    if Y.shape[1] != P.shape[1]:
        raise ValueError(f"dimension mismatch: {P.shape[1]} vs {Y.shape[1]}")
    return kernel.mean_cross(P, Y)


def mmd2_from_parts(w, K, z, ekk):
    """1/2 (w'Kw - 2 w'z + E[k]) with round-off clamping."""
    val = 0.5 * (w @ K @ w - 2.0 * (w @ z) + ekk)
    if val < -NEG_TOL:
        raise NegativeDiscrepancyError(f"squared MMD came out {val:.3e}")
    return max(float(val), 0.0)


def mmd2_vs_samples(kernel, particles, reference):
    """Squared MMD (with the 1/2 factor) between weighted particles and samples."""
    P, w = _particles(particles)
    Y = _samples(reference)
    if Y.shape[1] != P.shape[1]:
        raise ValueError(f"dimension mismatch: {P.shape[1]} vs {Y.shape[1]}")
    return mmd2_from_parts(w, kernel.matrix(P, P), kernel.mean_cross(P, Y), kernel.mean_self(Y))


def bq_weights(kernel, points, reference=None):
    """K^{-1} z with z from ``reference`` (or the points themselves)."""
    return gram_solve(kernel, points, kernel_mean(kernel, points, reference)).solution


def bq_variance(kernel, particles, reference):
    """E_ref[k] - z' K^{-1} z: twice the squared MMD reached by BQ weights."""
    P = particles.points if isinstance(particles, WeightedParticles) else _as_points(particles)
    Y = _samples(reference)
    z = kernel_mean(kernel, P, Y)
    sol = gram_solve(kernel, P, z).solution
    val = kernel.mean_self(Y) - z @ sol
    if val < -NEG_TOL:
        raise NegativeDiscrepancyError(f"BQ variance came out {val:.3e}")
    return max(float(val), 0.0)


def stein_gram(kernel, target, X, Y=None):
    """Stein kernel matrix k_s(x_i, y_j)."""
    X = _as_points(X)
    Y = X if Y is None else _as_points(Y)
    sx = target.grad_log_density(X)
    sy = target.grad_log_density(Y)
    K = kernel.matrix(X, Y)
    gx = kernel.matrix_grad_x(X, Y)
    gy = kernel.matrix_grad_y(X, Y)
    return (kernel.matrix_trace_xy(X, Y)
            + np.einsum("nmd,md->nm", gx, sy)
            + np.einsum("nmd,nd->nm", gy, sx)
            + K * (sx @ sy.T))


def stein_diag(kernel, target, X):
    """k_s(x_i, x_i) for every row, one point at a time."""
    X = _as_points(X)
    return np.array([stein_gram(kernel, target, x[None])[0, 0] for x in X])


def stein_kernel(kernel, target, x, y):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return float(stein_gram(kernel, target, x[None], y[None])[0, 0])


def ksd(particles, target, kernel):
    """sqrt(sum_ij w_i w_j k_s(x_i, x_j)); weights used as given."""
    P, w = _particles(particles)
    val = w @ stein_gram(kernel, target, P) @ w
    if val < -NEG_TOL:
        raise NegativeDiscrepancyError(f"KSD^2 came out {val:.3e}")
    return float(np.sqrt(max(val, 0.0)))
