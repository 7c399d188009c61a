"""Kernels, their derivatives, Gram solves and bandwidth selection.

Every kernel exposes a batched interface that the rest of the package uses:

    matrix(X, Y)          k(x_i, y_j), shape (n, m)
    matrix_grad_x(X, Y)   gradient in the first slot, shape (n, m, d)
    matrix_grad_y(X, Y)   gradient in the second slot, shape (n, m, d)
    matrix_trace_xy(X, Y) sum_d d^2 k / dx_d dy_d, shape (n, m)

plus scalar ``eval`` / ``grad_x`` for single points.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats
from scipy.spatial.distance import pdist

__all__ = [
    "Kernel",
    "RBF",
    "IMQ",
    "InvLog",
    "IMQScore",
    "RFF",
    "GramSolution",
    "GramSolveError",
    "DegenerateParticlesError",
    "gram_solve",
    "solve_gram",
    "median_bandwidth",
    "rff_eval",
    "eval",
    "grad_x",
]

# kernel entries per block when averaging against large sample sets
_BLOCK = 4_000_000


class GramSolveError(RuntimeError):
    """Raised when the Gram matrix stays singular after maximum jitter."""


class DegenerateParticlesError(ValueError):
    """Raised when a particle set carries no spread (e.g. all points equal)."""


def _as_point(x, name="x"):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.ndim != 1:
        raise ValueError(f"{name} must be a single point, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def _as_points(X, name="X"):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ValueError(f"{name} must be an (n, d) array, got shape {X.shape}")
    return X


def _sqdist(X, Y):
    # direct differences keep every entry independent of the batch layout
    diff = X[:, None, :] - Y[None, :, :]
    return diff, np.einsum("nmd,nmd->nm", diff, diff)


class Kernel:
    """Base class. Subclasses fill in the matrix methods."""

    factorizes = False

    @property
    def length_scale(self):
        return 1.0

    def matrix(self, X, Y):
        raise NotImplementedError

    def matrix_grad_x(self, X, Y):
        raise NotImplementedError

    def matrix_grad_y(self, X, Y):
        raise NotImplementedError

    def matrix_trace_xy(self, X, Y):
        raise NotImplementedError

    def diag(self, X):
        """k(x_i, x_i) for every row."""
        X = _as_points(X)
        return np.array([self.matrix(x[None], x[None])[0, 0] for x in X])

    def _check_pair(self, x, y):
        x, y = _as_point(x, "x"), _as_point(y, "y")
        if x.shape != y.shape:
            raise ValueError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
        self._check_dim(x.shape[0])
        return x, y

    def _check_dim(self, d):
        pass

    def eval(self, x, y):
        x, y = self._check_pair(x, y)
        return float(self.matrix(x[None], y[None])[0, 0])

    def grad_x(self, x, y):
        x, y = self._check_pair(x, y)
        return self.matrix_grad_x(x[None], y[None])[0, 0]

    def grad_y(self, x, y):
        x, y = self._check_pair(x, y)
        return self.matrix_grad_y(x[None], y[None])[0, 0]

    def mean_cross(self, X, Y):
        """Row means (1/m) sum_j k(x_i, y_j), evaluated in row blocks."""
        X, Y = _as_points(X), _as_points(Y)
        out = np.empty(X.shape[0])
        step = max(1, _BLOCK // max(Y.shape[0], 1))
        for start in range(0, X.shape[0], step):
            out[start:start + step] = self.matrix(X[start:start + step], Y).mean(axis=1)
        return out

    def mean_self(self, Y):
        """Double average (1/m^2) sum_{j,l} k(y_j, y_l)."""
        return float(self.mean_cross(Y, Y).mean())


class RadialKernel(Kernel):
    """k(x, y) = f(|x - y|^2); subclasses give f and its first two derivatives."""

    def _f(self, t):
        raise NotImplementedError

    def _df(self, t):
        raise NotImplementedError

    def _d2f(self, t):
        raise NotImplementedError

    def matrix(self, X, Y):
        _, t = _sqdist(_as_points(X), _as_points(Y))
        return self._f(t)

    def matrix_grad_x(self, X, Y):
        diff, t = _sqdist(_as_points(X), _as_points(Y))
        return 2.0 * self._df(t)[:, :, None] * diff

    def matrix_grad_y(self, X, Y):
        diff, t = _sqdist(_as_points(X), _as_points(Y))
        return -2.0 * self._df(t)[:, :, None] * diff

    def matrix_trace_xy(self, X, Y):
        diff, t = _sqdist(_as_points(X), _as_points(Y))
        d = diff.shape[-1]
        return -2.0 * d * self._df(t) - 4.0 * t * self._d2f(t)

    def diag(self, X):
        return np.full(_as_points(X).shape[0], float(self._f(np.zeros(1))[0]))


@dataclass(frozen=True)
class RBF(RadialKernel):
    """Gaussian kernel exp(-|x - y|^2 / (2 h^2))."""

    bandwidth: float = 1.0
    factorizes = True

    def __post_init__(self):
        if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")

    @property
    def length_scale(self):
        return float(self.bandwidth)

    def _f(self, t):
        return np.exp(-t / (2.0 * self.bandwidth**2))

    def _df(self, t):
        return -self._f(t) / (2.0 * self.bandwidth**2)

    def _d2f(self, t):
        return self._f(t) / (4.0 * self.bandwidth**4)

    def with_bandwidth(self, h):
        return RBF(float(h))


@dataclass(frozen=True)
class IMQ(RadialKernel):
    """Inverse multiquadric (alpha + |x - y|^2)^beta."""

    alpha: float = 1.0
    beta: float = -0.5

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.beta >= 0:
            warnings.warn("IMQ with beta >= 0 is unbounded and not a valid Stein base kernel",
                          stacklevel=2)

    @property
    def length_scale(self):
        return float(np.sqrt(self.alpha))

    def _f(self, t):
        return (self.alpha + t) ** self.beta

    def _df(self, t):
        return self.beta * (self.alpha + t) ** (self.beta - 1.0)

    def _d2f(self, t):
        return self.beta * (self.beta - 1.0) * (self.alpha + t) ** (self.beta - 2.0)


@dataclass(frozen=True)
class InvLog(RadialKernel):
    """Inverse log kernel 1 / (alpha + log(1 + |x - y|^2))."""

    alpha: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    def _f(self, t):
        return 1.0 / (self.alpha + np.log1p(t))

    def _df(self, t):
        return -1.0 / ((self.alpha + np.log1p(t)) ** 2 * (1.0 + t))

    def _d2f(self, t):
        a = self.alpha + np.log1p(t)
        return (2.0 / a + 1.0) / (a**2 * (1.0 + t) ** 2)


class IMQScore(Kernel):
    """IMQ kernel applied to score vectors: (alpha + |s(x) - s(y)|^2)^beta.

    Needs the bound target's score and Hessian of the log density.
    """

    def __init__(self, target, alpha=1.0, beta=-0.5):
        if not alpha > 0:
            raise ValueError(f"alpha must be positive, got {alpha}")
        self.target = target
        self.alpha = float(alpha)
        self.beta = float(beta)

    def __repr__(self):
        return f"IMQScore(alpha={self.alpha}, beta={self.beta}, target={self.target!r})"

    def _check_dim(self, d):
        if d != self.target.dim:
            raise ValueError(f"dimension mismatch: point has {d}, target has {self.target.dim}")

    def _f(self, t):
        return (self.alpha + t) ** self.beta

    def _df(self, t):
        return self.beta * (self.alpha + t) ** (self.beta - 1.0)

    def _d2f(self, t):
        return self.beta * (self.beta - 1.0) * (self.alpha + t) ** (self.beta - 2.0)

    def _scores(self, X):
        return self.target.grad_log_density(_as_points(X))

    def matrix(self, X, Y):
        _, t = _sqdist(self._scores(X), self._scores(Y))
        return self._f(t)

    def matrix_grad_x(self, X, Y):
        diff, t = _sqdist(self._scores(X), self._scores(Y))
        H = self.target.hess_log_density(_as_points(X))
        return 2.0 * self._df(t)[:, :, None] * np.einsum("nab,nmb->nma", H, diff)

    def matrix_grad_y(self, X, Y):
        diff, t = _sqdist(self._scores(X), self._scores(Y))
        H = self.target.hess_log_density(_as_points(Y))
        return -2.0 * self._df(t)[:, :, None] * np.einsum("mab,nmb->nma", H, diff)

    def matrix_trace_xy(self, X, Y):
        diff, t = _sqdist(self._scores(X), self._scores(Y))
        Hx = self.target.hess_log_density(_as_points(X))
        Hy = self.target.hess_log_density(_as_points(Y))
        hx = np.einsum("nab,nmb->nma", Hx, diff)
        hy = np.einsum("mab,nmb->nma", Hy, diff)
        cross = np.einsum("nab,mab->nm", Hx, Hy)
        return -4.0 * self._d2f(t) * np.einsum("nma,nma->nm", hx, hy) - 2.0 * self._df(t) * cross

    def diag(self, X):
        return np.full(_as_points(X).shape[0], self.alpha**self.beta)


class RFF(Kernel):
    """Random Fourier feature approximation of RBF(h).

    z(x) = sqrt(2/D) cos(W x + b) with W ~ N(0, I/h^2), b ~ U(0, 2 pi).
    ``sampler="qmc"`` draws (W, b) through a scrambled Sobol sequence mapped
    by the Gaussian/uniform inverse CDFs; ``"mc"`` uses plain pseudo-random
    draws. Both are unbiased for the RBF kernel; the quasi-random design has
    much smaller error at a given D.
    """

    def __init__(self, bandwidth, num_features, dim, seed=0, sampler="qmc"):
        if not bandwidth > 0:
            raise ValueError(f"bandwidth must be positive, got {bandwidth}")
        if int(num_features) < 1:
            raise ValueError("num_features must be >= 1")
        if int(dim) < 1:
            raise ValueError("dim must be >= 1")
        if sampler not in ("qmc", "mc"):
            raise ValueError(f"unknown sampler {sampler!r}")
        self.bandwidth = float(bandwidth)
        self.num_features = int(num_features)
        self.dim = int(dim)
        self.seed = int(seed)
        self.sampler = sampler
        W, b = self._draw()
        W.setflags(write=False)
        b.setflags(write=False)
        self.W, self.b = W, b
        self._scale = np.sqrt(2.0 / self.num_features)

    def __repr__(self):
        return (f"RFF(bandwidth={self.bandwidth}, num_features={self.num_features}, "
                f"dim={self.dim}, seed={self.seed}, sampler={self.sampler!r})")

    def _draw(self):
        D, d = self.num_features, self.dim
        if self.sampler == "mc":
            rng = np.random.default_rng(self.seed)
            W = rng.standard_normal((D, d)) / self.bandwidth
            b = rng.uniform(0.0, 2.0 * np.pi, size=D)
            return W, b
        engine = stats.qmc.Sobol(d + 1, scramble=True, seed=self.seed)
        with warnings.catch_warnings():
            # non power-of-two D only loses the balance property
            warnings.simplefilter("ignore", UserWarning)
            u = engine.random(D)
        u = np.clip(u, 1e-12, 1.0 - 1e-12)
        W = stats.norm.ppf(u[:, :d]) / self.bandwidth
        b = 2.0 * np.pi * u[:, d]
        return W, b

    @property
    def length_scale(self):
        return self.bandwidth

    def _check_dim(self, d):
        if d != self.dim:
            raise ValueError(f"dimension mismatch: point has {d}, features built for {self.dim}")

    def _phase(self, X):
        X = _as_points(X)
        self._check_dim(X.shape[1])
        return X @ self.W.T + self.b

    def features(self, X):
        return self._scale * np.cos(self._phase(X))

    def matrix(self, X, Y):
        return self.features(X) @ self.features(Y).T

    def matrix_grad_x(self, X, Y):
        dz = -self._scale * np.sin(self._phase(X))
        return np.einsum("nk,kd,mk->nmd", dz, self.W, self.features(Y))

    def matrix_grad_y(self, X, Y):
        dz = -self._scale * np.sin(self._phase(Y))
        return np.einsum("nk,mk,kd->nmd", self.features(X), dz, self.W)

    def matrix_trace_xy(self, X, Y):
        sx = self._scale * np.sin(self._phase(X))
        sy = self._scale * np.sin(self._phase(Y))
        return (sx * np.sum(self.W**2, axis=1)) @ sy.T

    def diag(self, X):
        z = self.features(X)
        return np.sum(z * z, axis=1)

    def mean_cross(self, X, Y):
        return self.features(X) @ self.features(Y).mean(axis=0)

    def mean_self(self, Y):
        m = self.features(Y).mean(axis=0)
        return float(m @ m)


def eval(kernel, x, y):
    """k(x, y) for single points."""
    return kernel.eval(x, y)


def grad_x(kernel, x, y):
    """Gradient of k(x, y) in its first argument."""
    return kernel.grad_x(x, y)


def rff_eval(kernel, x, y):
    """Feature inner product z(x) . z(y) of an RFF kernel."""
    if not isinstance(kernel, RFF):
        raise TypeError("rff_eval needs an RFF kernel")
    return kernel.eval(x, y)


@dataclass(frozen=True)
class GramSolution:
    solution: np.ndarray
    jitter: float


def solve_gram(K, rhs, min_rel=1e-10, max_rel=1e-4):
    """Solve (K + jitter I) w = rhs by Cholesky, escalating jitter by 10x.

    Jitter starts at ``min_rel * trace(K)/n`` and stops at ``max_rel * trace(K)/n``.
    """
    K = np.asarray(K, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    n = K.shape[0]
    if K.shape != (n, n) or rhs.shape[0] != n:
        raise ValueError(f"shape mismatch: K {K.shape}, rhs {rhs.shape}")
    scale = np.trace(K) / n
    if not scale > 0:
        raise GramSolveError("Gram matrix has non-positive trace")
    lo, hi = int(round(np.log10(min_rel))), int(round(np.log10(max_rel)))
    eye = np.eye(n)
    for p in range(lo, hi + 1):
        jitter = scale * 10.0**p
        try:
            factor = linalg.cho_factor(K + jitter * eye, lower=True, check_finite=True)
        except linalg.LinAlgError:
            continue
        return GramSolution(linalg.cho_solve(factor, rhs), float(jitter))
    raise GramSolveError(
        f"Gram matrix not positive definite with jitter up to {scale * 10.0**hi:.3g}; "
        "particles are probably duplicated")


def gram_solve(kernel, points, rhs):
    """K^{-1} rhs for the Gram matrix of ``points`` (with adaptive jitter)."""
    P = _as_points(points)
    return solve_gram(kernel.matrix(P, P), rhs)


def median_bandwidth(points, log_scaling=False):
    """Median pairwise Euclidean distance.

    With ``log_scaling`` the result is med / sqrt(2 log(n + 1)).
    """
    P = _as_points(points)
    n = P.shape[0]
    if n < 2:
        raise DegenerateParticlesError("median bandwidth needs at least two points")
    med = float(np.median(pdist(P)))
    if not med > 0:
        raise DegenerateParticlesError("median pairwise distance is zero")
    if log_scaling:
        med /= np.sqrt(2.0 * np.log(n + 1.0))
    return med
