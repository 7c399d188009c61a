"""Comparison methods: SVGD, greedy Stein points and kernel herding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .discrepancy import ReferenceSamples, WeightedParticles, stein_diag, stein_gram
from .kernels import RBF, _as_points, median_bandwidth
from .optim import Adam, AdamConfig
from .targets import approx_map

__all__ = [
    "SVGDConfig",
    "SVGDDivergenceError",
    "svgd_direction",
    "svgd_run",
    "SPSearchConfig",
    "stein_points_greedy",
    "stein_points_objective",
    "herding_indices",
    "kernel_herding",
]


class SVGDDivergenceError(FloatingPointError):
    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class SVGDConfig:
    """``bandwidth`` is "fixed" (use the kernel as given) or "median" (RBF
    bandwidth re-chosen from the particles every iteration)."""

    n_particles: int = 50
    iterations: int = 1000
    adam: AdamConfig = AdamConfig()
    bandwidth: str = "median"
    median_log_scaling: bool = False

    def __post_init__(self):
        if int(self.n_particles) < 1:
            raise ValueError("n_particles must be >= 1")
        if int(self.iterations) < 0:
            raise ValueError("iterations must be >= 0")
        if self.bandwidth not in ("fixed", "median"):
            raise ValueError(f"unknown bandwidth policy {self.bandwidth!r}")


def svgd_direction(particles, target, kernel):
    """phi(x_m) = (1/N) sum_n [k(x_n, x_m) s(x_n) + grad_{x_n} k(x_n, x_m)]."""
    P = particles.points if isinstance(particles, WeightedParticles) else _as_points(particles)
    S = np.atleast_2d(target.grad_log_density(P))
    K = kernel.matrix(P, P)
    G = kernel.matrix_grad_x(P, P)
    return (K.T @ S + G.sum(axis=0)) / P.shape[0]


def svgd_run(target, kernel, config=None, seed=0, init=None, history=None):
    """Adam-driven SVGD. Returns uniformly weighted particles.

    ``history`` (a list) receives the particle array after every iteration.
    """
    config = config or SVGDConfig()
    rng = np.random.default_rng(seed)
    if init is None:
        X = np.atleast_2d(target.sample_prior(rng, int(config.n_particles))).astype(float)
    else:
        X = _as_points(init).copy()
    opt = Adam(config.adam)
    kern = kernel
    for it in range(int(config.iterations)):
        if config.bandwidth == "median" and X.shape[0] >= 2:
            kern = RBF(median_bandwidth(X, log_scaling=config.median_log_scaling))
        try:
            phi = svgd_direction(X, target, kern)
        except FloatingPointError as exc:
            raise SVGDDivergenceError(f"{exc} at iteration {it}", WeightedParticles.uniform(X)) from exc
        X_new = opt.step(X, -phi)
        if not np.all(np.isfinite(X_new)):
            raise SVGDDivergenceError(f"non-finite particle at iteration {it}", WeightedParticles.uniform(X))
        X = X_new
        if history is not None:
            history.append(X.copy())
    return WeightedParticles.uniform(X)


@dataclass(frozen=True)
class SPSearchConfig:
    n_candidates: int = 20
    proposal_scale: float = 1.0
    box: tuple | None = None
    map_iterations: int = 100
    map_adam: AdamConfig = AdamConfig()
    max_redraws: int = 100

    def __post_init__(self):
        if int(self.n_candidates) < 1:
            raise ValueError("n_candidates must be >= 1")
        if not self.proposal_scale > 0:
            raise ValueError("proposal_scale must be positive")


def stein_points_objective(kernel, target, points, candidates):
    """sum_i k_s(x_i, x) + k_s(x, x)/2 for each candidate x."""
    C = _as_points(candidates)
    val = 0.5 * stein_diag(kernel, target, C)
    if points is not None and len(points):
        val = val + stein_gram(kernel, target, _as_points(points), C).sum(axis=0)
    return val


def _propose(points, config, rng):
    n_c, d = int(config.n_candidates), points.shape[1]
    base = points[rng.integers(0, points.shape[0], size=n_c)]
    C = base + config.proposal_scale * rng.standard_normal((n_c, d))
    if config.box is None:
        return C
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (d,)) for b in config.box)
    for _ in range(int(config.max_redraws)):
        bad = np.any((C < lo) | (C > hi), axis=1)
        if not bad.any():
            return C
        C[bad] = base[bad] + config.proposal_scale * rng.standard_normal((int(bad.sum()), d))
    return np.clip(C, lo, hi)


def stein_points_greedy(target, kernel, n_points, search=None, seed=0, pool=None, record=None):
    """Greedy Stein points with Monte-Carlo candidate search.

    ``pool`` fixes the candidate set at every step (used by exhaustive
    checks); ``record`` (a list) receives each step's candidate array.
    """
    search = search or SPSearchConfig()
    rng = np.random.default_rng(seed)
    if int(n_points) < 1:
        raise ValueError("n_points must be >= 1")
    try:
        start = np.atleast_2d(target.sample_prior(rng, 1))[0]
    except NotImplementedError:
        start = np.zeros(target.dim)
    X = approx_map(target, start, int(search.map_iterations), search.map_adam)[None]
    fixed = None if pool is None else _as_points(pool)
    while X.shape[0] < int(n_points):
        C = fixed if fixed is not None else _propose(X, search, rng)
        if record is not None:
            record.append(C.copy())
        obj = stein_points_objective(kernel, target, X, C)
        X = np.vstack([X, C[int(np.argmin(obj))]])
    return WeightedParticles.uniform(X)


def herding_indices(kernel, pool, n_points, rule="printed"):
    """Pool indices chosen greedily by kernel herding (repeats allowed).

    ``rule="printed"`` maximizes (2/(n+1)) E_pool k(x, .) - (2/(n+1)) sum_i k(x, x_i);
    ``rule="mmd"`` uses the exact uniform-weight MMD^2 decrement, whose second
    coefficient is 2/(n+1)^2 (plus the k(x, x) term).
    """
    if rule not in ("printed", "mmd"):
        raise ValueError(f"unknown herding rule {rule!r}")
    Y = pool.samples if isinstance(pool, ReferenceSamples) else _as_points(pool)
    if Y.shape[0] == 0:
        raise ValueError("empty candidate pool")
    K = kernel.matrix(Y, Y)
    mean_k = K.mean(axis=1)
    running = np.zeros(Y.shape[0])
    chosen = []
    diag = np.diag(K)
    for n in range(int(n_points)):
        if rule == "printed":
            obj = (2.0 / (n + 1)) * mean_k - (2.0 / (n + 1)) * running
        else:
            obj = (2.0 / (n + 1)) * mean_k - (2.0 * running + diag) / (n + 1) ** 2
        j = int(np.argmax(obj))
        chosen.append(j)
        running = running + K[:, j]
    return chosen


def kernel_herding(kernel, pool, n_points, rule="printed"):
    """Herded points from ``pool``."""
    Y = pool.samples if isinstance(pool, ReferenceSamples) else _as_points(pool)
    return Y[herding_indices(kernel, Y, n_points, rule)]
