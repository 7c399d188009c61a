"""Frank-Wolfe minimization of MMD over the marginal polytope.

Each outer iteration adds one particle found by an approximate linear
minimization oracle (a few Adam steps on a Stein-type estimate of the LMO
gradient) and then refreshes the weights with one of three step rules.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache

import numpy as np

from .discrepancy import ReferenceSamples, WeightedParticles, kernel_mean, mmd2_from_parts
from .kernels import RBF, _as_points, median_bandwidth, solve_gram
from .optim import Adam, AdamConfig
from .targets import approx_map

__all__ = [
    "StepRule",
    "LMOConfig",
    "LMOResult",
    "LMOError",
    "RunRecord",
    "FWState",
    "FWResult",
    "FWRunError",
    "LineSearchStep",
    "approx_lmo_gradient",
    "lmo_surrogate",
    "approx_lmo",
    "pbc_lmo",
    "empirical_bq_weights",
    "step_line_search",
    "theorem1_diagnostic",
    "mmd_fw",
    "cache_mmd_fw",
    "replay_weights",
]

DUPLICATE_TOL = 1e-8
DEGENERATE_DENOM = 1e-12


class StepRule(str, Enum):
    CONSTANT = "constant"
    LINE_SEARCH = "line-search"
    EMPIRICAL_BQ = "empirical-bq"


class LMOError(RuntimeError):
    """Every restart of the inner optimizer produced a non-finite trajectory."""


@dataclass(frozen=True)
class LMOConfig:
    """Inner optimizer settings.

    init_policy: "fitted" (diagonal Gaussian fitted to the particles, prior
    sample when there is a single particle), "prior", "box" (uniform in
    ``box``) or "explicit" (use ``init_points``; one restart per point).
    """

    inner_iterations: int = 50
    adam: AdamConfig = AdamConfig()
    init_policy: str = "fitted"
    restarts: int = 3
    box: tuple | None = None
    init_points: tuple | None = None

    def __post_init__(self):
        if int(self.inner_iterations) < 1:
            raise ValueError("inner_iterations must be >= 1")
        if int(self.restarts) < 1:
            raise ValueError("restarts must be >= 1")
        if self.init_policy not in ("fitted", "prior", "box", "explicit"):
            raise ValueError(f"unknown init_policy {self.init_policy!r}")
        if self.init_policy == "box" and self.box is None:
            raise ValueError("init_policy 'box' needs box=(lo, hi)")
        if self.init_policy == "explicit" and not self.init_points:
            raise ValueError("init_policy 'explicit' needs init_points")


@dataclass(frozen=True)
class LMOResult:
    point: np.ndarray
    objective: float
    init_objective: float
    degenerate: bool
    restart: int


@dataclass
class RunRecord:
    iteration: int
    n_particles: int
    mmd2: float | None = None
    theorem1_residual: float | None = None
    lmo_objective: float | None = None
    lmo_degenerate: bool = False
    step: float | None = None
    step_degenerate: bool = False
    bandwidth: float | None = None
    wallclock_ms: float = 0.0


@dataclass
class FWResult:
    particles: WeightedParticles
    records: list
    step_rule: StepRule = StepRule.EMPIRICAL_BQ
    selected: list | None = None
    shifts: list | None = None


class FWRunError(RuntimeError):
    """A run failed part-way; ``partial`` holds what was computed so far."""

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


class FWState:
    """Current particles, weights and the cached scores at each particle."""

    def __init__(self, target, kernel, points, weights=None, step_rule=StepRule.EMPIRICAL_BQ):
        P = _as_points(points).copy()
        self.target = target
        self.kernel = kernel
        self.points = P
        self.weights = (np.full(P.shape[0], 1.0 / P.shape[0]) if weights is None
                        else np.asarray(weights, dtype=float).copy())
        self.scores = np.atleast_2d(target.grad_log_density(P))
        self.step_rule = StepRule(step_rule)
        self.iteration = P.shape[0] - 1
        self.records = []

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def particles(self):
        return WeightedParticles(self.points, self.weights)

    def append(self, x, weights):
        x = np.asarray(x, dtype=float).reshape(1, -1)
        # score first, so a failing gradient leaves the state untouched
        s = np.atleast_2d(self.target.grad_log_density(x))
        self.points = np.vstack([self.points, x])
        self.scores = np.vstack([self.scores, s])
        self.weights = np.asarray(weights, dtype=float).copy()
        self.iteration += 1


def _field(kernel, P, w, S, X):
    """(1/n) sum_i w_i [grad_x k(x_i, x) - k(x, x_i) s_i] for each row x of X."""
    G = kernel.matrix_grad_y(P, X)
    K = kernel.matrix(P, X)
    return (np.einsum("n,nmd->md", w, G) - np.einsum("n,nm,nd->md", w, K, S)) / P.shape[0]


def approx_lmo_gradient(state, x):
    """Stein-type estimate of the LMO objective's gradient at x (point or batch)."""
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    g = _field(state.kernel, state.points, state.weights, state.scores, X.reshape(-1, state.points.shape[1]))
    return g[0] if single else g


@lru_cache(maxsize=64)
def _legendre(n):
    t, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (t + 1.0), 0.5 * w


def lmo_surrogate(state, x, anchor=None):
    """Line integral of the gradient estimate from ``anchor`` (first particle) to x.

    The estimate is not an exact gradient field, so this path integral is the
    objective used to compare LMO candidates.
    """
    a = state.points[0] if anchor is None else np.asarray(anchor, dtype=float)
    x = np.asarray(x, dtype=float)
    delta = x - a
    dist = float(np.linalg.norm(delta))
    if dist == 0.0:
        return 0.0
    n_nodes = int(np.clip(np.ceil(8.0 * dist / state.kernel.length_scale), 16, 512))
    t, w = _legendre(n_nodes)
    G = approx_lmo_gradient(state, a + t[:, None] * delta)
    return float(w @ (G @ delta))


def _initial_points(state, config, rng):
    if config.init_policy == "explicit":
        return [np.asarray(p, dtype=float).reshape(-1) for p in config.init_points]
    d = state.points.shape[1]
    r = int(config.restarts)
    if config.init_policy == "box":
        lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (d,)) for b in config.box)
        return list(rng.uniform(lo, hi, size=(r, d)))
    if config.init_policy == "fitted" and state.n >= 2:
        mean = state.points.mean(axis=0)
        std = np.maximum(state.points.std(axis=0), 1e-3 * state.kernel.length_scale)
        return list(mean + std * rng.standard_normal((r, d)))
    return list(np.atleast_2d(state.target.sample_prior(rng, r)))


def _descend(grad_fn, x0, steps, adam_config):
    x = x0.copy()
    opt = Adam(adam_config)
    for _ in range(steps):
        x = opt.step(x, grad_fn(x))
        if not np.all(np.isfinite(x)):
            return None
    return x


def _best_of(state, inits, run):
    candidates = []
    for i, x0 in enumerate(inits):
        xL = run(x0)
        if xL is None:
            continue
        f0, fL = lmo_surrogate(state, x0), lmo_surrogate(state, xL)
        if np.isfinite(fL) and fL < f0:
            candidates.append(LMOResult(xL, fL, f0, False, i))
        else:
            candidates.append(LMOResult(x0.copy(), f0, f0, True, i))
    if not candidates:
        raise LMOError("every LMO restart diverged")
    # min() keeps the first of equal objectives, i.e. the lowest restart index
    return min(candidates, key=lambda c: c.objective)


def approx_lmo(state, config=None, rng=None):
    """Approximate LMO: best of several Adam descents on the surrogate objective."""
    config = config or LMOConfig()
    rng = rng if rng is not None else np.random.default_rng()
    inits = _initial_points(state, config, rng)
    P, w, S, kern = state.points, state.weights, state.scores, state.kernel

    def grad(x):
        return _field(kern, P, w, S, x[None])[0]

    return _best_of(state, inits, lambda x0: _descend(grad, x0, int(config.inner_iterations), config.adam))


def _block_descend(state, x0, blocks, steps, adam_config, sweeps, workers):
    P, w, S, kern = state.points, state.weights, state.scores, state.kernel
    x = x0.copy()
    single = len(blocks) == 1
    opts = [Adam(adam_config) for _ in blocks]
    per_sweep = [steps // sweeps + (1 if s < steps % sweeps else 0) for s in range(sweeps)]

    def run_block(j, snapshot, n_steps):
        B = blocks[j]
        if single:
            coef = w
        else:
            others = np.setdiff1d(np.arange(P.shape[1]), B)
            coef = w * _cross_coefficient(kern, P, snapshot, others)
        if single and np.array_equal(B, np.arange(P.shape[1])):
            # same arrays as approx_lmo, so the arithmetic is bit-identical
            PB, SB = P, S
        else:
            PB, SB = np.ascontiguousarray(P[:, B]), np.ascontiguousarray(S[:, B])
        xb = snapshot[B].copy()
        for _ in range(n_steps):
            xb = opts[j].step(xb, _field(kern, PB, coef, SB, xb[None])[0])
            if not np.all(np.isfinite(xb)):
                return None
        return xb

    for n_steps in per_sweep:
        if n_steps == 0:
            continue
        snapshot = x.copy()
        if workers > 1 and not single:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(lambda j: run_block(j, snapshot, n_steps), range(len(blocks))))
        else:
            parts = [run_block(j, snapshot, n_steps) for j in range(len(blocks))]
        if any(p is None for p in parts):
            return None
        for B, p in zip(blocks, parts):
            x[B] = p
    return x


def _cross_coefficient(kernel, P, x, dims):
    """prod over dims i of k(x_l^(i), x^(i)) for every particle l."""
    if dims.size == 0:
        return np.ones(P.shape[0])
    out = np.ones(P.shape[0])
    for i in dims:
        out = out * kernel.matrix(P[:, [i]], x[[i]][None])[:, 0]
    return out


def _check_blocks(blocks, d):
    blocks = [np.sort(np.asarray(b, dtype=int).reshape(-1)) for b in blocks]
    flat = np.concatenate(blocks) if blocks else np.array([], dtype=int)
    if flat.size != d or not np.array_equal(np.sort(flat), np.arange(d)):
        raise ValueError(f"blocks must partition dimensions 0..{d - 1}")
    return blocks


def pbc_lmo(state, blocks, config=None, rng=None, sweeps=1, workers=1):
    """Block-coordinate LMO for product kernels.

    Each block descends its slice of the gradient estimate with the other
    blocks' kernel factors frozen at the start of a sweep; blocks only see
    each other's updates after every block has finished the sweep.
    """
    if not getattr(state.kernel, "factorizes", False):
        raise ValueError(f"{state.kernel!r} does not factorize across dimensions")
    config = config or LMOConfig()
    rng = rng if rng is not None else np.random.default_rng()
    blocks = _check_blocks(blocks, state.points.shape[1])
    sweeps = max(1, min(int(sweeps), int(config.inner_iterations)))
    inits = _initial_points(state, config, rng)
    run = lambda x0: _block_descend(state, x0, blocks, int(config.inner_iterations), config.adam, sweeps, workers)
    return _best_of(state, inits, run)


def empirical_bq_weights(kernel, points):
    """K^{-1} z with z_m = (1/n) sum_l k(x_l, x_m) computed from the points themselves."""
    P = _as_points(points)
    K = kernel.matrix(P, P)
    return solve_gram(K, K.mean(axis=0)).solution


@dataclass(frozen=True)
class LineSearchStep:
    step: float
    degenerate: bool
    self_referenced: bool


def _line_search(kernel, points, weights, vertex, reference=None):
    A = np.vstack([_as_points(points), np.asarray(vertex, dtype=float).reshape(1, -1)])
    n = A.shape[0] - 1
    K = kernel.matrix(A, A)
    a = np.append(np.asarray(weights, dtype=float), 0.0)
    e = np.zeros(n + 1)
    e[-1] = 1.0
    diff = a - e
    denom = diff @ K @ diff
    if reference is None:
        # the target embedding is estimated by the points plus the new vertex
        z = K.mean(axis=0)
    else:
        z = kernel_mean(kernel, A, reference)
    if denom < DEGENERATE_DENOM:
        return LineSearchStep(0.0, True, reference is None)
    lam = (diff @ (K @ a) - diff @ z) / denom
    return LineSearchStep(float(np.clip(lam, 0.0, 1.0)), False, reference is None)


def step_line_search(state, new_vertex, reference=None):
    """Exact minimizing step toward ``new_vertex``, clipped to [0, 1]."""
    return _line_search(state.kernel, state.points, state.weights, new_vertex, reference)


def theorem1_diagnostic(kernel, points, reference, z_source="reference"):
    """E_ref[k] - z' K^{-1} z.

    ``z_source="reference"`` takes z from the reference set (the BQ posterior
    variance at these points); ``"self"`` uses the particle-averaged z.
    """
    P = _as_points(points)
    Y = reference.samples if isinstance(reference, ReferenceSamples) else _as_points(reference)
    if z_source == "reference":
        z = kernel_mean(kernel, P, Y)
    elif z_source == "self":
        z = kernel_mean(kernel, P)
    else:
        raise ValueError(f"unknown z_source {z_source!r}")
    sol = solve_gram(kernel.matrix(P, P), z).solution
    return float(kernel.mean_self(Y) - z @ sol)


class _Evaluator:
    """Caches kernel means against a fixed reference for per-iteration records."""

    def __init__(self, kernel, reference):
        self.kernel = kernel
        self.Y = reference.samples if isinstance(reference, ReferenceSamples) else _as_points(reference)
        self.ekk = kernel.mean_self(self.Y)
        self.z = np.empty(0)

    def update(self, points):
        new = points[self.z.shape[0]:]
        if new.shape[0]:
            self.z = np.concatenate([self.z, self.kernel.mean_cross(new, self.Y)])
        K = self.kernel.matrix(points, points)
        return K, self.z

    def mmd2(self, points, weights):
        K, z = self.update(points)
        return mmd2_from_parts(weights, K, z, self.ekk)

    def residual(self, points):
        K, z = self.update(points)
        return float(self.ekk - z @ solve_gram(K, z).solution)


def _kernel_for(kernel, points, bandwidth, log_scaling):
    if bandwidth == "fixed" or points.shape[0] < 2:
        return kernel
    return RBF(median_bandwidth(points, log_scaling=log_scaling))


def _next_weights(rule, kernel_old, kernel_new, points, weights, vertex, ls_reference):
    """Weights after adding ``vertex`` plus (step, degenerate) for the record."""
    n = points.shape[0]
    if rule is StepRule.EMPIRICAL_BQ:
        return empirical_bq_weights(kernel_new, np.vstack([points, vertex[None]])), None, False
    if rule is StepRule.CONSTANT:
        lam, degenerate = 1.0 / (n + 1), False
    else:
        ls = _line_search(kernel_old, points, weights, vertex, ls_reference)
        lam, degenerate = ls.step, ls.degenerate
    return np.append((1.0 - lam) * weights, lam), lam, degenerate


def replay_weights(kernel, points, step_rule, bandwidth="fixed", log_scaling=False, ls_reference=None):
    """Weights of every prefix 1..N, recomputed exactly as a run would."""
    P = _as_points(points)
    rule = StepRule(step_rule)
    out = [np.ones(1)]
    kern = _kernel_for(kernel, P[:1], bandwidth, log_scaling)
    for n in range(1, P.shape[0]):
        new_kern = _kernel_for(kernel, P[:n + 1], bandwidth, log_scaling)
        w, _, _ = _next_weights(rule, kern, new_kern, P[:n], out[-1], P[n], ls_reference)
        out.append(w)
        kern = new_kern
    return out


def _start_point(target, rng, map_steps, map_config):
    try:
        start = np.atleast_2d(target.sample_prior(rng, 1))[0]
    except NotImplementedError:
        start = np.zeros(target.dim)
    return approx_map(target, start, map_steps, map_config)


def _guard_duplicate(x, points, length_scale, rng):
    if np.min(np.max(np.abs(points - x), axis=1)) < DUPLICATE_TOL:
        x = x + 1e-3 * length_scale * rng.standard_normal(x.shape)
    return x


class _Run:
    """Shared outer loop of mmd_fw and cache_mmd_fw."""

    def __init__(self, target, kernel, step_rule, reference, eval_kernel, bandwidth,
                 log_scaling, ls_reference, record_residual):
        self.target = target
        self.base_kernel = kernel
        self.rule = StepRule(step_rule)
        self.bandwidth = bandwidth
        self.log_scaling = log_scaling
        self.ls_reference = ls_reference
        self.record_residual = record_residual
        self.evaluator = None if reference is None else _Evaluator(eval_kernel or kernel, reference)
        self.t0 = time.perf_counter()
        self.state = None

    def start(self, x1):
        x1 = np.asarray(x1, dtype=float).reshape(-1)
        kern = _kernel_for(self.base_kernel, x1[None], self.bandwidth, self.log_scaling)
        self.state = FWState(self.target, kern, x1[None], np.ones(1), self.rule)
        self._record(None)

    def add(self, x, lmo_result, rng):
        st = self.state
        x = _guard_duplicate(np.asarray(x, dtype=float), st.points, st.kernel.length_scale, rng)
        P_new = np.vstack([st.points, x[None]])
        new_kern = _kernel_for(self.base_kernel, P_new, self.bandwidth, self.log_scaling)
        w, lam, degenerate = _next_weights(self.rule, st.kernel, new_kern, st.points, st.weights,
                                           x, self.ls_reference)
        st.append(x, w)
        st.kernel = new_kern
        self._record(lmo_result, lam, degenerate)

    def _record(self, lmo_result, lam=None, degenerate=False):
        st = self.state
        rec = RunRecord(iteration=st.iteration, n_particles=st.n, step=lam, step_degenerate=degenerate,
                        bandwidth=st.kernel.length_scale)
        if lmo_result is not None:
            rec.lmo_objective = lmo_result.objective
            rec.lmo_degenerate = lmo_result.degenerate
        if self.evaluator is not None:
            rec.mmd2 = self.evaluator.mmd2(st.points, st.weights)
            if self.record_residual:
                rec.theorem1_residual = self.evaluator.residual(st.points)
        rec.wallclock_ms = 1e3 * (time.perf_counter() - self.t0)
        st.records.append(rec)

    def result(self, **extra):
        st = self.state
        return FWResult(st.particles, list(st.records), self.rule, **extra)

    def fail(self, exc, **extra):
        partial = None if self.state is None else self.result(**extra)
        return FWRunError(f"run stopped at {0 if self.state is None else self.state.n} particles: {exc}", partial)


def mmd_fw(target, kernel, n_particles, step_rule=StepRule.EMPIRICAL_BQ, lmo=None, init="map",
           reference=None, seed=0, map_steps=500, map_config=None, bandwidth="fixed",
           median_log_scaling=False, eval_kernel=None, line_search_reference=None, blocks=None,
           record_residual=True, callback=None):
    """Greedy MMD minimization by Frank-Wolfe.

    The first particle is an approximate MAP point (or ``init`` if given as
    an array); each later particle comes from ``approx_lmo`` (or ``pbc_lmo``
    when ``blocks`` is set). ``reference`` only feeds the per-iteration
    records; the optimizer never looks at it. With ``bandwidth="median"``
    the RBF bandwidth follows the median pairwise distance of the particles.
    """
    if int(n_particles) < 1:
        raise ValueError("n_particles must be >= 1")
    if bandwidth not in ("fixed", "median"):
        raise ValueError(f"unknown bandwidth policy {bandwidth!r}")
    lmo = lmo or LMOConfig()
    rng = np.random.default_rng(seed)
    run = _Run(target, kernel, step_rule, reference, eval_kernel, bandwidth, median_log_scaling,
               line_search_reference, record_residual)
    try:
        if isinstance(init, str):
            if init != "map":
                raise ValueError(f"unknown init {init!r}")
            x1 = _start_point(target, rng, map_steps, map_config)
        else:
            x1 = np.asarray(init, dtype=float)
        run.start(x1)
        while run.state.n < int(n_particles):
            if blocks is None:
                res = approx_lmo(run.state, lmo, rng)
            else:
                res = pbc_lmo(run.state, blocks, lmo, rng)
            run.add(res.point, res, rng)
            if callback is not None:
                callback(run.state)
    except (ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        raise run.fail(exc) from exc
    return run.result()


def cache_mmd_fw(target, kernel, cache, n_particles, lmo=None, step_rule=StepRule.EMPIRICAL_BQ,
                 reference=None, seed=0, eval_kernel=None, record_residual=True):
    """MMD-FW whose LMO first tries points from a cache (e.g. SVGD particles).

    Each iteration takes the cached point with the smallest gradient-estimate
    norm, refines it with L Adam steps and drops it from the cache. The first
    particle is the cached point with the smallest score norm, refined by L
    ascent steps on log p. Once the cache is empty the plain LMO takes over.
    """
    if int(n_particles) < 1:
        raise ValueError("n_particles must be >= 1")
    lmo = lmo or LMOConfig()
    rng = np.random.default_rng(seed)
    pool = cache.points if isinstance(cache, WeightedParticles) else _as_points(cache)
    remaining = list(range(pool.shape[0]))
    selected, shifts = [], []
    steps = int(lmo.inner_iterations)
    run = _Run(target, kernel, step_rule, reference, eval_kernel, "fixed", False, None, record_residual)
    try:
        if remaining:
            norms = np.linalg.norm(np.atleast_2d(target.grad_log_density(pool)), axis=1)
            first = int(np.argmin(norms))
            x1 = approx_map(target, pool[first], steps, lmo.adam)
            remaining.remove(first)
            selected.append(first)
            shifts.append(float(np.linalg.norm(x1 - pool[first])))
        else:
            x1 = _start_point(target, rng, 500, lmo.adam)
        run.start(x1)
        while run.state.n < int(n_particles):
            st = run.state
            if remaining:
                norms = np.linalg.norm(approx_lmo_gradient(st, pool[remaining]), axis=1)
                pick = remaining[int(np.argmin(norms))]
                P, w, S, kern = st.points, st.weights, st.scores, st.kernel
                x0 = pool[pick].copy()
                xL = _descend(lambda x: _field(kern, P, w, S, x[None])[0], x0, steps, lmo.adam)
                if xL is None:
                    raise LMOError("cached refinement diverged")
                f0, fL = lmo_surrogate(st, x0), lmo_surrogate(st, xL)
                res = LMOResult(xL, fL, f0, not fL < f0, 0)
                remaining.remove(pick)
                selected.append(pick)
                shifts.append(float(np.linalg.norm(xL - x0)))
            else:
                res = approx_lmo(st, lmo, rng)
            run.add(res.point, res, rng)
    except (ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        raise run.fail(exc, selected=selected, shifts=shifts) from exc
    return run.result(selected=selected, shifts=shifts)
