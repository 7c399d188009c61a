"""HMC with an identity mass matrix, used to draw gold reference samples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .discrepancy import ReferenceSamples
from .targets import approx_map

__all__ = ["HMCConfig", "HMCResult", "HMCError", "leapfrog", "hamiltonian", "hmc_sample", "tune_step_size"]


class HMCError(RuntimeError):
    pass


@dataclass(frozen=True)
class HMCConfig:
    step_size: float = 0.1
    leapfrog_steps: int = 20
    n_samples: int = 1000
    burn_in: int = 500
    thinning: int = 1
    seed: int = 0
    tune: bool = False
    map_steps: int = 500

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if int(self.leapfrog_steps) < 1 or int(self.n_samples) < 1 or int(self.thinning) < 1:
            raise ValueError("leapfrog_steps, n_samples and thinning must be >= 1")
        if int(self.burn_in) < 0:
            raise ValueError("burn_in must be >= 0")


@dataclass(frozen=True)
class HMCResult:
    samples: ReferenceSamples
    acceptance_rate: float
    step_size: float


def leapfrog(grad_log_p, x, p, step_size, n_steps):
    """Velocity Verlet for H = -log p(x) + |p|^2 / 2."""
    x = np.array(x, dtype=float)
    p = np.array(p, dtype=float) + 0.5 * step_size * grad_log_p(x)
    for i in range(n_steps):
        x = x + step_size * p
        g = grad_log_p(x)
        p = p + (step_size if i < n_steps - 1 else 0.5 * step_size) * g
    return x, p


def hamiltonian(log_p, x, p):
    return -log_p(x) + 0.5 * float(np.dot(p, p))


def _chain(target, x0, eps, n_steps, n_iter, rng, keep):
    x = np.array(x0, dtype=float)
    logp = target.log_density(x)
    accepted, finite = 0, 0
    out = []
    for it in range(n_iter):
        p0 = rng.standard_normal(x.shape)
        u = rng.uniform()
        with np.errstate(all="ignore"):
            try:
                x1, p1 = leapfrog(target.grad_log_density, x, p0, eps, n_steps)
                logp1 = target.log_density(x1)
            except FloatingPointError:
                x1, logp1 = None, -np.inf
        if x1 is not None and np.isfinite(logp1) and np.all(np.isfinite(p1)):
            finite += 1
            log_ratio = (logp1 - 0.5 * p1 @ p1) - (logp - 0.5 * p0 @ p0)
            if np.log(u) < log_ratio:
                x, logp = x1, logp1
                accepted += 1
        if keep(it):
            out.append(x.copy())
    if finite == 0:
        raise HMCError("every proposal was non-finite; step size is probably too large")
    return x, np.array(out), accepted / n_iter


def tune_step_size(target, x0, config, rng, target_rate=0.8, pilot=200, rounds=10):
    """Double or halve the step size until a pilot run accepts within 0.1 of ``target_rate``.

    If the search oscillates, the largest tried step whose pilot acceptance
    reached ``target_rate - 0.1`` wins (the smallest tried step if none did).
    """
    eps = float(config.step_size)
    tried = {}
    for _ in range(rounds):
        try:
            _, _, rate = _chain(target, x0, eps, int(config.leapfrog_steps), pilot, rng, lambda i: False)
        except HMCError:
            rate = 0.0
        tried[eps] = rate
        if abs(rate - target_rate) <= 0.1:
            return eps
        eps = eps / 2.0 if rate < target_rate else eps * 2.0
        if eps in tried:
            break
    good = [e for e, r in tried.items() if r >= target_rate - 0.1]
    return max(good) if good else min(tried)


def hmc_sample(target, config=None, init=None):
    """Draw ``n_samples`` post burn-in, thinned HMC samples.

    The chain starts at an approximate MAP point (found from ``init`` or a
    prior draw) so unimodal posteriors need little burn-in.
    """
    config = config or HMCConfig()
    rng = np.random.default_rng(config.seed)
    if init is None:
        try:
            init = np.atleast_2d(target.sample_prior(rng, 1))[0]
        except NotImplementedError:
            init = np.zeros(target.dim)
    x0 = approx_map(target, init, int(config.map_steps))
    eps = tune_step_size(target, x0, config, rng) if config.tune else float(config.step_size)
    burn, thin, n = int(config.burn_in), int(config.thinning), int(config.n_samples)
    total = burn + thin * n
    keep = lambda i: i >= burn and (i - burn) % thin == thin - 1
    _, samples, rate = _chain(target, x0, eps, int(config.leapfrog_steps), total, rng, keep)
    return HMCResult(ReferenceSamples(samples), float(rate), eps)
