"""Build objects from a config, run one experiment, write its outputs."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..baselines import SPSearchConfig, SVGDConfig, SVGDDivergenceError, kernel_herding, stein_points_greedy, svgd_run
from ..discrepancy import ReferenceSamples, WeightedParticles, ksd, mmd2_from_parts
from ..fw import FWRunError, LMOConfig, StepRule, cache_mmd_fw, mmd_fw, replay_weights
from ..kernels import IMQ, RBF, RFF, IMQScore, InvLog, median_bandwidth
from ..optim import AdamConfig
from ..sampling import HMCConfig, hmc_sample
from ..targets import (BayesianLogisticRegression, BayesianNNRegression, Gaussian, GaussianMixture,
                       load_csv_dataset, make_synthetic_logreg, make_synthetic_regression, toy_gmm11)
from .config import ConfigError
from .io import ResultTable, atomic_write, read_particles, read_samples, write_particles, write_samples

__all__ = ["BuiltTarget", "RunOutput", "ExperimentFailed", "build_target", "build_kernel", "build_reference",
           "run_experiment", "eval_mmd_curve", "sample_reference"]

# placeholder RBF bandwidth while a median-policy run has a single particle
MEDIAN_START_BANDWIDTH = 1.0


class ExperimentFailed(RuntimeError):
    """The method stopped early; partial outputs were written before raising."""

    def __init__(self, message, output):
        super().__init__(message)
        self.output = output


@dataclass
class BuiltTarget:
    target: object
    test_X: np.ndarray | None = None
    test_y: np.ndarray | None = None


@dataclass
class RunOutput:
    table: ResultTable
    particles: WeightedParticles | None
    meta: dict = field(default_factory=dict)
    reference: ReferenceSamples | None = None


def _split(X, y, data):
    frac = float(data.get("test_fraction", 0.1))
    n = X.shape[0]
    n_test = int(round(frac * n))
    if n_test == 0:
        return X, y, None, None
    if n - n_test < 1:
        raise ConfigError("target.data: test split leaves no training data")
    perm = np.random.default_rng(int(data.get("split_seed", 0))).permutation(n)
    tr, te = perm[:n - n_test], perm[n - n_test:]
    return X[tr], y[tr], X[te], y[te]


def _dataset(spec, base_dir):
    data = spec.get("data", {})
    if "path" in data:
        p = Path(data["path"])
        p = p if p.is_absolute() else Path(base_dir) / p
        if not p.exists():
            raise ConfigError(f"target.data.path: {p} does not exist")
        try:
            X, y = load_csv_dataset(p)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    else:
        syn = data["synthetic"]
        seed = int(syn.get("seed", 0))
        n = int(syn.get("n", 500))
        if spec["family"] == "logreg":
            full, _ = make_synthetic_logreg(n, int(syn.get("d", 2)), seed, bias=False,
                                            weight_scale=float(syn.get("weight_scale", 1.0)))
            X, y = full.features_raw, full.y
        else:
            X, y = make_synthetic_regression(n, seed, float(syn.get("noise", 0.1)))
    return _split(X, y, data), data


def build_target(spec, base_dir="."):
    """Target density plus the held-out split for predictive targets."""
    family = spec["family"]
    try:
        if family == "gaussian":
            mean = np.asarray(spec["mean"], dtype=float)
            return BuiltTarget(Gaussian(mean, spec.get("cov")))
        if family == "gmm":
            if "preset" in spec:
                return BuiltTarget(toy_gmm11(float(spec.get("std", 0.5))))
            comps = spec["components"]
            w = np.array([c["weight"] for c in comps], dtype=float)
            return BuiltTarget(GaussianMixture(w / w.sum(), [c["mean"] for c in comps], [c["cov"] for c in comps]))
        (X, y, Xt, yt), _ = _dataset(spec, base_dir)
        if family == "logreg":
            target = BayesianLogisticRegression(X, y, bias=bool(spec.get("bias", False)))
        else:
            target = BayesianNNRegression(X, y, hidden=int(spec.get("hidden", 8)))
        return BuiltTarget(target, Xt, yt)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise ConfigError(f"target: {exc}") from None


def build_kernel(spec, dim, target=None):
    """(kernel, bandwidth policy). A median bandwidth gives an RBF placeholder."""
    kind = spec["type"]
    try:
        if kind == "rbf":
            h = spec.get("bandwidth", 1.0)
            if h == "median":
                return RBF(MEDIAN_START_BANDWIDTH), "median"
            return RBF(float(h)), "fixed"
        if kind == "imq":
            return IMQ(float(spec.get("alpha", 1.0)), float(spec.get("beta", -0.5))), "fixed"
        if kind == "invlog":
            return InvLog(float(spec.get("alpha", 1.0))), "fixed"
        if kind == "imq-score":
            if target is None:
                raise ConfigError("kernel: imq-score needs a target")
            return IMQScore(target, float(spec.get("alpha", 1.0)), float(spec.get("beta", -0.5))), "fixed"
        return RFF(float(spec["bandwidth"]), int(spec.get("num_features", 256)), dim,
                   seed=int(spec.get("seed", 0)), sampler=spec.get("sampler", "qmc")), "fixed"
    except ValueError as exc:
        raise ConfigError(f"kernel: {exc}") from None


def _kernel_spec(kernel):
    """Config-style spec of a ready kernel (median bandwidths resolved)."""
    if isinstance(kernel, RBF):
        return {"type": "rbf", "bandwidth": kernel.bandwidth}
    if isinstance(kernel, RFF):
        return {"type": "rff", "bandwidth": kernel.bandwidth, "num_features": kernel.num_features,
                "seed": kernel.seed, "sampler": kernel.sampler}
    if isinstance(kernel, IMQScore):
        return {"type": "imq-score", "alpha": kernel.alpha, "beta": kernel.beta}
    if isinstance(kernel, IMQ):
        return {"type": "imq", "alpha": kernel.alpha, "beta": kernel.beta}
    return {"type": "invlog", "alpha": kernel.alpha}


def _hmc_config(spec, seed, n_samples=None):
    spec = dict(spec or {})
    spec.setdefault("seed", seed)
    if n_samples is not None:
        spec["n_samples"] = n_samples
    return HMCConfig(**spec)


def build_reference(ref, target, seed, base_dir="."):
    """Gold samples from exact sampling, HMC or a sample file."""
    if ref is None:
        return None
    src = ref["source"]
    rseed = int(ref.get("seed", seed))
    if src == "exact":
        return ReferenceSamples(target.sample(np.random.default_rng(rseed), int(ref.get("n_samples", 10_000))))
    if src == "hmc":
        return hmc_sample(target, _hmc_config(ref.get("hmc"), rseed, ref.get("n_samples"))).samples
    p = Path(ref["path"])
    p = p if p.is_absolute() else Path(base_dir) / p
    if not p.exists():
        raise ConfigError(f"reference.path: {p} does not exist")
    samples, _ = read_samples(p)
    if samples.dim != target.dim:
        raise ConfigError(f"reference: samples have dimension {samples.dim}, target has {target.dim}")
    return samples


class _Scorer:
    """mmd2 of successive weighted point sets against one reference."""

    def __init__(self, kernel, reference):
        self.kernel = kernel
        self.Y = reference.samples
        self.ekk = kernel.mean_self(self.Y)

    def mmd2(self, points, weights):
        K = self.kernel.matrix(points, points)
        return mmd2_from_parts(np.asarray(weights), K, self.kernel.mean_cross(points, self.Y), self.ekk)


def _eval_kernel(cfg, kernel, policy, reference, target):
    spec = cfg.evaluation.get("kernel")
    if spec is not None:
        return build_kernel(spec, target.dim, target)[0]
    if policy == "fixed":
        return kernel
    if reference is not None and reference.n >= 2:
        return RBF(median_bandwidth(reference.samples))
    return None


def _metric(cfg, built):
    if built.test_X is None:
        return None
    default = "accuracy" if isinstance(built.target, BayesianLogisticRegression) else "rmse"
    return cfg.evaluation.get("test_metric", default)


def _metric_value(name, built, points, weights):
    t, X, y = built.target, built.test_X, built.test_y
    if name == "accuracy":
        return t.accuracy(points, weights, X, y)
    if name == "rmse":
        return t.rmse(points, weights, X, y)
    return t.log_likelihood(points, weights, X, y)


class _Clock(list):
    """A list that also stamps the elapsed time of every append."""

    def __init__(self, t0):
        super().__init__()
        self.t0 = t0
        self.stamps = []

    def append(self, item):
        super().append(item)
        self.stamps.append(1e3 * (time.perf_counter() - self.t0))


def _adam(section):
    keys = ("lr", "beta1", "beta2", "eps")
    return AdamConfig(**{k: section[k] for k in keys if k in section})


def _lmo(method):
    s = method.get("lmo", {})
    box = tuple(s["box"]) if "box" in s else None
    return LMOConfig(int(s.get("inner_iterations", 50)), _adam(s), s.get("init_policy", "fitted"),
                     int(s.get("restarts", 3)), box)


def _prefix_rows(table, built, points, weight_seq, scorer, eval_kernel, cfg, metric, clocks=None, records=None):
    want_ksd = bool(cfg.evaluation.get("ksd", False)) and eval_kernel is not None
    keep_clock = bool(cfg.output.get("wallclock", False))
    for n, w in enumerate(weight_seq, start=1):
        P = points[:n]
        rec = None if records is None else records[n - 1]
        if rec is not None and rec.mmd2 is not None:
            mmd2 = rec.mmd2
        else:
            mmd2 = None if scorer is None else scorer.mmd2(P, w)
        clock = None
        if keep_clock:
            clock = rec.wallclock_ms if rec is not None else (None if clocks is None else clocks[n - 1])
        table.add(iteration=n - 1, n_particles=n, mmd2=mmd2,
                  ksd=ksd(WeightedParticles(P, w), built.target, eval_kernel) if want_ksd else None,
                  theorem1_residual=None if rec is None else rec.theorem1_residual,
                  test_metric=None if metric is None else _metric_value(metric, built, P, w),
                  wallclock_ms=clock)


def run_experiment(cfg):
    """Run the configured method and write the result table (and particles).

    Raises ExperimentFailed after writing partial outputs if the method stops.
    """
    built = build_target(cfg.target, cfg.base_dir)
    target = built.target
    kernel, policy = build_kernel(cfg.kernel, target.dim, target)
    reference = build_reference(cfg.reference, target, cfg.seed, cfg.base_dir)
    if reference is not None and reference.dim != target.dim:
        raise ConfigError("reference dimension does not match the target")
    if cfg.output_path("reference") is not None and reference is not None:
        write_samples(cfg.output_path("reference"), reference, {"source": cfg.reference["source"]})
    eval_kernel = _eval_kernel(cfg, kernel, policy, reference, target)
    metric = _metric(cfg, built)
    method = cfg.method
    name, N, seed = method["name"], int(method["n_particles"]), cfg.seed
    log_scaling = bool(method.get("median_log_scaling", False))
    table = ResultTable()
    failure = None
    meta = {"method": name, "seed": seed, "target": cfg.target["family"], "bandwidth_policy": policy,
            "median_log_scaling": log_scaling}

    if name in ("mmd-fw", "cache-mmd-fw"):
        rule = StepRule(method.get("step_rule", "empirical-bq"))
        lmo = _lmo(method)
        record_residual = bool(cfg.evaluation.get("theorem1", True))
        try:
            if name == "mmd-fw":
                res = mmd_fw(target, kernel, N, rule, lmo, reference=reference, seed=seed,
                             map_steps=int(method.get("map_steps", 500)), bandwidth=policy,
                             median_log_scaling=log_scaling, eval_kernel=eval_kernel, blocks=method.get("blocks"),
                             record_residual=record_residual)
            else:
                cache = _svgd_cache(method, target, kernel, policy, log_scaling, seed, N)
                if policy == "median":
                    kernel, policy = RBF(median_bandwidth(cache.points)), "fixed"
                    meta["bandwidth_policy"] = policy
                res = cache_mmd_fw(target, kernel, cache, N, lmo, rule, reference=reference, seed=seed,
                                   eval_kernel=eval_kernel, record_residual=record_residual)
        except FWRunError as exc:
            res, failure = exc.partial, str(exc)
        meta["step_rule"] = rule.value
        if res is not None:
            pts = res.particles.points
            weights = replay_weights(kernel, pts, rule, policy, log_scaling)
            _prefix_rows(table, built, pts, weights, None, eval_kernel, cfg, metric, records=res.records)
            particles = res.particles
        else:
            particles = None
    elif name == "svgd":
        particles, failure = _run_svgd(cfg, method, built, kernel, policy, log_scaling, seed, N,
                                       reference, eval_kernel, metric, table)
    else:
        clock = _Clock(time.perf_counter())
        pts, stamps = None, None
        try:
            if name == "stein-points":
                s = method.get("stein_points", {})
                search = SPSearchConfig(int(s.get("n_candidates", 20)), float(s.get("proposal_scale", 1.0)),
                                        tuple(s["box"]) if "box" in s else None, int(s.get("map_iterations", 100)),
                                        max_redraws=int(s.get("max_redraws", 100)))
                pts = stein_points_greedy(target, kernel, N, search, seed, record=clock).points
                # candidates for step n are drawn once the first n points exist
                stamps = clock.stamps + [1e3 * (time.perf_counter() - clock.t0)]
            else:
                h = method.get("herding", {})
                pool = reference.samples[:int(h.get("pool_size", reference.n))]
                pts = kernel_herding(kernel, pool, N, h.get("rule", "printed"))
        except (ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
            failure = f"{name} failed: {exc}"
        particles = None
        if pts is not None:
            weights = [np.full(n, 1.0 / n) for n in range(1, N + 1)]
            scorer = None if reference is None or eval_kernel is None else _Scorer(eval_kernel, reference)
            _prefix_rows(table, built, pts, weights, scorer, eval_kernel, cfg, metric, clocks=stamps)
            particles = WeightedParticles.uniform(pts)

    meta["kernel"] = _kernel_spec(kernel)
    out = RunOutput(table, particles, meta, reference)
    _write(cfg, out, failure)
    if failure is not None:
        raise ExperimentFailed(failure, out)
    return out


def _svgd_config(method, policy, log_scaling, n):
    s = method.get("svgd", {})
    return SVGDConfig(int(s.get("n_particles", n)), int(s.get("iterations", 1000)), _adam(s), policy, log_scaling)


def _svgd_cache(method, target, kernel, policy, log_scaling, seed, N):
    try:
        return svgd_run(target, kernel, _svgd_config(method, policy, log_scaling, N), seed)
    except SVGDDivergenceError as exc:
        raise FWRunError(f"cache run diverged: {exc}", None) from exc


def _run_svgd(cfg, method, built, kernel, policy, log_scaling, seed, N, reference, eval_kernel, metric, table):
    every = int(method.get("svgd", {}).get("record_every", 1))
    config = _svgd_config(method, policy, log_scaling, N)
    clock = _Clock(time.perf_counter())
    failure = None
    try:
        final = svgd_run(built.target, kernel, config, seed, history=clock)
    except SVGDDivergenceError as exc:
        final, failure = exc.partial, str(exc)
    scorer = None if reference is None or eval_kernel is None else _Scorer(eval_kernel, reference)
    want_ksd = bool(cfg.evaluation.get("ksd", False)) and eval_kernel is not None
    keep_clock = bool(cfg.output.get("wallclock", False))
    n = final.n
    w = np.full(n, 1.0 / n)
    for it, X in enumerate(clock, start=1):
        if it % every and it != len(clock):
            continue
        table.add(iteration=it, n_particles=n, mmd2=None if scorer is None else scorer.mmd2(X, w),
                  ksd=ksd(WeightedParticles(X, w), built.target, eval_kernel) if want_ksd else None,
                  test_metric=None if metric is None else _metric_value(metric, built, X, w),
                  wallclock_ms=clock.stamps[it - 1] if keep_clock else None)
    return final, failure


def _write(cfg, out, failure):
    out.table.failure = failure
    atomic_write(cfg.output_path("results"), out.table.to_csv())
    if cfg.output_path("particles") is not None and out.particles is not None:
        write_particles(cfg.output_path("particles"), out.particles, out.meta)


def eval_mmd_curve(particles_path, reference_path, kernel_spec):
    """mmd2 of every prefix of a stored particle sequence against a reference file.

    Prefix weights are recomputed with the run's step rule and kernel, read
    from the particle file metadata; ``kernel_spec`` sets the evaluation kernel.
    """
    particles, meta = read_particles(particles_path)
    reference, _ = read_samples(reference_path)
    if reference.dim != particles.dim:
        raise ConfigError(f"dimension mismatch: particles {particles.dim}, reference {reference.dim}")
    if kernel_spec["type"] == "imq-score" or meta.get("kernel", {}).get("type") == "imq-score":
        raise ConfigError("imq-score kernels need a target and cannot be rebuilt from files")
    if kernel_spec.get("bandwidth") == "median":
        eval_kernel = RBF(median_bandwidth(reference.samples))
    else:
        eval_kernel = build_kernel(kernel_spec, particles.dim)[0]
    P = particles.points
    rule = meta.get("step_rule")
    if rule is None:
        weights = [np.full(n, 1.0 / n) for n in range(1, particles.n + 1)]
    else:
        method_kernel, _ = build_kernel(meta["kernel"], particles.dim)
        weights = replay_weights(method_kernel, P, rule, meta.get("bandwidth_policy", "fixed"),
                                 bool(meta.get("median_log_scaling", False)))
    scorer = _Scorer(eval_kernel, reference)
    table = ResultTable()
    for n, w in enumerate(weights, start=1):
        table.add(iteration=n - 1, n_particles=n, mmd2=scorer.mmd2(P[:n], w))
    return table


def sample_reference(target_spec, hmc_spec, base_dir="."):
    """HMC gold samples for a standalone target section."""
    built = build_target(target_spec, base_dir)
    try:
        config = _hmc_config(hmc_spec, 0)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"hmc: {exc}") from None
    return hmc_sample(built.target, config)
