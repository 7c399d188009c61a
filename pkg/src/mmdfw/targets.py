"""Unnormalized target densities with scores, plus MAP initialization.

All public methods accept a single point (d,) or a batch (n, d) and answer
in the matching shape.
"""

from __future__ import annotations

import csv

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .optim import Adam, AdamConfig

__all__ = [
    "TargetDensity",
    "NonFiniteGradientError",
    "Gaussian",
    "GaussianMixture",
    "toy_gmm11",
    "BayesianLogisticRegression",
    "BayesianNNRegression",
    "approx_map",
    "gmm_grad",
    "make_synthetic_logreg",
    "make_synthetic_regression",
    "load_csv_dataset",
]


class NonFiniteGradientError(FloatingPointError):
    """A target score came back NaN or infinite."""


def _batch(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    X = x.reshape(1, -1) if single else x
    if X.shape[1] != dim:
        raise ValueError(f"dimension mismatch: got {X.shape[1]}, target has {dim}")
    return X, single


class TargetDensity:
    """Interface: ``dim``, ``log_density``, ``grad_log_density``.

    Subclasses implement ``_logp(X) -> (n,)`` and ``_score(X) -> (n, d)``.
    """

    dim: int

    def _logp(self, X):
        raise NotImplementedError

    def _score(self, X):
        raise NotImplementedError

    def log_density(self, x):
        """Log density up to an additive constant."""
        X, single = _batch(x, self.dim)
        out = self._logp(X)
        return float(out[0]) if single else out

    # long-form alias
    log_density_unnorm = log_density

    def grad_log_density(self, x):
        X, single = _batch(x, self.dim)
        out = self._score(X)
        if not np.all(np.isfinite(out)):
            raise NonFiniteGradientError("non-finite score")
        return out[0] if single else out

    def hess_log_density(self, x, step=1e-5):
        """Hessian of log p; central differences of the score unless overridden."""
        X, single = _batch(x, self.dim)
        H = np.empty((X.shape[0], self.dim, self.dim))
        for j in range(self.dim):
            e = np.zeros(self.dim)
            e[j] = step
            H[:, :, j] = (self._score(X + e) - self._score(X - e)) / (2 * step)
        H = 0.5 * (H + np.transpose(H, (0, 2, 1)))
        return H[0] if single else H

    def stochastic_grad(self, x, seed, batch_size=None):
        """Unbiased score estimate; exact for targets without data."""
        return self.grad_log_density(x)

    def sample_prior(self, rng, n):
        raise NotImplementedError(f"{type(self).__name__} has no prior sampler")


class Gaussian(TargetDensity):
    """N(mean, cov)."""

    def __init__(self, mean, cov=None):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.dim = self.mean.shape[0]
        cov = np.eye(self.dim) if cov is None else np.atleast_2d(np.asarray(cov, dtype=float))
        self.cov = cov
        self.chol = np.linalg.cholesky(cov)
        self.precision = np.linalg.inv(cov)

    def __repr__(self):
        return f"Gaussian(dim={self.dim})"

    def _logp(self, X):
        r = X - self.mean
        return -0.5 * np.einsum("ni,ij,nj->n", r, self.precision, r)

    def _score(self, X):
        return -(X - self.mean) @ self.precision

    def hess_log_density(self, x, step=None):
        X, single = _batch(x, self.dim)
        H = np.broadcast_to(-self.precision, (X.shape[0], self.dim, self.dim)).copy()
        return H[0] if single else H

    def sample(self, rng, n):
        return self.mean + rng.standard_normal((n, self.dim)) @ self.chol.T

    def sample_prior(self, rng, n):
        # no likelihood term, so the prior is the target itself
        return self.sample(rng, n)


class GaussianMixture(TargetDensity):
    """sum_k pi_k N(mean_k, cov_k), evaluated with log-sum-exp."""

    def __init__(self, weights, means, covs):
        w = np.asarray(weights, dtype=float)
        mu = np.atleast_2d(np.asarray(means, dtype=float))
        S = np.asarray(covs, dtype=float)
        if S.ndim == 1:
            S = S[:, None, None]
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("mixture weights must be positive and sum to 1")
        K, d = mu.shape
        if w.shape != (K,) or S.shape != (K, d, d):
            raise ValueError("inconsistent mixture component shapes")
        self.weights, self.means, self.covs = w, mu, S
        self.dim = d
        self.chols = np.linalg.cholesky(S)  # raises on non-SPD
        self.precisions = np.linalg.inv(S)
        logdet = 2.0 * np.sum(np.log(np.diagonal(self.chols, axis1=1, axis2=2)), axis=1)
        self._log_norm = np.log(w) - 0.5 * (logdet + d * np.log(2 * np.pi))

    def __repr__(self):
        return f"GaussianMixture(components={len(self.weights)}, dim={self.dim})"

    def _parts(self, X):
        r = X[:, None, :] - self.means[None]  # (n, K, d)
        Pr = np.einsum("kij,nkj->nki", self.precisions, r)
        comp = self._log_norm - 0.5 * np.einsum("nki,nki->nk", r, Pr)
        return comp, Pr

    def _logp(self, X):
        comp, _ = self._parts(X)
        return logsumexp(comp, axis=1)

    def _resp(self, comp):
        return np.exp(comp - logsumexp(comp, axis=1, keepdims=True))

    def _score(self, X):
        comp, Pr = self._parts(X)
        return -np.einsum("nk,nki->ni", self._resp(comp), Pr)

    def hess_log_density(self, x, step=None):
        X, single = _batch(x, self.dim)
        comp, Pr = self._parts(X)
        r = self._resp(comp)
        g = -Pr
        mean_g = np.einsum("nk,nki->ni", r, g)
        H = (-np.einsum("nk,kij->nij", r, self.precisions)
             + np.einsum("nk,nki,nkj->nij", r, g, g)
             - mean_g[:, :, None] * mean_g[:, None, :])
        return H[0] if single else H

    def sample(self, rng, n):
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", self.chols[comp], z)

    def moments(self):
        mean = self.weights @ self.means
        r = self.means - mean
        cov = np.einsum("k,kij->ij", self.weights, self.covs) + np.einsum("k,ki,kj->ij", self.weights, r, r)
        return mean, cov

    def sample_prior(self, rng, n):
        """The mixture has no likelihood term, so prior draws are mixture draws."""
        return self.sample(rng, n)


def toy_gmm11(std=0.5):
    """Eleven equal-weight isotropic components in 2D: a centre, an inner ring of
    five at radius 1.5 and an outer ring of five at radius 3 (offset by 36 deg)."""
    ang = 2 * np.pi * np.arange(5) / 5
    inner = 1.5 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    outer = 3.0 * np.stack([np.cos(ang + np.pi / 5), np.sin(ang + np.pi / 5)], axis=1)
    means = np.vstack([np.zeros((1, 2)), inner, outer])
    covs = np.broadcast_to(std**2 * np.eye(2), (11, 2, 2)).copy()
    return GaussianMixture(np.full(11, 1.0 / 11), means, covs)


def gmm_grad(target, x):
    """Mixture score at x."""
    return target.grad_log_density(x)


class BayesianLogisticRegression(TargetDensity):
    """p(w, log a | X, y) with w | a ~ N(0, I/a) and a ~ Gamma(a0, rate b0).

    Parameter vector: [w (d or d+1 with bias), log a]. The log-a Jacobian is
    included so the density lives on all of R^dim.
    """

    def __init__(self, X, y, bias=False, a0=1.0, b0=0.01):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError("features must be (n, d) and labels (n,)")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0/1")
        self.bias = bool(bias)
        self.features_raw = X
        self.X = np.hstack([X, np.ones((X.shape[0], 1))]) if bias else X
        self.y = y
        self.a0, self.b0 = float(a0), float(b0)
        self.n_data, self.n_weights = self.X.shape
        self.dim = self.n_weights + 1

    def __repr__(self):
        return f"BayesianLogisticRegression(n={self.n_data}, dim={self.dim})"

    def _split(self, T):
        return T[:, :-1], T[:, -1]

    def _prior_logp(self, W, la):
        a = np.exp(la)
        return (0.5 * self.n_weights * la - 0.5 * a * np.sum(W**2, axis=1)
                + (self.a0 - 1.0) * la - self.b0 * a + la)

    def _prior_grad(self, W, la):
        a = np.exp(la)
        gw = -a[:, None] * W
        gla = 0.5 * self.n_weights + self.a0 - a * (0.5 * np.sum(W**2, axis=1) + self.b0)
        return gw, gla

    def _loglik(self, W, idx=None):
        X = self.X if idx is None else self.X[idx]
        y = self.y if idx is None else self.y[idx]
        f = W @ X.T  # (n_params, n_data)
        return np.sum(y * log_expit(f) + (1 - y) * log_expit(-f), axis=1)

    def _loglik_grad(self, W, idx=None):
        X = self.X if idx is None else self.X[idx]
        y = self.y if idx is None else self.y[idx]
        return (y - expit(W @ X.T)) @ X

    def _logp(self, T):
        W, la = self._split(T)
        return self._loglik(W) + self._prior_logp(W, la)

    def _score(self, T):
        W, la = self._split(T)
        gw, gla = self._prior_grad(W, la)
        return np.hstack([gw + self._loglik_grad(W), gla[:, None]])

    def grad_on_batch(self, x, idx):
        """Score estimate using data rows ``idx``, rescaled to the full data size."""
        T, single = _batch(x, self.dim)
        idx = np.asarray(idx)
        W, la = self._split(T)
        gw, gla = self._prior_grad(W, la)
        gw = gw + (self.n_data / idx.shape[0]) * self._loglik_grad(W, idx)
        out = np.hstack([gw, gla[:, None]])
        if not np.all(np.isfinite(out)):
            raise NonFiniteGradientError("non-finite score")
        return out[0] if single else out

    def minibatches(self, seed, batch_size):
        """Disjoint batches covering the data once, shuffled by ``seed``."""
        perm = np.random.default_rng(seed).permutation(self.n_data)
        return [perm[i:i + batch_size] for i in range(0, self.n_data, batch_size)]

    def stochastic_grad(self, x, seed, batch_size=None):
        if batch_size is None or batch_size >= self.n_data:
            return self.grad_log_density(x)
        idx = np.random.default_rng(seed).choice(self.n_data, size=batch_size, replace=False)
        return self.grad_on_batch(x, idx)

    def sample_prior(self, rng, n):
        a = rng.gamma(self.a0, 1.0 / self.b0, size=n)
        W = rng.standard_normal((n, self.n_weights)) / np.sqrt(a)[:, None]
        return np.hstack([W, np.log(a)[:, None]])

    def _design(self, X):
        X = np.asarray(X, dtype=float)
        return np.hstack([X, np.ones((X.shape[0], 1))]) if self.bias else X

    def predict_proba(self, points, weights, X):
        """Weighted mixture of per-particle class-1 probabilities."""
        P = np.atleast_2d(np.asarray(points, dtype=float))
        W = P[:, :-1]
        return np.asarray(weights, dtype=float) @ expit(W @ self._design(X).T)

    def accuracy(self, points, weights, X, y):
        prob = self.predict_proba(points, weights, X)
        return float(np.mean((prob > 0.5) == (np.asarray(y) == 1)))


class BayesianNNRegression(TargetDensity):
    """One hidden ReLU layer regression, y ~ N(f(x), 1/gamma).

    Weights ~ N(0, 1/lam); gamma, lam ~ Gamma(a0, rate b0) stored as logs.
    Parameter layout: [W1 (d*H), b1 (H), W2 (H), b2, log gamma, log lam].
    """

    def __init__(self, X, y, hidden=8, a0=1.0, b0=0.1):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(y, dtype=float)
        if y.shape != (X.shape[0],):
            raise ValueError("labels must be (n,)")
        if not 1 <= int(hidden) <= 8:
            raise ValueError("hidden units must be between 1 and 8")
        self.X, self.y = X, y
        self.hidden = int(hidden)
        self.a0, self.b0 = float(a0), float(b0)
        self.n_data, self.n_in = X.shape
        self.n_weights = self.n_in * self.hidden + 2 * self.hidden + 1
        self.dim = self.n_weights + 2

    def __repr__(self):
        return f"BayesianNNRegression(n={self.n_data}, hidden={self.hidden}, dim={self.dim})"

    def _unpack(self, T):
        d, H = self.n_in, self.hidden
        i = 0
        W1 = T[:, i:i + d * H].reshape(-1, d, H)
        i += d * H
        b1 = T[:, i:i + H]
        i += H
        W2 = T[:, i:i + H]
        i += H
        b2 = T[:, i]
        return W1, b1, W2, b2, T[:, -2], T[:, -1]

    def _forward(self, T, X):
        W1, b1, W2, b2, _, _ = self._unpack(T)
        pre = np.einsum("ni,pih->pnh", X, W1) + b1[:, None, :]
        act = np.maximum(pre, 0.0)
        out = np.einsum("pnh,ph->pn", act, W2) + b2[:, None]
        return pre, act, out

    def _logp(self, T):
        _, _, out = self._forward(T, self.X)
        lg, ll = T[:, -2], T[:, -1]
        resid = self.y[None] - out
        loglik = 0.5 * self.n_data * (lg - np.log(2 * np.pi)) - 0.5 * np.exp(lg) * np.sum(resid**2, axis=1)
        w = T[:, :self.n_weights]
        logprior = 0.5 * self.n_weights * ll - 0.5 * np.exp(ll) * np.sum(w**2, axis=1)
        hyper = sum((self.a0 - 1.0) * v - self.b0 * np.exp(v) + v for v in (lg, ll))
        return loglik + logprior + hyper

    def _score(self, T):
        W1, b1, W2, b2, lg, ll = self._unpack(T)
        pre, act, out = self._forward(T, self.X)
        g, lam = np.exp(lg), np.exp(ll)
        resid = self.y[None] - out  # (p, n)
        dout = g[:, None] * resid  # d loglik / d out
        gW2 = np.einsum("pn,pnh->ph", dout, act)
        gb2 = dout.sum(axis=1)
        dpre = dout[:, :, None] * W2[:, None, :] * (pre > 0)
        gW1 = np.einsum("ni,pnh->pih", self.X, dpre).reshape(T.shape[0], -1)
        gb1 = dpre.sum(axis=1)
        w = T[:, :self.n_weights]
        gw = np.hstack([gW1, gb1, gW2, gb2[:, None]]) - lam[:, None] * w
        glg = 0.5 * self.n_data - 0.5 * g * np.sum(resid**2, axis=1) + self.a0 - self.b0 * g
        gll = 0.5 * self.n_weights - 0.5 * lam * np.sum(w**2, axis=1) + self.a0 - self.b0 * lam
        return np.hstack([gw, glg[:, None], gll[:, None]])

    def sample_prior(self, rng, n):
        lg = np.log(rng.gamma(self.a0, 1.0 / self.b0, size=n))
        ll = np.log(rng.gamma(self.a0, 1.0 / self.b0, size=n))
        w = rng.standard_normal((n, self.n_weights)) / np.sqrt(np.exp(ll))[:, None]
        return np.hstack([w, lg[:, None], ll[:, None]])

    def predict(self, points, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return self._forward(np.atleast_2d(points), X)[2]

    def rmse(self, points, weights, X, y):
        mean = np.asarray(weights, dtype=float) @ self.predict(points, X)
        return float(np.sqrt(np.mean((mean - np.asarray(y)) ** 2)))

    def log_likelihood(self, points, weights, X, y):
        """Mean log of the weighted predictive density, floored at 1e-300."""
        P = np.atleast_2d(points)
        out = self.predict(P, X)
        g = np.exp(P[:, -2])[:, None]
        dens = np.sqrt(g / (2 * np.pi)) * np.exp(-0.5 * g * (np.asarray(y)[None] - out) ** 2)
        mix = np.asarray(weights, dtype=float) @ dens
        return float(np.mean(np.log(np.maximum(mix, 1e-300))))


def approx_map(target, init, steps=500, config=None):
    """Adam ascent on log p; returns the best point seen (never worse than init)."""
    if int(steps) < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(init, dtype=float).copy()
    if not np.all(np.isfinite(x)):
        raise ValueError("init must be finite")
    opt = Adam(config or AdamConfig())
    best, best_val = x.copy(), target.log_density(x)
    for _ in range(int(steps)):
        g = target.grad_log_density(x)
        x = opt.step(x, -g)
        val = target.log_density(x)
        if np.isfinite(val) and val > best_val:
            best, best_val = x.copy(), val
    return best


def make_synthetic_logreg(n, d, seed, bias=False, weight_scale=1.0):
    """Gaussian features, gold weights ~ N(0, weight_scale^2), logistic labels.

    Returns (target, gold_weights).
    """
    if n < 10 or d < 1:
        raise ValueError("need n >= 10 and d >= 1")
    rng = np.random.default_rng(seed)
    p = d + 1 if bias else d
    gold = weight_scale * rng.standard_normal(p)
    X = rng.standard_normal((n, d))
    Xd = np.hstack([X, np.ones((n, 1))]) if bias else X
    y = (rng.uniform(size=n) < expit(Xd @ gold)).astype(float)
    return BayesianLogisticRegression(X, y, bias=bias), gold


def make_synthetic_regression(n, seed, noise=0.1):
    """1-D inputs on [-3, 3] with y = sin(x) + Gaussian noise."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-3.0, 3.0, size=(n, 1))
    y = np.sin(X[:, 0]) + noise * rng.standard_normal(n)
    return X, y


def load_csv_dataset(path):
    """CSV with a header row; features first, label in the last column."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    try:
        data = np.array(rows, dtype=float)
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric entry ({exc})") from None
    if data.shape[1] != len(header) or data.shape[1] < 2:
        raise ValueError(f"{path}: expected {len(header)} columns with at least one feature")
    return data[:, :-1], data[:, -1]
