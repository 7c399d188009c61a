"""Greedy particle approximation of posteriors by Frank-Wolfe MMD minimization."""

from .discrepancy import ReferenceSamples, WeightedParticles, bq_variance, ksd, mmd2_vs_samples, stein_kernel
from .fw import LMOConfig, StepRule, approx_lmo, cache_mmd_fw, empirical_bq_weights, mmd_fw, pbc_lmo
from .kernels import IMQ, RBF, RFF, IMQScore, InvLog, gram_solve, median_bandwidth

__version__ = "0.1.0"
