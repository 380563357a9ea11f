"""Differentially private payload-size noise.

The number of junk ids added to a risk set is N = t + floor(X) with X a
Laplace(0, lambda) variable truncated to [-t, inf). Choosing
lambda = A/epsilon and t = ceil(lambda * ln((e^(A/lambda) - 1 + delta) / (2 delta)))
makes the padded count (epsilon, delta)-differentially private for a
release whose sensitivity is A entries per diagnosed individual.
"""

import math
from dataclasses import dataclass

import numpy as np

from .core import EPHEMERAL_ID_LEN

DEFAULT_SENSITIVITY = 2016


@dataclass(frozen=True)
class DpParams:
    epsilon: float
    delta: float
    sensitivity: int
    lam: float
    t: int


def dp_params(epsilon: float, delta: float, sensitivity: int = DEFAULT_SENSITIVITY) -> DpParams:
    """Derive the Laplace scale and truncation shift for a privacy target."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if sensitivity < 1:
        raise ValueError(f"sensitivity must be >= 1, got {sensitivity}")
    lam = sensitivity / epsilon
    raw = lam * math.log((math.exp(sensitivity / lam) - 1 + delta) / (2 * delta))
    t = max(0, math.ceil(raw))
    return DpParams(epsilon, delta, sensitivity, lam, t)


def laplace_cdf(x, lam):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < 0, 0.5 * np.exp(x / lam), 1.0 - 0.5 * np.exp(-x / lam))


def laplace_inv_cdf(u, lam):
    u = np.asarray(u, dtype=np.float64)
    return np.where(u < 0.5, lam * np.log(2.0 * u), -lam * np.log(2.0 * (1.0 - u)))


def truncated_cdf(x, params: DpParams):
    """CDF of the Laplace(0, lam) variable truncated to [-t, inf)."""
    lo = 0.5 * math.exp(-params.t / params.lam)
    return np.clip((laplace_cdf(x, params.lam) - lo) / (1.0 - lo), 0.0, 1.0)


def sample_truncated(params: DpParams, rng: np.random.Generator, size=None):
    """Inverse-CDF draws from the truncated Laplace distribution."""
    lo = 0.5 * math.exp(-params.t / params.lam)
    u = rng.uniform(lo, 1.0, size)
    return laplace_inv_cdf(u, params.lam)


def sample_junk_count(params: DpParams, rng: np.random.Generator, size=None):
    """Draw the junk-id count N = t + floor(X); never negative."""
    x = sample_truncated(params, rng, size)
    n = params.t + np.floor(x).astype(np.int64)
    if size is None:
        return int(n)
    return n


def junk_count_percentile(params: DpParams, q: float) -> int:
    """Closed-form percentile of the junk count (no sampling)."""
    lo = 0.5 * math.exp(-params.t / params.lam)
    u = lo + q * (1.0 - lo)
    if u < 0.5:
        x = params.lam * math.log(2.0 * u)
    else:
        x = -params.lam * math.log(2.0 * (1.0 - u))
    return params.t + math.floor(x)


def generate_junk_ids(n: int, rng: np.random.Generator) -> list[bytes]:
    """Uniform 15-byte ids, independent of every registered beacon key."""
    if n == 0:
        return []
    blob = rng.bytes(n * EPHEMERAL_ID_LEN)
    return [blob[i * EPHEMERAL_ID_LEN : (i + 1) * EPHEMERAL_ID_LEN] for i in range(n)]
