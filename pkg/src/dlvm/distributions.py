"""Output, prior and variational distributions.

The batched helpers (``*_logpdf_batch``, ``diag_rank1_logpdf``) work on numpy
arrays and on :class:`~dlvm.autodiff.Tensor` objects alike, so the same code
evaluates ELBO terms in fast numpy loops and on the training tape.  The
dataclass front-ends are the small single-datum API.

Random numbers come from ``numpy.random.Generator(Philox(seed))``; normals use
the generator's own ``standard_normal``.  :func:`make_rng` is the only place a
generator is created from a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

LOG_2PI = math.log(2.0 * math.pi)

#: Bernoulli probabilities are kept in ``[BERNOULLI_EPS, 1 - BERNOULLI_EPS]``.
BERNOULLI_EPS = 1e-7


class DistributionError(ValueError):
    pass


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator used everywhere in the package."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class GaussianIso:
    mean: np.ndarray
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise DistributionError("variance must be positive")


@dataclass(frozen=True)
class GaussianDiag:
    mean: np.ndarray
    diag: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.diag) <= 0):
            raise DistributionError("diagonal variances must be positive")


@dataclass(frozen=True)
class GaussianDiagRank1:
    """N(mean, Diag(diag) + u u^T)."""

    mean: np.ndarray
    diag: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.diag) <= 0):
            raise DistributionError("diagonal variances must be positive")

    @property
    def covariance(self) -> np.ndarray:
        u = np.asarray(self.u, dtype=np.float64)
        return np.diag(self.diag) + np.outer(u, u)


@dataclass(frozen=True)
class BernoulliProduct:
    probs: np.ndarray

    def clamped(self) -> np.ndarray:
        return np.clip(np.asarray(self.probs, dtype=np.float64), BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)


# -- batched, tape-compatible log densities ---------------------------------


def gaussian_diag_logpdf_batch(x, mean, var):
    """Row-wise log N(x | mean, Diag(var)) for arrays of shape (B, p)."""
    r = x - mean
    return -0.5 * ad.sum(ad.log(var) + r * r / var, axis=-1) - 0.5 * value_of_dim(x) * LOG_2PI


def bernoulli_logpmf_batch(x, probs):
    """Row-wise sum of x log p + (1 - x) log(1 - p)."""
    return ad.sum(x * ad.log(probs) + (1.0 - x) * ad.log(1.0 - probs), axis=-1)


def std_normal_logpdf_batch(z):
    return -0.5 * ad.sum(z * z, axis=-1) - 0.5 * value_of_dim(z) * LOG_2PI


def diag_rank1_logpdf(z, mean, logdiag, u):
    """Row-wise log N(z | mean, Diag(exp(logdiag)) + u u^T).

    Uses log|D + uu^T| = log|D| + log(1 + u^T D^-1 u) and the Sherman-Morrison
    inverse, so the cost is linear in the dimension.
    """
    r = z - mean
    inv_d = ad.exp(-logdiag)
    c = 1.0 + ad.sum(u * u * inv_d, axis=-1)
    ru = ad.sum(r * u * inv_d, axis=-1)
    quad = ad.sum(r * r * inv_d, axis=-1) - ru * ru / c
    logdet = ad.sum(logdiag, axis=-1) + ad.log(c)
    return -0.5 * (quad + logdet) - 0.5 * value_of_dim(z) * LOG_2PI


def diag_rank1_sample(mean, logdiag, u, eps, eps_rank1):
    """Reparameterised draw mean + sqrt(diag) * eps + u * eps_rank1.

    ``eps`` has the shape of ``mean``; ``eps_rank1`` has one entry per row and
    is broadcast across the columns here.
    """
    e2 = np.broadcast_to(np.asarray(eps_rank1, dtype=np.float64).reshape(-1, 1), ad.value_of(mean).shape)
    return mean + ad.exp(0.5 * logdiag) * eps + u * e2


def value_of_dim(x) -> int:
    return ad.value_of(x).shape[-1]


# -- single-distribution API -------------------------------------------------


def gaussian_logpdf(x, dist) -> float:
    """Exact log-density of ``x`` under a Gaussian of any of the three families."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(dist.mean, dtype=np.float64)
    if x.shape != mean.shape:
        raise DistributionError(f"dimension mismatch: {x.shape} vs {mean.shape}")
    if isinstance(dist, GaussianIso):
        var = np.full(x.shape, float(dist.variance))
        return float(gaussian_diag_logpdf_batch(x[None], mean[None], var[None])[0])
    if isinstance(dist, GaussianDiag):
        return float(gaussian_diag_logpdf_batch(x[None], mean[None], np.asarray(dist.diag)[None])[0])
    if isinstance(dist, GaussianDiagRank1):
        logdiag = np.log(np.asarray(dist.diag, dtype=np.float64))
        return float(diag_rank1_logpdf(x[None], mean[None], logdiag[None], np.asarray(dist.u)[None])[0])
    raise DistributionError(f"not a Gaussian family: {type(dist).__name__}")


def bernoulli_logpmf(x, dist: BernoulliProduct) -> float:
    x = np.asarray(x, dtype=np.float64)
    if not np.all((x == 0) | (x == 1)):
        raise DistributionError("Bernoulli observations must be 0 or 1")
    probs = dist.clamped()
    if x.shape != probs.shape:
        raise DistributionError(f"dimension mismatch: {x.shape} vs {probs.shape}")
    return float(bernoulli_logpmf_batch(x[None], probs[None])[0])


def sample(dist, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw from ``dist``; returns shape ``(p,)`` or ``(size, p)``."""
    n = 1 if size is None else size
    if isinstance(dist, BernoulliProduct):
        probs = np.asarray(dist.probs, dtype=np.float64)
        out = (rng.random((n, probs.size)) < probs).astype(np.float64)
    else:
        mean = np.asarray(dist.mean, dtype=np.float64)
        eps = rng.standard_normal((n, mean.size))
        if isinstance(dist, GaussianIso):
            out = mean + math.sqrt(dist.variance) * eps
        elif isinstance(dist, GaussianDiag):
            out = mean + np.sqrt(dist.diag) * eps
        elif isinstance(dist, GaussianDiagRank1):
            e2 = rng.standard_normal(n)
            out = diag_rank1_sample(
                np.broadcast_to(mean, (n, mean.size)),
                np.broadcast_to(np.log(dist.diag), (n, mean.size)),
                np.broadcast_to(dist.u, (n, mean.size)),
                eps,
                e2,
            )
        else:
            raise DistributionError(f"cannot sample {type(dist).__name__}")
    return out[0] if size is None else out


def log_sum_exp(values, axis=None):
    """Max-shifted log(sum(exp(values)))."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise DistributionError("log_sum_exp of an empty input")
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):  # all -inf inputs give -inf
        out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log_mean_exp(values, axis=None):
    v = np.asarray(values, dtype=np.float64)
    n = v.size if axis is None else v.shape[axis]
    return log_sum_exp(v, axis=axis) - math.log(n)


def kl_gaussian_to_std(q: GaussianDiagRank1) -> float:
    """KL(q || N(0, I)) for a diagonal plus rank-one Gaussian."""
    diag = np.asarray(q.diag, dtype=np.float64)
    u = np.asarray(q.u, dtype=np.float64)
    mean = np.asarray(q.mean, dtype=np.float64)
    trace = diag.sum() + u @ u
    logdet = np.log(diag).sum() + math.log1p(np.sum(u * u / diag))
    return 0.5 * float(trace + mean @ mean - mean.size - logdet)
