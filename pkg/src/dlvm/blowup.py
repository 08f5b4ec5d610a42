"""Likelihood blow-up of unconstrained Gaussian decoders, and its cure.

The single-hidden-unit decoder with constant mean ``x_i`` and isotropic
variance ``s(z) = exp(alpha * tanh(alpha * w.z) - alpha)`` drives the
likelihood contribution of ``x_i`` to infinity as ``alpha`` grows, while every
other contribution stays bounded below.  This module builds that decoder,
estimates per-datum log-likelihoods by prior Monte Carlo, and checks the
estimates against a 1-D quadrature (the decoder sees ``z`` only through
``t = w.z ~ N(0, |w|^2)``).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import log_ndtr

from .distributions import LOG_2PI, log_mean_exp, make_rng
from .model import GAUSSIAN, DecoderParams


@dataclass
class BlowupSpec:
    index: int
    w: np.ndarray
    alphas: np.ndarray = field(default_factory=lambda: np.arange(0.0, 21.0, 2.0))
    mc_samples: int = 100_000
    seed: int = 0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        if not np.linalg.norm(self.w) > 0:
            raise ValueError("the direction w must be nonzero")
        if self.alphas.size == 0 or self.alphas[0] < 0 or np.any(np.diff(self.alphas) <= 0):
            raise ValueError("alphas must be a strictly increasing nonnegative grid")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")


def make_blowup_params(X, spec: BlowupSpec, k: int) -> DecoderParams:
    """Decoder with mean ``X[spec.index]`` and variance exp(a_k tanh(a_k w.z) - a_k) I."""
    X = np.asarray(X, dtype=np.float64)
    alpha = float(spec.alphas[k])
    p = X.shape[1]
    return DecoderParams(
        W=alpha * spec.w[None, :],
        a=np.zeros(1),
        V=np.zeros((p, 1)),
        b=X[spec.index].copy(),
        alpha=np.full((p, 1), alpha),
        beta=np.full(p, -alpha),
        output_kind=GAUSSIAN,
        xi=0.0,
    )


@dataclass
class MCEstimate:
    loglik: np.ndarray
    stderr: np.ndarray


def _log_mean_and_se(logw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise log-mean-exp and its delta-method standard error."""
    S = logw.shape[1]
    est = log_mean_exp(logw, axis=1)
    if S == 1:
        return est, np.zeros_like(est)
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    se = w.std(axis=1, ddof=1) / (w.mean(axis=1) * math.sqrt(S))
    return est, se


def _gaussian_loglik_matrix(X, mean, var) -> np.ndarray:
    """(n, S) matrix of log N(x_j | mean_s, Diag(var_s))."""
    logdet = np.sum(np.log(var), axis=1)
    quad = np.empty((X.shape[0], mean.shape[0]))
    for j, x in enumerate(X):
        quad[j] = np.sum((x - mean) ** 2 / var, axis=1)
    return -0.5 * (quad + logdet[None, :] + X.shape[1] * LOG_2PI)


def prior_loglik_samples(theta, X, S: int, rng, chunk: int = 20_000) -> np.ndarray:
    """(n, S) log p(x_j | z_s) with ``z_s`` drawn from the standard normal prior."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    d = theta.dims[0]
    out = np.empty((X.shape[0], S))
    for start in range(0, S, chunk):
        m = min(chunk, S - start)
        Z = rng.standard_normal((m, d))
        mean, var = theta.output(Z)
        out[:, start : start + m] = _gaussian_loglik_matrix(X, np.asarray(mean), np.asarray(var))
    return out


def mc_loglik(theta, X, S: int, rng) -> MCEstimate:
    """Per-datum log p_theta(x_j) by plain prior Monte Carlo with S draws."""
    if S < 1:
        raise ValueError("S must be >= 1")
    est, se = _log_mean_and_se(prior_loglik_samples(theta, X, S, rng))
    return MCEstimate(est, se)


def quadrature_loglik(X, center, w, alpha: float, nodes: int = 10_000, width: float = 8.0) -> np.ndarray:
    """Per-datum log-likelihood of the blow-up decoder by trapezoidal quadrature over t = w.z."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    sigma = float(np.linalg.norm(w))
    t = np.linspace(-width * sigma, width * sigma, nodes)
    log_s = alpha * np.tanh(alpha * t) - alpha
    log_prior = -0.5 * (t / sigma) ** 2 - 0.5 * LOG_2PI - math.log(sigma)
    h = t[1] - t[0]
    log_weight = np.full(nodes, math.log(h))
    log_weight[[0, -1]] -= math.log(2.0)
    p = X.shape[1]
    dist2 = np.sum((X - np.asarray(center)) ** 2, axis=1)
    log_f = -0.5 * p * (LOG_2PI + log_s)[None, :] - 0.5 * dist2[:, None] * np.exp(-log_s)[None, :]
    total = log_f + (log_prior + log_weight)[None, :]
    m = total.max(axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(total - m), axis=1, keepdims=True)))[:, 0]


def other_contribution_floor(X, index: int, w, alpha: float, eps_grid=None) -> np.ndarray:
    """Lower bound on log p(x_j), j != index, from restricting the integral to w.z >= eps.

    For each ``eps`` the bound is
    ``-p/2 log 2pi - |x_j - x_i|^2 / (2 s(eps)) + log P(w.z >= eps)``;
    the best bound over ``eps_grid`` is returned (``nan`` at ``index``).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if eps_grid is None:
        eps_grid = np.geomspace(1e-3, 10.0, 200)
    sigma = float(np.linalg.norm(w))
    eps_grid = np.asarray(eps_grid, dtype=np.float64) * sigma
    s = np.exp(alpha * np.tanh(alpha * eps_grid) - alpha)
    log_tail = log_ndtr(-eps_grid / sigma)
    dist2 = np.sum((X - X[index]) ** 2, axis=1)
    p = X.shape[1]
    bounds = -0.5 * p * LOG_2PI - 0.5 * dist2[:, None] / s[None, :] + log_tail[None, :]
    floor = bounds.max(axis=1)
    floor[index] = np.nan
    return floor


@dataclass
class BlowupTrace:
    alphas: np.ndarray
    contrib_i: np.ndarray
    stderr_i: np.ndarray
    min_contrib_other: np.ndarray
    min_other_stderr: np.ndarray
    floor_other: np.ndarray
    quadrature_i: np.ndarray
    others: np.ndarray  # (n_alpha, n) per-datum estimates
    others_se: np.ndarray
    others_floor: np.ndarray
    index: int

    COLUMNS = ("alpha", "contrib_i", "min_contrib_other", "stderr_i", "floor_other", "quadrature_i")

    @property
    def growth(self) -> float:
        return float(self.contrib_i[-1] - self.contrib_i[0])

    def others_above_floor(self, n_se: float = 3.0) -> bool:
        mask = np.ones(self.others.shape[1], dtype=bool)
        mask[self.index] = False
        est = self.others[:, mask]
        return bool(np.all(est + n_se * self.others_se[:, mask] >= self.others_floor[:, mask]))

    def witnessed(self, threshold: float = 100.0, n_se: float = 3.0) -> bool:
        """Growth of the target contribution beyond ``threshold`` nats with bounded others."""
        return (
            self.growth > threshold
            and bool(np.all(np.isfinite(self.min_contrib_other)))
            and self.others_above_floor(n_se)
        )

    def to_csv(self, path, header_comments: dict | None = None) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            for k, v in (header_comments or {}).items():
                fh.write(f"# {k}={v}\n")
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for row in zip(
                self.alphas, self.contrib_i, self.min_contrib_other, self.stderr_i, self.floor_other, self.quadrature_i
            ):
                writer.writerow([repr(float(v)) for v in row])
        return path


def blowup_trace(X, spec: BlowupSpec, quadrature: bool = True) -> BlowupTrace:
    """Estimate every per-datum contribution along the alpha grid."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    streams = np.random.SeedSequence(spec.seed).spawn(len(spec.alphas))
    mask = np.ones(n, dtype=bool)
    mask[spec.index] = False
    rows = []
    for k, alpha in enumerate(spec.alphas):
        theta = make_blowup_params(X, spec, k)
        est = mc_loglik(theta, X, spec.mc_samples, make_rng(streams[k]))
        floor = other_contribution_floor(X, spec.index, spec.w, alpha)
        quad = quadrature_loglik(X[[spec.index]], X[spec.index], spec.w, alpha)[0] if quadrature else np.nan
        j = np.flatnonzero(mask)[np.argmin(est.loglik[mask])] if n > 1 else spec.index
        rows.append((est, floor, quad, j))
    others = np.array([r[0].loglik for r in rows])
    others_se = np.array([r[0].stderr for r in rows])
    return BlowupTrace(
        alphas=spec.alphas.copy(),
        contrib_i=others[:, spec.index],
        stderr_i=others_se[:, spec.index],
        min_contrib_other=np.array([r[0].loglik[r[3]] for r in rows]) if n > 1 else np.full(len(rows), np.nan),
        min_other_stderr=np.array([r[0].stderr[r[3]] for r in rows]) if n > 1 else np.full(len(rows), np.nan),
        floor_other=np.array([np.nanmin(r[1]) if n > 1 else np.nan for r in rows]),
        quadrature_i=np.array([r[2] for r in rows]),
        others=others,
        others_se=others_se,
        others_floor=np.array([r[1] for r in rows]),
        index=spec.index,
    )


@dataclass
class SphericalReport:
    radii: np.ndarray
    log_density: np.ndarray  # (n_radii, n_directions)
    stderr: np.ndarray
    max_relative_spread: float
    non_increasing: bool
    max_at_center: bool

    @property
    def passed(self) -> bool:
        return self.non_increasing and self.max_at_center


def check_spherical_unimodality(theta, center, radii, directions, mc_samples: int, rng) -> SphericalReport:
    """Estimate the density on shells around ``center`` with common prior draws.

    ``directions`` is an (m, p) array (normalised here).  The spread is the
    largest relative difference of density estimates across directions at a
    fixed radius.
    """
    center = np.asarray(center, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    dirs = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    points = center[None, None, :] + radii[:, None, None] * dirs[None, :, :]
    flat = points.reshape(-1, center.size)
    est, se = _log_mean_and_se(prior_loglik_samples(theta, flat, mc_samples, rng))
    logd = est.reshape(radii.size, dirs.shape[0])
    se = se.reshape(logd.shape)
    spread = np.max(np.exp(logd.max(axis=1) - logd.min(axis=1)) - 1.0) if logd.size else 0.0
    mean_by_radius = logd.mean(axis=1)
    order = np.argsort(radii)
    non_increasing = bool(np.all(np.diff(mean_by_radius[order]) <= 1e-12 * np.abs(mean_by_radius[order][1:]) + 1e-12))
    max_at_center = bool(np.argmax(mean_by_radius) == np.argmin(radii))
    return SphericalReport(radii, logd, se, float(spread), non_increasing, max_at_center)


@dataclass
class ConstrainedBoundReport:
    loglik: np.ndarray
    stderr: np.ndarray
    bound_per_datum: float
    violations: int
    total: float
    total_bound: float

    @property
    def passed(self) -> bool:
        return self.violations == 0 and self.total <= self.total_bound


def constrained_bound(p: int, xi: float, n: int = 1) -> float:
    """-n p log sqrt(2 pi xi): the likelihood ceiling when every variance is at least xi."""
    if xi <= 0:
        raise ValueError("xi must be positive")
    return -0.5 * n * p * math.log(2.0 * math.pi * xi)


def verify_constrained_bound(theta, X, S: int, rng, n_se: float = 3.0) -> ConstrainedBoundReport:
    if theta.xi <= 0:
        raise ValueError("the decoder must carry a positive variance floor xi")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, p = X.shape
    est = mc_loglik(theta, X, S, rng)
    per = constrained_bound(p, theta.xi)
    violations = int(np.sum(est.loglik > per + n_se * est.stderr))
    return ConstrainedBoundReport(est.loglik, est.stderr, per, violations, float(est.loglik.sum()), constrained_bound(p, theta.xi, n))
