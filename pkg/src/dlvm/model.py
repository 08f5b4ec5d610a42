"""Decoder and encoder parametrisations.

The decoder is the one-hidden-layer tanh MLP

    mean(z)      = V tanh(W z + a) + b
    variances(z) = exp(alpha tanh(W z + a) + beta) + xi

with Gaussian outputs, or ``sigmoid(V tanh(W z + a) + b)`` with Bernoulli
outputs.  ``xi > 0`` floors every emitted variance, which keeps the
likelihood bounded above.  The encoder mirrors the decoder: one tanh hidden
layer and three linear heads giving the mean, log-diagonal and rank-one
factor of a Gaussian over the code.

All forward methods take batches (rows are data points / codes) and accept
numpy arrays or tape tensors; see :mod:`dlvm.autodiff`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .distributions import (
    BERNOULLI_EPS,
    bernoulli_logpmf_batch,
    gaussian_diag_logpdf_batch,
)

GAUSSIAN = "gaussian"
BERNOULLI = "bernoulli"


def _rows(x):
    """Promote a single vector to a one-row batch."""
    v = ad.value_of(x)
    if v.ndim == 1:
        return ad.reshape(x, (1, v.shape[0])), True
    return x, False


def _affine(x, W, b):
    """x @ W^T + b for a batch ``x`` of shape (B, in) and ``W`` of shape (out, in)."""
    out = ad.matmul(x, ad.transpose(W))
    return out + ad.broadcast_to(b, ad.value_of(out).shape)


@dataclass
class DecoderParams:
    W: np.ndarray  # (h, d)
    a: np.ndarray  # (h,)
    V: np.ndarray  # (p, h)
    b: np.ndarray  # (p,)
    alpha: np.ndarray  # (p, h)
    beta: np.ndarray  # (p,)
    output_kind: str = GAUSSIAN
    xi: float = 0.0

    ARRAYS = ("W", "a", "V", "b", "alpha", "beta")

    def __post_init__(self):
        if self.output_kind not in (GAUSSIAN, BERNOULLI):
            raise ValueError(f"unknown output kind {self.output_kind!r}")
        if self.xi < 0:
            raise ValueError("xi must be nonnegative")
        h, d = ad.value_of(self.W).shape
        p = ad.value_of(self.V).shape[0]
        expected = {"a": (h,), "V": (p, h), "b": (p,), "alpha": (p, h), "beta": (p,)}
        for name, shape in expected.items():
            got = ad.value_of(getattr(self, name)).shape
            if got != shape:
                raise ValueError(f"decoder.{name} has shape {got}, expected {shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        h, d = ad.value_of(self.W).shape
        return d, h, ad.value_of(self.V).shape[0]

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in self.ARRAYS}

    def with_arrays(self, arrays: dict) -> "DecoderParams":
        return dataclasses.replace(self, **arrays)

    def hidden(self, Z):
        return ad.tanh(_affine(Z, self.W, self.a))

    def output(self, Z):
        """Decoder output for a batch of codes.

        Gaussian: ``(mean, variances)``; Bernoulli: ``(probs,)``.
        """
        hid = self.hidden(Z)
        loc = _affine(hid, self.V, self.b)
        if self.output_kind == BERNOULLI:
            return (ad.clip(ad.sigmoid(loc), BERNOULLI_EPS, 1.0 - BERNOULLI_EPS),)
        var = ad.exp(_affine(hid, self.alpha, self.beta))
        if self.xi > 0:
            var = var + self.xi
        return loc, var

    def output_log_prob(self, X, out):
        if self.output_kind == BERNOULLI:
            return bernoulli_logpmf_batch(X, out[0])
        return gaussian_diag_logpdf_batch(X, out[0], out[1])

    def log_prob(self, X, Z):
        """Row-wise log p(x_i | z_i)."""
        return self.output_log_prob(X, self.output(Z))

    def output_sample(self, out, rng: np.random.Generator) -> np.ndarray:
        return sample_output(self.output_kind, out, rng)

    def on_tape(self, tape: ad.Tape) -> "DecoderParams":
        return self.with_arrays({k: tape.variable(v) for k, v in self.arrays().items()})

    def copy(self) -> "DecoderParams":
        return self.with_arrays({k: np.array(v, dtype=np.float64) for k, v in self.arrays().items()})


def sample_output(kind: str, out, rng: np.random.Generator) -> np.ndarray:
    if kind == BERNOULLI:
        probs = ad.value_of(out[0])
        return (rng.random(probs.shape) < probs).astype(np.float64)
    mean, var = ad.value_of(out[0]), ad.value_of(out[1])
    return mean + np.sqrt(var) * rng.standard_normal(mean.shape)


def decode_gaussian(theta: DecoderParams, z):
    """(mean, diagonal variances) of p(x | z) for one code or a batch of codes."""
    if theta.output_kind != GAUSSIAN:
        raise ValueError("decode_gaussian needs a Gaussian decoder")
    Z, single = _rows(np.asarray(z, dtype=np.float64))
    mean, var = theta.output(Z)
    return (mean[0], var[0]) if single else (mean, var)


def decode_bernoulli(theta: DecoderParams, z):
    if theta.output_kind != BERNOULLI:
        raise ValueError("decode_bernoulli needs a Bernoulli decoder")
    Z, single = _rows(np.asarray(z, dtype=np.float64))
    (probs,) = theta.output(Z)
    return probs[0] if single else probs


@dataclass
class EncoderParams:
    W: np.ndarray  # (h, p)
    a: np.ndarray  # (h,)
    W_mean: np.ndarray  # (d, h)
    b_mean: np.ndarray  # (d,)
    W_logdiag: np.ndarray  # (d, h)
    b_logdiag: np.ndarray  # (d,)
    W_u: np.ndarray  # (d, h)
    b_u: np.ndarray  # (d,)

    ARRAYS = ("W", "a", "W_mean", "b_mean", "W_logdiag", "b_logdiag", "W_u", "b_u")

    def __post_init__(self):
        h, p = ad.value_of(self.W).shape
        d = ad.value_of(self.W_mean).shape[0]
        for name in self.ARRAYS[2:]:
            want = (d, h) if name.startswith("W") else (d,)
            got = ad.value_of(getattr(self, name)).shape
            if got != want:
                raise ValueError(f"encoder.{name} has shape {got}, expected {want}")
        if ad.value_of(self.a).shape != (h,):
            raise ValueError("encoder.a must have one entry per hidden unit")

    @property
    def dims(self) -> tuple[int, int, int]:
        h, p = ad.value_of(self.W).shape
        return ad.value_of(self.W_mean).shape[0], h, p

    @property
    def latent_dim(self) -> int:
        return ad.value_of(self.W_mean).shape[0]

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in self.ARRAYS}

    def with_arrays(self, arrays: dict) -> "EncoderParams":
        return dataclasses.replace(self, **arrays)

    def on_tape(self, tape: ad.Tape) -> "EncoderParams":
        return self.with_arrays({k: tape.variable(v) for k, v in self.arrays().items()})

    def copy(self) -> "EncoderParams":
        return self.with_arrays({k: np.array(v, dtype=np.float64) for k, v in self.arrays().items()})

    def encode(self, X):
        """(mean, log-diagonal, rank-one factor) for every row of ``X``."""
        hid = ad.tanh(_affine(X, self.W, self.a))
        return (
            _affine(hid, self.W_mean, self.b_mean),
            _affine(hid, self.W_logdiag, self.b_logdiag),
            _affine(hid, self.W_u, self.b_u),
        )


@dataclass(frozen=True)
class VariationalParams:
    mean: np.ndarray
    diag: np.ndarray
    u: np.ndarray


def encode(gamma, x) -> VariationalParams:
    """Variational Gaussian parameters for one datum (or a batch, row-wise)."""
    X, single = _rows(np.asarray(x, dtype=np.float64))
    mean, logdiag, u = gamma.encode(X)
    diag = np.exp(logdiag)
    if single:
        return VariationalParams(mean[0], diag[0], u[0])
    return VariationalParams(mean, diag, u)


# -- linear-Gaussian special case ---------------------------------------------


@dataclass
class LinearGaussianModel:
    """x = loading @ z + offset + sqrt(noise_var) * eps, z ~ N(0, I).

    Behaves as a Gaussian decoder with no hidden layer; its posterior and
    conditionals are available in closed form, which makes it the exactness
    oracle for estimators and samplers.
    """

    loading: np.ndarray  # (p, d)
    offset: np.ndarray  # (p,)
    noise_var: float
    output_kind: str = field(default=GAUSSIAN, init=False)

    ARRAYS = ("loading", "offset")

    def __post_init__(self):
        if not self.noise_var > 0:
            raise ValueError("noise variance must be positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        p, d = ad.value_of(self.loading).shape
        return d, 0, p

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in self.ARRAYS}

    def with_arrays(self, arrays: dict) -> "LinearGaussianModel":
        new = LinearGaussianModel(arrays.get("loading", self.loading), arrays.get("offset", self.offset), self.noise_var)
        return new

    def on_tape(self, tape: ad.Tape) -> "LinearGaussianModel":
        return self.with_arrays({k: tape.variable(v) for k, v in self.arrays().items()})

    def output(self, Z):
        mean = _affine(Z, self.loading, self.offset)
        return mean, np.full(ad.value_of(mean).shape, float(self.noise_var))

    def output_log_prob(self, X, out):
        return gaussian_diag_logpdf_batch(X, out[0], out[1])

    def log_prob(self, X, Z):
        return self.output_log_prob(X, self.output(Z))

    def output_sample(self, out, rng):
        return sample_output(GAUSSIAN, out, rng)

    @property
    def marginal_cov(self) -> np.ndarray:
        L = np.asarray(self.loading)
        return L @ L.T + self.noise_var * np.eye(L.shape[0])

    def log_marginal(self, X) -> np.ndarray:
        """Exact log p(x) under N(offset, loading loading^T + noise_var I)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        C = self.marginal_cov
        chol = np.linalg.cholesky(C)
        r = np.linalg.solve(chol, (X - self.offset).T)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        return -0.5 * (np.sum(r * r, axis=0) + logdet + C.shape[0] * np.log(2 * np.pi))

    def posterior(self):
        """Posterior z | x = N(A (x - offset), C) as the pair (A, C)."""
        L = np.asarray(self.loading)
        M = L.T @ L + self.noise_var * np.eye(L.shape[1])
        Minv = np.linalg.inv(M)
        return Minv @ L.T, self.noise_var * Minv

    def exact_encoder(self, shift: float = 0.0) -> "LinearEncoder":
        """Encoder whose output is the exact posterior (mean shifted by ``shift``)."""
        A, C = self.posterior()
        logdiag, u = diag_plus_rank1(C)
        c = -A @ np.asarray(self.offset) + shift
        return LinearEncoder(A, c, logdiag, u)


def diag_plus_rank1(C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Write an SPD matrix as Diag(exp(logdiag)) + u u^T.

    Exact for d <= 2 and for diagonal matrices; other inputs raise.
    """
    C = np.asarray(C, dtype=np.float64)
    d = C.shape[0]
    off = C - np.diag(np.diag(C))
    if np.allclose(off, 0.0, atol=0.0):
        return np.log(np.diag(C)), np.zeros(d)
    if d != 2:
        raise ValueError("only 2x2 or diagonal covariances have a guaranteed diag+rank-1 form")
    c11, c22, c12 = C[0, 0], C[1, 1], C[0, 1]
    rho2 = c12 * c12 / (c11 * c22)
    scale = np.sqrt(0.5 * (1.0 + rho2))
    u1 = np.sqrt(c11) * scale
    u = np.array([u1, c12 / u1])
    diag = np.diag(C) - u * u
    return np.log(diag), u


@dataclass
class LinearEncoder:
    """Amortised Gaussian posterior with a linear mean and a shared covariance."""

    A: np.ndarray  # (d, p)
    c: np.ndarray  # (d,)
    logdiag: np.ndarray  # (d,)
    u: np.ndarray  # (d,)

    ARRAYS = ("A", "c", "logdiag", "u")

    @property
    def latent_dim(self) -> int:
        return ad.value_of(self.A).shape[0]

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in self.ARRAYS}

    def with_arrays(self, arrays: dict) -> "LinearEncoder":
        return dataclasses.replace(self, **arrays)

    def on_tape(self, tape: ad.Tape) -> "LinearEncoder":
        return self.with_arrays({k: tape.variable(v) for k, v in self.arrays().items()})

    def encode(self, X):
        mean = _affine(X, self.A, self.c)
        shape = ad.value_of(mean).shape
        return mean, ad.broadcast_to(self.logdiag, shape), ad.broadcast_to(self.u, shape)
