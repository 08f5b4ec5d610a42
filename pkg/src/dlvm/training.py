"""ELBO estimation, path-derivative gradients, Adam, and the training loop."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .distributions import (
    diag_rank1_logpdf,
    diag_rank1_sample,
    log_mean_exp,
    make_rng,
    std_normal_logpdf_batch,
)
from .model import BERNOULLI, GAUSSIAN, DecoderParams, EncoderParams


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float, param_norms: dict, clamps: int):
        self.step = step
        self.loss = loss
        self.param_norms = param_norms
        self.clamps = clamps
        worst = max(param_norms, key=param_norms.get) if param_norms else "-"
        super().__init__(
            f"training diverged at step {step}: -ELBO={loss!r}, clamp events={clamps}, "
            f"largest parameter norm {worst}={param_norms.get(worst, float('nan')):.4g}"
        )


@dataclass
class TrainConfig:
    d: int
    h: int
    p: int
    output_kind: str = GAUSSIAN
    xi: float = 0.0
    learning_rate: float = 1e-4
    batch_size: int = 10
    steps: int = 1000
    seed: int = 0
    mc_samples: int = 1
    heldout_samples: int = 16
    iw_samples: int = 0
    path_derivative: bool = True
    allow_divergence: bool = False
    divergence_threshold: float = 1e12

    def validate(self) -> list[str]:
        errors = []
        if self.learning_rate <= 0:
            errors.append("learning_rate must be > 0")
        if self.batch_size < 1:
            errors.append("batch_size must be >= 1")
        if self.mc_samples < 1:
            errors.append("mc_samples must be >= 1")
        if self.steps < 0:
            errors.append("steps must be >= 0")
        if min(self.d, self.h, self.p) < 1:
            errors.append("dims (d, h, p) must all be >= 1")
        if self.output_kind not in (GAUSSIAN, BERNOULLI):
            errors.append(f"output_kind must be {GAUSSIAN!r} or {BERNOULLI!r}")
        if self.xi < 0:
            errors.append("xi must be >= 0")
        return errors

    def digest(self) -> str:
        text = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- initialisation ---------------------------------------------------------


def glorot_init(shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform on +-sqrt(6 / (fan_in + fan_out))."""
    if len(shape) != 2:
        raise ValueError("glorot_init needs a 2-D shape")
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=tuple(shape))


def init_decoder(d, h, p, rng, output_kind=GAUSSIAN, xi=0.0) -> DecoderParams:
    return DecoderParams(
        W=glorot_init((h, d), rng),
        a=np.zeros(h),
        V=glorot_init((p, h), rng),
        b=np.zeros(p),
        alpha=glorot_init((p, h), rng),
        beta=np.zeros(p),
        output_kind=output_kind,
        xi=xi,
    )


def init_encoder(d, h, p, rng) -> EncoderParams:
    return EncoderParams(
        W=glorot_init((h, p), rng),
        a=np.zeros(h),
        W_mean=glorot_init((d, h), rng),
        b_mean=np.zeros(d),
        W_logdiag=glorot_init((d, h), rng),
        b_logdiag=np.zeros(d),
        W_u=glorot_init((d, h), rng),
        b_u=np.zeros(d),
    )


# -- ELBO --------------------------------------------------------------------


def draw_noise(rng: np.random.Generator, n: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Standard normal noise for ``n`` reparameterised codes (diagonal part, rank-one part)."""
    return rng.standard_normal((n, d)), rng.standard_normal(n)


def elbo_log_weights(theta, gamma, X, eps, eps_rank1, path_derivative: bool = False):
    """log p(x|z) + log p(z) - log q(z|x) for each row, with z reparameterised.

    With ``path_derivative`` the variational parameters inside ``log q`` are
    wrapped in :func:`~dlvm.autodiff.stop_gradient`, which removes the score
    term from the gradient while leaving the value unchanged.
    """
    mean, logdiag, u = gamma.encode(X)
    z = diag_rank1_sample(mean, logdiag, u, eps, eps_rank1)
    if path_derivative:
        mean, logdiag, u = ad.stop_gradient(mean), ad.stop_gradient(logdiag), ad.stop_gradient(u)
    return theta.log_prob(X, z) + std_normal_logpdf_batch(z) - diag_rank1_logpdf(z, mean, logdiag, u)


def _replicate(X: np.ndarray, L: int) -> np.ndarray:
    return X if L == 1 else np.repeat(X, L, axis=0)


def elbo_estimate(theta, gamma, X, L: int, rng: np.random.Generator) -> float:
    """Average over the batch of the L-sample Monte Carlo ELBO."""
    if L < 1:
        raise ValueError("L must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Xr = _replicate(X, L)
    eps, eps1 = draw_noise(rng, Xr.shape[0], gamma.latent_dim)
    return float(np.mean(elbo_log_weights(theta, gamma, Xr, eps, eps1)))


@dataclass
class ElboGradient:
    value: float
    theta: dict
    gamma: dict
    clamps: int


def elbo_gradient(theta, gamma, X, L: int, rng, path_derivative: bool = True) -> ElboGradient:
    """Gradient of the sampled ELBO with respect to decoder and encoder arrays."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Xr = _replicate(X, L)
    eps, eps1 = draw_noise(rng, Xr.shape[0], gamma.latent_dim)
    tape = ad.Tape()
    th, gm = theta.on_tape(tape), gamma.on_tape(tape)
    objective = ad.mean(elbo_log_weights(th, gm, Xr, eps, eps1, path_derivative))
    grads = tape.backward(objective)
    return ElboGradient(
        float(objective.value),
        {k: grads[v] for k, v in th.arrays().items()},
        {k: grads[v] for k, v in gm.arrays().items()},
        tape.clamp_events,
    )


def elbo_gradient_path_derivative(theta, gamma, X, L, rng) -> ElboGradient:
    return elbo_gradient(theta, gamma, X, L, rng, path_derivative=True)


# -- importance sampling ------------------------------------------------------


def importance_log_weights(theta, gamma, X, K: int, rng, chunk: int = 65536) -> np.ndarray:
    """(n, K) matrix of log importance weights with the encoder as proposal."""
    if K < 1:
        raise ValueError("K must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    d = gamma.latent_dim
    rows = max(1, chunk // K)
    out = np.empty((X.shape[0], K))
    for start in range(0, X.shape[0], rows):
        Xc = np.repeat(X[start : start + rows], K, axis=0)
        eps, eps1 = draw_noise(rng, Xc.shape[0], d)
        out[start : start + rows] = elbo_log_weights(theta, gamma, Xc, eps, eps1).reshape(-1, K)
    return out


def marginal_loglik_importance(theta, gamma, x, K: int, rng):
    """log (1/K) sum_k p(x, z_k) / q(z_k | x); float for one datum, array for a batch."""
    x = np.asarray(x, dtype=np.float64)
    lw = importance_log_weights(theta, gamma, x, K, rng)
    est = log_mean_exp(lw, axis=1)
    return float(est[0]) if x.ndim == 1 else est


@dataclass
class PairedBounds:
    """ELBO and importance-weighted estimates sharing the same proposal draws."""

    elbo: np.ndarray
    iw: np.ndarray
    elbo_se: np.ndarray
    iw_se: np.ndarray

    @property
    def total_elbo(self) -> float:
        return float(self.elbo.sum())

    @property
    def total_iw(self) -> float:
        return float(self.iw.sum())

    @property
    def total_elbo_se(self) -> float:
        return float(np.sqrt(np.sum(self.elbo_se**2)))

    @property
    def total_iw_se(self) -> float:
        return float(np.sqrt(np.sum(self.iw_se**2)))


def paired_bounds(theta, gamma, X, K: int, rng) -> PairedBounds:
    lw = importance_log_weights(theta, gamma, X, K, rng)
    elbo = lw.mean(axis=1)
    iw = log_mean_exp(lw, axis=1)
    ddof = 1 if K > 1 else 0
    elbo_se = lw.std(axis=1, ddof=ddof) / math.sqrt(K)
    w = np.exp(lw - lw.max(axis=1, keepdims=True))
    iw_se = w.std(axis=1, ddof=ddof) / (w.mean(axis=1) * math.sqrt(K))
    return PairedBounds(elbo, iw, elbo_se, iw_se)


# -- optimisation -------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update that *decreases* the objective whose gradient is ``grads``."""
    t = state.t + 1
    new_params, m, v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if state.m[k].shape != p.shape:
            raise ValueError(f"optimizer state for {k} does not match the parameter shape")
        m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        m_hat = m[k] / (1.0 - beta1**t)
        v_hat = v[k] / (1.0 - beta2**t)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_params, AdamState(m, v, t)


# -- training loop ------------------------------------------------------------


@dataclass
class EpochRecord:
    step: int
    train_elbo: float
    heldout_elbo: float
    iw_loglik: float
    clamps: int
    seconds: float


@dataclass
class MetricsTrace:
    records: list = field(default_factory=list)
    minibatch_elbo: list = field(default_factory=list)

    COLUMNS = ("step", "train_elbo", "heldout_elbo", "iw_loglik", "clamps", "seconds")

    def append(self, record: EpochRecord) -> None:
        if self.records and record.step < self.records[-1].step:
            raise ValueError("metrics steps must be non-decreasing")
        self.records.append(record)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def to_csv(self, path, header_comments: dict | None = None) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            for k, v in (header_comments or {}).items():
                fh.write(f"# {k}={v}\n")
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for r in self.records:
                writer.writerow([repr(getattr(r, c)) if isinstance(getattr(r, c), float) else getattr(r, c) for c in self.COLUMNS])
        return path


def _split(params_theta: dict, params_gamma: dict) -> dict:
    flat = {f"dec.{k}": v for k, v in params_theta.items()}
    flat.update({f"enc.{k}": v for k, v in params_gamma.items()})
    return flat


def _unsplit(flat: dict) -> tuple[dict, dict]:
    th = {k[4:]: v for k, v in flat.items() if k.startswith("dec.")}
    gm = {k[4:]: v for k, v in flat.items() if k.startswith("enc.")}
    return th, gm


def _evaluate(theta, gamma, X, L, K, rng) -> tuple[float, float]:
    if X is None or len(X) == 0:
        return math.nan, math.nan
    heldout = elbo_estimate(theta, gamma, X, L, rng)
    iw = float(np.mean(marginal_loglik_importance(theta, gamma, X, K, rng))) if K > 0 else math.nan
    return heldout, iw


def train(config: TrainConfig, X, X_valid=None, init: tuple | None = None):
    """Minibatch Adam on the negative ELBO.

    Returns ``(Checkpoint, MetricsTrace)``; the trace holds one record per
    epoch (plus one at step 0 and one at the final step) with per-datum
    averages.
    """
    errors = config.validate()
    if errors:
        raise ValueError("invalid training config: " + "; ".join(errors))
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training data must be a non-empty (n, p) matrix")
    if X.shape[1] != config.p:
        raise ValueError(f"data has {X.shape[1]} columns but config.p = {config.p}")
    rng = make_rng(config.seed)
    init_rng, shuffle_rng, noise_rng, eval_rng = rng.spawn(4)
    if init is None:
        theta = init_decoder(config.d, config.h, config.p, init_rng, config.output_kind, config.xi)
        gamma = init_encoder(config.d, config.h, config.p, init_rng)
    else:
        theta, gamma = init[0].copy(), init[1].copy()
    flat = _split(theta.arrays(), gamma.arrays())
    state = AdamState.zeros_like(flat)
    trace = MetricsTrace()
    n = X.shape[0]
    clamps = 0
    t0 = time.perf_counter()

    def record(step, train_elbo):
        heldout, iw = _evaluate(theta, gamma, X_valid, config.heldout_samples, config.iw_samples, eval_rng)
        trace.append(EpochRecord(step, train_elbo, heldout, iw, clamps, time.perf_counter() - t0))

    record(0, elbo_estimate(theta, gamma, X, config.heldout_samples, eval_rng))
    step = 0
    while step < config.steps:
        order = shuffle_rng.permutation(n)
        epoch_vals = []
        for start in range(0, n, config.batch_size):
            if step >= config.steps:
                break
            batch = X[order[start : start + config.batch_size]]
            g = elbo_gradient(theta, gamma, batch, config.mc_samples, noise_rng, config.path_derivative)
            step += 1
            clamps += g.clamps
            loss = -g.value
            if not config.allow_divergence and (not math.isfinite(loss) or loss > config.divergence_threshold):
                norms = {k: float(np.linalg.norm(v)) for k, v in flat.items()}
                raise TrainingDiverged(step, loss, norms, clamps)
            trace.minibatch_elbo.append(g.value)
            epoch_vals.append(g.value)
            grads = _split({k: -v for k, v in g.theta.items()}, {k: -v for k, v in g.gamma.items()})
            flat, state = adam_step(flat, grads, state, config.learning_rate)
            th, gm = _unsplit(flat)
            theta, gamma = theta.with_arrays(th), gamma.with_arrays(gm)
        record(step, float(np.mean(epoch_vals)) if epoch_vals else math.nan)
    meta = {"seed": config.seed, "steps": step, "config_digest": config.digest()}
    return Checkpoint(theta, gamma, meta), trace
