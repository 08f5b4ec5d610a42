"""Missing-data imputation with a trained decoder/encoder pair.

Two samplers share one loop body:

* pseudo-Gibbs alternates z ~ q(z | x_obs, x_miss) and x_miss ~ p(x_miss | z);
  it is only exact when the encoder equals the true posterior.
* Metropolis-within-Gibbs uses the encoder as an independent proposal for z
  and corrects it with the importance-ratio acceptance probability, so the
  chain targets p(x_miss | x_obs) whatever the encoder.

Chains over several items run together as a batch: every array has one row
per item and every item has its own mask.  The decoder output at the current
code is cached in the chain state, so a Metropolis step costs one encoder
and one decoder evaluation, like a pseudo-Gibbs step, plus a handful of
density evaluations.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from scipy.special import expit

from .distributions import (
    BERNOULLI_EPS,
    LOG_2PI,
    diag_rank1_logpdf,
    make_rng,
    std_normal_logpdf_batch,
)
from .model import BERNOULLI, GAUSSIAN, DecoderParams, EncoderParams, LinearGaussianModel

PSEUDO_GIBBS = "pseudo-gibbs"
MWG = "mwg"
SAMPLERS = (PSEUDO_GIBBS, MWG)


# -- masks -------------------------------------------------------------------


@dataclass(frozen=True)
class MissingnessMask:
    missing: np.ndarray  # bool (p,)
    scenario: str = "custom"

    @property
    def p(self) -> int:
        return self.missing.size

    @property
    def missing_idx(self) -> np.ndarray:
        return np.flatnonzero(self.missing)

    @property
    def observed_idx(self) -> np.ndarray:
        return np.flatnonzero(~self.missing)


def parse_scenario(text: str) -> tuple[str, float | None]:
    """``"mar:0.5"`` -> ("mar", 0.5); ``"top-half"`` -> ("top-half", None)."""
    name, _, frac = text.partition(":")
    name = name.strip().lower()
    if name == "mar":
        return name, float(frac) if frac else 0.5
    if name in ("top-half", "bottom-half"):
        return name, None
    raise ValueError(f"unknown missingness scenario {text!r}")


def make_mask(p: int, scenario: str, rng=None, fraction: float | None = None) -> MissingnessMask:
    """Missing-at-random (exactly round(f p) indices) or top/bottom half masks.

    Half masks assume row-major image layout, so the first p/2 indices are
    the top half.
    """
    if ":" in scenario:
        scenario, parsed = parse_scenario(scenario)
        fraction = parsed if fraction is None else fraction
    missing = np.zeros(p, dtype=bool)
    if scenario == "mar":
        f = 0.5 if fraction is None else fraction
        if not 0.0 < f < 1.0:
            raise ValueError(f"missing fraction must be in (0, 1), got {f}")
        rng = make_rng(rng if rng is not None else 0)
        missing[rng.choice(p, size=int(round(f * p)), replace=False)] = True
        return MissingnessMask(missing, f"mar:{f:g}")
    if scenario in ("top-half", "bottom-half"):
        if p % 2:
            raise ValueError("half masks need an even number of features")
        if scenario == "top-half":
            missing[: p // 2] = True
        else:
            missing[p // 2 :] = True
        return MissingnessMask(missing, scenario)
    raise ValueError(f"unknown missingness scenario {scenario!r}")


def _mask_matrix(mask, shape) -> np.ndarray:
    if isinstance(mask, MissingnessMask):
        mask = mask.missing
    return np.broadcast_to(np.asarray(mask, dtype=bool), shape)


# -- chain state and steps -----------------------------------------------------


@dataclass
class ChainState:
    t: int
    z: np.ndarray  # (B, d)
    x: np.ndarray  # (B, p), observed entries plus current imputations
    accepted: np.ndarray  # (B,) int
    mode: str
    out: tuple = ()  # cached decoder output at z
    mwg_steps: int = 0
    z_sq: np.ndarray | None = None  # cached |z|^2 per row, Metropolis steps only

    @property
    def acceptance_rate(self) -> np.ndarray:
        if self.mwg_steps == 0:
            return np.full(self.accepted.shape, np.nan)
        return self.accepted / self.mwg_steps


# The chain only ever evaluates the networks on plain arrays, so these
# forwards skip the tape dispatch and keep per-step overhead low.


def _decode(theta, Z):
    if not isinstance(theta, DecoderParams):
        return tuple(np.asarray(o, dtype=np.float64) for o in theta.output(Z))
    H = np.tanh(Z @ theta.W.T + theta.a)
    loc = H @ theta.V.T + theta.b
    if theta.output_kind == BERNOULLI:
        return (np.clip(expit(loc), BERNOULLI_EPS, 1.0 - BERNOULLI_EPS),)
    return loc, np.exp(H @ theta.alpha.T + theta.beta) + theta.xi


def _encode(gamma, X):
    if not isinstance(gamma, EncoderParams):
        return tuple(np.asarray(o, dtype=np.float64) for o in gamma.encode(X))
    H = np.tanh(X @ gamma.W.T + gamma.a)
    return H @ gamma.W_mean.T + gamma.b_mean, H @ gamma.W_logdiag.T + gamma.b_logdiag, H @ gamma.W_u.T + gamma.b_u


# Clamped Bernoulli masses are >= 1e-7, so a product of 32 of them stays
# above 1e-224 and the log of blockwise products cannot underflow; it needs
# 32 times fewer logarithms than summing elementwise logs.
_PROD_BLOCK = 32


def _loglik(kind, x, out):
    """Row-wise log p(x | out); ``out`` arrays may carry extra leading axes."""
    if kind == BERNOULLI:
        mass = np.where(x > 0.5, out[0], 1.0 - out[0])
        p = mass.shape[-1]
        pad = -p % _PROD_BLOCK
        if pad:
            mass = np.concatenate([mass, np.ones(mass.shape[:-1] + (pad,))], axis=-1)
        blocks = mass.reshape(mass.shape[:-1] + (-1, _PROD_BLOCK)).prod(axis=-1)
        return np.log(blocks).sum(axis=-1)
    mean, var = out
    r = x - mean
    return -0.5 * (np.log(var) + r * r / var).sum(axis=-1) - 0.5 * x.shape[-1] * LOG_2PI


def _propose(gamma, X, rng):
    """Draw z from the encoder; also return (mean, sd, u, eps, eps1) for reuse."""
    mean, logdiag, u = _encode(gamma, X)
    B, d = mean.shape
    eps = rng.standard_normal((B, d))
    eps1 = rng.standard_normal((B, 1))
    sd = np.exp(0.5 * logdiag)
    return mean + sd * eps + u * eps1, (mean, sd, u, eps, eps1)


def _resample_missing(theta, out, x, missing, rng):
    if theta.output_kind == BERNOULLI:
        draw = (rng.random(x.shape) < out[0]).astype(np.float64)
    else:
        draw = out[0] + np.sqrt(out[1]) * rng.standard_normal(x.shape)
    return np.where(missing, draw, x)


def _initial_fill(x_obs, missing, kind, rng) -> np.ndarray:
    x = np.array(x_obs, dtype=np.float64)
    if kind == BERNOULLI:
        coins = (rng.random(x.shape) < 0.5).astype(np.float64)
        return np.where(missing, coins, x)
    observed = ~missing
    counts = observed.sum(axis=0)
    total = np.where(observed, x, 0.0).sum(axis=0)
    overall = total.sum() / max(counts.sum(), 1)
    col_mean = np.where(counts > 0, total / np.maximum(counts, 1), overall)
    return np.where(missing, col_mean, x)


def init_chain(x_obs, mask, theta, gamma, rng, mode: str = MWG) -> ChainState:
    """Random fill of the missing entries followed by a code drawn from the encoder.

    Bernoulli models start from fair coin flips, Gaussian ones from the
    column means of the observed entries in the batch.
    """
    x_obs = np.atleast_2d(np.asarray(x_obs, dtype=np.float64))
    missing = _mask_matrix(mask, x_obs.shape)
    x = _initial_fill(x_obs, missing, theta.output_kind, rng)
    z, _ = _propose(gamma, x, rng)
    return ChainState(0, z, x, np.zeros(x.shape[0], dtype=np.int64), mode, _decode(theta, z))


def pseudo_gibbs_step(state: ChainState, x_obs, mask, theta, gamma, rng) -> ChainState:
    """z ~ q(z | current completion), then x_miss ~ p(x_miss | z)."""
    missing = _mask_matrix(mask, state.x.shape)
    z, _ = _propose(gamma, state.x, rng)
    out = _decode(theta, z)
    x = _resample_missing(theta, out, state.x, missing, rng)
    return replace(state, t=state.t + 1, z=z, x=x, out=out, z_sq=None)


def _fused_log_ratio(z_prop, proposal, out_prop, z_cur, z_sq_cur, out_cur, x_full, kind):
    """Uncapped log Metropolis ratio for every row, reusing the proposal's draws.

    With D the diagonal and s = u / sqrt(D), the proposal satisfies
    z - mean = sqrt(D) v with v = eps + s eps1, so its quadratic form is
    |v|^2 - (s.v)^2 / (1 + |s|^2).  Normalising constants and the
    log-determinant cancel between numerator and denominator.  Rows where
    both states are impossible come out as nan, which every comparison
    treats as a rejection.
    """
    mean, sd, u, eps, eps1 = proposal
    s = u / sd
    V = np.stack([eps + s * eps1, (z_cur - mean) / sd])
    # two-operand einsum is much faster than multiply-then-sum over short rows
    quad = np.einsum("kbd,kbd->kb", V, V) - np.einsum("kbd,bd->kb", V, s) ** 2 / (1.0 + np.einsum("bd,bd->b", s, s))
    z_sq = np.einsum("bd,bd->b", z_prop, z_prop)
    ll = _loglik(kind, x_full, tuple(np.stack(pair) for pair in zip(out_prop, out_cur)))
    with np.errstate(invalid="ignore"):
        log_ratio = (ll[0] - ll[1]) + 0.5 * ((quad[0] - quad[1]) + (z_sq_cur - z_sq))
    return log_ratio, z_sq


def mwg_log_acceptance(z_proposed, z_current, x_full, theta, gamma) -> np.ndarray:
    """log rho = min(0, log ratio) for each row of the batch."""
    z_p = np.atleast_2d(np.asarray(z_proposed, dtype=np.float64))
    z_c = np.atleast_2d(np.asarray(z_current, dtype=np.float64))
    x_full = np.atleast_2d(np.asarray(x_full, dtype=np.float64))
    mean, logdiag, u = gamma.encode(x_full)  # full densities, independent of the fused step code
    log_num = theta.log_prob(x_full, z_p) + std_normal_logpdf_batch(z_p) + diag_rank1_logpdf(z_c, mean, logdiag, u)
    log_den = theta.log_prob(x_full, z_c) + std_normal_logpdf_batch(z_c) + diag_rank1_logpdf(z_p, mean, logdiag, u)
    with np.errstate(invalid="ignore"):
        log_ratio = np.asarray(log_num - log_den, dtype=np.float64)
    log_ratio = np.where(np.isnan(log_ratio), -np.inf, log_ratio)
    return np.minimum(0.0, log_ratio)


def mwg_acceptance(z_proposed, z_current, x_full, theta, gamma) -> np.ndarray:
    """Acceptance probability rho in [0, 1] of moving from ``z_current`` to ``z_proposed``."""
    return np.exp(mwg_log_acceptance(z_proposed, z_current, x_full, theta, gamma))


def mwg_step(state: ChainState, x_obs, mask, theta, gamma, rng, accept_rng=None) -> ChainState:
    """One Metropolis-within-Gibbs iteration.

    ``accept_rng`` draws the uniforms for the accept/reject decision; keeping
    it apart from ``rng`` means a chain that accepts everything follows the
    exact path of the pseudo-Gibbs chain on the same ``rng``.
    """
    accept_rng = rng if accept_rng is None else accept_rng
    missing = _mask_matrix(mask, state.x.shape)
    z_prop, proposal = _propose(gamma, state.x, rng)
    out_prop = _decode(theta, z_prop)
    z_sq_cur = state.z_sq if state.z_sq is not None else (state.z * state.z).sum(axis=-1)
    log_ratio, z_sq_prop = _fused_log_ratio(
        z_prop, proposal, out_prop, state.z, z_sq_cur, state.out, state.x, theta.output_kind
    )
    log_u = np.log(accept_rng.random(log_ratio.shape))
    accept = (log_ratio >= 0.0) | (log_u < log_ratio)
    keep = accept[:, None]
    z = np.where(keep, z_prop, state.z)
    out = tuple(np.where(keep, a, b) for a, b in zip(out_prop, state.out))
    x = _resample_missing(theta, out, state.x, missing, rng)
    return replace(
        state,
        t=state.t + 1,
        z=z,
        x=x,
        out=out,
        accepted=state.accepted + accept,
        mwg_steps=state.mwg_steps + 1,
        z_sq=np.where(accept, z_sq_prop, z_sq_cur),
    )


# -- whole chains ------------------------------------------------------------


@dataclass
class ChainResult:
    imputation: np.ndarray  # (B, p) single imputation, observed entries untouched
    acceptance_rate: np.ndarray  # (B,) over the Metropolis steps, nan for pseudo-Gibbs
    final_state: ChainState
    trace: np.ndarray | None = None  # (T, B, p) completions, when requested
    f1_trace: list = field(default_factory=list)  # (t, mean F1) pairs when monitored
    seconds: float = 0.0


def run_chain(
    x_obs,
    mask,
    theta,
    gamma,
    T: int,
    warmup_pg: int = 20,
    rng=0,
    mode: str = MWG,
    keep_trace: bool = False,
    truth=None,
    monitor_every: int = 0,
) -> ChainResult:
    """Run ``T`` iterations: ``warmup_pg`` pseudo-Gibbs steps then Metropolis steps.

    With ``mode="pseudo-gibbs"`` every step is pseudo-Gibbs.  The single
    imputation is the pixelwise majority vote (Bernoulli, ties go to 1) or
    the mean (Gaussian) over the last quarter of the chain.  Passing the
    complete ``truth`` with ``monitor_every > 0`` records the mean F1 of the
    current completion on the missing entries (binary data only).
    """
    import time

    if mode not in SAMPLERS:
        raise ValueError(f"mode must be one of {SAMPLERS}")
    if T < 1 or not 0 <= warmup_pg < T:
        raise ValueError(f"need T >= 1 and 0 <= warmup_pg < T, got T={T}, warmup_pg={warmup_pg}")
    x_obs = np.atleast_2d(np.asarray(x_obs, dtype=np.float64))
    missing = np.array(_mask_matrix(mask, x_obs.shape))
    main_rng, accept_rng = make_rng(rng).spawn(2)
    start = time.perf_counter()
    state = init_chain(x_obs, missing, theta, gamma, main_rng, mode)
    tail_start = T - max(1, T // 4)
    tail_sum = np.zeros_like(x_obs)
    trace = np.empty((T,) + x_obs.shape) if keep_trace else None
    f1_trace = []
    for t in range(T):
        if mode == PSEUDO_GIBBS or t < warmup_pg:
            state = pseudo_gibbs_step(state, x_obs, missing, theta, gamma, main_rng)
        else:
            state = mwg_step(state, x_obs, missing, theta, gamma, main_rng, accept_rng)
        if t >= tail_start:
            tail_sum += state.x
        if keep_trace:
            trace[t] = state.x
        if monitor_every and truth is not None and (t + 1) % monitor_every == 0:
            f1_trace.append((t + 1, float(np.mean(batch_f1(truth, state.x, missing)))))
    tail_mean = tail_sum / (T - tail_start)
    if theta.output_kind == BERNOULLI:
        single = (tail_mean >= 0.5).astype(np.float64)
    else:
        single = tail_mean
    imputation = np.where(missing, single, x_obs)
    return ChainResult(
        imputation, state.acceptance_rate, state, trace, f1_trace, time.perf_counter() - start
    )


# -- scoring -----------------------------------------------------------------


def f1_score(true_miss, imputed_miss, return_convention: bool = False):
    """F1 with 1 as the positive class.

    When neither vector has a positive the score is 1 (perfect agreement);
    when exactly one has none it is 0.  With ``return_convention`` the
    result is ``(f1, convention)`` where ``convention`` names the rule used,
    or is None for the ordinary formula.
    """
    a = np.asarray(true_miss)
    b = np.asarray(imputed_miss)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if not (np.all((a == 0) | (a == 1)) and np.all((b == 0) | (b == 1))):
        raise ValueError("f1_score needs binary vectors")
    a = a.astype(bool)
    b = b.astype(bool)
    convention = None
    if not a.any() and not b.any():
        score, convention = 1.0, "no-positives"
    elif not a.any() or not b.any():
        score, convention = 0.0, "one-side-empty"
    else:
        tp = np.sum(a & b)
        score = float(2 * tp / (a.sum() + b.sum()))
    return (score, convention) if return_convention else score


def batch_f1(truth, imputed, missing) -> np.ndarray:
    """Per-row F1 restricted to the missing entries of each row."""
    truth = np.atleast_2d(truth)
    imputed = np.atleast_2d(imputed)
    missing = _mask_matrix(missing, truth.shape)
    return np.array([f1_score(t[m], i[m]) for t, i, m in zip(truth, imputed, missing)])


# -- linear-Gaussian oracle ------------------------------------------------------


@dataclass(frozen=True)
class GaussianConditional:
    mean: np.ndarray
    cov: np.ndarray
    missing_idx: np.ndarray


def linear_gaussian_conditional(model: LinearGaussianModel, x_obs, mask) -> GaussianConditional:
    """x_miss | x_obs under x ~ N(offset, loading loading^T + noise_var I)."""
    missing = np.asarray(mask.missing if isinstance(mask, MissingnessMask) else mask, dtype=bool)
    x_obs = np.asarray(x_obs, dtype=np.float64)
    m, o = np.flatnonzero(missing), np.flatnonzero(~missing)
    C = model.marginal_cov
    mu = np.asarray(model.offset, dtype=np.float64)
    if o.size == 0:
        return GaussianConditional(mu[m], C[np.ix_(m, m)], m)
    C_oo = C[np.ix_(o, o)]
    try:
        chol = np.linalg.cholesky(C_oo)
    except np.linalg.LinAlgError as exc:
        raise ValueError("observed covariance block is singular") from exc
    C_mo = C[np.ix_(m, o)]
    K = np.linalg.solve(chol.T, np.linalg.solve(chol, C_mo.T)).T
    mean = mu[m] + K @ (x_obs[o] - mu[o])
    cov = C[np.ix_(m, m)] - K @ C_mo.T
    return GaussianConditional(mean, 0.5 * (cov + cov.T), m)


# -- persistence ----------------------------------------------------------------

RESULT_COLUMNS = ("item_id", "scenario", "sampler", "T", "warmup", "acceptance_rate", "f1")


@dataclass
class ItemResult:
    item_id: int
    scenario: str
    sampler: str
    T: int
    warmup: int
    acceptance_rate: float
    f1: float


def write_item_results(path, rows, header_comments: dict | None = None) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        for k, v in (header_comments or {}).items():
            fh.write(f"# {k}={v}\n")
        writer = csv.writer(fh)
        writer.writerow(RESULT_COLUMNS)
        for r in rows:
            writer.writerow([r.item_id, r.scenario, r.sampler, r.T, r.warmup, repr(float(r.acceptance_rate)), repr(float(r.f1))])
    return path


def read_item_results(path) -> list[ItemResult]:
    with Path(path).open() as fh:
        lines = [line for line in fh if not line.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        rows.append(
            ItemResult(
                int(rec["item_id"]),
                rec["scenario"],
                rec["sampler"],
                int(rec["T"]),
                int(rec["warmup"]),
                float(rec["acceptance_rate"]),
                float(rec["f1"]),
            )
        )
    return rows


def dump_trace(path, trace, meta: dict | None = None) -> tuple[Path, Path]:
    """Raw little-endian float64 array plus a JSON sidecar with shape and metadata."""
    path = Path(path)
    arr = np.ascontiguousarray(trace, dtype="<f8")
    arr.tofile(path)
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps({"dtype": "<f8", "shape": list(arr.shape), "meta": meta or {}}, indent=1, sort_keys=True))
    return path, sidecar


def load_trace(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    info = json.loads(path.with_name(path.name + ".json").read_text())
    arr = np.fromfile(path, dtype=info["dtype"])
    expected = math.prod(info["shape"])
    if arr.size != expected:
        raise ValueError(f"trace {path} holds {arr.size} values, sidecar promises {expected}")
    return arr.reshape(info["shape"]), info["meta"]


def impute_items(X_true, masks, theta, gamma, T, warmup_pg=20, mode=MWG, rng=0, scenario="custom"):
    """Run one batched chain over every item and score each row on its missing entries."""
    X_true = np.atleast_2d(np.asarray(X_true, dtype=np.float64))
    missing = np.array(_mask_matrix(masks, X_true.shape))
    x_obs = np.where(missing, 0.0, X_true)
    res = run_chain(x_obs, missing, theta, gamma, T, warmup_pg, rng, mode)
    if theta.output_kind == BERNOULLI:
        scores = batch_f1(X_true, res.imputation, missing)
    else:
        scores = np.full(X_true.shape[0], np.nan)
    warm = T if mode == PSEUDO_GIBBS else warmup_pg
    rows = [
        ItemResult(i, scenario, mode, T, warm, float(res.acceptance_rate[i]), float(scores[i]))
        for i in range(X_true.shape[0])
    ]
    return rows, res
