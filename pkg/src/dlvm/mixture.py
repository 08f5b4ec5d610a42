"""Finite-mixture upper bounds on the DLVM likelihood.

Any decoder pushes the prior forward to a mixing distribution over output
parameters, so the best mixture over the same output family bounds the DLVM
likelihood from above.  With Bernoulli outputs or Gaussian outputs whose
variances are floored at ``xi``, that best mixture has at most ``n``
components, and EM over finite mixtures gives a computable stand-in.
Multi-restart EM only finds local optima, so the reported bound is itself a
lower estimate of the true supremum.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import canonical_digest
from .distributions import BERNOULLI_EPS, LOG_2PI, log_sum_exp, make_rng
from .model import BERNOULLI, GAUSSIAN

EMPTY_COMPONENT = 1e-10


@dataclass
class FiniteMixture:
    weights: np.ndarray  # (K,)
    locations: np.ndarray  # (K, p): Gaussian means or Bernoulli probabilities
    variances: np.ndarray | None = None  # (K, p), Gaussian only
    kind: str = GAUSSIAN
    xi: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.locations = np.atleast_2d(np.asarray(self.locations, dtype=np.float64))
        if self.kind == GAUSSIAN:
            if self.variances is None:
                raise ValueError("Gaussian mixtures need variances")
            self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if self.weights.size == 0:
            raise ValueError("empty mixture")

    @property
    def n_components(self) -> int:
        return self.weights.size

    def effective_components(self, threshold: float = 1e-8) -> int:
        return int(np.sum(self.weights > threshold))

    def component_log_probs(self, X) -> np.ndarray:
        """(n, K) matrix of log Phi(x_i | eta_k)."""
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.locations.shape[1]:
            raise ValueError(f"data dimension {X.shape[1]} != mixture dimension {self.locations.shape[1]}")
        if self.kind == BERNOULLI:
            probs = np.clip(self.locations, BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)
            return X @ np.log(probs).T + (1.0 - X) @ np.log1p(-probs).T
        inv = 1.0 / self.variances
        quad = (X * X) @ inv.T - 2.0 * X @ (self.locations * inv).T + np.sum(self.locations**2 * inv, axis=1)
        logdet = np.sum(np.log(self.variances), axis=1)
        return -0.5 * (quad + logdet + X.shape[1] * LOG_2PI)

    def log_density(self, X) -> np.ndarray:
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return log_sum_exp(self.component_log_probs(X) + logw, axis=1)

    def to_dict(self) -> dict:
        out = {
            "version": 1,
            "kind": self.kind,
            "xi": float(self.xi),
            "weights": self.weights.tolist(),
            "locations": self.locations.tolist(),
        }
        if self.variances is not None:
            out["variances"] = self.variances.tolist()
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "FiniteMixture":
        return cls(
            payload["weights"],
            payload["locations"],
            payload.get("variances"),
            payload["kind"],
            payload.get("xi", 0.0),
        )


def mixture_loglik(G: FiniteMixture, X) -> float:
    """sum_i log sum_k pi_k Phi(x_i | eta_k)."""
    return float(np.sum(G.log_density(X)))


def save_mixture(G: FiniteMixture, path) -> Path:
    payload = G.to_dict()
    payload["digest"] = canonical_digest(payload)
    path = Path(path)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True))
    return path


def load_mixture(path) -> FiniteMixture:
    payload = json.loads(Path(path).read_text())
    digest = payload.pop("digest", None)
    if digest != canonical_digest(payload):
        raise ValueError(f"digest mismatch in {path}")
    return FiniteMixture.from_dict(payload)


def one_component_per_point(X, xi: float) -> FiniteMixture:
    """Equal-weight mixture with a variance-``xi`` Gaussian at every datum."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    return FiniteMixture(np.full(n, 1.0 / n), X.copy(), np.full(X.shape, xi), GAUSSIAN, xi)


# -- EM ------------------------------------------------------------------------


def kmeans_pp_indices(X, K: int, rng) -> np.ndarray:
    """Seed indices chosen with probability proportional to squared distance."""
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = np.sum((X - X[chosen[0]]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest)) if rest.size else int(rng.integers(n))
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(chosen)


def _initial_mixture(X, K, kind, xi, rng, tight: bool) -> FiniteMixture:
    idx = kmeans_pp_indices(X, K, rng)
    weights = np.full(K, 1.0 / K)
    if kind == BERNOULLI:
        probs = np.clip(0.5 * X[idx] + 0.5 * X.mean(axis=0), BERNOULLI_EPS, 1 - BERNOULLI_EPS)
        return FiniteMixture(weights, probs, None, BERNOULLI)
    spread = np.maximum(X.var(axis=0), xi)
    var = np.full((K, X.shape[1]), xi) if tight else np.tile(spread, (K, 1))
    return FiniteMixture(weights, X[idx].copy(), var, GAUSSIAN, xi)


def _m_step(X, resp, G: FiniteMixture, ll_rows, xi) -> tuple[FiniteMixture, int]:
    n = X.shape[0]
    nk = resp.sum(axis=0)
    empty = np.flatnonzero(nk < EMPTY_COMPONENT * n)
    safe = np.where(nk > 0, nk, 1.0)
    locs = (resp.T @ X) / safe[:, None]
    weights = nk / n
    if G.kind == BERNOULLI:
        locs = np.clip(locs, BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)
        var = None
    else:
        var = np.empty_like(locs)
        for k in range(G.n_components):
            var[k] = resp[:, k] @ (X - locs[k]) ** 2 / safe[k]
        var = np.maximum(var, xi)
    worst = np.argsort(ll_rows)
    for rank, k in enumerate(empty):
        x = X[worst[rank % n]]
        if G.kind == BERNOULLI:
            locs[k] = 0.8 * x + 0.1
        else:
            locs[k] = x
            var[k] = xi
    return FiniteMixture(weights, locs, var, G.kind, xi), int(empty.size)


def _em_run(X, G: FiniteMixture, max_iters: int, tol: float):
    trace = []
    reseeds = 0
    for _ in range(max_iters + 1):
        with np.errstate(divide="ignore"):
            logp = G.component_log_probs(X) + np.log(G.weights)
        ll_rows = log_sum_exp(logp, axis=1)
        ll = float(ll_rows.sum())
        if trace and ll - trace[-1] < tol * abs(trace[-1]):
            trace.append(ll)
            break
        trace.append(ll)
        if len(trace) > max_iters:
            break
        resp = np.exp(logp - ll_rows[:, None])
        G, r = _m_step(X, resp, G, ll_rows, G.xi)
        reseeds += r
    return G, np.array(trace), reseeds


@dataclass
class EmReport:
    traces: list = field(default_factory=list)  # one loglik array per restart
    loglik: float = -math.inf
    effective_components: int = 0
    best_restart: int = -1
    reseeds: int = 0

    def monotone(self, slack: float = 1e-9) -> bool:
        return all(np.all(np.diff(t) >= -slack) for t in self.traces)

    def to_csv(self, path, header_comments: dict | None = None) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            for k, v in (header_comments or {}).items():
                fh.write(f"# {k}={v}\n")
            writer = csv.writer(fh)
            writer.writerow(["iter", "loglik", "restart"])
            for r, t in enumerate(self.traces):
                for i, v in enumerate(t):
                    writer.writerow([i, repr(float(v)), r])
        return path


def em_fit(
    X,
    K: int,
    kind: str = GAUSSIAN,
    xi: float = 0.0,
    init_strategy: str = "mixed",
    max_iters: int = 500,
    tol: float = 1e-7,
    restarts: int = 10,
    rng=0,
    init_mixtures: list | None = None,
) -> tuple[FiniteMixture, EmReport]:
    """Best-of-restarts EM for a ``K``-component mixture.

    ``init_strategy``: ``"spread"`` starts every component with the data
    variance, ``"tight"`` at the floor ``xi``; ``"mixed"`` alternates.
    ``init_mixtures`` adds extra runs started from the given mixtures.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    if not 1 <= K <= n:
        raise ValueError(f"need 1 <= K <= n, got K={K}, n={n}")
    if kind == GAUSSIAN and xi <= 0:
        raise ValueError("Gaussian mixtures need a positive variance floor xi")
    if kind == BERNOULLI and not np.all((X == 0) | (X == 1)):
        raise ValueError("Bernoulli mixtures need binary data")
    rng = make_rng(rng)
    starts = []
    for r in range(restarts):
        tight = init_strategy == "tight" or (init_strategy == "mixed" and r % 2 == 1)
        starts.append(_initial_mixture(X, K, kind, xi, rng, tight))
    starts.extend(init_mixtures or [])
    report = EmReport()
    best = None
    for r, G0 in enumerate(starts):
        G, trace, reseeds = _em_run(X, G0, max_iters, tol)
        report.traces.append(trace)
        report.reseeds += reseeds
        if trace[-1] > report.loglik:
            best, report.loglik, report.best_restart = G, float(trace[-1]), r
    report.effective_components = best.effective_components()
    return best, report


def _grow(G: FiniteMixture, X, K: int, rng) -> FiniteMixture:
    """Extend ``G`` to ``K`` components by adding k-means++ style points."""
    extra = K - G.n_components
    d2 = np.min(np.sum((X[:, None, :] - G.locations[None]) ** 2, axis=2), axis=1)
    idx = []
    for _ in range(extra):
        p = d2 / d2.sum() if d2.sum() > 0 else None
        i = int(rng.choice(X.shape[0], p=p))
        idx.append(i)
        d2 = np.minimum(d2, np.sum((X - X[i]) ** 2, axis=1))
    new_w = np.full(extra, 1.0 / K)
    weights = np.concatenate([G.weights * (1.0 - new_w.sum()), new_w])
    if G.kind == BERNOULLI:
        locs = np.vstack([G.locations, np.clip(0.8 * X[idx] + 0.1, BERNOULLI_EPS, 1 - BERNOULLI_EPS)])
        return FiniteMixture(weights, locs, None, BERNOULLI)
    locs = np.vstack([G.locations, X[idx]])
    var = np.vstack([G.variances, np.full((extra, X.shape[1]), G.xi)])
    return FiniteMixture(weights, locs, var, GAUSSIAN, G.xi)


def default_k_schedule(n: int) -> list[int]:
    ks = []
    k = 1
    while k < n:
        ks.append(k)
        k *= 2
    ks.append(n)
    return ks


@dataclass
class BoundResult:
    loglik: float
    mixture: FiniteMixture
    schedule: list  # (K, loglik at K, best over K' <= K)
    reports: list

    @property
    def monotone_in_k(self) -> bool:
        best = [row[2] for row in self.schedule]
        return all(b2 >= b1 for b1, b2 in zip(best, best[1:]))


def nonparametric_bound(
    X,
    kind: str = GAUSSIAN,
    xi: float = 0.0,
    K_schedule=None,
    restarts: int = 10,
    rng=0,
    max_iters: int = 500,
    tol: float = 1e-7,
) -> BoundResult:
    """Largest EM log-likelihood over the schedule of component counts.

    Each K also gets a run warm-started from the best smaller mixture, and the
    reported value at K is the best over every K' <= K (a K'-mixture is a
    K-mixture with empty components).
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n = X.shape[0]
    ks = sorted(set(K_schedule or default_k_schedule(n)))
    if ks[0] < 1 or ks[-1] > n:
        raise ValueError("K_schedule must lie within 1..n")
    rng = make_rng(rng)
    best_G, best_ll = None, -math.inf
    schedule, reports = [], []
    for K in ks:
        extra = []
        if best_G is not None and best_G.n_components < K:
            extra.append(_grow(best_G, X, K, rng))
        if kind == GAUSSIAN and K == n:
            extra.append(one_component_per_point(X, xi))
        G, report = em_fit(X, K, kind, xi, "mixed", max_iters, tol, restarts, rng, extra)
        reports.append(report)
        if report.loglik > best_ll:
            best_G, best_ll = G, report.loglik
        schedule.append((K, report.loglik, best_ll))
    return BoundResult(best_ll, best_G, schedule, reports)


@dataclass
class SandwichReport:
    elbo: float
    iw_loglik: float
    bound: float
    elbo_se: float
    iw_se: float
    parsimony_gap: float
    kl_upper_bound: float
    elbo_le_iw: bool
    iw_le_bound: bool
    note: str = "the mixture bound comes from multi-restart EM and may underestimate the true maximum"

    @property
    def ordered(self) -> bool:
        return self.elbo_le_iw and self.iw_le_bound

    @property
    def flags(self) -> list[str]:
        out = []
        if not self.elbo_le_iw:
            out.append("ELBO exceeds the importance-weighted estimate beyond MC error")
        if not self.iw_le_bound:
            out.append("likelihood estimate exceeds the mixture bound: EM failure or MC problem")
        return out


def sandwich_report(elbo_value, iw_loglik_value, bound_value, elbo_se=0.0, iw_se=0.0, n_se=3.0) -> SandwichReport:
    """Parsimony gap, KL upper bound and the ordering ELBO <= loglik <= mixture bound."""
    return SandwichReport(
        elbo=float(elbo_value),
        iw_loglik=float(iw_loglik_value),
        bound=float(bound_value),
        elbo_se=float(elbo_se),
        iw_se=float(iw_se),
        parsimony_gap=float(bound_value - iw_loglik_value),
        kl_upper_bound=float(bound_value - elbo_value),
        elbo_le_iw=bool(elbo_value <= iw_loglik_value + n_se * math.hypot(elbo_se, iw_se)),
        iw_le_bound=bool(iw_loglik_value <= bound_value + n_se * iw_se),
    )
