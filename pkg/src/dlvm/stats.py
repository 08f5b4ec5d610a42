"""Paired comparison of the two samplers.

The Wilcoxon signed-rank test is run on per-item F1 differences.  Ranks use
midranks for ties; the null distribution of the positive rank sum is
computed exactly by dynamic programming over doubled ranks (so midranks stay
integral) for up to 20 non-zero differences, and by the tie-corrected normal
approximation with continuity correction beyond that.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm, rankdata

EXACT_MAX_N = 20
MIN_N = 5


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # W = min(W+, W-)
    p_value: float
    n_effective: int
    w_plus: float
    w_minus: float
    method: str  # "exact", "normal" or "degenerate"

    @property
    def degenerate(self) -> bool:
        return self.method == "degenerate"


def _signed_ranks(d: np.ndarray, zero_method: str) -> np.ndarray:
    """Signed midranks of the differences; zeros dropped per ``zero_method``."""
    if zero_method == "wilcox":
        d = d[d != 0]
        ranks = rankdata(np.abs(d))
    elif zero_method == "pratt":
        ranks = rankdata(np.abs(d))
        keep = d != 0
        d, ranks = d[keep], ranks[keep]
    else:
        raise ValueError(f"zero_method must be 'wilcox' or 'pratt', got {zero_method!r}")
    return np.sign(d) * ranks


def exact_lower_tail(ranks, w: float) -> float:
    """P(W+ <= w) when each rank carries a fair random sign.

    Ranks are multiples of 1/2, so the DP runs over twice the rank sums.
    """
    twice = np.rint(2.0 * np.asarray(ranks, dtype=np.float64)).astype(np.int64)
    counts = np.zeros(int(twice.sum()) + 1)
    counts[0] = 1.0
    for r in twice:
        counts[r:] = counts[r:] + counts[: counts.size - r].copy()
    limit = int(math.floor(2.0 * w + 1e-9))
    return float(counts[: limit + 1].sum() / 2.0 ** twice.size)


def wilcoxon_signed_rank(a, b, method: str = "auto", zero_method: str = "wilcox") -> WilcoxonResult:
    """Two-sided signed-rank test on the differences ``b - a``.

    ``method`` is "auto" (exact for at most 20 non-zero differences),
    "exact" or "normal".  All-zero differences give a degenerate result
    with p = 1 and no test.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"need two vectors of equal length, got {a.shape} and {b.shape}")
    signed = _signed_ranks(b - a, zero_method)
    n = signed.size
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, 0.0, 0.0, "degenerate")
    if n < MIN_N:
        raise ValueError(f"need at least {MIN_N} non-zero differences, got {n}")
    ranks = np.abs(signed)
    w_plus = float(ranks[signed > 0].sum())
    w_minus = float(ranks[signed < 0].sum())
    w = min(w_plus, w_minus)
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    if method == "exact":
        p = 2.0 * exact_lower_tail(ranks, w)
    elif method == "normal":
        mean = ranks.sum() / 2.0
        # sum r^2 / 4 is the tie-corrected variance for midranks
        sd = math.sqrt(np.sum(ranks**2) / 4.0)
        z = min(w - mean + 0.5, 0.0) / sd
        p = 2.0 * float(norm.cdf(z))
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(w, min(1.0, p), n, w_plus, w_minus, method)


def format_p(p: float) -> str:
    """Display p-values with the "<1e-15" truncation used in result tables."""
    if p < 1e-15:
        return "<1e-15"
    return f"{p:.3g}"


@dataclass
class PairedScores:
    item_ids: np.ndarray
    f1_pseudo_gibbs: np.ndarray
    f1_mwg: np.ndarray

    def __post_init__(self):
        self.item_ids = np.asarray(self.item_ids)
        self.f1_pseudo_gibbs = np.asarray(self.f1_pseudo_gibbs, dtype=np.float64)
        self.f1_mwg = np.asarray(self.f1_mwg, dtype=np.float64)
        if not (self.item_ids.size == self.f1_pseudo_gibbs.size == self.f1_mwg.size):
            raise ValueError("paired score vectors must have equal length")
        if np.unique(self.item_ids).size != self.item_ids.size:
            raise ValueError("item ids must be unique")

    @classmethod
    def from_item_results(cls, pg_rows, mwg_rows) -> "PairedScores":
        """Pair two lists of per-item results on their item id."""
        pg = {r.item_id: r.f1 for r in pg_rows}
        mwg = {r.item_id: r.f1 for r in mwg_rows}
        if set(pg) != set(mwg):
            raise ValueError("pseudo-Gibbs and MwG results cover different items")
        ids = sorted(pg)
        return cls(ids, [pg[i] for i in ids], [mwg[i] for i in ids])


TABLE_COLUMNS = ("dataset", "scenario", "n", "mean_f1_pg", "mean_f1_mwg", "difference", "W", "p_value", "p_display", "method")


@dataclass
class ResultsRow:
    dataset: str
    scenario: str
    n: int
    mean_f1_pg: float
    mean_f1_mwg: float
    difference: float
    W: float
    p_value: float
    p_display: str
    method: str

    @property
    def degenerate(self) -> bool:
        return self.method == "degenerate"


def results_table(scores: dict, method: str = "auto") -> list[ResultsRow]:
    """One row per (dataset, scenario) key of ``scores`` (values are PairedScores)."""
    if not scores:
        raise ValueError("no score sets given")
    rows = []
    for (dataset, scenario), ps in scores.items():
        if ps.item_ids.size == 0:
            raise ValueError(f"empty score set for {dataset}/{scenario}")
        test = wilcoxon_signed_rank(ps.f1_pseudo_gibbs, ps.f1_mwg, method=method)
        pg, mwg = float(ps.f1_pseudo_gibbs.mean()), float(ps.f1_mwg.mean())
        rows.append(
            ResultsRow(dataset, scenario, int(ps.item_ids.size), pg, mwg, mwg - pg, test.statistic, test.p_value, format_p(test.p_value), test.method)
        )
    return rows


def write_results_table(path, rows, header_comments: dict | None = None) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        for k, v in (header_comments or {}).items():
            fh.write(f"# {k}={v}\n")
        writer = csv.writer(fh)
        writer.writerow(TABLE_COLUMNS)
        for r in rows:
            rec = asdict(r)
            writer.writerow([repr(v) if isinstance(v, float) else v for v in (rec[c] for c in TABLE_COLUMNS)])
    return path


def read_results_table(path) -> list[ResultsRow]:
    with Path(path).open() as fh:
        lines = [line for line in fh if not line.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        rows.append(
            ResultsRow(
                rec["dataset"],
                rec["scenario"],
                int(rec["n"]),
                float(rec["mean_f1_pg"]),
                float(rec["mean_f1_mwg"]),
                float(rec["difference"]),
                float(rec["W"]),
                float(rec["p_value"]),
                rec["p_display"],
                rec["method"],
            )
        )
    return rows
