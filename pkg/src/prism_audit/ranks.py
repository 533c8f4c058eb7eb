"""Tie-aware ranks, Spearman rho, Kendall tau-b and per-document rank changes.

The ``*_from_counts`` functions evaluate the same coefficients on bootstrap
resamples described by per-document multiplicities, which avoids building
each resample explicitly.  Copies of one document are tied with each other on
every side, exactly as they would be in a materialized resample.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateVariance, ValidationError
from .records import align_by_doc_id
from .scores import ScoreVector, SignConvention, require_convention


@dataclass(frozen=True)
class RankVector:
    doc_ids: tuple[str, ...]
    ranks: np.ndarray


def _as_values(x) -> np.ndarray:
    arr = np.asarray(x.scores if isinstance(x, ScoreVector) else x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError("expected a 1-D sequence of scores")
    if not np.isfinite(arr).all():
        raise ValidationError("scores must be finite", field="score")
    return arr


def _tie_groups(values: np.ndarray):
    """Sort order plus, for every element, the [start, end) span of its tie
    group within that order."""
    order = np.argsort(values, kind="stable")
    s = values[order]
    n = len(s)
    new_group = np.empty(n, dtype=bool)
    new_group[0] = True
    new_group[1:] = s[1:] != s[:-1]
    starts_sorted = np.maximum.accumulate(np.where(new_group, np.arange(n), 0))
    ends_marker = np.empty(n, dtype=bool)
    ends_marker[-1] = True
    ends_marker[:-1] = new_group[1:]
    ends_sorted = np.minimum.accumulate(np.where(ends_marker, np.arange(n) + 1, n)[::-1])[::-1]
    start = np.empty(n, dtype=np.intp)
    end = np.empty(n, dtype=np.intp)
    start[order] = starts_sorted
    end[order] = ends_sorted
    return order, start, end


def average_ranks(values, doc_ids=None) -> RankVector:
    """1-based ascending ranks; tied values share the mean of their positions."""
    v = _as_values(values)
    if len(v) < 2:
        raise ValueError("need at least 2 values to rank")
    _, start, end = _tie_groups(v)
    ranks = (start + end + 1) / 2.0
    if doc_ids is None:
        doc_ids = values.doc_ids if isinstance(values, ScoreVector) else tuple(str(i) for i in range(len(v)))
    return RankVector(tuple(doc_ids), ranks)


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateVariance("rank correlation undefined: one side is constant")
    r = float(xc @ yc) / np.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def _paired(a, b):
    if isinstance(a, ScoreVector) and isinstance(b, ScoreVector) and a.doc_ids != b.doc_ids:
        al = align_by_doc_id(a, b)
        return a.scores[al.indices[0]], b.scores[al.indices[1]]
    x, y = _as_values(a), _as_values(b)
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    return x, y


def spearman_rho(a, b) -> float:
    """Pearson correlation of average ranks."""
    x, y = _paired(a, b)
    if len(x) < 3:
        raise ValueError("spearman_rho needs n >= 3")
    return _pearson(average_ranks(x).ranks, average_ranks(y).ranks)


def _tie_pairs(values: np.ndarray) -> int:
    _, counts = np.unique(values, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def kendall_tau(a, b) -> float:
    """Kendall tau-b: (C - D) / sqrt((n0 - n1)(n0 - n2))."""
    x, y = _paired(a, b)
    n = len(x)
    if n < 3:
        raise ValueError("kendall_tau needs n >= 3")
    n0 = n * (n - 1) // 2
    n1, n2 = _tie_pairs(x), _tie_pairs(y)
    if n1 == n0 or n2 == n0:
        raise DegenerateVariance("kendall tau undefined: one side is constant")
    s = 0
    for start in range(0, n, 512):  # row blocks bound the n x n temporary
        sx = np.sign(x[start:start + 512, None] - x[None, :]).astype(np.int64)
        sy = np.sign(y[start:start + 512, None] - y[None, :]).astype(np.int64)
        s += int((sx * sy).sum())
    tau = (s // 2) / np.sqrt(float(n0 - n1) * float(n0 - n2))
    return max(-1.0, min(1.0, float(tau)))


CORRELATIONS = {"spearman": spearman_rho, "kendall": kendall_tau}


# --- resample-weighted forms -----------------------------------------------------

class CountRanker:
    """Precomputed tie structure of one score vector, for evaluating ranks
    and tie counts on many multiplicity vectors at once."""

    def __init__(self, values):
        v = _as_values(values)
        order, start, end = _tie_groups(v)
        self.values = v
        self.order = order
        self.start = start
        self.end = end
        # distinct group spans in sorted order
        self.group_starts = np.unique(start)
        self.group_ends = np.unique(end)

    def _cum(self, counts: np.ndarray) -> np.ndarray:
        c = counts[:, self.order]
        cum = np.zeros((counts.shape[0], counts.shape[1] + 1))
        np.cumsum(c, axis=1, out=cum[:, 1:])
        return cum

    def ranks(self, counts: np.ndarray, cum: np.ndarray | None = None) -> np.ndarray:
        """Average rank of each document inside each resample, ``(B, n)``."""
        cum = self._cum(counts) if cum is None else cum
        less = cum[:, self.start]
        equal = cum[:, self.end] - less
        return less + (equal + 1.0) / 2.0

    def tie_pairs(self, counts: np.ndarray, cum: np.ndarray | None = None) -> np.ndarray:
        cum = self._cum(counts) if cum is None else cum
        t = cum[:, self.group_ends] - cum[:, self.group_starts]
        return (t * (t - 1.0) / 2.0).sum(axis=1)

    def n_distinct(self, counts: np.ndarray) -> np.ndarray:
        cum = self._cum(counts)
        t = cum[:, self.group_ends] - cum[:, self.group_starts]
        return (t > 0).sum(axis=1)

    def sign_matrix(self) -> np.ndarray:
        v = self.values
        return np.sign(v[:, None] - v[None, :])


def spearman_from_counts(ra: CountRanker, rb: CountRanker, counts: np.ndarray) -> np.ndarray:
    """Spearman rho of each resample; NaN where a side is constant."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum(axis=1, keepdims=True)
    mid = (total + 1.0) / 2.0
    xa = ra.ranks(counts) - mid
    xb = rb.ranks(counts) - mid
    sab = (counts * xa * xb).sum(axis=1)
    saa = (counts * xa * xa).sum(axis=1)
    sbb = (counts * xb * xb).sum(axis=1)
    out = np.full(len(counts), np.nan)
    ok = (saa > 0) & (sbb > 0)
    out[ok] = np.clip(sab[ok] / np.sqrt(saa[ok] * sbb[ok]), -1.0, 1.0)
    return out


def kendall_from_counts(ra: CountRanker, rb: CountRanker, counts: np.ndarray, concordance=None) -> np.ndarray:
    """Kendall tau-b of each resample; NaN where a side is constant.

    ``concordance`` is the ``sign(a_i-a_j) * sign(b_i-b_j)`` matrix and may be
    passed in to reuse it across calls.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if concordance is None:
        concordance = ra.sign_matrix() * rb.sign_matrix()
    s = ((counts @ concordance) * counts).sum(axis=1) / 2.0
    total = counts.sum(axis=1)
    n0 = total * (total - 1.0) / 2.0
    da = n0 - ra.tie_pairs(counts)
    db = n0 - rb.tie_pairs(counts)
    out = np.full(len(counts), np.nan)
    ok = (da > 0) & (db > 0)
    out[ok] = np.clip(s[ok] / np.sqrt(da[ok] * db[ok]), -1.0, 1.0)
    return out


# --- rank change analysis ----------------------------------------------------------

@dataclass(frozen=True)
class RankDeltaRow:
    doc_id: str
    score_before: float
    rank_before: float
    rank_after: float
    delta: float


def rank_delta(before: ScoreVector, after: ScoreVector) -> list[RankDeltaRow]:
    """Rank change of each document between two score vectors, both in the
    surprisal-positive convention; rows sorted by the earlier score."""
    require_convention((before, after), SignConvention.SURPRISAL_POSITIVE)
    al = align_by_doc_id(before, after)
    sb = before.scores[al.indices[0]]
    sa = after.scores[al.indices[1]]
    rb = average_ranks(sb).ranks
    ra = average_ranks(sa).ranks
    rows = [RankDeltaRow(d, float(s), float(r0), float(r1), float(r1 - r0))
            for d, s, r0, r1 in zip(al.doc_ids, sb, rb, ra)]
    rows.sort(key=lambda r: (r.score_before, r.doc_id))
    return rows


def write_rank_delta_csv(rows, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["doc_id", "score_before", "rank_before", "rank_after", "delta"])
        for r in rows:
            w.writerow([r.doc_id, "%.17g" % r.score_before, "%g" % r.rank_before, "%g" % r.rank_after, "%g" % r.delta])
