"""Non-membership test on rank-correlation differences.

The statistic is ``delta = rho(ref, target) - rho(distilled, target)``.  Its
sampling distribution comes from a document-level bootstrap in which one
index draw per replicate is shared by all three score vectors.  The
one-sided p-value is ``(1 + #{delta_b <= 0}) / (B + 1)``.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, TooManyDegenerateResamples, ValidationError, ZeroVarianceDifferences
from .ranks import CORRELATIONS, CountRanker, kendall_from_counts, spearman_from_counts
from .records import align_by_doc_id
from .scores import ScoreVector

RNG_ALGORITHM = "numpy PCG64, stream b = SeedSequence(seed, spawn_key=(b,))"


class Verdict(str, enum.Enum):
    NON_MEMBER_EVIDENCE = "NonMemberEvidence"
    INCONCLUSIVE = "Inconclusive"


@dataclass(frozen=True)
class TestConfig:
    B: int = 10_000
    alpha: float = 0.05
    seed: int = 0
    metric: str = "spearman"
    max_redraws: int = 100
    ci_level: float = 0.95

    __test__ = False  # not a pytest class

    def __post_init__(self):
        if self.B < 1:
            raise ValidationError("B must be >= 1", field="B")
        if not 0 < self.alpha < 1:
            raise ValidationError("alpha must be in (0, 1)", field="alpha")
        if not 0 < self.ci_level < 1:
            raise ValidationError("ci_level must be in (0, 1)", field="ci_level")
        if self.metric not in CORRELATIONS:
            raise ValidationError(f"metric must be one of {sorted(CORRELATIONS)}", field="metric")
        if self.max_redraws < 0:
            raise ValidationError("max_redraws must be >= 0", field="max_redraws")


@dataclass
class TestReport:
    rho_RT: float
    rho_DT: float
    delta_hat: float
    p_value: float
    ci: tuple[float, float]
    n_docs: int
    config: TestConfig
    redraw_count: int
    verdict: Verdict
    deltas: np.ndarray = field(repr=False)
    n_nonpositive: int = 0
    rng: str = RNG_ALGORITHM
    labels: dict = field(default_factory=dict)

    __test__ = False

    def to_dict(self, with_deltas: bool = False) -> dict:
        d = {
            "rho_RT": self.rho_RT,
            "rho_DT": self.rho_DT,
            "delta_hat": self.delta_hat,
            "p_value": self.p_value,
            "ci": list(self.ci),
            "n_docs": self.n_docs,
            "n_nonpositive": self.n_nonpositive,
            "redraw_count": self.redraw_count,
            "verdict": self.verdict.value,
            "config": asdict(self.config),
            "rng": self.rng,
            "labels": dict(self.labels),
        }
        if with_deltas:
            d["deltas"] = self.deltas.tolist()
        return d

    def to_json(self, with_deltas: bool = False) -> str:
        return json.dumps(self.to_dict(with_deltas), sort_keys=True, indent=2) + "\n"

    def to_text(self) -> str:
        c = self.config
        lvl = f"{100 * c.ci_level:g}%"
        lines = [
            "Non-membership rank-correlation test",
            f"  documents          {self.n_docs}",
            f"  metric             {c.metric}",
            f"  rho(ref, target)   {self.rho_RT:+.4f}",
            f"  rho(dist, target)  {self.rho_DT:+.4f}",
            f"  delta              {self.delta_hat:+.4f}",
            f"  delta {lvl} CI     [{self.ci[0]:+.4f}, {self.ci[1]:+.4f}]",
            f"  bootstrap B        {c.B} (seed {c.seed}, {self.redraw_count} redraws)",
            f"  p-value            {self.p_value:.4g}",
            f"  alpha              {c.alpha:g}",
            f"  verdict            {self.verdict.value}",
        ]
        for k, v in sorted(self.labels.items()):
            lines.append(f"  {k:<18} {v}")
        return "\n".join(lines) + "\n"

    def write(self, stem, deltas_csv: bool = True) -> list[Path]:
        stem = Path(stem)
        paths = [stem.with_suffix(".txt"), stem.with_suffix(".json")]
        paths[0].write_text(self.to_text(), encoding="utf-8")
        paths[1].write_text(self.to_json(), encoding="utf-8")
        if deltas_csv:
            p = stem.parent / (stem.name + "_deltas.csv")
            p.write_text("b,delta\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(self.deltas.tolist(), 1)),
                         encoding="utf-8")
            paths.append(p)
        return paths


def _aligned_triple(scores_R: ScoreVector, scores_T: ScoreVector, scores_D: ScoreVector):
    ids = [v.doc_ids for v in (scores_R, scores_T, scores_D)]
    if ids[0] == ids[1] == ids[2]:
        return ids[0], scores_R.scores, scores_T.scores, scores_D.scores
    if len({frozenset(i) for i in ids}) != 1:
        raise AlignmentError("reference, target and distilled score vectors cover different documents")
    al = align_by_doc_id(scores_R, scores_T, scores_D)
    return al.doc_ids, *(v.scores[i] for v, i in zip((scores_R, scores_T, scores_D), al.indices))


def delta_statistic(scores_R, scores_T, scores_D, metric: str = "spearman") -> tuple[float, float, float]:
    corr = CORRELATIONS[metric]
    if all(isinstance(v, ScoreVector) for v in (scores_R, scores_T, scores_D)):
        _, r, t, d = _aligned_triple(scores_R, scores_T, scores_D)
    else:
        r, t, d = (np.asarray(v, dtype=np.float64) for v in (scores_R, scores_T, scores_D))
    if len(r) < 3:
        raise ValueError("need at least 3 documents")
    rho_rt = corr(r, t)
    rho_dt = corr(d, t)
    return rho_rt, rho_dt, rho_rt - rho_dt


def percentile_ci(deltas, level: float = 0.95) -> tuple[float, float]:
    """Equal-tailed percentile interval, linear interpolation between order
    statistics."""
    x = np.asarray(deltas, dtype=np.float64)
    if x.size == 0:
        raise ValueError("deltas must be non-empty")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    # round so that e.g. level 0.95 hits the 2.5% / 97.5% points exactly
    q = [round((1 - level) / 2, 12), round((1 + level) / 2, 12)]
    lo, hi = np.quantile(x, q, method="linear")
    return float(lo), float(hi)


def p_value_from_deltas(deltas) -> float:
    d = np.asarray(deltas)
    return (1 + int((d <= 0).sum())) / (len(d) + 1)


def resample_stream(seed: int, b: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(b,))))


def draw_counts(n: int, B: int, seed: int, rankers=(), max_redraws: int = 100, start: int = 0):
    """Multiplicity vectors for replicates ``start .. start+B-1``.

    A replicate whose documents are all tied on any side in ``rankers`` is
    redrawn from the same stream.  Returns ``(counts, n_redraws)``.
    """
    counts = np.zeros((B, n), dtype=np.float64)
    redraws = 0
    streams = [resample_stream(seed, start + i) for i in range(B)]
    idx = np.stack([g.integers(0, n, size=n) for g in streams])
    for i in range(B):
        counts[i] = np.bincount(idx[i], minlength=n)
    if rankers:
        bad = np.zeros(B, dtype=bool)
        for rk in rankers:
            bad |= rk.n_distinct(counts) < 2
        for i in np.flatnonzero(bad):
            tries = 0
            while True:
                if tries >= max_redraws:
                    raise TooManyDegenerateResamples(
                        f"replicate {start + i} was degenerate after {max_redraws} redraws")
                tries += 1
                c = np.bincount(streams[i].integers(0, n, size=n), minlength=n).astype(np.float64)[None, :]
                if all(rk.n_distinct(c)[0] >= 2 for rk in rankers):
                    counts[i] = c[0]
                    break
            redraws += tries
    return counts, redraws


def bootstrap_deltas(r, t, d, config: TestConfig, chunk: int = 1000):
    """Replicate statistics ``rho_RT^(b) - rho_DT^(b)`` and the redraw count."""
    n = len(t)
    rr, rt, rd = CountRanker(r), CountRanker(t), CountRanker(d)
    if config.metric == "kendall":
        st = rt.sign_matrix()
        conc_rt, conc_dt = rr.sign_matrix() * st, rd.sign_matrix() * st
    out = np.empty(config.B)
    redraws = 0
    for start in range(0, config.B, chunk):
        m = min(chunk, config.B - start)
        counts, k = draw_counts(n, m, config.seed, (rr, rt, rd), config.max_redraws, start)
        redraws += k
        if config.metric == "kendall":
            a = kendall_from_counts(rr, rt, counts, conc_rt)
            b = kendall_from_counts(rd, rt, counts, conc_dt)
        else:
            a = spearman_from_counts(rr, rt, counts)
            b = spearman_from_counts(rd, rt, counts)
        out[start:start + m] = a - b
    return out, redraws


def bootstrap_test(scores_R: ScoreVector, scores_T: ScoreVector, scores_D: ScoreVector,
                   config: TestConfig = TestConfig()) -> TestReport:
    ids, r, t, d = _aligned_triple(scores_R, scores_T, scores_D)
    rho_rt, rho_dt, delta_hat = delta_statistic(r, t, d, config.metric)
    deltas, redraws = bootstrap_deltas(r, t, d, config)
    p = p_value_from_deltas(deltas)
    verdict = Verdict.NON_MEMBER_EVIDENCE if p < config.alpha else Verdict.INCONCLUSIVE
    return TestReport(
        rho_RT=rho_rt, rho_DT=rho_dt, delta_hat=delta_hat, p_value=p,
        ci=percentile_ci(deltas, config.ci_level), n_docs=len(ids), config=config,
        redraw_count=redraws, verdict=verdict, deltas=deltas, n_nonpositive=int((deltas <= 0).sum()),
        labels={"reference": scores_R.model_id, "target": scores_T.model_id, "distilled": scores_D.model_id,
                "dataset": scores_T.dataset_id, "score": scores_T.spec.label()},
    )


# --- paired t-test baseline ---------------------------------------------------------

def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    dd = 1.0 - qab * x / qap
    dd = 1.0 / (dd if abs(dd) > tiny else tiny)
    h = dd
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        dd = 1.0 + aa * dd
        dd = 1.0 / (dd if abs(dd) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= dd * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        dd = 1.0 + aa * dd
        dd = 1.0 / (dd if abs(dd) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = dd * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if not (a > 0 and b > 0):
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def student_t_cdf(t: float, df: float) -> float:
    if df <= 0:
        raise ValueError("df must be positive")
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    tail = 0.5 * betainc_regularized(df / 2.0, 0.5, df / (df + t * t))
    return tail if t < 0 else 1.0 - tail


def student_t_sf(t: float, df: float) -> float:
    return student_t_cdf(-t, df)


class Alternative(str, enum.Enum):
    LESS = "less"
    GREATER = "greater"
    TWO_SIDED = "two-sided"


@dataclass(frozen=True)
class TTestResult:
    t_stat: float
    df: int
    p_value: float
    mean_diff: float


def paired_t_test(scores_T, scores_D, alternative: Alternative | str = Alternative.LESS) -> TTestResult:
    """Paired t-test on ``d_i = score_T_i - score_D_i``.

    ``less`` tests whether the target's mean score is below the distilled
    model's mean score.
    """
    alternative = Alternative(alternative)
    if isinstance(scores_T, ScoreVector) and isinstance(scores_D, ScoreVector):
        al = align_by_doc_id(scores_T, scores_D)
        x, y = scores_T.scores[al.indices[0]], scores_D.scores[al.indices[1]]
    else:
        x, y = np.asarray(scores_T, dtype=np.float64), np.asarray(scores_D, dtype=np.float64)
    diff = x - y
    n = len(diff)
    if n < 2:
        raise ValueError("paired t-test needs n >= 2")
    if np.all(diff == diff[0]):
        raise ZeroVarianceDifferences("all paired differences are identical")
    mean = float(diff.mean())
    sd = float(diff.std(ddof=1))
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    if alternative is Alternative.LESS:
        p = student_t_cdf(t, df)
    elif alternative is Alternative.GREATER:
        p = student_t_sf(t, df)
    else:
        p = min(1.0, 2.0 * student_t_cdf(-abs(t), df))
    return TTestResult(t, df, p, mean)
