"""Document-level membership-inference scores computed from token statistics.

Min-K%++ averages the K% smallest z-normalized token log-probabilities,
where each position is normalized by the model's own next-token distribution.
Min-K% does the same on raw log-probabilities.  Loss is mean NLL, and the
compression score divides total NLL by the DEFLATE size of the raw text.
"""
from __future__ import annotations

import enum
import json
import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConventionMismatch, ValidationError
from .records import DatasetStats, DocumentStats

DEFAULT_K = 20.0
DEFAULT_SIGMA_FLOOR = 1e-6
DEFLATE_LEVEL = 6


class ScoreKind(str, enum.Enum):
    MINKPP = "minkpp"
    MINK = "mink"
    LOSS = "loss"
    COMPRESSION = "compression"


class SignConvention(str, enum.Enum):
    ORIGINAL = "original"
    SURPRISAL_POSITIVE = "surprisal_positive"


@dataclass(frozen=True)
class ScoreSpec:
    kind: ScoreKind = ScoreKind.MINKPP
    k_percent: float = DEFAULT_K
    sign: SignConvention = SignConvention.ORIGINAL
    sigma_floor: float = DEFAULT_SIGMA_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "kind", ScoreKind(self.kind))
        object.__setattr__(self, "sign", SignConvention(self.sign))
        object.__setattr__(self, "k_percent", float(self.k_percent))
        object.__setattr__(self, "sigma_floor", float(self.sigma_floor))
        if not (0 < self.k_percent <= 100):
            raise ValidationError(f"k_percent must be in (0, 100], got {self.k_percent}", field="k_percent")
        if not self.sigma_floor > 0:
            raise ValidationError("sigma_floor must be positive", field="sigma_floor")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "k_percent": self.k_percent, "sign": self.sign.value,
                "sigma_floor": self.sigma_floor}

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreSpec":
        return cls(ScoreKind(d["kind"]), float(d.get("k_percent", DEFAULT_K)),
                   SignConvention(d.get("sign", SignConvention.ORIGINAL.value)),
                   float(d.get("sigma_floor", DEFAULT_SIGMA_FLOOR)))

    def label(self) -> str:
        if self.kind in (ScoreKind.MINKPP, ScoreKind.MINK):
            return f"{self.kind.value}@{self.k_percent:g}"
        return self.kind.value


# --- per-document scores -------------------------------------------------------

def z_scores(doc: DocumentStats, sigma_floor: float = DEFAULT_SIGMA_FLOOR) -> np.ndarray:
    if not sigma_floor > 0:
        raise ValueError("sigma_floor must be positive")
    return (doc.logp - doc.mu) / np.maximum(doc.sigma, sigma_floor)


def n_selected(n_tokens: int, k_percent: float) -> int:
    """Number of positions kept for a given K: ``max(1, ceil(K/100 * n))``."""
    if not (0 < k_percent <= 100):
        raise ValueError(f"k_percent must be in (0, 100], got {k_percent}")
    # round away float noise such as 0.34 * 3 = 1.0200000000000002 before ceil
    return max(1, math.ceil(round(k_percent * n_tokens / 100.0, 9)))


def lowest_k_indices(values: np.ndarray, k_percent: float) -> np.ndarray:
    """Positions of the smallest values; equal values go to the earlier position."""
    m = n_selected(len(values), k_percent)
    return np.argsort(values, kind="stable")[:m]


def min_k_pp(doc: DocumentStats, k_percent: float = DEFAULT_K, sigma_floor: float = DEFAULT_SIGMA_FLOOR) -> float:
    z = z_scores(doc, sigma_floor)
    return float(z[lowest_k_indices(z, k_percent)].mean())


def min_k(doc: DocumentStats, k_percent: float = DEFAULT_K) -> float:
    lp = doc.logp
    return float(lp[lowest_k_indices(lp, k_percent)].mean())


def loss_score(doc: DocumentStats) -> float:
    """Mean negative log-likelihood in nats per token."""
    return float(-doc.logp.mean())


def compressed_bits(raw: bytes, level: int = DEFLATE_LEVEL) -> int:
    """Size in bits of the raw DEFLATE stream (no zlib header or checksum)."""
    comp = zlib.compressobj(level, zlib.DEFLATED, -15)
    return 8 * len(comp.compress(raw) + comp.flush())


def compression_score(doc: DocumentStats, level: int = DEFLATE_LEVEL) -> float:
    if not doc.raw_bytes:
        raise ValidationError("compression score needs raw_bytes", doc_id=doc.doc_id, field="raw_bytes")
    return float(-doc.logp.sum()) / compressed_bits(doc.raw_bytes, level)


def score_document(doc: DocumentStats, spec: ScoreSpec) -> float:
    if spec.kind is ScoreKind.MINKPP:
        s = min_k_pp(doc, spec.k_percent, spec.sigma_floor)
    elif spec.kind is ScoreKind.MINK:
        s = min_k(doc, spec.k_percent)
    elif spec.kind is ScoreKind.LOSS:
        s = loss_score(doc)
    else:
        s = compression_score(doc)
    if spec.sign is SignConvention.SURPRISAL_POSITIVE:
        s = -s
    return s


# --- score vectors ---------------------------------------------------------------

class ScoreVector:
    """One score per document under one model, in dataset order."""

    def __init__(self, model_id: str, dataset_id: str, spec: ScoreSpec, doc_ids, scores, deflate_level: int = DEFLATE_LEVEL):
        ids = tuple(str(i) for i in doc_ids)
        vals = np.array(scores, dtype=np.float64).reshape(-1)
        if len(ids) != len(vals):
            raise ValidationError(f"{len(ids)} doc ids but {len(vals)} scores", field="entries")
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate doc_id in score vector", field="doc_id")
        if not np.isfinite(vals).all():
            bad = ids[int(np.argmin(np.isfinite(vals)))]
            raise ValidationError("non-finite score", doc_id=bad, field="score")
        vals.setflags(write=False)
        self.model_id = model_id
        self.dataset_id = dataset_id
        self.spec = spec
        self.doc_ids = ids
        self.scores = vals
        self.deflate_level = deflate_level

    def __len__(self):
        return len(self.doc_ids)

    @property
    def entries(self):
        return list(zip(self.doc_ids, self.scores.tolist()))

    def __eq__(self, other):
        if not isinstance(other, ScoreVector):
            return NotImplemented
        return (self.model_id, self.dataset_id, self.spec, self.doc_ids) == (
            other.model_id, other.dataset_id, other.spec, other.doc_ids
        ) and np.array_equal(self.scores, other.scores)

    def __repr__(self):
        return f"ScoreVector({self.model_id!r}, {self.dataset_id!r}, {self.spec.label()}, n={len(self)})"

    def take(self, doc_ids) -> "ScoreVector":
        pos = {d: i for i, d in enumerate(self.doc_ids)}
        idx = [pos[d] for d in doc_ids]
        return ScoreVector(self.model_id, self.dataset_id, self.spec, doc_ids, self.scores[idx], self.deflate_level)

    def negated(self) -> "ScoreVector":
        flip = (SignConvention.SURPRISAL_POSITIVE if self.spec.sign is SignConvention.ORIGINAL
                else SignConvention.ORIGINAL)
        spec = ScoreSpec(self.spec.kind, self.spec.k_percent, flip, self.spec.sigma_floor)
        return ScoreVector(self.model_id, self.dataset_id, spec, self.doc_ids, -self.scores, self.deflate_level)

    def with_convention(self, sign: SignConvention) -> "ScoreVector":
        return self if self.spec.sign is SignConvention(sign) else self.negated()

    def header(self) -> dict:
        return {"format": "scores/1", "model_id": self.model_id, "dataset_id": self.dataset_id,
                "spec": self.spec.to_dict(), "deflate_level": self.deflate_level, "n": len(self)}

    def dumps(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps([d, float("%.17g" % s)]) for d, s in zip(self.doc_ids, self.scores.tolist())]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "ScoreVector":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ValidationError("empty score file", line=1)
        try:
            head = json.loads(lines[0])
            ids, vals = [], []
            for lineno, line in enumerate(lines[1:], start=2):
                if line.strip():
                    d, s = json.loads(line)
                    ids.append(d)
                    vals.append(s)
        except (ValueError, TypeError) as exc:
            raise ValidationError(f"malformed score file: {exc}", line=locals().get("lineno", 1)) from None
        return cls(head["model_id"], head["dataset_id"], ScoreSpec.from_dict(head["spec"]), ids, vals,
                   int(head.get("deflate_level", DEFLATE_LEVEL)))


def score_dataset(stats: DatasetStats, spec: ScoreSpec) -> ScoreVector:
    vals = []
    for doc in stats.docs:
        try:
            vals.append(score_document(doc, spec))
        except ValidationError as exc:
            exc.doc_id = exc.doc_id or doc.doc_id
            raise
    return ScoreVector(stats.model_id, stats.dataset_id, spec, stats.doc_ids, vals)


def require_convention(vectors, sign: SignConvention) -> None:
    for v in vectors:
        if v.spec.sign is not SignConvention(sign):
            raise ConventionMismatch(f"{v!r} uses {v.spec.sign.value}, expected {SignConvention(sign).value}")
