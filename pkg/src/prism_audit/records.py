"""Per-token model statistics and the ``.pstats`` line format.

A ``.pstats`` file is UTF-8, one JSON object per line.  The first line is a
header naming the scoring model and the dataset; every following line is one
document::

    {"format": "pstats/1", "model_id": "ref", "dataset_id": "suspect"}
    {"doc_id": "d0001", "n_tokens": 2, "tokens": [[-1.2, -2.0, 0.7], ...],
     "raw_text_b64": "YWJj"}

Each token triple is ``[logp_true, mu, sigma]`` in natural-log units.  Floats
are written with 17 significant digits, so reading back a written file gives
the same float64 bits.
"""
from __future__ import annotations

import base64
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

from .errors import AlignmentError, ValidationError

FORMAT_TAG = "pstats/1"


@dataclass(frozen=True)
class TokenStat:
    """Grey-box observable at one position: realized log-prob and the
    mean/std of the model's log-prob distribution."""

    logp_true: float
    mu: float
    sigma: float

    def __post_init__(self):
        _check_triple(self.logp_true, self.mu, self.sigma)


def _check_triple(logp, mu, sigma, doc_id=None, line=None):
    for name, v in (("logp_true", logp), ("mu", mu), ("sigma", sigma)):
        if not math.isfinite(v):
            raise ValidationError(f"{name} is not finite ({v!r})", doc_id=doc_id, field=name, line=line)
    if logp > 0:
        raise ValidationError(f"logp_true must be <= 0, got {logp!r}", doc_id=doc_id, field="logp_true", line=line)
    if mu > 0:
        raise ValidationError(f"mu must be <= 0, got {mu!r}", doc_id=doc_id, field="mu", line=line)
    if sigma < 0:
        raise ValidationError(f"sigma must be >= 0, got {sigma!r}", doc_id=doc_id, field="sigma", line=line)


class DocumentStats:
    """A scored document: ordered token statistics plus optional raw bytes.

    ``tokens`` may be a sequence of :class:`TokenStat` or an ``(n, 3)`` array of
    ``(logp_true, mu, sigma)`` rows.  The array is copied and frozen.
    """

    __slots__ = ("doc_id", "raw_bytes", "_values")

    def __init__(self, doc_id: str, tokens, raw_bytes: bytes | None = None, n_tokens: int | None = None):
        if not isinstance(doc_id, str) or not doc_id:
            raise ValidationError("doc_id must be a non-empty string", doc_id=doc_id or "-", field="doc_id")
        if isinstance(tokens, np.ndarray):
            arr = np.array(tokens, dtype=np.float64)
        else:
            arr = np.array([(t.logp_true, t.mu, t.sigma) for t in tokens], dtype=np.float64)
        if arr.size == 0:
            raise ValidationError("document has no tokens", doc_id=doc_id, field="tokens")
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValidationError(f"tokens must be (n, 3), got shape {arr.shape}", doc_id=doc_id, field="tokens")
        if n_tokens is not None and n_tokens != arr.shape[0]:
            raise ValidationError(
                f"n_tokens={n_tokens} but {arr.shape[0]} tokens stored", doc_id=doc_id, field="n_tokens"
            )
        if not np.isfinite(arr).all():
            bad = int(np.argwhere(~np.isfinite(arr))[0][1])
            name = ("logp_true", "mu", "sigma")[bad]
            raise ValidationError(f"{name} is not finite", doc_id=doc_id, field=name)
        for col, name, ok in ((0, "logp_true", arr[:, 0] <= 0), (1, "mu", arr[:, 1] <= 0), (2, "sigma", arr[:, 2] >= 0)):
            if not ok.all():
                i = int(np.argmin(ok))
                raise ValidationError(f"{name} out of range at position {i}: {arr[i, col]!r}", doc_id=doc_id, field=name)
        if raw_bytes is not None and not isinstance(raw_bytes, (bytes, bytearray)):
            raise ValidationError("raw_bytes must be bytes", doc_id=doc_id, field="raw_bytes")
        arr.setflags(write=False)
        self.doc_id = doc_id
        self.raw_bytes = bytes(raw_bytes) if raw_bytes is not None else None
        self._values = arr

    @property
    def n_tokens(self) -> int:
        return self._values.shape[0]

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def logp(self) -> np.ndarray:
        return self._values[:, 0]

    @property
    def mu(self) -> np.ndarray:
        return self._values[:, 1]

    @property
    def sigma(self) -> np.ndarray:
        return self._values[:, 2]

    @property
    def tokens(self) -> tuple[TokenStat, ...]:
        return tuple(TokenStat(float(a), float(b), float(c)) for a, b, c in self._values)

    def __len__(self):
        return self.n_tokens

    def __eq__(self, other):
        if not isinstance(other, DocumentStats):
            return NotImplemented
        return (
            self.doc_id == other.doc_id
            and self.raw_bytes == other.raw_bytes
            and self._values.shape == other._values.shape
            and bool(np.array_equal(self._values.view(np.uint64), other._values.view(np.uint64)))
        )

    def __hash__(self):
        return hash((self.doc_id, self.n_tokens))

    def __repr__(self):
        return f"DocumentStats(doc_id={self.doc_id!r}, n_tokens={self.n_tokens})"


@dataclass(frozen=True)
class DatasetStats:
    model_id: str
    dataset_id: str
    docs: tuple[DocumentStats, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "docs", tuple(self.docs))
        if not self.docs:
            raise ValidationError("dataset has no documents", field="docs")
        seen = set()
        for d in self.docs:
            if not isinstance(d, DocumentStats):
                raise ValidationError(f"expected DocumentStats, got {type(d).__name__}", field="docs")
            if d.doc_id in seen:
                raise ValidationError("duplicate doc_id", doc_id=d.doc_id, field="doc_id")
            seen.add(d.doc_id)

    @property
    def doc_ids(self) -> tuple[str, ...]:
        return tuple(d.doc_id for d in self.docs)

    def __len__(self):
        return len(self.docs)

    def subset(self, doc_ids: Iterable[str]) -> "DatasetStats":
        by_id = {d.doc_id: d for d in self.docs}
        return DatasetStats(self.model_id, self.dataset_id, tuple(by_id[i] for i in doc_ids))


# --- wire format -------------------------------------------------------------

def _fmt(x: float) -> str:
    if x == 0.0 and math.copysign(1.0, x) < 0:
        return "-0.0"  # "-0" would parse back as integer zero
    return "%.17g" % x


def _doc_line(doc: DocumentStats) -> str:
    triples = ",".join(f"[{_fmt(a)},{_fmt(b)},{_fmt(c)}]" for a, b, c in doc.values.tolist())
    parts = [f'"doc_id":{json.dumps(doc.doc_id)}', f'"n_tokens":{doc.n_tokens}', f'"tokens":[{triples}]']
    if doc.raw_bytes is not None:
        parts.append(f'"raw_text_b64":"{base64.b64encode(doc.raw_bytes).decode("ascii")}"')
    return "{" + ",".join(parts) + "}"


def dumps_dataset_stats(stats: DatasetStats) -> str:
    header = json.dumps(
        {"format": FORMAT_TAG, "model_id": stats.model_id, "dataset_id": stats.dataset_id}, sort_keys=True
    )
    return "\n".join([header, *(_doc_line(d) for d in stats.docs)]) + "\n"


def write_dataset_stats(stats: DatasetStats, path) -> None:
    if not isinstance(stats, DatasetStats):
        raise TypeError("write_dataset_stats expects DatasetStats")
    for d in stats.docs:
        if d.n_tokens == 0:  # unreachable through the constructor; kept for hand-built objects
            raise ValidationError("document has no tokens", doc_id=d.doc_id, field="tokens")
    Path(path).write_text(dumps_dataset_stats(stats), encoding="utf-8")


def _parse_doc(rec, lineno: int) -> DocumentStats:
    if not isinstance(rec, dict):
        raise ValidationError("record is not an object", line=lineno)
    doc_id = rec.get("doc_id")
    if not isinstance(doc_id, str) or not doc_id:
        raise ValidationError("missing or empty doc_id", line=lineno, field="doc_id")
    toks = rec.get("tokens")
    if not isinstance(toks, list):
        raise ValidationError("tokens must be a list", line=lineno, doc_id=doc_id, field="tokens")
    n_tokens = rec.get("n_tokens")
    if not isinstance(n_tokens, int) or isinstance(n_tokens, bool):
        raise ValidationError("n_tokens must be an integer", line=lineno, doc_id=doc_id, field="n_tokens")
    for t in toks:
        if not (isinstance(t, list) and len(t) == 3 and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in t)):
            raise ValidationError("each token must be [logp_true, mu, sigma]", line=lineno, doc_id=doc_id, field="tokens")
    raw = None
    if rec.get("raw_text_b64") is not None:
        try:
            raw = base64.b64decode(rec["raw_text_b64"], validate=True)
        except (ValueError, TypeError) as exc:
            raise ValidationError(f"bad base64: {exc}", line=lineno, doc_id=doc_id, field="raw_text_b64") from None
    arr = np.array(toks, dtype=np.float64).reshape(-1, 3)
    try:
        return DocumentStats(doc_id, arr, raw_bytes=raw, n_tokens=n_tokens)
    except ValidationError as exc:
        exc.line = lineno
        raise


def loads_dataset_stats(text: str, *, default_ids=("unknown", "unknown"), report: TextIO | None = None) -> DatasetStats:
    """Parse ``.pstats`` content.

    Every bad line is reported to ``report`` (if given) before the first error
    is raised.  A file without a header line gets ``default_ids`` as
    ``(model_id, dataset_id)``.
    """
    model_id, dataset_id = default_ids
    docs: list[DocumentStats] = []
    errors: list[ValidationError] = []
    seen: dict[str, int] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        if not raw_line.strip():
            continue
        try:
            rec = json.loads(raw_line)
        except json.JSONDecodeError as exc:
            errors.append(ValidationError(f"malformed JSON: {exc.msg}", line=lineno))
            continue
        if isinstance(rec, dict) and "format" in rec:
            if lineno != 1 or rec["format"] != FORMAT_TAG:
                errors.append(ValidationError(f"unexpected header {rec.get('format')!r}", line=lineno, field="format"))
                continue
            model_id = str(rec.get("model_id", model_id))
            dataset_id = str(rec.get("dataset_id", dataset_id))
            continue
        try:
            doc = _parse_doc(rec, lineno)
        except ValidationError as exc:
            errors.append(exc)
            continue
        if doc.doc_id in seen:
            errors.append(ValidationError(f"duplicate doc_id (first on line {seen[doc.doc_id]})",
                                          line=lineno, doc_id=doc.doc_id, field="doc_id"))
            continue
        seen[doc.doc_id] = lineno
        docs.append(doc)
    if not docs and not errors:
        errors.append(ValidationError("file contains no documents", field="docs"))
    if errors:
        if report is not None:
            for e in errors:
                print(e.report_line(), file=report)
        raise errors[0]
    return DatasetStats(model_id, dataset_id, tuple(docs))


def read_dataset_stats(path, *, report: TextIO | None = None) -> DatasetStats:
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    return loads_dataset_stats(text, default_ids=("unknown", p.stem), report=report)


# --- alignment ---------------------------------------------------------------

@dataclass(frozen=True)
class Alignment:
    """Common ids in lexicographic order and, per source, the positions of
    those ids plus the ids that source lacks."""

    doc_ids: tuple[str, ...]
    indices: tuple[np.ndarray, ...]
    missing: tuple[frozenset, ...]

    def __len__(self):
        return len(self.doc_ids)


def _ids_of(source) -> Sequence[str]:
    if hasattr(source, "doc_ids"):
        return tuple(source.doc_ids)
    return tuple(source)


def align_by_doc_id(*sources, min_common: int = 1) -> Alignment:
    """Intersect the document ids of two or more sources.

    Sources may be :class:`DatasetStats`, score vectors, or plain id lists.
    """
    if len(sources) < 2:
        raise TypeError("align_by_doc_id needs at least two sources")
    id_lists = [_ids_of(s) for s in sources]
    id_sets = [set(ids) for ids in id_lists]
    union = set().union(*id_sets)
    common = sorted(set.intersection(*id_sets))
    if len(common) < max(1, min_common):
        raise AlignmentError(f"only {len(common)} common doc ids (need {max(1, min_common)})")
    indices = []
    for ids in id_lists:
        pos = {d: i for i, d in enumerate(ids)}
        indices.append(np.fromiter((pos[d] for d in common), dtype=np.intp, count=len(common)))
    missing = tuple(frozenset(union - s) for s in id_sets)
    return Alignment(tuple(common), tuple(indices), missing)


def print_missing(alignment: Alignment, names: Sequence[str], stream: TextIO = sys.stderr) -> None:
    for name, miss in zip(names, alignment.missing):
        if miss:
            print(f"WARN alignment: {len(miss)} doc ids absent from {name}", file=stream)
