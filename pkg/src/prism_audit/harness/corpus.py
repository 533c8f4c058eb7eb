"""Synthetic documents drawn from a hidden first-order Markov source.

Every document gets its own sampling temperature, which spreads documents
from predictable to surprising under any model that learned the source.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ValidationError


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    n_docs: int = 3000
    min_len: int = 48
    max_len: int = 112
    vocab_size: int = 64
    concentration: float = 0.08
    temp_range: tuple[float, float] = (0.7, 1.6)
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    context: int = 4
    phrase_len: int = 6
    max_phrase_repeats: int = 6
    min_phrase_repeats: int = 0

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        object.__setattr__(self, "temp_range", tuple(float(t) for t in self.temp_range))
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions) or abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValidationError(f"split fractions must be 3 non-negative values summing to 1, got {self.fractions}",
                                  field="fractions")
        if self.min_len < self.context + 1 or self.max_len < self.min_len:
            raise ValidationError(f"document lengths must satisfy {self.context + 1} <= min_len <= max_len",
                                  field="min_len")
        if self.n_docs < 3:
            raise ValidationError("n_docs must be at least 3", field="n_docs")
        if self.vocab_size < 3:
            raise ValidationError("vocab_size must be at least 3", field="vocab_size")
        if not 0 < self.temp_range[0] <= self.temp_range[1]:
            raise ValidationError("temp_range must be positive and ordered", field="temp_range")
        if self.phrase_len < 0 or self.max_phrase_repeats < 0:
            raise ValidationError("phrase_len and max_phrase_repeats must be >= 0", field="phrase_len")
        if not 0 <= self.min_phrase_repeats <= self.max_phrase_repeats:
            raise ValidationError("min_phrase_repeats must be in [0, max_phrase_repeats]", field="min_phrase_repeats")
        if self.phrase_len * self.max_phrase_repeats >= self.min_len:
            raise ValidationError("phrase copies must fit inside the shortest document", field="phrase_len")
        if self.concentration <= 0:
            raise ValidationError("concentration must be positive", field="concentration")


@dataclass
class Split:
    name: str
    doc_ids: list[str]
    docs: list[np.ndarray]

    def __len__(self):
        return len(self.docs)

    def n_tokens(self) -> int:
        return int(sum(len(d) for d in self.docs))

    def subset(self, idx) -> "Split":
        return Split(self.name, [self.doc_ids[i] for i in idx], [self.docs[i] for i in idx])


@dataclass
class Corpus:
    base: Split
    suspect: Split
    heldout: Split
    transition: np.ndarray = field(repr=False)
    initial: np.ndarray = field(repr=False)


def source_matrix(spec: CorpusSpec) -> tuple[np.ndarray, np.ndarray]:
    """Transition matrix over the non-BOS symbols (row-stochastic) and an
    initial distribution."""
    rng = np.random.default_rng([spec.seed, 0])
    k = spec.vocab_size - 1
    trans = rng.dirichlet(np.full(k, spec.concentration), size=k)
    # keep every transition reachable so temperature changes stay finite
    trans = 0.995 * trans + 0.005 / k
    initial = rng.dirichlet(np.ones(k))
    return trans, initial


def _sample_doc(rng, trans, initial, length, temp):
    logt = np.log(trans) / temp
    tt = np.exp(logt - logt.max(axis=1, keepdims=True))
    tt /= tt.sum(axis=1, keepdims=True)
    cum = np.cumsum(tt, axis=1)
    u = rng.random(length)
    out = np.empty(length, dtype=np.intp)
    s = int(np.searchsorted(np.cumsum(initial), u[0] * np.cumsum(initial)[-1], side="right"))
    out[0] = s
    for t in range(1, length):
        s = int(np.searchsorted(cum[s], u[t] * cum[s, -1], side="right"))
        out[t] = s
    return out + 1  # shift past BOS


def _with_phrase(rng, trans, initial, length, temp, phrase, repeats):
    """Markov text with ``repeats`` copies of ``phrase`` spliced in at random
    cut points."""
    body = _sample_doc(rng, trans, initial, length - repeats * len(phrase), temp)
    if repeats == 0:
        return body
    cuts = np.sort(rng.integers(0, len(body) + 1, size=repeats))
    parts, prev = [], 0
    for cut in cuts:
        parts += [body[prev:cut], phrase]
        prev = cut
    parts.append(body[prev:])
    return np.concatenate(parts)


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministic base / suspect / held-out splits from one source.

    Each document also owns a random phrase of ``phrase_len`` symbols that
    it repeats between ``min_phrase_repeats`` and ``max_phrase_repeats`` times; this is the
    document-specific content that training can memorize.
    """
    trans, initial = source_matrix(spec)
    rng = np.random.default_rng([spec.seed, 1])
    lengths = rng.integers(spec.min_len, spec.max_len + 1, size=spec.n_docs)
    temps = rng.uniform(spec.temp_range[0], spec.temp_range[1], size=spec.n_docs)
    repeats = rng.integers(spec.min_phrase_repeats, spec.max_phrase_repeats + 1, size=spec.n_docs)
    phrases = rng.integers(1, spec.vocab_size, size=(spec.n_docs, spec.phrase_len))
    docs = [
        _with_phrase(rng, trans, initial, int(n), float(T), phrases[i], int(r) if spec.phrase_len else 0)
        for i, (n, T, r) in enumerate(zip(lengths, temps, repeats))
    ]
    n_suspect = int(round(spec.fractions[1] * spec.n_docs))
    n_heldout = int(round(spec.fractions[2] * spec.n_docs))
    n_base = spec.n_docs - n_suspect - n_heldout
    order = rng.permutation(spec.n_docs)
    width = len(str(spec.n_docs))

    def take(name, prefix, idx):
        idx = sorted(int(i) for i in idx)
        return Split(name, [f"{prefix}{i:0{width}d}" for i in idx], [docs[i] for i in idx])

    return Corpus(
        base=take("base", "b", order[:n_base]),
        suspect=take("suspect", "s", order[n_base:n_base + n_suspect]),
        heldout=take("heldout", "h", order[n_base + n_suspect:]),
        transition=trans,
        initial=initial,
    )


def write_split(split: Split, path) -> None:
    """Token-id line file: ``doc_id<TAB>id id id ...``."""
    lines = [f"{i}\t{' '.join(map(str, d.tolist()))}" for i, d in zip(split.doc_ids, split.docs)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_split(path, name: str | None = None) -> Split:
    ids, docs = [], []
    p = Path(path)
    for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc_id, body = line.split("\t", 1)
            docs.append(np.array([int(t) for t in body.split()], dtype=np.intp))
        except ValueError:
            raise ValidationError("malformed corpus line", line=lineno, field="tokens") from None
        if len(docs[-1]) == 0:
            raise ValidationError("empty document", line=lineno, doc_id=doc_id, field="tokens")
        ids.append(doc_id)
    return Split(name or p.stem, ids, docs)
