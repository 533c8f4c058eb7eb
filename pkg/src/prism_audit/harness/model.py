"""Fixed-context MLP language model with exact softmax and hand-written
gradients.

Architecture: token embeddings for the last ``C`` tokens are concatenated,
passed through one tanh layer and projected onto the vocabulary.  Index 0 of
the vocabulary is the BOS symbol, used only as left padding.
"""
from __future__ import annotations

import json
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import MissingArtifact, ValidationError
from ..records import DocumentStats

BOS = "<s>"
_ALPHABET = string.ascii_letters + string.digits + ".,;:!?-_+*=/()[]{}<>@#$%&^~|"

PARAM_NAMES = ("E", "W1", "b1", "W2", "b2")


@dataclass(frozen=True)
class Vocab:
    symbols: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(self.symbols))
        if len(self.symbols) < 2:
            raise ValidationError("vocabulary needs at least 2 symbols", field="symbols")
        if len(set(self.symbols)) != len(self.symbols):
            raise ValidationError("vocabulary symbols must be distinct", field="symbols")
        if self.symbols[0] != BOS:
            raise ValidationError(f"symbol 0 must be {BOS!r}", field="symbols")

    @classmethod
    def default(cls, size: int = 64) -> "Vocab":
        if not 2 <= size <= len(_ALPHABET) + 1:
            raise ValueError(f"default vocab size must be in [2, {len(_ALPHABET) + 1}]")
        return cls((BOS, *_ALPHABET[: size - 1]))

    @property
    def size(self) -> int:
        return len(self.symbols)

    def render(self, token_ids) -> bytes:
        """Text rendering of a token sequence, used for compression scores."""
        return "".join(self.symbols[i] for i in token_ids).encode("utf-8")

    def encode(self, text: str) -> list[int]:
        index = {s: i for i, s in enumerate(self.symbols)}
        try:
            return [index[ch] for ch in text]
        except KeyError as exc:
            raise ValidationError(f"symbol {exc.args[0]!r} not in vocabulary", field="tokens") from None


class TinyLM:
    """Parameters live in ``self.params`` (a dict of float64 arrays)."""

    def __init__(self, vocab: Vocab, context: int = 4, d: int = 16, h: int = 64, params: dict | None = None):
        self.vocab = vocab
        self.context = int(context)
        self.d = int(d)
        self.h = int(h)
        if params is None:
            params = {
                "E": np.zeros((vocab.size, self.d)),
                "W1": np.zeros((self.context * self.d, self.h)),
                "b1": np.zeros(self.h),
                "W2": np.zeros((self.h, vocab.size)),
                "b2": np.zeros(vocab.size),
            }
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in PARAM_NAMES}
        self._check_shapes()

    @classmethod
    def init(cls, vocab: Vocab, seed: int, context: int = 4, d: int = 16, h: int = 64, scale: float = 1.0) -> "TinyLM":
        rng = np.random.default_rng(seed)
        V = vocab.size
        params = {
            "E": rng.normal(0.0, 1.0, (V, d)) * scale,
            "W1": rng.normal(0.0, 1.0 / np.sqrt(context * d), (context * d, h)) * scale,
            "b1": np.zeros(h),
            "W2": rng.normal(0.0, 1.0 / np.sqrt(h), (h, V)) * scale,
            "b2": np.zeros(V),
        }
        return cls(vocab, context, d, h, params)

    def _check_shapes(self):
        V, C, d, h = self.vocab.size, self.context, self.d, self.h
        want = {"E": (V, d), "W1": (C * d, h), "b1": (h,), "W2": (h, V), "b2": (V,)}
        for k, shape in want.items():
            if self.params[k].shape != shape:
                raise ValidationError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}", field=k)
            if not np.isfinite(self.params[k]).all():
                raise ValidationError(f"parameter {k} is not finite", field=k)

    def copy(self) -> "TinyLM":
        return TinyLM(self.vocab, self.context, self.d, self.h, {k: v.copy() for k, v in self.params.items()})

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_NAMES])

    def set_flat(self, theta: np.ndarray) -> None:
        i = 0
        for k in PARAM_NAMES:
            n = self.params[k].size
            self.params[k] = np.array(theta[i:i + n]).reshape(self.params[k].shape)
            i += n

    def same_params(self, other: "TinyLM") -> bool:
        return all(np.array_equal(self.params[k], other.params[k]) for k in PARAM_NAMES)

    # -- forward / backward ---------------------------------------------------

    def forward(self, contexts: np.ndarray):
        """Return ``(logits, cache)`` for an ``(N, C)`` int array of contexts."""
        p = self.params
        emb = p["E"][contexts].reshape(len(contexts), self.context * self.d)
        hidden = np.tanh(emb @ p["W1"] + p["b1"])
        logits = hidden @ p["W2"] + p["b2"]
        return logits, (contexts, emb, hidden)

    def logits(self, contexts: np.ndarray) -> np.ndarray:
        return self.forward(contexts)[0]

    def backward(self, dlogits: np.ndarray, cache) -> dict:
        contexts, emb, hidden = cache
        p = self.params
        grads = {"W2": hidden.T @ dlogits, "b2": dlogits.sum(axis=0)}
        da = (dlogits @ p["W2"].T) * (1.0 - hidden * hidden)
        grads["W1"] = emb.T @ da
        grads["b1"] = da.sum(axis=0)
        demb = (da @ p["W1"].T).reshape(len(contexts), self.context, self.d)
        gE = np.zeros_like(p["E"])
        np.add.at(gE, contexts.ravel(), demb.reshape(-1, self.d))
        grads["E"] = gE
        return grads


# --- context construction ----------------------------------------------------

def doc_contexts(doc, context: int) -> tuple[np.ndarray, np.ndarray]:
    """Contexts and targets for every position of one token-id sequence.

    Position 1 conditions on a window of BOS padding.
    """
    ids = np.asarray(doc, dtype=np.intp)
    padded = np.concatenate([np.zeros(context, dtype=np.intp), ids])
    win = np.lib.stride_tricks.sliding_window_view(padded, context)[: len(ids)]
    return np.ascontiguousarray(win), ids.copy()


def batch_contexts(docs, context: int) -> tuple[np.ndarray, np.ndarray]:
    if len(docs) == 0:
        return np.zeros((0, context), dtype=np.intp), np.zeros(0, dtype=np.intp)
    parts = [doc_contexts(d, context) for d in docs]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


# --- distribution statistics -------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def distribution_moments(logp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and std of log-probabilities under their own distribution."""
    p = np.exp(logp)
    mu = (p * logp).sum(axis=-1)
    var = (p * (logp - mu[..., None]) ** 2).sum(axis=-1)
    return mu, np.sqrt(np.maximum(var, 0.0))


def next_token_stats(model: TinyLM, context) -> tuple[np.ndarray, float, float]:
    ctx = np.asarray(context, dtype=np.intp)
    if ctx.shape != (model.context,):
        raise ValueError(f"context must have length {model.context}")
    logp = log_softmax(model.logits(ctx[None, :]))[0]
    mu, sigma = distribution_moments(logp)
    return logp, float(mu), float(sigma)


def score_document(model: TinyLM, doc, doc_id: str = "doc") -> DocumentStats:
    """Per-position ``(logp_true, mu, sigma)`` for a token-id sequence."""
    ids = np.asarray(doc, dtype=np.intp)
    if ids.ndim != 1 or len(ids) < 1:
        raise ValidationError("document must have at least one token", doc_id=doc_id, field="tokens")
    if ids.min() < 1 or ids.max() >= model.vocab.size:
        raise ValidationError("symbol outside vocabulary", doc_id=doc_id, field="tokens")
    ctx, tgt = doc_contexts(ids, model.context)
    logp = log_softmax(model.logits(ctx))
    mu, sigma = distribution_moments(logp)
    true = logp[np.arange(len(tgt)), tgt]
    return DocumentStats(doc_id, np.column_stack([true, mu, sigma]), raw_bytes=model.vocab.render(ids))


def score_corpus(model: TinyLM, docs, doc_ids, model_id: str, dataset_id: str):
    """Score many documents with one forward pass."""
    from ..records import DatasetStats

    ctx, tgt = batch_contexts(docs, model.context)
    if (tgt < 1).any() or (tgt >= model.vocab.size).any():
        raise ValidationError("symbol outside vocabulary", field="tokens")
    logp = log_softmax(model.logits(ctx))
    mu, sigma = distribution_moments(logp)
    true = logp[np.arange(len(tgt)), tgt]
    table = np.column_stack([true, mu, sigma])
    out, start = [], 0
    for doc_id, doc in zip(doc_ids, docs):
        n = len(doc)
        out.append(DocumentStats(doc_id, table[start:start + n], raw_bytes=model.vocab.render(doc)))
        start += n
    return DatasetStats(model_id, dataset_id, tuple(out))


# --- losses ------------------------------------------------------------------

def ce_from_arrays(model: TinyLM, contexts, targets, need_grad: bool = True):
    logits, cache = model.forward(contexts)
    logp = log_softmax(logits)
    n = len(targets)
    loss = -logp[np.arange(n), targets].mean()
    if not need_grad:
        return float(loss), None
    dlogits = np.exp(logp)
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    return float(loss), model.backward(dlogits, cache)


def ce_loss_and_grad(model: TinyLM, batch):
    """Mean token-level cross-entropy over a batch of token-id documents and
    its gradient with respect to every parameter."""
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    ctx, tgt = batch_contexts(batch, model.context)
    return ce_from_arrays(model, ctx, tgt)


def distill_from_arrays(student: TinyLM, contexts, targets, teacher_logits, lam: float, tau: float, need_grad=True):
    logits, cache = student.forward(contexts)
    n = len(targets)
    rows = np.arange(n)
    logp = log_softmax(logits)
    ce = -logp[rows, targets].mean()
    logq_s = log_softmax(logits / tau)
    logq_t = log_softmax(teacher_logits / tau)
    q_t = np.exp(logq_t)
    kl = (q_t * (logq_t - logq_s)).sum(axis=1).mean()
    loss = (1.0 - lam) * ce + lam * tau * tau * kl
    if not need_grad:
        return float(loss), None
    d_ce = np.exp(logp)
    d_ce[rows, targets] -= 1.0
    # d/dz of tau^2 * KL(q_t || softmax(z / tau)) is tau * (q_s - q_t)
    d_kl = tau * (np.exp(logq_s) - q_t)
    dlogits = ((1.0 - lam) * d_ce + lam * d_kl) / n
    return float(loss), student.backward(dlogits, cache)


def distill_loss_and_grad(student: TinyLM, teacher: TinyLM, batch, lam: float, tau: float):
    """``(1-lam) * CE + lam * tau^2 * KL(teacher_tau || student_tau)`` averaged
    over tokens.  The teacher is only queried for logits."""
    if student.vocab != teacher.vocab:
        raise ValidationError("student and teacher vocabularies differ", field="vocab")
    if len(batch) == 0:
        raise ValueError("batch must be non-empty")
    ctx, tgt = batch_contexts(batch, student.context)
    t_ctx = ctx if teacher.context == student.context else batch_contexts(batch, teacher.context)[0]
    return distill_from_arrays(student, ctx, tgt, teacher.logits(t_ctx), lam, tau)


# --- checkpoints -------------------------------------------------------------------

CHECKPOINT_FORMAT = "tinylm/1"


def dumps_checkpoint(model: TinyLM) -> str:
    """Text checkpoint: a JSON header, then one ``name shape`` line per
    parameter followed by its rows as 17-significant-digit floats."""
    head = {"format": CHECKPOINT_FORMAT, "vocab": list(model.vocab.symbols),
            "context": model.context, "d": model.d, "h": model.h}
    lines = [json.dumps(head, sort_keys=True)]
    for k in PARAM_NAMES:
        arr = model.params[k]
        lines.append(f"{k} {' '.join(map(str, arr.shape))}")
        rows = arr.reshape(1, -1) if arr.ndim == 1 else arr
        lines += [" ".join("%.17g" % x for x in row) for row in rows.tolist()]
    return "\n".join(lines) + "\n"


def loads_checkpoint(text: str) -> TinyLM:
    lines = text.splitlines()
    try:
        head = json.loads(lines[0])
    except (IndexError, ValueError):
        raise ValidationError("checkpoint header is not JSON", line=1) from None
    if head.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"unsupported checkpoint format {head.get('format')!r}", line=1, field="format")
    params, i = {}, 1
    for k in PARAM_NAMES:
        try:
            name, *shape = lines[i].split()
            shape = tuple(int(s) for s in shape)
            n_rows = 1 if len(shape) == 1 else shape[0]
            rows = [[float(x) for x in lines[i + 1 + r].split()] for r in range(n_rows)]
            arr = np.array(rows, dtype=np.float64).reshape(shape)
        except (IndexError, ValueError):
            raise ValidationError(f"malformed parameter block {k}", line=i + 1, field=k) from None
        if name != k:
            raise ValidationError(f"expected parameter {k}, found {name}", line=i + 1, field=k)
        params[k] = arr
        i += 1 + n_rows
    return TinyLM(Vocab(tuple(head["vocab"])), head["context"], head["d"], head["h"], params)


def save_checkpoint(model: TinyLM, path) -> None:
    Path(path).write_text(dumps_checkpoint(model), encoding="utf-8")


def load_checkpoint(path) -> TinyLM:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"checkpoint not found: {p}")
    return loads_checkpoint(p.read_text(encoding="utf-8"))
