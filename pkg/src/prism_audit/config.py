"""Run configuration: one YAML file whose sections mirror the config types.

Example::

    seed: 0
    corpus: {n_docs: 3000, phrase_len: 10}
    distill: {lambda: 0.7, tau: 2.0, epochs: 64}
    test: {B: 10000, alpha: 0.05}

Unknown keys and invalid values are reported as ``<path>:<line>: <message>``.
Per-component seeds are not configurable; they are derived from ``seed``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, ValidationError
from .harness.corpus import CorpusSpec
from .harness.train import DistillConfig, TrainConfig
from .inference import TestConfig
from .scores import ScoreSpec

SWEEP_AXES = ("K", "Lambda", "Tau", "NDocs", "RefCapacity")


@dataclass(frozen=True)
class ModelConfig:
    context: int = 4
    d: int = 16
    h: int = 64

    def __post_init__(self):
        for k in ("context", "d", "h"):
            if getattr(self, k) < 1:
                raise ValidationError(f"{k} must be >= 1", field=k)


@dataclass(frozen=True)
class MemberConfig:
    """Continued training that turns a copy of the clean target into the
    member target: ``replay_docs`` base documents plus ``repeats`` copies of
    the suspect split, shuffled together."""
    replay_docs: int = 600
    repeats: int = 5
    train: TrainConfig = TrainConfig(lr=0.1, epochs=1)

    def __post_init__(self):
        if self.replay_docs < 0:
            raise ValidationError("replay_docs must be >= 0", field="replay_docs")
        if self.repeats < 1:
            raise ValidationError("repeats must be >= 1", field="repeats")


def _default_grids():
    return {
        "K": [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0],
        "Lambda": [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0],
        "Tau": [0.5, 1.0, 2.0, 4.0, 8.0],
        "NDocs": [300, 250, 200, 150, 100],
        "RefCapacity": [16, 32, 64, 128],
    }


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    corpus: CorpusSpec = CorpusSpec(phrase_len=10, min_phrase_repeats=2, max_phrase_repeats=4)
    model: ModelConfig = ModelConfig()
    base_train: TrainConfig = TrainConfig(lr=0.3, epochs=8, weight_decay=2e-3)
    member: MemberConfig = MemberConfig()
    distill: DistillConfig = DistillConfig(train=TrainConfig(lr=1.0, epochs=64, batch_size=64))
    score: ScoreSpec = ScoreSpec()
    test: TestConfig = TestConfig()
    sweep: dict = field(default_factory=_default_grids)

    def with_overrides(self, *, seed=None, k=None, metric=None, B=None, alpha=None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = dataclasses.replace(cfg, seed=int(seed))
        if k is not None:
            cfg = dataclasses.replace(cfg, score=dataclasses.replace(cfg.score, k_percent=float(k)))
        test = {}
        if metric is not None:
            test["metric"] = metric
        if B is not None:
            test["B"] = int(B)
        if alpha is not None:
            test["alpha"] = float(alpha)
        if test:
            cfg = dataclasses.replace(cfg, test=dataclasses.replace(cfg.test, **test))
        # derived seeds always follow the run seed
        return dataclasses.replace(
            cfg,
            corpus=dataclasses.replace(cfg.corpus, seed=cfg.seed, context=cfg.model.context),
            test=dataclasses.replace(cfg.test, seed=cfg.seed),
        )

    def to_dict(self) -> dict:
        return config_to_dict(self)

    def simulation_key(self) -> str:
        """Digest of everything ``simulate`` depends on."""
        d = self.to_dict()
        sub = {k: d[k] for k in ("seed", "corpus", "model", "base_train", "member")}
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()

    def run_id(self) -> str:
        return f"seed{self.seed}-{self.simulation_key()[:12]}"


def derive_seed(seed: int, role: str) -> int:
    """Stable 32-bit seed for one component of a run."""
    words = [ord(c) for c in role]
    return int(np.random.SeedSequence([int(seed), *words]).generate_state(1)[0])


# --- dict <-> config -------------------------------------------------------------

_TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig) if f.name != "seed")


def _train_dict(t: TrainConfig) -> dict:
    return {k: getattr(t, k) for k in _TRAIN_KEYS}


def config_to_dict(cfg: RunConfig) -> dict:
    c = cfg.corpus
    return {
        "seed": cfg.seed,
        "corpus": {
            "n_docs": c.n_docs, "min_len": c.min_len, "max_len": c.max_len, "vocab_size": c.vocab_size,
            "concentration": c.concentration, "temp_range": list(c.temp_range), "fractions": list(c.fractions),
            "phrase_len": c.phrase_len, "min_phrase_repeats": c.min_phrase_repeats,
            "max_phrase_repeats": c.max_phrase_repeats,
        },
        "model": dataclasses.asdict(cfg.model),
        "base_train": _train_dict(cfg.base_train),
        "member": {"replay_docs": cfg.member.replay_docs, "repeats": cfg.member.repeats,
                   **_train_dict(cfg.member.train)},
        "distill": {"lambda": cfg.distill.lam, "tau": cfg.distill.tau, **_train_dict(cfg.distill.train)},
        "score": cfg.score.to_dict(),
        "test": {k: getattr(cfg.test, k) for k in ("B", "alpha", "metric", "max_redraws", "ci_level")},
        "sweep": {k: list(v) for k, v in cfg.sweep.items()},
    }


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)


def _line_map(node, prefix=(), out=None) -> dict:
    """``{key path: 1-based line}`` for every mapping key in a YAML node tree."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (str(k.value),)
            out[path] = k.start_mark.line + 1
            _line_map(v, path, out)
    return out


class _Reader:
    def __init__(self, source: str, lines: dict):
        self.source = source
        self.lines = lines

    def fail(self, path, message):
        path = tuple(path)
        line = None
        for i in range(len(path), 0, -1):
            line = self.lines.get(path[:i])
            if line is not None:
                break
        loc = f"{self.source}:{line}" if line else self.source
        key = ".".join(path)
        raise ConfigError(f"{loc}: {key + ': ' if key else ''}{message}")

    def section(self, data, name, allowed):
        sec = data.get(name, {})
        if sec is None:
            sec = {}
        if not isinstance(sec, dict):
            self.fail((name,), "expected a mapping")
        for k in sec:
            if k not in allowed:
                self.fail((name, str(k)), f"unknown key (allowed: {', '.join(allowed)})")
        return sec

    def build(self, name, fn, field_map=None):
        try:
            return fn()
        except ValidationError as exc:
            f = (field_map or {}).get(exc.field, exc.field)
            self.fail((name, f) if f else (name,), exc.message)
        except (TypeError, ValueError) as exc:
            self.fail((name,), str(exc))


def _train_from(reader, name, sec, base: TrainConfig) -> TrainConfig:
    kw = {k: sec[k] for k in _TRAIN_KEYS if k in sec}
    for k in ("batch_size", "epochs", "max_steps"):
        if k in kw and kw[k] is not None and (isinstance(kw[k], bool) or not isinstance(kw[k], int)):
            reader.fail((name, k), "expected an integer")
    for k in ("lr", "momentum", "clip", "warmup_frac", "weight_decay"):
        if k in kw and (isinstance(kw[k], bool) or not isinstance(kw[k], (int, float))):
            reader.fail((name, k), "expected a number")
    return reader.build(name, lambda: dataclasses.replace(base, **kw))


def config_from_dict(data: dict, source: str = "<config>", lines: dict | None = None) -> RunConfig:
    r = _Reader(source, lines or {})
    if data is None:
        data = {}
    if not isinstance(data, dict):
        r.fail((), "top level must be a mapping")
    top = ("seed", "corpus", "model", "base_train", "member", "distill", "score", "test", "sweep")
    for k in data:
        if k not in top:
            r.fail((str(k),), f"unknown section (allowed: {', '.join(top)})")
    d = RunConfig()
    seed = data.get("seed", d.seed)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        r.fail(("seed",), "seed must be a non-negative integer")

    corpus_keys = tuple(config_to_dict(d)["corpus"])
    sec = r.section(data, "model", ("context", "d", "h"))
    model = r.build("model", lambda: dataclasses.replace(d.model, **sec))
    sec = r.section(data, "corpus", corpus_keys)
    kw = dict(sec)
    for k in ("temp_range", "fractions"):
        if k in kw:
            if not isinstance(kw[k], list):
                r.fail(("corpus", k), "expected a list")
            kw[k] = tuple(kw[k])
    corpus = r.build("corpus", lambda: dataclasses.replace(d.corpus, seed=seed, context=model.context, **kw))

    sec = r.section(data, "base_train", _TRAIN_KEYS)
    base_train = _train_from(r, "base_train", sec, d.base_train)

    sec = r.section(data, "member", ("replay_docs", "repeats", *_TRAIN_KEYS))
    mtrain = _train_from(r, "member", sec, d.member.train)
    member = r.build("member", lambda: MemberConfig(sec.get("replay_docs", d.member.replay_docs),
                                                    sec.get("repeats", d.member.repeats), mtrain))

    sec = r.section(data, "distill", ("lambda", "tau", *_TRAIN_KEYS))
    dtrain = _train_from(r, "distill", sec, d.distill.train)
    distill = r.build("distill", lambda: DistillConfig(float(sec.get("lambda", d.distill.lam)),
                                                       float(sec.get("tau", d.distill.tau)), dtrain))

    sec = r.section(data, "score", ("kind", "k_percent", "sign", "sigma_floor"))
    score = r.build("score", lambda: ScoreSpec.from_dict({**d.score.to_dict(), **sec}), {"kind": "kind"})

    sec = r.section(data, "test", ("B", "alpha", "metric", "max_redraws", "ci_level"))
    test = r.build("test", lambda: dataclasses.replace(d.test, seed=seed, **sec))

    sec = r.section(data, "sweep", SWEEP_AXES)
    grids = _default_grids()
    for k, v in sec.items():
        if not isinstance(v, list) or not v:
            r.fail(("sweep", k), "grid must be a non-empty list")
        grids[k] = list(v)
    return RunConfig(seed, corpus, model, base_train, member, distill, score, test, grids)


def loads_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}{line}: YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    return config_from_dict(data, source, _line_map(node) if node is not None else {})


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{p}: config file not found")
    return loads_config(p.read_text(encoding="utf-8"), str(p))
