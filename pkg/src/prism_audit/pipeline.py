"""Run-directory pipeline: simulate, distill, score, test, sweeps and reports.

Layout of a run directory::

    manifest.json        configs, artifact digests, recorded hyperparameters
    timings.json         wall-clock seconds per stage (not digested)
    config.yaml          resolved configuration
    corpus/              suspect.txt, heldout.txt
    models/              reference, target_clean, target_member, distilled_* checkpoints
    stats/               <model>.<dataset>.pstats
    scores/              <model>.<dataset>.<score>.scores
    reports/             test_<target>.{txt,json}, *_deltas.csv, ttest_<target>.json
    sweeps/              <axis>_<target>.csv, hparams.csv
    analysis/            compare_scores.{csv,txt}, rank_analysis.csv

The base split is not stored; it is regenerated from the corpus config when a
stage needs it.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import SWEEP_AXES, RunConfig, config_to_dict, derive_seed, dump_config
from .errors import ConfigError, MissingArtifact, ValidationError
from .harness.corpus import Corpus, Split, generate_corpus, read_split, write_split
from .harness.model import TinyLM, Vocab, load_checkpoint, save_checkpoint, score_corpus
from .harness.train import DistillConfig, distill_reference, train
from .inference import TestReport, bootstrap_test, paired_t_test
from .ranks import CORRELATIONS, rank_delta, write_rank_delta_csv
from .records import DatasetStats, read_dataset_stats, write_dataset_stats
from .scores import ScoreKind, ScoreSpec, ScoreVector, SignConvention, score_dataset

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "prism-run/1"
TARGETS = ("clean", "member")
MODEL_ROLES = ("reference", "target_clean", "target_member", "distilled_clean", "distilled_member")
DATASETS = ("suspect", "heldout")
SCORE_KINDS = (ScoreKind.LOSS, ScoreKind.COMPRESSION, ScoreKind.MINK, ScoreKind.MINKPP)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


class Run:
    """A run directory plus its manifest."""

    def __init__(self, root, config: RunConfig):
        self.root = Path(root)
        self.config = config
        self.manifest = self._load_manifest()

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def _load_manifest(self) -> dict:
        if self.manifest_path.exists():
            try:
                m = json.loads(self.manifest_path.read_text(encoding="utf-8"))
            except ValueError:
                raise ValidationError("manifest.json is not valid JSON", field="manifest") from None
            if m.get("format") != MANIFEST_FORMAT:
                raise ValidationError(f"unsupported manifest format {m.get('format')!r}", field="format")
            return m
        return {"format": MANIFEST_FORMAT, "artifacts": {}, "records": {}}

    @classmethod
    def open(cls, root, config: RunConfig) -> "Run":
        """Open a run that ``simulate`` has produced, checking that ``config``
        describes the same simulation."""
        run = cls(root, config)
        if not run.manifest_path.exists():
            raise MissingArtifact(f"{run.manifest_path} not found; run `prism-audit simulate` first")
        key = run.manifest.get("simulation_key")
        if key != config.simulation_key():
            raise ConfigError(f"{root}: run was simulated with a different seed or corpus/model/training config")
        return run

    def path(self, rel: str) -> Path:
        return self.root / rel

    def require(self, rel: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise MissingArtifact(f"missing artifact {rel} in {self.root}")
        return p

    def record_artifact(self, rel: str, stage: str) -> None:
        self.manifest["artifacts"][rel] = {"sha256": sha256_file(self.path(rel)), "stage": stage}

    def record(self, stage: str, key: str, value) -> None:
        self.manifest["records"].setdefault(stage, {})[key] = value

    def save(self, stage: str | None = None, seconds: float | None = None) -> None:
        m = self.manifest
        m["run_id"] = self.config.run_id()
        m["version"] = __version__
        m["simulation_key"] = self.config.simulation_key()
        m["config"] = config_to_dict(self.config)
        m["timings"] = "timings.json"
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(m, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        if stage is not None and seconds is not None:
            tp = self.path("timings.json")
            t = json.loads(tp.read_text(encoding="utf-8")) if tp.exists() else {}
            t[stage] = round(seconds, 3)
            tp.write_text(json.dumps(t, sort_keys=True, indent=2) + "\n", encoding="utf-8")

    def verify(self) -> list[str]:
        """Artifacts whose file is missing or no longer matches its digest."""
        bad = []
        for rel, info in sorted(self.manifest["artifacts"].items()):
            p = self.path(rel)
            if not p.exists() or sha256_file(p) != info["sha256"]:
                bad.append(rel)
        return bad

    # -- artifacts ------------------------------------------------------------

    def split(self, name: str) -> Split:
        if name not in DATASETS:
            raise ValidationError(f"unknown dataset {name!r} (expected one of {DATASETS})", field="dataset")
        return read_split(self.require(f"corpus/{name}.txt"), name)

    def model(self, role: str) -> TinyLM:
        return load_checkpoint(self.require(f"models/{role}.ckpt"))

    def has_model(self, role: str) -> bool:
        return self.path(f"models/{role}.ckpt").exists()

    def corpus(self) -> Corpus:
        return generate_corpus(self.config.corpus)


def _stage(name):
    """Time a stage and persist the manifest when it finishes."""
    def wrap(fn):
        def inner(run: Run, *args, **kwargs):
            t0 = time.perf_counter()
            out = fn(run, *args, **kwargs)
            run.save(name, time.perf_counter() - t0)
            return out
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


# --- model construction ----------------------------------------------------------

def _train_reference(cfg: RunConfig, base_docs, h: int | None = None) -> TinyLM:
    m = cfg.model
    vocab = Vocab.default(cfg.corpus.vocab_size)
    init = TinyLM.init(vocab, derive_seed(cfg.seed, "reference-init"), m.context, m.d, h or m.h)
    tc = dataclasses.replace(cfg.base_train, seed=derive_seed(cfg.seed, "reference-train"))
    return train(init, base_docs, tc)


def build_models(cfg: RunConfig, corpus: Corpus) -> dict[str, TinyLM]:
    """Reference, clean target and member target for one simulation."""
    m = cfg.model
    vocab = Vocab.default(cfg.corpus.vocab_size)
    ref = _train_reference(cfg, corpus.base.docs)
    init = TinyLM.init(vocab, derive_seed(cfg.seed, "target-init"), m.context, m.d, m.h)
    clean = train(init, corpus.base.docs, dataclasses.replace(cfg.base_train, seed=derive_seed(cfg.seed, "target-train")))
    rng = np.random.default_rng(derive_seed(cfg.seed, "member-replay"))
    n_replay = min(cfg.member.replay_docs, len(corpus.base))
    replay = [corpus.base.docs[i] for i in sorted(rng.choice(len(corpus.base), n_replay, replace=False))]
    member_docs = replay + list(corpus.suspect.docs) * cfg.member.repeats
    member = train(clean, member_docs, dataclasses.replace(cfg.member.train, seed=derive_seed(cfg.seed, "member-train")))
    return {"reference": ref, "target_clean": clean, "target_member": member}


def distill_config(cfg: RunConfig, lam: float | None = None, tau: float | None = None) -> DistillConfig:
    d = cfg.distill
    return DistillConfig(d.lam if lam is None else float(lam), d.tau if tau is None else float(tau),
                         dataclasses.replace(d.train, seed=derive_seed(cfg.seed, "distill")))


def _scores(model: TinyLM, split: Split, role: str, spec: ScoreSpec) -> ScoreVector:
    return score_dataset(score_corpus(model, split.docs, split.doc_ids, role, split.name), spec)


# --- subcommands -------------------------------------------------------------------

@_stage("simulate")
def cmd_simulate(run: Run) -> list[Path]:
    """Corpora plus trained reference, clean target and member target."""
    cfg = run.config
    for d in ("corpus", "models"):
        run.path(d).mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(cfg.corpus)
    out = []
    for split in (corpus.suspect, corpus.heldout):
        rel = f"corpus/{split.name}.txt"
        write_split(split, run.path(rel))
        run.record_artifact(rel, "simulate")
        out.append(run.path(rel))
    log.info("training reference and targets on %d base documents", len(corpus.base))
    for role, model in build_models(cfg, corpus).items():
        rel = f"models/{role}.ckpt"
        save_checkpoint(model, run.path(rel))
        run.record_artifact(rel, "simulate")
        out.append(run.path(rel))
    run.path("config.yaml").write_text(dump_config(cfg), encoding="utf-8")
    return out


@_stage("distill")
def cmd_distill(run: Run, target: str = "clean") -> Path:
    """Distilled reference trained toward one target's logits on the suspect split."""
    if target not in TARGETS:
        raise ValidationError(f"target must be one of {TARGETS}", field="target")
    ref, tgt = run.model("reference"), run.model(f"target_{target}")
    suspect = run.split("suspect")
    dc = distill_config(run.config)
    log.info("distilling reference toward %s target (lambda=%g, tau=%g)", target, dc.lam, dc.tau)
    model = distill_reference(ref, tgt, suspect.docs, dc)
    rel = f"models/distilled_{target}.ckpt"
    run.path("models").mkdir(exist_ok=True)
    save_checkpoint(model, run.path(rel))
    run.record_artifact(rel, "distill")
    run.record("distill", target, {"lambda": dc.lam, "tau": dc.tau, "epochs": dc.train.epochs,
                                   "lr": dc.train.lr, "batch_size": dc.train.batch_size})
    return run.path(rel)


def score_path(role: str, dataset: str, spec: ScoreSpec) -> str:
    return f"scores/{role}.{dataset}.{spec.label()}.scores"


@_stage("score")
def cmd_score(run: Run, dataset: str = "suspect", roles=None) -> list[Path]:
    """``.pstats`` and score files for every available model (or ``roles``)."""
    split = run.split(dataset)
    if roles is None:
        roles = [r for r in MODEL_ROLES if run.has_model(r)]
    for d in ("stats", "scores"):
        run.path(d).mkdir(exist_ok=True)
    out = []
    for role in roles:
        model = run.model(role)
        stats = score_corpus(model, split.docs, split.doc_ids, role, dataset)
        rel = f"stats/{role}.{dataset}.pstats"
        write_dataset_stats(stats, run.path(rel))
        run.record_artifact(rel, "score")
        sv = score_dataset(stats, run.config.score)
        rel = score_path(role, dataset, run.config.score)
        sv.write(run.path(rel))
        run.record_artifact(rel, "score")
        out.append(run.path(rel))
    return out


def load_scores(run: Run, role: str, dataset: str = "suspect") -> ScoreVector:
    rel = score_path(role, dataset, run.config.score)
    p = run.path(rel)
    if not p.exists():
        raise MissingArtifact(f"missing {rel}; run `prism-audit score` after the models exist")
    return ScoreVector.read(p)


@_stage("test")
def cmd_test(run: Run, target: str = "clean", dataset: str = "suspect") -> TestReport:
    """Bootstrap test for one target, plus the paired t-test baseline."""
    if target not in TARGETS:
        raise ValidationError(f"target must be one of {TARGETS}", field="target")
    r = load_scores(run, "reference", dataset)
    t = load_scores(run, f"target_{target}", dataset)
    d = load_scores(run, f"distilled_{target}", dataset)
    report = bootstrap_test(r, t, d, run.config.test)
    run.path("reports").mkdir(exist_ok=True)
    stem = f"reports/test_{target}"
    for p in report.write(run.path(stem)):
        run.record_artifact(str(p.relative_to(run.root)), "test")
    tt = paired_t_test(t, d, "less")
    rel = f"reports/ttest_{target}.json"
    verdict = "NonMemberEvidence" if tt.p_value < run.config.test.alpha else "Inconclusive"
    run.path(rel).write_text(json.dumps({**dataclasses.asdict(tt), "alternative": "less", "verdict": verdict},
                                        sort_keys=True, indent=2) + "\n", encoding="utf-8")
    run.record_artifact(rel, "test")
    return report


# --- sweeps ------------------------------------------------------------------------

SWEEP_HEADER = ("value", "rho_RT", "rho_DT", "delta_hat", "p_value", "verdict")


def _check_grid(axis: str, grid, n_suspect: int) -> list:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r} (expected one of {', '.join(SWEEP_AXES)})")
    if not grid:
        raise ConfigError(f"empty grid for axis {axis}")
    out = []
    for v in grid:
        try:
            x = float(v)
        except (TypeError, ValueError):
            raise ConfigError(f"{axis} grid value {v!r} is not a number") from None
        ok = {
            "K": 0 < x <= 100,
            "Lambda": 0 <= x <= 1,
            "Tau": x > 0,
            "NDocs": x == int(x) and 3 <= x <= n_suspect,
            "RefCapacity": x == int(x) and x >= 1,
        }[axis]
        if not ok:
            raise ConfigError(f"invalid {axis} grid value {v!r}")
        out.append(int(x) if axis in ("NDocs", "RefCapacity") else x)
    return out


def ndocs_subset(seed: int, n_total: int, n: int) -> np.ndarray:
    """Deterministic sorted subsample of ``n`` document positions."""
    rng = np.random.default_rng(derive_seed(seed, f"ndocs-{n}"))
    return np.sort(rng.choice(n_total, size=n, replace=False))


def sweep_rows(run: Run, axis: str, grid, target: str = "clean") -> list[tuple]:
    cfg = run.config
    if target not in TARGETS:
        raise ValidationError(f"target must be one of {TARGETS}", field="target")
    suspect = run.split("suspect")
    grid = _check_grid(axis, grid, len(suspect))
    ref, tgt = run.model("reference"), run.model(f"target_{target}")
    rows = []

    def add(value, r, t, d):
        rep = bootstrap_test(r, t, d, cfg.test)
        rows.append((value, rep.rho_RT, rep.rho_DT, rep.delta_hat, rep.p_value, rep.verdict.value))

    if axis == "K":
        dist = run.model(f"distilled_{target}")
        stats = {k: score_corpus(m, suspect.docs, suspect.doc_ids, k, "suspect")
                 for k, m in (("reference", ref), ("target", tgt), ("distilled", dist))}
        for k in grid:
            spec = dataclasses.replace(cfg.score, k_percent=k)
            add(k, *(score_dataset(stats[n], spec) for n in ("reference", "target", "distilled")))
    elif axis in ("Lambda", "Tau"):
        sr, st = _scores(ref, suspect, "reference", cfg.score), _scores(tgt, suspect, "target", cfg.score)
        for v in grid:
            dc = distill_config(cfg, lam=v) if axis == "Lambda" else distill_config(cfg, tau=v)
            log.info("%s=%g: distilling", axis, v)
            dist = distill_reference(ref, tgt, suspect.docs, dc)
            add(v, sr, st, _scores(dist, suspect, "distilled", cfg.score))
    elif axis == "NDocs":
        for n in grid:
            sub = suspect.subset(ndocs_subset(cfg.seed, len(suspect), n))
            log.info("NDocs=%d: distilling on the subsample", n)
            dist = distill_reference(ref, tgt, sub.docs, distill_config(cfg))
            add(n, *(_scores(m, sub, role, cfg.score) for m, role in
                     ((ref, "reference"), (tgt, "target"), (dist, "distilled"))))
    else:  # RefCapacity
        base = run.corpus().base.docs
        st = _scores(tgt, suspect, "target", cfg.score)
        for h in grid:
            log.info("RefCapacity=%d: retraining reference", h)
            r = _train_reference(cfg, base, h=h)
            dist = distill_reference(r, tgt, suspect.docs, distill_config(cfg))
            add(h, _scores(r, suspect, "reference", cfg.score), st, _scores(dist, suspect, "distilled", cfg.score))
    return rows


@_stage("sweep")
def cmd_sweep(run: Run, axis: str, grid=None, target: str = "clean") -> Path:
    grid = run.config.sweep[axis] if grid is None and axis in run.config.sweep else grid
    rows = sweep_rows(run, axis, grid, target)
    run.path("sweeps").mkdir(exist_ok=True)
    rel = f"sweeps/{axis}_{target}.csv"
    _write_csv(run.path(rel), SWEEP_HEADER, rows)
    run.record_artifact(rel, "sweep")
    return run.path(rel)


@_stage("sweep-hparams")
def cmd_sweep_hparams(run: Run, tau_grid=None, lambda_grid=None) -> Path:
    """Temperature grid at the configured lambda, then lambda grid at the
    configured temperature, for both targets.  A good setting gives a
    positive delta on the clean target and a negative one on the member."""
    cfg = run.config
    rows = []
    for axis, grid in (("Tau", tau_grid or cfg.sweep["Tau"]), ("Lambda", lambda_grid or cfg.sweep["Lambda"])):
        for target in TARGETS:
            for row in sweep_rows(run, axis, grid, target):
                rows.append((axis, target, *row))
    run.path("sweeps").mkdir(exist_ok=True)
    rel = "sweeps/hparams.csv"
    _write_csv(run.path(rel), ("axis", "target", *SWEEP_HEADER), rows)
    run.record_artifact(rel, "sweep-hparams")
    return run.path(rel)


# --- analyses ----------------------------------------------------------------------

def _stats_for(run: Run, role: str, dataset: str = "suspect") -> DatasetStats:
    p = run.path(f"stats/{role}.{dataset}.pstats")
    if p.exists():
        return read_dataset_stats(p)
    split = run.split(dataset)
    return score_corpus(run.model(role), split.docs, split.doc_ids, role, dataset)


def compare_score_rows(run: Run) -> list[tuple]:
    cfg = run.config
    corr = CORRELATIONS[cfg.test.metric]
    stats = {r: _stats_for(run, r) for r in ("reference", "target_clean", "target_member")}
    rows = []
    for kind in SCORE_KINDS:
        spec = dataclasses.replace(cfg.score, kind=kind)
        sv = {r: score_dataset(s, spec) for r, s in stats.items()}
        rc = corr(sv["reference"], sv["target_clean"])
        rm = corr(sv["reference"], sv["target_member"])
        rows.append((spec.label(), rc, rm, rc - rm))
    return rows


@_stage("compare-scores")
def cmd_compare_scores(run: Run) -> tuple[Path, Path]:
    rows = compare_score_rows(run)
    run.path("analysis").mkdir(exist_ok=True)
    _write_csv(run.path("analysis/compare_scores.csv"), ("score", "rho_ref_clean", "rho_ref_member", "gap"), rows)
    lines = [f"{'score':<16}{'rho(ref,clean)':>16}{'rho(ref,member)':>17}{'gap':>10}"]
    lines += [f"{s:<16}{a:>16.4f}{b:>17.4f}{g:>10.4f}" for s, a, b, g in rows]
    run.path("analysis/compare_scores.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for rel in ("analysis/compare_scores.csv", "analysis/compare_scores.txt"):
        run.record_artifact(rel, "compare-scores")
    return run.path("analysis/compare_scores.csv"), run.path("analysis/compare_scores.txt")


def rank_analysis_rows(run: Run):
    spec = dataclasses.replace(run.config.score, sign=SignConvention.SURPRISAL_POSITIVE)
    before = score_dataset(_stats_for(run, "target_clean"), spec)
    after = score_dataset(_stats_for(run, "target_member"), spec)
    return rank_delta(before, after)


def decile_means(rows, n_bins: int = 10) -> list[float]:
    """Mean rank change per bin of the earlier score (rows sorted ascending)."""
    deltas = np.array([r.delta for r in rows])
    return [float(b.mean()) for b in np.array_split(deltas, n_bins) if len(b)]


@_stage("rank-analysis")
def cmd_rank_analysis(run: Run) -> Path:
    rows = rank_analysis_rows(run)
    run.path("analysis").mkdir(exist_ok=True)
    rel = "analysis/rank_analysis.csv"
    write_rank_delta_csv(rows, run.path(rel))
    run.record_artifact(rel, "rank-analysis")
    return run.path(rel)
