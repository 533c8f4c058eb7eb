"""Acceptance criteria 1-11.

Each test records one ``criterion N: PASS|FAIL`` line, printed again in the
terminal summary.  Criteria 5, 6 and 10 simulate ten seeded runs at the
default configuration (about a minute each on one core).
"""
from __future__ import annotations

import json
import shutil
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from conftest import random_doc, record_criterion
from prism_audit import pipeline
from prism_audit.cli import main
from prism_audit.config import load_config
from prism_audit.harness.model import TinyLM, Vocab, ce_loss_and_grad, distill_loss_and_grad
from prism_audit.inference import (TestConfig, bootstrap_test, paired_t_test, p_value_from_deltas,
                                   student_t_cdf)
from prism_audit.records import DocumentStats
from prism_audit.ranks import kendall_tau, spearman_rho
from prism_audit.scores import ScoreSpec, ScoreVector, min_k_pp, z_scores

ROOT = Path(__file__).resolve().parents[1]
DEFAULT = ROOT / "configs" / "default.yaml"
TINY = Path(__file__).parent / "data" / "tiny.yaml"
SEEDS = range(10)


# --- vectorised O(n^2) oracles -----------------------------------------------------

def oracle_ranks(v):
    less = (v[None, :] < v[:, None]).sum(axis=1)
    eq = (v[None, :] == v[:, None]).sum(axis=1)
    return 1 + less + (eq - 1) / 2


def oracle_spearman(a, b):
    ra, rb = oracle_ranks(a), oracle_ranks(b)
    ra, rb = ra - ra.mean(), rb - rb.mean()
    return float((ra * rb).sum() / np.sqrt((ra * ra).sum() * (rb * rb).sum()))


def oracle_kendall(a, b):
    n = len(a)
    sa = np.sign(a[:, None] - a[None, :])
    sb = np.sign(b[:, None] - b[None, :])
    iu = np.triu_indices(n, 1)
    s = (sa * sb)[iu].sum()
    n0 = n * (n - 1) / 2
    ta = (sa[iu] == 0).sum()
    tb = (sb[iu] == 0).sum()
    return float(s / np.sqrt((n0 - ta) * (n0 - tb)))


def test_criterion_01_correlation_oracles():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    done = 0
    while done < 1000:
        n = int(rng.integers(3, 501))
        a = rng.normal(size=n)
        b = 0.5 * a + rng.normal(size=n)
        for v in (a, b):
            k = int(rng.integers(0, n))
            src = rng.integers(0, n, k)
            v[rng.integers(0, n, k)] = v[src]  # planted ties
        if rng.random() < 0.3:
            a = np.round(a, 1)
        if len(np.unique(a)) < 2 or len(np.unique(b)) < 2:
            continue
        worst = max(worst, abs(spearman_rho(a, b) - oracle_spearman(a, b)),
                    abs(kendall_tau(a, b) - oracle_kendall(a, b)))
        done += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and elapsed < 30
    record_criterion(1, ok, f"max |err| {worst:.2e} over 1000 tied vectors, {elapsed:.1f}s")
    assert ok


def test_criterion_02_minkpp_identities():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    err_mean = err_shift = 0.0
    reversed_ok = True
    docs = [random_doc(rng, f"d{i}", n=int(rng.integers(1, 80))) for i in range(300)]
    for d in docs:
        err_mean = max(err_mean, abs(min_k_pp(d, 100) - float(np.mean(z_scores(d)))))
        c = float(rng.uniform(-3, 0))  # keep logp <= 0
        shifted = DocumentStats("s", np.column_stack([d.logp + c, d.mu + c, d.sigma]))
        for k in (5, 20, 50, 100):
            err_shift = max(err_shift, abs(min_k_pp(shifted, k) - min_k_pp(d, k)))
    vals = [min_k_pp(d, 20) for d in docs]
    ids = [f"d{i}" for i in range(len(docs))]
    a = ScoreVector("m", "x", ScoreSpec(), ids, vals)
    b = ScoreVector("m", "x", ScoreSpec(sign="surprisal_positive"), ids, -np.asarray(vals))
    order_a = np.argsort(a.scores, kind="stable")
    order_b = np.argsort(-b.scores, kind="stable")
    reversed_ok = np.array_equal(order_a, order_b) and np.array_equal(a.negated().scores, b.scores)
    elapsed = time.perf_counter() - t0
    ok = err_mean < 1e-12 and err_shift < 1e-12 and reversed_ok and elapsed < 5
    record_criterion(2, ok, f"K=100 err {err_mean:.1e}, shift err {err_shift:.1e}, "
                            f"negation reverses ranks: {reversed_ok}, {elapsed:.2f}s")
    assert ok


def test_criterion_03_bootstrap_floor_and_bounds():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    n = 200
    t = rng.normal(size=n)
    ids = [f"d{i}" for i in range(n)]
    r = ScoreVector("R", "s", ScoreSpec(), ids, t + 0.02 * rng.normal(size=n))
    d = ScoreVector("D", "s", ScoreSpec(), ids, t + 2.0 * rng.normal(size=n))
    T = ScoreVector("T", "s", ScoreSpec(), ids, t)
    rep = bootstrap_test(r, T, d, TestConfig(B=10_000, seed=0))
    floor_ok = bool(np.all(rep.deltas > 0)) and rep.p_value == 1 / 10_001
    bounds_ok = True
    for s in range(5):
        noise = float(rng.uniform(0.05, 2))
        dd = ScoreVector("D", "s", ScoreSpec(), ids[:40], t[:40] + noise * rng.normal(size=40))
        rr = ScoreVector("R", "s", ScoreSpec(), ids[:40], t[:40] + 0.5 * rng.normal(size=40))
        q = bootstrap_test(rr, T.take(ids[:40]), dd, TestConfig(B=2000, seed=s)).p_value
        bounds_ok &= 1 / 2001 <= q <= 1
    bounds_ok &= p_value_from_deltas(np.zeros(10_000)) == 1.0
    elapsed = time.perf_counter() - t0
    ok = floor_ok and bounds_ok and elapsed < 10
    record_criterion(3, ok, f"all deltas > 0 gives p = {rep.p_value!r} (1/10001 = {1 / 10_001!r}), "
                            f"bounds hold: {bounds_ok}, {elapsed:.1f}s")
    assert ok


def _fd_rel_err(model, loss_and_grad, eps=1e-5):
    _, g = loss_and_grad(model)
    analytic = np.concatenate([g[k].ravel() for k in ("E", "W1", "b1", "W2", "b2")])
    theta = model.flat()
    num = np.empty_like(theta)
    for i in range(len(theta)):
        th = theta.copy()
        th[i] += eps
        model.set_flat(th)
        up = loss_and_grad(model)[0]
        th[i] -= 2 * eps
        model.set_flat(th)
        num[i] = (up - loss_and_grad(model)[0]) / (2 * eps)
    model.set_flat(theta)
    scale = np.maximum(np.abs(analytic), np.abs(num))
    return float(np.max(np.where(scale > 0, np.abs(analytic - num) / np.where(scale > 0, scale, 1.0), 0.0)))


def test_criterion_04_gradient_checks():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    vocab = Vocab.default(8)
    student = TinyLM.init(vocab, 1, context=3, d=4, h=8)
    teacher = TinyLM.init(vocab, 2, context=3, d=4, h=8)
    batch = [rng.integers(1, 8, int(rng.integers(3, 9))) for _ in range(6)]
    ce = _fd_rel_err(student, lambda m: ce_loss_and_grad(m, batch))
    kd = _fd_rel_err(student, lambda m: distill_loss_and_grad(m, teacher, batch, 0.7, 2.0))
    elapsed = time.perf_counter() - t0
    ok = ce < 1e-5 and kd < 1e-5 and elapsed < 10
    record_criterion(4, ok, f"max elementwise rel err: CE {ce:.1e}, distill (lambda=0.7, tau=2) {kd:.1e}, {elapsed:.1f}s")
    assert ok


# --- seeded end-to-end runs --------------------------------------------------------

CORE = (["simulate"], ["distill"], ["score"], ["test"])


def run_cli(root: Path, steps, config=DEFAULT, seed=None):
    extra = ["--config", str(config), "--run", str(root)] + (["--seed", str(seed)] if seed is not None else [])
    for argv in steps:
        code = main([*argv, *extra])
        if code != 0:
            raise RuntimeError(f"prism-audit {' '.join(argv)} exited with {code}")


def read_report(root: Path, target: str) -> dict:
    return json.loads((root / "reports" / f"test_{target}.json").read_text())


def scores(root: Path, role: str) -> ScoreVector:
    cfg = load_config(root / "config.yaml")
    return ScoreVector.read(root / pipeline.score_path(role, "suspect", cfg.score))


@pytest.fixture(scope="module")
def seeded_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("seeds")
    out = {}
    for s in SEEDS:
        root = base / f"seed{s}"
        t0 = time.perf_counter()
        run_cli(root, CORE, seed=s)
        out[s] = {"root": root, "seconds": time.perf_counter() - t0,
                  "clean": read_report(root, "clean"), "member": read_report(root, "member")}
    return out


@pytest.mark.slow
def test_criterion_05_end_to_end_detection(seeded_runs):
    hits, worst_time, lines = 0, 0.0, []
    for s, r in seeded_runs.items():
        pc, pm = r["clean"]["p_value"], r["member"]["p_value"]
        good = pc < 0.05 and pm >= 0.05
        hits += good
        worst_time = max(worst_time, r["seconds"])
        lines.append(f"seed {s}: clean p={pc:.4g} member p={pm:.4g} ({r['seconds']:.0f}s)")
    print("\n".join(lines))
    ok = hits >= 9 and worst_time < 300
    record_criterion(5, ok, f"{hits}/10 seeds with clean p < 0.05 and member p >= 0.05, "
                            f"slowest seed {worst_time:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_06_correlation_drop_and_metric_agreement(seeded_runs):
    drops, agree, lines = 0, 0, []
    n_runs = 0
    for s, r in seeded_runs.items():
        root = r["root"]
        ref, clean, member = (scores(root, x) for x in ("reference", "target_clean", "target_member"))
        rc, rm = spearman_rho(ref, clean), spearman_rho(ref, member)
        drops += rc > rm
        cfg = load_config(root / "config.yaml").test
        for target in ("clean", "member"):
            sp = r[target]
            kd = bootstrap_test(ref, scores(root, f"target_{target}"), scores(root, f"distilled_{target}"),
                                TestConfig(B=cfg.B, alpha=cfg.alpha, seed=cfg.seed, metric="kendall"))
            same = kd.verdict.value == sp["verdict"] and np.sign(kd.delta_hat) == np.sign(sp["delta_hat"])
            agree += same
            n_runs += 1
            lines.append(f"seed {s} {target}: spearman {sp['verdict']} (delta {sp['delta_hat']:+.3f}), "
                         f"kendall {kd.verdict.value} (delta {kd.delta_hat:+.3f})")
        lines.append(f"seed {s}: rho(ref,clean)={rc:.3f} rho(ref,member)={rm:.3f}")
    print("\n".join(lines))
    ok = drops == 10 and agree == n_runs
    record_criterion(6, ok, f"rho(ref,clean) > rho(ref,member) on {drops}/10 seeds; "
                            f"spearman/kendall agree on {agree}/{n_runs} runs")
    assert ok


ANALYSES = (["sweep", "--axis", "K"], ["sweep", "--axis", "NDocs", "--grid", "150"],
            ["compare-scores"], ["rank-analysis"])


@pytest.fixture(scope="module")
def default_run(seeded_runs, tmp_path_factory):
    """The default seeded run (seed 0), driven through the analysis subcommands."""
    root = tmp_path_factory.mktemp("default") / "run"
    shutil.copytree(seeded_runs[0]["root"], root)
    run_cli(root, ANALYSES)
    return root


def read_sweep(path: Path) -> dict:
    rows = [line.split(",") for line in path.read_text().splitlines()[1:]]
    return {float(r[0]): r for r in rows}


@pytest.mark.slow
def test_criterion_07_k_sweep_trend(default_run):
    rows = read_sweep(default_run / "sweeps" / "K_clean.csv")
    d10, d100 = float(rows[10.0][3]), float(rows[100.0][3])
    print("K sweep (clean): " + " ".join(f"K={k:g}:{float(r[3]):+.3f}" for k, r in sorted(rows.items())))
    ok = d10 > d100
    record_criterion(7, ok, f"delta at K=10 {d10:+.4f} vs K=100 {d100:+.4f}")
    assert ok


@pytest.mark.slow
def test_criterion_08_score_comparison(default_run):
    lines = (default_run / "analysis" / "compare_scores.csv").read_text().splitlines()[1:]
    gaps = {r.split(",")[0]: float(r.split(",")[3]) for r in lines}
    best = max(gaps, key=gaps.get)
    print("gaps: " + ", ".join(f"{k} {v:+.4f}" for k, v in gaps.items()))
    ok = best.startswith("minkpp") and all(gaps[best] > v for k, v in gaps.items() if k != best)
    record_criterion(8, ok, "largest clean-vs-member gap: " + best + " ("
                     + ", ".join(f"{k} {v:+.4f}" for k, v in gaps.items()) + ")")
    assert ok


@pytest.mark.slow
def test_criterion_09_dataset_size_robustness(default_run):
    full = read_report(default_run, "clean")
    sub = read_sweep(default_run / "sweeps" / "NDocs_clean.csv")[150.0]
    ok = sub[5] == full["verdict"]
    record_criterion(9, ok, f"clean verdict {full['verdict']} (p={full['p_value']:.4g}) on 300 docs, "
                            f"{sub[5]} (p={float(sub[4]):.4g}) on 150 docs")
    assert ok


@pytest.mark.slow
def test_criterion_10_paired_t_baseline(seeded_runs):
    # blocking: exact match against an independent t CDF
    x = np.linspace(-1.0, 1.0, 20) ** 3 + 0.1 * np.sin(np.arange(20))
    y = x + 0.3 + 0.2 * np.cos(3 * np.arange(20))
    res = paired_t_test(x, y, "less")
    ref = stats.ttest_rel(x, y, alternative="less")
    grid_err = max(abs(student_t_cdf(t, df) - stats.t.cdf(t, df))
                   for t in (-8.0, -2.5, -1.0, 0.3, 1.7, 6.0) for df in (1, 4, 19, 299))
    exact = abs(res.p_value - ref.pvalue) < 1e-9 and abs(res.t_stat - ref.statistic) < 1e-9 and grid_err < 1e-9

    # diagnostic: seeds where the t-test verdicts misbehave across targets
    # while the bootstrap separates them correctly
    unstable = []
    for s, r in seeded_runs.items():
        root = r["root"]
        tt = {t: json.loads((root / "reports" / f"ttest_{t}.json").read_text())["verdict"] for t in ("clean", "member")}
        boot = {t: r[t]["verdict"] for t in ("clean", "member")}
        boot_right = boot == {"clean": "NonMemberEvidence", "member": "Inconclusive"}
        if boot_right and tt != boot:
            unstable.append(f"seed {s} t-test clean={tt['clean']} member={tt['member']}")
    print("\n".join(unstable) or "no t-test instability observed")
    record_criterion(10, exact, f"t CDF max err {grid_err:.1e}, paired p err {abs(res.p_value - ref.pvalue):.1e}; "
                                f"diagnostic: t-test unstable on {len(unstable)}/10 seeds")
    assert exact


def snapshot(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timings.json"}


@pytest.mark.slow
def test_criterion_11_determinism(default_run, tmp_path):
    steps = (["simulate"], ["distill"], ["score"], ["score", "--dataset", "heldout"], ["test"],
             ["sweep", "--axis", "K"], ["sweep", "--axis", "Lambda"], ["sweep", "--axis", "Tau"],
             ["sweep", "--axis", "NDocs"], ["sweep", "--axis", "RefCapacity"], ["sweep-hparams"],
             ["compare-scores"], ["rank-analysis"])
    a, b = tmp_path / "a", tmp_path / "b"
    run_cli(a, steps, TINY)
    run_cli(b, steps, TINY)
    sa, sb = snapshot(a), snapshot(b)
    tiny_diff = sorted(set(sa) ^ set(sb)) + [k for k in sa if k in sb and sa[k] != sb[k]]
    # the default configuration, core stages plus the analyses used above
    c = tmp_path / "c"
    run_cli(c, (*CORE, *ANALYSES))
    sd, sc = snapshot(default_run), snapshot(c)
    default_diff = sorted(set(sd) ^ set(sc)) + [k for k in sd if k in sc and sd[k] != sc[k]]
    ok = not tiny_diff and not default_diff
    record_criterion(11, ok, f"{len(sa)} files (all subcommands, small config) and {len(sd)} files "
                             f"(default config) byte-identical on rerun"
                     if ok else f"differences: {tiny_diff + default_diff}")
    assert ok


@pytest.mark.slow
def test_default_run_rank_change_by_surprisal(default_run):
    # supporting check, not a numbered criterion: continued training on the
    # suspect split lowers the rank of the most surprising documents
    cfg = load_config(default_run / "config.yaml")
    run = pipeline.Run.open(default_run, cfg)
    deciles = pipeline.decile_means(pipeline.rank_analysis_rows(run))
    print("rank change by clean-target surprisal decile: " + " ".join(f"{m:+.1f}" for m in deciles))
    assert deciles[-1] < 0
