"""Acceptance gate: one check per criterion, each reporting a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py` (lines appear in the terminal
summary) or directly with `python tests/test_acceptance.py`.
"""

import math
import time
from fractions import Fraction

import mpmath
import numpy as np
import pytest

from anomattr import attribution as attr
from anomattr import evaluation as ev
from anomattr import nn, pipeline, synth, threshold
from anomattr.clv import ScoreSeries
from anomattr.config import PipelineConfig

from conftest import random_network

RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1, 2

def test_1_gradient_integrity():
    t0 = time.perf_counter()
    worst = max(nn.grad_check(*random_network(seed), eps=1e-5) for seed in range(100))
    elapsed = time.perf_counter() - t0
    report(1, worst < 1e-4 and elapsed < 60,
           f"max rel error {worst:.2e} (< 1e-4) over 100 networks in {elapsed:.1f}s (< 60s)")


def test_2_elbo_analytics():
    x = np.array([0.4, -1.3, 2.2, 0.0])
    kl0 = nn.elbo_loss(x, x, nn.LatentDist([0.0, 0.0], [0.0, 0.0]))[1]
    kl1 = nn.elbo_loss(x, x, nn.LatentDist([1.0], [0.0]))[1]
    nll = nn.elbo_loss(x, x, nn.LatentDist([0.0], [0.0]))[2]
    floor = len(x) * 0.5 * math.log(2 * math.pi)
    ok = kl0 == 0.0 and abs(kl1 - 0.5) <= 1e-12 and abs(nll - floor) <= 1e-12
    report(2, ok, f"kl(0,0)={kl0!r}, kl([1],[0])={kl1!r}, nll-d/2 log2pi={nll - floor:.1e}")


# ---------------------------------------------------------------- 3, 4

@pytest.fixture(scope="module")
def detection_run():
    """Full pipeline on the seed-42 synthetic set: cluster -> train -> score -> flag."""
    cfg = PipelineConfig(seed=42)
    table, truth = synth.generate(synth.SynthConfig(n_features=8, length=5000, rate=0.02, magnitude=6.0, seed=42))
    t0 = time.perf_counter()
    [prep] = pipeline.prepare(cfg, [table])
    assignment = pipeline.cluster(cfg, [prep.training])
    model, _ = pipeline.fit(cfg, assignment, [prep.training], prep.stats)
    scores = pipeline.score(model, prep.scoring)
    elapsed = time.perf_counter() - t0
    flags = pipeline.flag(cfg, scores)
    labels = truth.flags[model.T - 1:]
    return cfg, model, prep.scoring, scores, flags, labels, truth, assignment, elapsed


@pytest.mark.slow
def test_3_detection_power(detection_run):
    _, model, _, scores, _, labels, _, assignment, elapsed = detection_run
    auc = ev.roc_auc(scores.scores, labels)
    report(3, auc >= 0.90 and elapsed < 300,
           f"ROC-AUC {auc:.4f} (>= 0.90), k={assignment.k}, cluster+train+score {elapsed:.0f}s (< 300s)")


def _culprit_rate(result, idx, truth, offset):
    return float(np.mean([result.winners[i] in truth.culprits[i + offset] for i in idx]))


@pytest.mark.slow
def test_4_attribution_recovery(detection_run):
    cfg, model, table, scores, flags, labels, truth, _, _ = detection_run
    tp = np.nonzero(flags.flag & labels)[0]
    result = attr.attribute(model, table, scores, flags, direction="negative")
    rate = _culprit_rate(result, tp, truth, model.T - 1)
    identity = attr.attribute(model, table, scores, flags, replace=lambda t, i: t)
    zero = float(np.max(np.abs(identity.delta)))
    literal = attr.attribute(model, table, scores, flags, direction="positive")
    info = _culprit_rate(literal, tp, truth, model.T - 1)
    ok = rate >= 0.8 and zero <= 1e-9 and result.n_passes == table.n_features == identity.n_passes
    report(4, ok, f"culprit match {rate:.3f} on {len(tp)} flagged true positives (>= 0.80, negative direction; "
                  f"literal positive rule {info:.3f}); identity max|delta| {zero:.1e}; "
                  f"{result.n_passes} passes for F={table.n_features}")


# ---------------------------------------------------------------- 5

def test_5_pot_correctness():
    g = np.random.default_rng(5)
    sample = 1.0 / 0.1 * ((1 - g.random(10_000)) ** -0.1 - 1)
    shape, scale = threshold.gpd_mom(sample)
    x = np.random.default_rng(6).standard_normal(10_000)
    stamps = np.arange(len(x)).astype("datetime64[s]")
    rate = float(threshold.dynamic_threshold(ScoreSeries(stamps, x), 1000, 0.98, 0.01).flag.mean())
    coverage = True
    for n in range(60, 400, 7):
        for w in range(60, n + 1, 11):
            counts = np.zeros(n, int)
            for _, _, cs, ce in threshold.plan_segments(n, w):
                counts[cs:ce] += 1
            coverage &= bool(np.all(counts == 1))
    ok = abs(shape - 0.1) <= 0.15 and abs(scale - 1) <= 0.15 and 0.01 / 3 <= rate <= 0.03 and coverage
    report(5, ok, f"xi {shape:.4f} (0.1 +/- 0.15), sigma {scale:.4f} (1 +/- 15%), "
                  f"Gaussian flag rate {rate:.4f} in [0.0033, 0.03] (window 1000), coverage exact: {coverage}")


# ---------------------------------------------------------------- 6, 7

P_CASES = [(0.1, 1), (0.5, 2.5), (1.0, 3), (1.549, 2.94), (2.0, 4), (2.5, 5.5), (3.3539, 100), (4.0, 8),
           (0.01, 30), (1.96, 1000), (5.0, 2), (10.0, 3), (0.7, 15.2), (2.2, 7.7), (3.0, 40), (6.0, 60),
           (1.3, 1.1), (0.25, 250), (8.0, 12), (2.8, 19.5)]


def test_6_statistics_oracles():
    res = ev.welch_ttest([2, 4, 6], [1, 2, 3])
    va, vb = 4 / 3, 1 / 3
    t_hand = 2 / math.sqrt(va + vb)
    dof_hand = (va + vb) ** 2 / (va ** 2 / 2 + vb ** 2 / 2)
    same = ev.welch_ttest([1.0, 2.5, 4.0, 7.0], [1.0, 2.5, 4.0, 7.0])
    mpmath.mp.dps = 50
    worst = 0.0
    for t, dof in P_CASES:
        x = mpmath.mpf(dof) / (dof + mpmath.mpf(t) ** 2)
        ref = float(mpmath.betainc(mpmath.mpf(dof) / 2, mpmath.mpf(1) / 2, 0, x, regularized=True))
        worst = max(worst, abs(ev.t_two_sided_p(t, dof) - ref))
    ok = (abs(res.t_stat - t_hand) <= 1e-3 and abs(res.dof - dof_hand) <= 1e-3 and same.t_stat == 0
          and same.p_value == 1 and worst <= 1e-8)
    report(6, ok, f"t {res.t_stat:.4f} dof {res.dof:.4f} (hand {t_hand:.4f}, {dof_hand:.4f}); identical -> "
                  f"t={same.t_stat}, p={same.p_value}; max |p - reference| {worst:.1e} on 20 cases")


def _concordance(scores, labels):
    pos = scores[labels]
    neg = scores[~labels]
    wins = 2 * (pos[:, None] > neg[None, :]).sum() + (pos[:, None] == neg[None, :]).sum()
    return Fraction(int(wins), 2 * len(pos) * len(neg))


def test_7_metrics_oracles():
    g = np.random.default_rng(7)
    checked = mismatches = 0
    for _ in range(500):
        n = int(g.integers(2, 201))
        labels = g.random(n) < g.uniform(0.1, 0.9)
        if labels.all() or not labels.any():
            continue
        scores = np.round(g.random(n), int(g.integers(1, 4)))
        checked += 1
        mismatches += ev.roc_auc(scores, labels) != float(_concordance(scores, labels))
    perfect = ev.metrics([0.95, 0.9, 0.7, 0.2, 0.1], [1, 1, 1, 0, 0]).row()
    ok = mismatches == 0 and perfect == [1.0] * 5
    report(7, ok, f"ROC-AUC == concordance on {checked - mismatches}/{checked} seeded inputs (n <= 200); "
                  f"perfect classifier metrics {perfect}")


# ---------------------------------------------------------------- 8, 9

@pytest.mark.slow
def test_8_evaluation_protocol():
    t0 = time.perf_counter()
    cfg = PipelineConfig(seed=3)
    cfg.attribution.direction = "negative"
    table, truth = synth.generate(synth.SynthConfig(n_features=8, length=2000, rate=0.1,
                                                    culprit_features=["f1", "f5"], seed=3))
    [prep] = pipeline.prepare(cfg, [table])
    assignment = pipeline.cluster(cfg, [prep.training])
    model, _ = pipeline.fit(cfg, assignment, [prep.training], prep.stats)
    scores = pipeline.score(model, prep.scoring)
    ranked = attr.rank_features(pipeline.explain(cfg, model, prep.scoring, scores, pipeline.flag(cfg, scores)))
    names = prep.scoring.feature_names
    everything = attr.RankedFeatures([(n, 1.0) for n in names])
    k = 2
    wins, rows = 0, []
    for rep in range(5):
        order = np.random.default_rng(100 + rep).permutation(names)
        rnd = attr.RankedFeatures([(str(n), 1.0) for n in order])
        top = ev.classify_topk(prep.scoring, truth.flags, ranked, k, seed=rep).f1
        full = ev.classify_topk(prep.scoring, truth.flags, everything, len(names), seed=rep).f1
        chance = ev.classify_topk(prep.scoring, truth.flags, rnd, k, seed=rep).f1
        passed = top >= full - 0.05 and top > chance
        wins += passed
        rows.append(f"{top:.3f}/{full:.3f}/{chance:.3f}")
    elapsed = time.perf_counter() - t0
    report(8, wins >= 3 and elapsed < 300,
           f"top-{k} {ranked.names()[:k]}; F1 top/all/random per rep {', '.join(rows)}; "
           f"{wins}/5 reps pass (majority needed); {elapsed:.0f}s (< 300s)")


def test_9_frequency_normalisation():
    n = 6676
    series = attr.AttributionSeries(np.arange(n).astype("datetime64[s]"), ["ssrd", "strd"], np.zeros((n, 2)),
                                    ["ssrd"] * n, [["ssrd"]] * n, np.ones(n, bool))
    freq = dict(attr.rank_features(series, n_grids=924).entries)["ssrd"]
    report(9, abs(freq - 7.2251) <= 1e-4, f"6676 / 924 = {freq:.6f} (7.2251 +/- 1e-4)")


# ---------------------------------------------------------------- 10

def test_10_cli_determinism(tmp_path):
    from test_cli import chain

    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    files = chain(a)
    assert chain(b) == files
    differing = [f for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    report(10, not differing, f"{len(files)} outputs from 11 subcommands byte-identical on rerun"
                              + (f"; differing: {differing}" if differing else ""))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
