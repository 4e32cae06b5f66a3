"""Acceptance criteria, one test per criterion.

The video-track runs share one extraction of the default synthetic dataset
(both trajectory lengths in a single pass) and a reduced vocabulary; see
``VOCAB`` below.  Expect the whole module to take tens of minutes on one core.
"""
import time

import numpy as np
import pytest

from ifmotion.cli import main
from ifmotion.config import COMPARISONS, SNIPPET_FRACTIONS, RunConfig, VocabConfig
from ifmotion.encode import HistogramProfile
from ifmotion.evaluation import (Audit, global_vocabularies, kin_samples, make_splits, run_allclass, run_comparison,
                                 run_experiment, run_snippet_sweep, synthetic_video_samples)
from ifmotion.ksvm import EXPCHI2, LINEAR, KernelConfig, chi2_distance, dual_objective, gram, kkt_violation, smo_train
from ifmotion.preprocess import PreprocessConfig, butterworth_lowpass, lowpass_single_pass, trim_by_velocity
from ifmotion.synth import SynthConfig, ViewConfig, generate, video_clip
from ifmotion.videofeat.dense import HOF, HOG, DTParams, extract_many
from ifmotion.videofeat.flow import FlowField

from oracles import chi2_brute, qp_dual, random_simplex

# Vocabulary used for the video-track acceptance runs: 100 words from at most
# 10,000 sampled descriptors.  The synthetic clips carry a few hundred
# descriptors each, so the full-size vocabulary would mostly hold near-empty
# words and take hours per fold on one core.
VOCAB = VocabConfig(S=100, cap=10_000, max_iters=50)
L15 = DTParams()
L5 = DTParams.short()
PAIR_NAMES = [f"{a}-{b}" for a, b in COMPARISONS]


def video_cfg(dt, **kw):
    return RunConfig(track="video", dt=dt, vocab=VOCAB, **kw)


def by_name(results):
    return {r.comparison: r for r in results}


@pytest.fixture(scope="module")
def default_data():
    return generate(SynthConfig())


@pytest.fixture(scope="module")
def kin(default_data):
    return kin_samples(default_data.trials)


@pytest.fixture(scope="module")
def kin_loso(kin):
    audit = Audit()
    plan, results = run_experiment(kin, RunConfig(), audit)
    return plan, by_name(results[None]), audit


@pytest.fixture(scope="module")
def video(default_data):
    return synthetic_video_samples(default_data.trials, [L15, L5])


@pytest.fixture(scope="module")
def video_l5(video):
    audit = Audit()
    plan, results = run_experiment(video, video_cfg(L5), audit)
    return plan, by_name(results[None]), audit


# ---------------------------------------------------------------- 1. kernel

def test_criterion_1_kernel_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    for _ in range(200):
        S = int(rng.integers(2, 200))
        h, hb = random_simplex(rng, 2, S, sparsity=float(rng.uniform(0, 0.8)))
        d = chi2_distance(h, hb)
        assert abs(d - chi2_brute(h, hb)) <= 1e-12
        assert 0.0 <= d <= 2.0
    profiles = [HistogramProfile(str(k), {HOG: a, HOF: b}) for k, (a, b) in
                enumerate(zip(random_simplex(rng, 30, 100, 0.5), random_simplex(rng, 30, 100, 0.5)))]
    G = gram(profiles, KernelConfig.fit(profiles))
    assert np.array_equal(G, G.T)
    assert np.linalg.eigvalsh(G).min() >= -1e-8
    assert np.all(np.diag(G) == 1.0)
    assert time.perf_counter() - t0 < 5.0


# ------------------------------------------------------------------- 2. SMO

def test_criterion_2_smo_matches_qp_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    C, tol = 10.0, 1e-3
    for k in range(50):
        kind = LINEAR if k % 2 == 0 else EXPCHI2
        n = int(rng.integers(4, 31))
        y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        y[:2] = (1.0, -1.0)
        if kind == LINEAR:
            X = rng.normal(size=(n, 3)) + 0.7 * y[:, None]
            K = X @ X.T
        else:
            P = [HistogramProfile(str(i), {HOG: h}) for i, h in enumerate(random_simplex(rng, n, 12))]
            K = gram(P, KernelConfig.fit(P))
        model = smo_train(K, y, C=C, tol=tol)
        alpha = model.alpha
        _, f_oracle = qp_dual(K, y, C)
        assert abs(dual_objective(alpha, K, y) - f_oracle) <= 1e-4
        assert np.all(alpha >= 0.0) and np.all(alpha <= C)
        assert abs(float(alpha @ y)) <= 1e-8
        grad = (K * np.outer(y, y)) @ alpha - 1.0
        assert kkt_violation(alpha, grad, y, C) <= tol
    assert time.perf_counter() - t0 < 30.0


# --------------------------------------------------------- 3. filter and trim

def test_criterion_3_filter_and_trimming():
    t0 = time.perf_counter()
    cfg = PreprocessConfig()
    fs = 100.0
    assert np.abs(butterworth_lowpass(np.full(500, 3.0), fs, cfg) / 3.0 - 1.0).max() <= 1e-9
    assert np.abs(lowpass_single_pass(np.full(500, 3.0), fs, cfg) / 3.0 - 1.0).max() <= 1e-9
    n = 4000
    t = np.arange(n) / fs
    y = lowpass_single_pass(np.sin(2 * np.pi * cfg.cutoff_hz * t), fs, cfg)
    A = np.stack([np.sin(2 * np.pi * cfg.cutoff_hz * t), np.cos(2 * np.pi * cfg.cutoff_hz * t)], axis=1)
    coef, *_ = np.linalg.lstsq(A[1000:], y[1000:], rcond=None)
    assert abs(np.hypot(*coef) - 1 / np.sqrt(2)) <= 0.02

    data = generate(SynthConfig(n_subjects=25, trials_per_intention=5, rejection_rate=0.0, seed=99))
    assert len(data.trials) == 500
    for trial, truth in zip(data.trials, data.truths):
        _, w = trim_by_velocity(trial, cfg)
        assert abs(w.t0_index - truth.onset) <= 2
        assert abs(w.tf_index - truth.offset) <= 2
    assert time.perf_counter() - t0 < 10.0


# ---------------------------------------------------- 4. descriptor geometry

def test_criterion_4_descriptor_geometry():
    from scipy import ndimage

    t0 = time.perf_counter()
    view = ViewConfig()
    trial = generate(SynthConfig(n_subjects=1, trials_per_intention=1, rejection_rate=0.0, seed=1)).trials[0]
    frames, flows = video_clip(trial, view)
    assert frames[0].shape == (view.height, view.width) == (100, 160)
    for p, (hog, hof) in zip((L15, L5), extract_many(frames, [L15, L5], flows=flows)):
        assert len(hog) > 0 and len(hog) == len(hof)
        assert hog.vectors.shape[1] == p.n_x * p.n_y * p.n_t * 8
        assert hof.vectors.shape[1] == p.n_x * p.n_y * p.n_t * 9
    assert (L15.n_x * L15.n_y * L15.n_t, L5.n_x * L5.n_y * L5.n_t) == (12, 4)

    # constant flow over a textured 160x100 scene
    rng = np.random.default_rng(0)
    base = ndimage.gaussian_filter(rng.random((100, 160)), 1.5)
    base = (base - base.min()) / np.ptp(base)
    u, v = 1.25, -0.5
    frames = [base] * 20
    flows = [FlowField(np.full(base.shape, u), np.full(base.shape, v))] * 19
    for p, (hog, _) in zip((L15, L5), extract_many(frames, [L15, L5], flows=flows, keep_trajectories=True)):
        assert len(hog.trajectories) > 0
        for tr in hog.trajectories:
            pts = tr.points / tr.scale
            exact = pts[0] + np.outer(np.arange(p.L + 1), [u, v])
            assert np.linalg.norm(pts - exact, axis=1).max() <= 1.0
    assert time.perf_counter() - t0 < 60.0


# ---------------------------------------------------- 5. protocol fidelity

def test_criterion_5_protocol_fidelity(kin, kin_loso, video_l5):
    subject = {s.trial_id: s.subject_id for s in kin}
    plan = make_splits(kin)
    assert len(plan.folds) == 17
    plan.check(list(subject))
    for fold in plan.folds:
        held_out = {subject[i] for i in fold.test}
        assert len(held_out) == 1
        assert not held_out & {subject[i] for i in fold.train}
    for run_plan, _, audit in (kin_loso, video_l5):
        assert run_plan == plan
        assert audit.records
        assert audit.leaks(run_plan) == []

    # The null control runs on the dense-trajectory track: with no intention
    # signal the standardised F_k dual is inseparable and too ill-conditioned
    # for SMO to reach tol within its iteration cap.
    for seed in range(5):
        null = synthetic_video_samples(generate(SynthConfig.null_effect(seed=seed)).trials, [L5])
        audit = Audit()
        null_plan = make_splits(null)
        acc = run_allclass(null, video_cfg(L5), null_plan, audit).mean_accuracy
        assert audit.leaks(null_plan) == []
        assert 0.15 <= acc <= 0.35, (seed, acc)


# ------------------------------------------------------ 6. above chance

def test_criterion_6_above_chance(kin_loso, video_l5):
    for _, results, _ in (kin_loso, video_l5):
        for name in PAIR_NAMES:
            assert results[name].mean_accuracy >= 0.60, name
        assert results["allclass"].mean_accuracy >= 0.40


# ------------------------------------------------- 7. shortening and snippets

def test_criterion_7a_short_trajectories(video, video_l5):
    plan = make_splits(video)
    long_acc = run_allclass(video, video_cfg(L15), plan).mean_accuracy
    assert video_l5[1]["allclass"].mean_accuracy >= long_acc - 0.02


def test_criterion_7b_snippet_trend(video):
    cfg = video_cfg(L5)
    plan = make_splits(video)
    audit = Audit()
    vocabs = global_vocabularies(video, cfg)
    table = run_snippet_sweep(video, SNIPPET_FRACTIONS, cfg, plan, comparisons=[None], audit=audit,
                              vocabs=vocabs)
    assert audit.leaks(plan, exempt={"vocabulary:HOG", "vocabulary:HOF"}) == []
    full, early = table[1.0][0], table[0.4][0]
    assert full.mean_accuracy >= early.mean_accuracy + 0.05
    plain = run_comparison(video, None, cfg, plan, vocabs=vocabs)
    assert full.folds == plain.folds
    assert full.confusion.tobytes() == plain.confusion.tobytes()


def test_criterion_7c_kfold_above_loso(kin, kin_loso):
    _, results = run_experiment(kin, RunConfig(protocol="kfold:10", comparisons="allclass"))
    assert results[None][0].mean_accuracy >= kin_loso[1]["allclass"].mean_accuracy


# ------------------------------------------------------- 8. reproducibility

def test_criterion_8_rerun_from_fingerprint(tmp_path):
    assert main(["evaluate", "--dataset", "synthetic", "--track", "kin", "--out", str(tmp_path / "a")]) == 0
    assert main(["evaluate", "--rerun", str(tmp_path / "a" / "fingerprint.json"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "results.json").read_bytes() == (tmp_path / "b" / "results.json").read_bytes()
