import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ifmotion.config import COMPARISONS, SNIPPET_FRACTIONS, RunConfig, VocabConfig, fingerprint
from ifmotion.errors import DataError
from ifmotion.evaluation import (Audit, ExperimentResult, Sample, global_vocabularies, kin_samples, load_results,
                                 make_splits, report, run_allclass, run_comparison, run_experiment, run_pairwise,
                                 run_snippet_sweep, snippet_filter, tables_text)
from ifmotion.preprocess import INTENTIONS
from ifmotion.videofeat.dense import HOF, HOG, DescriptorSet, DTParams


def id_samples(n_subjects, per_class=2):
    return [Sample(f"s{s}_{c}_{k}", f"s{s}", c) for s in range(n_subjects) for c in INTENTIONS
            for k in range(per_class)]


def blob_samples(n_subjects=3, per_class=3, spread=0.3, seed=0):
    """Kinematic-style samples clustered far apart by intention."""
    rng = np.random.default_rng(seed)
    centres = {c: 10.0 * np.eye(4)[k] for k, c in enumerate(INTENTIONS)}
    return [Sample(f"s{s}_{c}_{k}", f"s{s}", c, centres[c] + rng.normal(0, spread, 4))
            for s in range(n_subjects) for c in INTENTIONS for k in range(per_class)]


def fake_video_samples(n_subjects=3, per_class=3, n_frames=30, L=5, seed=0):
    """Descriptor streams whose late part depends on the intention."""
    rng = np.random.default_rng(seed)
    out = []
    for s in range(n_subjects):
        for ci, c in enumerate(INTENTIONS):
            for k in range(per_class):
                n = 60
                start = rng.integers(0, n_frames - L, n)
                late = (start + L) > 0.6 * (n_frames - 1)
                pair = []
                for ch, dim in ((HOG, 4), (HOF, 3)):
                    v = rng.normal(0, 1.0, (n, dim))
                    v[late, ci % dim] += 4.0 * (1 if ci < dim else -1)
                    pair.append(DescriptorSet(ch, f"s{s}_{c}_{k}", v, start.astype(np.int64), np.ones(n), L))
                out.append(Sample(f"s{s}_{c}_{k}", f"s{s}", c, None, {L: tuple(pair)}, n_frames))
    return out


VIDEO_CFG = RunConfig(track="video", dt=DTParams.short(), vocab=VocabConfig(S=12, cap=5000, max_iters=30))


@pytest.fixture(scope="module")
def kin(small_synth):
    return kin_samples(small_synth.trials)


# ------------------------------------------------------------------ splits

def test_two_subject_loso():
    plan = make_splits(id_samples(2, 1))
    a = tuple(f"s0_{c}_0" for c in INTENTIONS)
    b = tuple(f"s1_{c}_0" for c in INTENTIONS)
    assert [(f.name, f.train, f.test) for f in plan.folds] == [("subject:s0", b, a), ("subject:s1", a, b)]


def test_seventeen_subjects_seventeen_folds():
    samples = id_samples(17)
    plan = make_splits(samples)
    assert len(plan.folds) == 17
    plan.check([s.trial_id for s in samples])
    subj = {s.trial_id: s.subject_id for s in samples}
    for f in plan.folds:
        test_subjects = {subj[i] for i in f.test}
        assert len(test_subjects) == 1
        assert not test_subjects & {subj[i] for i in f.train}


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(INTENTIONS), min_size=10, max_size=80), st.integers(2, 10), st.integers(0, 99))
def test_kfold_partitions(labels, k, seed):
    samples = [Sample(f"t{i}", f"s{i % 3}", c) for i, c in enumerate(labels)]
    plan = make_splits(samples, f"kfold:{k}", seed)
    ids = [s.trial_id for s in samples]
    plan.check(ids)
    assert len(plan.folds) == k
    for f in plan.folds:
        assert sorted(f.train + f.test) == sorted(ids)
    # stratified: per class, fold counts differ by at most one
    for c in INTENTIONS:
        members = {s.trial_id for s in samples if s.intention == c}
        counts = [len(members & set(f.test)) for f in plan.folds]
        assert max(counts) - min(counts) <= 1


def test_kfold_seeded():
    samples = id_samples(3, 4)
    assert make_splits(samples, "kfold:5", 1) == make_splits(samples, "kfold:5", 1)
    assert make_splits(samples, "kfold:5", 1) != make_splits(samples, "kfold:5", 2)


def test_split_preconditions():
    with pytest.raises(DataError):
        make_splits(id_samples(1))
    with pytest.raises(DataError):
        make_splits(id_samples(1, 1), "kfold:10")
    with pytest.raises(DataError):
        make_splits(id_samples(2) + id_samples(1))


# -------------------------------------------------------------- kinematic runs

def test_separable_clusters_identity_confusion():
    samples = blob_samples()
    res = run_allclass(samples, RunConfig(), make_splits(samples))
    np.testing.assert_array_equal(res.confusion, np.diag([9, 9, 9, 9]))
    assert res.mean_accuracy == 1.0


def test_result_bookkeeping(kin):
    cfg = RunConfig()
    plan = make_splits(kin)
    res = run_allclass(kin, cfg, plan)
    assert res.confusion.sum() == len(kin)
    for c, row in zip(res.classes, res.confusion):
        assert row.sum() == sum(s.intention == c for s in kin)
    assert abs(res.mean_accuracy - np.mean([f["correct"] / f["n_test"] for f in res.folds])) < 1e-12
    assert res.fingerprint == fingerprint(cfg)
    pair = run_pairwise(kin, ("pouring", "placing"), cfg, plan)
    assert pair.confusion.shape == (2, 2)
    assert pair.confusion.sum() == sum(s.intention in ("pouring", "placing") for s in kin)


def test_leakage_canary(kin):
    twin = [Sample("dup_" + s.trial_id, "s99", s.intention, s.features.copy()) for s in kin if s.subject_id == "s01"]
    samples = kin + twin
    res = run_allclass(samples, RunConfig(), make_splits(samples))
    fold = [f for f in res.folds if f["name"] == "subject:s99"][0]
    assert fold["accuracy"] == 1.0


def permuted(samples, classes, seed):
    rng = np.random.default_rng(seed)
    keep = [s for s in samples if s.intention in classes]
    labels = [s.intention for s in keep]
    labels = [labels[i] for i in rng.permutation(len(labels))]
    return [replace(s, intention=lab) for s, lab in zip(keep, labels)]


def test_permuted_labels_pairwise_chance(kin):
    pair = ("pouring", "placing")
    accs = []
    for seed in range(10):
        samples = permuted(kin, pair, seed)
        accs.append(run_pairwise(samples, pair, RunConfig(), make_splits(samples)).mean_accuracy)
    assert 0.4 <= np.mean(accs) <= 0.6


def test_permuted_labels_allclass_chance(kin):
    accs = []
    for seed in range(10):
        samples = permuted(kin, INTENTIONS, seed)
        accs.append(run_allclass(samples, RunConfig(), make_splits(samples)).mean_accuracy)
    assert abs(np.mean(accs) - 0.25) <= 0.1


def test_missing_class_names_fold_and_class():
    samples = id_samples(2, 1)
    samples = [replace(s, features=np.ones(3) * k) for k, s in enumerate(samples)
               if not (s.subject_id == "s1" and s.intention == "placing")]
    with pytest.raises(DataError, match=r"subject:s0.*placing"):
        run_allclass(samples, RunConfig(), make_splits(samples))


def test_pairwise_needs_two_classes(kin):
    with pytest.raises(DataError):
        run_pairwise(kin, ("pouring", "pouring"), RunConfig(), make_splits(kin))


def test_kin_audit_clean(kin):
    audit = Audit()
    plan, results = run_experiment(kin, RunConfig(), audit)
    assert len(results[None]) == 7
    assert audit.leaks(plan) == []
    comps = {r[2] for r in audit.records}
    assert comps == {"standardizer", "svm"}
    audit.record("allclass", plan.folds[0].name, "svm", plan.folds[0].test[:1])
    assert len(audit.leaks(plan)) == 1


# ----------------------------------------------------------------- snippets

def dset(start, L, n_dim=2):
    start = np.asarray(start, dtype=np.int64)
    return DescriptorSet(HOG, "t", np.arange(len(start) * n_dim, dtype=float).reshape(-1, n_dim),
                         start, np.ones(len(start)), L)


def test_snippet_full_is_identity():
    ds = dset([0, 3, 7, 9], 5)
    out = snippet_filter(ds, 1.0, 15)
    np.testing.assert_array_equal(out.vectors, ds.vectors)
    np.testing.assert_array_equal(out.start_frames, ds.start_frames)


def test_snippet_short_video_empty():
    ds = dset([0, 0, 0], 15)
    assert len(snippet_filter(ds, 0.4, 16)) == 0
    assert len(snippet_filter(ds, 1.0, 16)) == 3


def test_snippet_bad_fraction():
    with pytest.raises(DataError):
        snippet_filter(dset([0], 5), 0.0, 20)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 40), min_size=0, max_size=60), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_snippet_nesting(starts, p, q):
    p, q = sorted((p, q))
    ds = dset(starts, 5)
    small = {tuple(v) for v in snippet_filter(ds, p, 46).vectors}
    large = {tuple(v) for v in snippet_filter(ds, q, 46).vectors}
    assert small <= large


def test_snippet_sweep_table_shape():
    samples = fake_video_samples()
    plan = make_splits(samples)
    table = run_snippet_sweep(samples, SNIPPET_FRACTIONS, VIDEO_CFG, plan)
    assert list(table) == list(SNIPPET_FRACTIONS)
    for rs in table.values():
        assert [r.comparison for r in rs] == [f"{a}-{b}" for a, b in COMPARISONS] + ["allclass"]
    text = tables_text(table, VIDEO_CFG)
    body = [line for line in text.splitlines() if line and not line.startswith("#")]
    assert len(body) == 8 and body[0].count("%") == 7
    # the designed late divergence is invisible early on
    assert table[1.0][-1].mean_accuracy >= table[0.4][-1].mean_accuracy


def test_snippet_full_column_matches_plain_global_run():
    samples = fake_video_samples(seed=1)
    plan = make_splits(samples)
    vocabs = global_vocabularies(samples, VIDEO_CFG)
    table = run_snippet_sweep(samples, (0.5, 1.0), VIDEO_CFG, plan, comparisons=[None], vocabs=vocabs)
    plain = run_comparison(samples, None, VIDEO_CFG, plan, vocabs=vocabs)
    assert table[1.0][0].folds == plain.folds
    np.testing.assert_array_equal(table[1.0][0].confusion, plain.confusion)


def test_video_audit_records_vocabulary():
    samples = fake_video_samples(n_subjects=2, per_class=2, seed=2)
    audit = Audit()
    plan = make_splits(samples)
    run_allclass(samples, VIDEO_CFG, plan, audit)
    assert {r[2] for r in audit.records} == {"vocabulary:HOG", "vocabulary:HOF", "normalizers", "svm"}
    assert audit.leaks(plan) == []


def test_snippet_needs_video_track(kin):
    with pytest.raises(DataError):
        run_snippet_sweep(kin, (1.0,), RunConfig(), make_splits(kin))


# ------------------------------------------------------------------ report

def test_single_row_table():
    samples = blob_samples(2, 2)
    cfg = RunConfig(comparisons="pair:pouring-placing")
    _, results = run_experiment(samples, cfg)
    body = [line for line in tables_text(results, cfg).splitlines() if line and not line.startswith("#")]
    assert len(body) == 2 and body[1].startswith("Pouring vs. Placing")


def test_report_round_trip(tmp_path):
    samples = blob_samples(3, 2, spread=3.0)
    cfg = RunConfig()
    plan, results = run_experiment(samples, cfg)
    doc = report(results, cfg, tmp_path, plan)
    back = load_results(tmp_path / "results.json")
    assert [r.mean_accuracy for r in back[None]] == [r.mean_accuracy for r in results[None]]
    stored = json.loads((tmp_path / "fingerprint.json").read_text())
    assert stored["fingerprint"] == fingerprint(cfg) == doc["fingerprint"]
    assert RunConfig.from_dict(stored["config"]) == cfg
    csv = (tmp_path / "confusion_allclass.csv").read_text().splitlines()
    assert csv[0] == f"# fingerprint {fingerprint(cfg)}" and len(csv) == 6
    assert fingerprint(cfg) in (tmp_path / "tables.txt").read_text()


def test_result_json_round_trip():
    r = ExperimentResult("pouring-placing", ("pouring", "placing"), "loso",
                         [{"name": "subject:s1", "n_train": 4, "n_test": 2, "correct": 1, "accuracy": 0.5}],
                         np.array([[1, 0], [1, 0]]), "abc", 0.6)
    back = ExperimentResult.from_json(json.loads(json.dumps(r.to_json())))
    assert back.mean_accuracy == 0.5 and back.fraction == 0.6
    np.testing.assert_array_equal(back.confusion, r.confusion)
