"""Evaluation protocols: splits, per-fold pipelines, snippets and reports.

Every fitted statistic (vocabulary, chi-square normalisers, feature
standardisation, SVM) is estimated from the training part of a fold.  The
one exception is the snippet protocol, which quantises every trial against
a single vocabulary built from all full-length videos.  An :class:`Audit`
records which trial ids each fitted component saw so leakage can be checked.
"""
from __future__ import annotations

import json
import math
import multiprocessing as mp
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encode, ksvm
from .config import (ALLCLASS, COMPARISONS, FORMAT_VERSION, RunConfig, comparison_name,
                     fingerprint, parse_comparisons, parse_protocol)
from .errors import DataError
from .kinfeat import Standardizer, feature_block
from .preprocess import INTENTIONS, PreprocessConfig, preprocess_trial
from .videofeat.dense import CHANNELS, DescriptorSet, extract_many


# ------------------------------------------------------------------ samples

@dataclass
class Sample:
    """One trial as the evaluator sees it.

    ``descriptors`` maps a trajectory length ``L`` to the ``(HOG, HOF)``
    descriptor sets of the trial's video; ``n_frames`` is that video's
    length.
    """

    trial_id: str
    subject_id: str
    intention: str
    features: np.ndarray | None = None
    descriptors: dict = field(default_factory=dict)
    n_frames: int = 0


def kin_samples(trials, cfg: PreprocessConfig = PreprocessConfig(), block="k"):
    out = []
    for trial in trials:
        trimmed, _ = preprocess_trial(trial, cfg)
        fb = feature_block(trimmed, block, cfg)
        out.append(Sample(trial.trial_id, trial.subject_id, trial.intention, fb.flattened.copy()))
    return out


def _dt_family(params):
    params = list(params)
    seen = {}
    for p in params:
        seen.setdefault(p.L, p)
    return list(seen.values())


def video_sample(trial_id, subject_id, intention, frames, flows, params):
    """Descriptors of one video for every parameter set in ``params``."""
    params = _dt_family(params)
    sets = extract_many(frames, params, flows=flows, trial_id=trial_id)
    return Sample(trial_id, subject_id, intention, None,
                  {p.L: pair for p, pair in zip(params, sets)}, len(frames))


def synthetic_video_samples(trials, params, view=None, cfg: PreprocessConfig = PreprocessConfig(), jobs=1):
    """Render every synthetic trial and extract its descriptors."""
    from .synth import ViewConfig

    view = view or ViewConfig()
    _SHARED["video"] = (list(trials), _dt_family(params), view, cfg)
    try:
        return _pmap(_synthetic_video_one, range(len(trials)), jobs)
    finally:
        _SHARED.pop("video", None)


def _synthetic_video_one(k):
    from .synth import video_clip

    trials, params, view, cfg = _SHARED["video"]
    t = trials[k]
    frames, flows = video_clip(t, view, cfg)
    return video_sample(t.trial_id, t.subject_id, t.intention, frames, flows, params)


# ------------------------------------------------------------ parallelism

_SHARED = {}


def available_jobs():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _pmap(fn, items, jobs):
    """Ordered map; forks ``jobs`` workers that inherit ``_SHARED``."""
    items = list(items)
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with mp.get_context("fork").Pool(min(jobs, len(items))) as pool:
        return pool.map(fn, items, chunksize=1)


# ------------------------------------------------------------------ splits

@dataclass(frozen=True)
class Fold:
    name: str
    train: tuple
    test: tuple


@dataclass(frozen=True)
class SplitPlan:
    protocol: str
    folds: tuple

    def check(self, ids):
        """Raise unless the folds partition ``ids`` with disjoint train/test."""
        ids = list(ids)
        seen = []
        for f in self.folds:
            if set(f.train) & set(f.test):
                raise DataError(f"fold {f.name}: train and test overlap")
            seen.extend(f.test)
        if sorted(seen) != sorted(ids):
            raise DataError("test sets do not partition the trials")


def make_splits(samples, protocol="loso", seed=0) -> SplitPlan:
    """Leave-one-subject-out or intention-stratified k-fold splits.

    ``protocol`` is ``"loso"``, ``"kfold:<k>"`` or a ``(name, k)`` tuple.
    """
    name, k = parse_protocol(protocol) if isinstance(protocol, str) else protocol
    ids = [s.trial_id for s in samples]
    if len(set(ids)) != len(ids):
        raise DataError("trial ids must be unique")
    if name == "loso":
        subjects = sorted({s.subject_id for s in samples})
        if len(subjects) < 2:
            raise DataError("leave-one-subject-out needs at least 2 subjects")
        folds = []
        for subj in subjects:
            test = tuple(s.trial_id for s in samples if s.subject_id == subj)
            train = tuple(s.trial_id for s in samples if s.subject_id != subj)
            folds.append(Fold(f"subject:{subj}", train, test))
        return SplitPlan("loso", tuple(folds))
    if k > len(samples):
        raise DataError(f"k-fold needs k <= number of trials ({k} > {len(samples)})")
    rng = np.random.default_rng(seed)
    order = []
    labels = [s.intention for s in samples]
    for c in INTENTIONS + tuple(sorted(set(labels) - set(INTENTIONS))):
        idx = [i for i, lab in enumerate(labels) if lab == c]
        order.extend(np.asarray(idx, dtype=np.int64)[rng.permutation(len(idx))].tolist())
    assign = np.empty(len(samples), dtype=np.int64)
    assign[order] = np.arange(len(order)) % k
    folds = []
    for f in range(k):
        test = tuple(ids[i] for i in range(len(ids)) if assign[i] == f)
        train = tuple(ids[i] for i in range(len(ids)) if assign[i] != f)
        folds.append(Fold(f"fold:{f + 1}", train, test))
    return SplitPlan(f"kfold:{k}", tuple(folds))


# ------------------------------------------------------------------- audit

class Audit:
    """Records the trial ids each fitted component was estimated from."""

    def __init__(self):
        self.records = []  # (comparison, fold, component, ids)

    def record(self, comparison, fold, component, ids):
        self.records.append((comparison, fold, component, tuple(ids)))

    def merge(self, records):
        self.records.extend(records)

    def leaks(self, plan: SplitPlan, exempt=()):
        """``(comparison, fold, component, leaked ids)`` for every touch of test data."""
        tests = {f.name: set(f.test) for f in plan.folds}
        out = []
        for cmp_, fold, comp, ids in self.records:
            if comp in exempt or fold not in tests:
                continue
            bad = sorted(tests[fold] & set(ids))
            if bad:
                out.append((cmp_, fold, comp, bad))
        return out


# ------------------------------------------------------------------ results

@dataclass
class ExperimentResult:
    comparison: str
    classes: tuple
    protocol: str
    folds: list  # dicts: name, n_train, n_test, correct, accuracy
    confusion: np.ndarray  # rows: true class, columns: predicted class
    fingerprint: str = ""
    fraction: float | None = None

    @property
    def accuracies(self):
        return [f["accuracy"] for f in self.folds]

    @property
    def mean_accuracy(self):
        return float(np.mean(self.accuracies)) if self.folds else float("nan")

    def to_json(self):
        d = {
            "comparison": self.comparison,
            "classes": list(self.classes),
            "protocol": self.protocol,
            "folds": self.folds,
            "mean_accuracy": self.mean_accuracy,
            "confusion": self.confusion.astype(int).tolist(),
            "fingerprint": self.fingerprint,
        }
        if self.fraction is not None:
            d["fraction"] = self.fraction
        return d

    @classmethod
    def from_json(cls, d):
        return cls(d["comparison"], tuple(d["classes"]), d["protocol"], list(d["folds"]),
                   np.asarray(d["confusion"], dtype=int), d.get("fingerprint", ""), d.get("fraction"))


# --------------------------------------------------------------- pipelines

def snippet_filter(ds: DescriptorSet, fraction, n_frames) -> DescriptorSet:
    """Keep descriptors whose trajectory ends by frame ``floor(fraction * (T - 1))``."""
    if not 0 < fraction <= 1:
        raise DataError("snippet fraction must lie in (0, 1]")
    limit = math.floor(fraction * (n_frames - 1))
    return ds.select(ds.end_frames <= limit)


def build_vocabularies(descriptor_pairs, cfg: RunConfig):
    """One vocabulary per channel from an iterable of ``(HOG, HOF)`` pairs."""
    pairs = list(descriptor_pairs)
    vocabs = {}
    for k, ch in enumerate(CHANNELS):
        sample = encode.subsample((p[k] for p in pairs), cfg.vocab.cap, cfg.vocab.seed)
        if len(sample) < cfg.vocab.S:
            raise DataError(f"{ch}: only {len(sample)} descriptors for a vocabulary of size {cfg.vocab.S}")
        vocabs[ch] = encode.kmeans(sample, cfg.vocab.S, cfg.vocab.seed, cfg.vocab.max_iters, channel=ch)
    return vocabs


def _descriptors(sample: Sample, L, fraction=None):
    if L not in sample.descriptors:
        raise DataError(f"trial {sample.trial_id!r} has no descriptors for L={L}")
    pair = sample.descriptors[L]
    if fraction is None or fraction >= 1:
        return pair
    return tuple(snippet_filter(ds, fraction, sample.n_frames) for ds in pair)


def _profiles(samples, vocabs, L, fraction=None):
    return [encode.encode(s.trial_id, _descriptors(s, L, fraction), vocabs, s.subject_id, s.intention)
            for s in samples]


def _fit_predict(train, test, classes, cfg: RunConfig, log, vocabs=None, fraction=None):
    """Fit the configured pipeline on ``train`` and label ``test``."""
    ids = [s.trial_id for s in train]
    labels = [s.intention for s in train]
    if cfg.track == "kin":
        X = np.stack([s.features for s in train])
        std = Standardizer().fit(X)
        log("standardizer", ids)
        Xtr = std.transform(X)
        Xte = std.transform(np.stack([s.features for s in test]))
        kcfg = ksvm.KernelConfig(ksvm.LINEAR)
        K = ksvm.gram(Xtr, kcfg)
        K_test = ksvm.gram(Xte, kcfg, Xtr)
    else:
        L = cfg.dt.L
        if vocabs is None:
            vocabs = build_vocabularies((_descriptors(s, L) for s in train), cfg)
            for ch in CHANNELS:
                log(f"vocabulary:{ch}", ids)
        ptr = _profiles(train, vocabs, L, fraction)
        pte = _profiles(test, vocabs, L, fraction)
        kcfg = ksvm.KernelConfig.fit(ptr, list(CHANNELS), seed=cfg.seed)
        log("normalizers", ids)
        K = ksvm.gram(ptr, kcfg)
        K_test = ksvm.gram(pte, kcfg, ptr)
    model = ksvm.ovo_train(K, labels, classes, cfg.svm.C, cfg.svm.tol, kernel=kcfg, train_ids=ids)
    log("svm", ids)
    return ksvm.ovo_predict(model, K_test)


def _fold_job(k):
    samples, plan, pair, cfg, vocabs, fraction = _SHARED["fold"]
    fold = plan.folds[k]
    classes = tuple(pair) if pair else INTENTIONS
    by_id = {s.trial_id: s for s in samples}
    keep = set(classes)
    train = [by_id[i] for i in fold.train if by_id[i].intention in keep]
    test = [by_id[i] for i in fold.test if by_id[i].intention in keep]
    present = {s.intention for s in train}
    for c in classes:
        if c not in present:
            raise DataError(f"fold {fold.name}: training set has no trials of class {c!r}")
    records = []
    cmp_ = comparison_name(pair)

    def log(component, ids):
        records.append((cmp_, fold.name, component, tuple(ids)))

    if not test:
        return fold.name, len(train), [], [], records
    pred = _fit_predict(train, test, classes, cfg, log, vocabs, fraction)
    return fold.name, len(train), [s.intention for s in test], pred, records


def run_comparison(samples, pair, cfg: RunConfig, plan: SplitPlan, audit: Audit | None = None,
                   vocabs=None, fraction=None, jobs=1) -> ExperimentResult:
    """One comparison (a pair of intentions, or ``None`` for all-class) over ``plan``.

    ``vocabs`` fixes a shared vocabulary (snippet protocol); ``fraction``
    truncates every video to its leading portion before encoding.
    """
    classes = tuple(pair) if pair else INTENTIONS
    _SHARED["fold"] = (samples, plan, pair, cfg, vocabs, fraction)
    try:
        outputs = _pmap(_fold_job, range(len(plan.folds)), jobs)
    finally:
        _SHARED.pop("fold", None)
    pos = {c: i for i, c in enumerate(classes)}
    confusion = np.zeros((len(classes), len(classes)), dtype=int)
    folds = []
    for name, n_train, truth, pred, records in outputs:
        if audit is not None:
            audit.merge(records)
        if not truth:
            continue
        correct = int(sum(t == p for t, p in zip(truth, pred)))
        for t, p in zip(truth, pred):
            confusion[pos[t], pos[p]] += 1
        folds.append({"name": name, "n_train": n_train, "n_test": len(truth), "correct": correct,
                      "accuracy": correct / len(truth)})
    return ExperimentResult(comparison_name(pair), classes, plan.protocol, folds, confusion,
                            fingerprint(cfg), fraction)


def run_pairwise(samples, pair, cfg: RunConfig, plan: SplitPlan, audit=None, jobs=1):
    if pair is None or len(pair) != 2 or pair[0] == pair[1]:
        raise DataError("run_pairwise needs two distinct intentions")
    return run_comparison(samples, tuple(pair), cfg, plan, audit, jobs=jobs)


def run_allclass(samples, cfg: RunConfig, plan: SplitPlan, audit=None, jobs=1):
    return run_comparison(samples, None, cfg, plan, audit, jobs=jobs)


def global_vocabularies(samples, cfg: RunConfig):
    """Vocabulary built from every trial's full-length descriptors."""
    return build_vocabularies((_descriptors(s, cfg.dt.L) for s in samples), cfg)


def run_snippet_sweep(samples, fractions, cfg: RunConfig, plan: SplitPlan, comparisons=None,
                      audit=None, vocabs=None, jobs=1):
    """``{fraction: [ExperimentResult per comparison]}`` with one global vocabulary.

    The same split plan is reused for every fraction.
    """
    if cfg.track != "video":
        raise DataError("the snippet protocol applies to the video track")
    comparisons = list(COMPARISONS) + [None] if comparisons is None else list(comparisons)
    vocabs = vocabs or global_vocabularies(samples, cfg)
    table = {}
    for p in fractions:
        table[float(p)] = [run_comparison(samples, pair, cfg, plan, audit, vocabs, float(p), jobs)
                           for pair in comparisons]
    return table


def run_experiment(samples, cfg: RunConfig, audit: Audit | None = None, jobs=1):
    """Everything ``cfg`` asks for: the comparisons, plus the snippet sweep if set."""
    plan = make_splits(samples, cfg.protocol, cfg.seed)
    comparisons = parse_comparisons(cfg.comparisons)
    if cfg.snippet:
        return plan, run_snippet_sweep(samples, cfg.snippet, cfg, plan, comparisons, audit, jobs=jobs)
    return plan, {None: [run_comparison(samples, pair, cfg, plan, audit, jobs=jobs) for pair in comparisons]}


# ------------------------------------------------------------------ report

def _fmt_pct(x):
    return "   n/a" if x != x else f"{100 * x:6.2f}"


def tables_text(results_by_fraction, cfg: RunConfig):
    fp = fingerprint(cfg)
    lines = [f"# fingerprint {fp}", f"# track {cfg.track}  protocol {cfg.protocol}  L={cfg.dt.L}  "
             f"n_t={cfg.dt.n_t}  S={cfg.vocab.S}  C={cfg.svm.C}", ""]
    fractions = list(results_by_fraction)
    names = []
    for res in results_by_fraction.values():
        for r in res:
            if r.comparison not in names:
                names.append(r.comparison)
    width = max(len(_label(n)) for n in names) + 2
    if fractions == [None]:
        lines.append(f"{'Comparison':<{width}}{'Accuracy %':>11}")
        for r in results_by_fraction[None]:
            lines.append(f"{_label(r.comparison):<{width}}{_fmt_pct(r.mean_accuracy):>11}")
    else:
        head = "".join(f"{int(round(100 * p)):>7d}%" for p in fractions)
        lines.append(f"{'Comparison':<{width}}{head}")
        for n in names:
            row = ""
            for p in fractions:
                hit = [r for r in results_by_fraction[p] if r.comparison == n]
                row += f"{_fmt_pct(hit[0].mean_accuracy):>8}" if hit else f"{'':>8}"
            lines.append(f"{_label(n):<{width}}{row}")
    return "\n".join(lines) + "\n"


def _label(name):
    if name == ALLCLASS:
        return "All-class"
    a, b = name.split("-")
    return f"{a.capitalize()} vs. {b.capitalize()}"


def results_document(results_by_fraction, cfg: RunConfig, plan: SplitPlan | None = None):
    doc = {"format_version": FORMAT_VERSION, "fingerprint": fingerprint(cfg), "config": cfg.to_dict()}
    if plan is not None:
        doc["protocol"] = {"name": plan.protocol, "folds": [f.name for f in plan.folds]}
    if list(results_by_fraction) == [None]:
        doc["results"] = [r.to_json() for r in results_by_fraction[None]]
    else:
        doc["snippet"] = [{"fraction": p, "results": [r.to_json() for r in rs]}
                          for p, rs in results_by_fraction.items()]
    return doc


def report(results_by_fraction, cfg: RunConfig, out_dir, plan: SplitPlan | None = None, inputs=None):
    """Write ``results.json``, ``tables.txt``, ``confusion_<comparison>.csv`` and ``fingerprint.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = results_document(results_by_fraction, cfg, plan)
    (out / "results.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")
    (out / "tables.txt").write_text(tables_text(results_by_fraction, cfg))
    fp = fingerprint(cfg)
    for p, rs in results_by_fraction.items():
        for r in rs:
            suffix = "" if p is None else f"_p{int(round(100 * p)):03d}"
            rows = [f"# fingerprint {fp}", "true\\pred," + ",".join(r.classes)]
            rows += [f"{c}," + ",".join(str(int(v)) for v in row) for c, row in zip(r.classes, r.confusion)]
            (out / f"confusion_{r.comparison}{suffix}.csv").write_text("\n".join(rows) + "\n")
    meta = {"fingerprint": fp, "format_version": FORMAT_VERSION, "config": cfg.to_dict(), "inputs": inputs or {}}
    (out / "fingerprint.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return doc


def load_results(path):
    """Re-read ``results.json`` into ``{fraction: [ExperimentResult]}``."""
    doc = json.loads(Path(path).read_text())
    if "results" in doc:
        return {None: [ExperimentResult.from_json(r) for r in doc["results"]]}
    return {s["fraction"]: [ExperimentResult.from_json(r) for r in s["results"]] for s in doc["snippet"]}
