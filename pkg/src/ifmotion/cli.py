"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numerical non-convergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, encode, evaluation, ksvm, synth
from .config import (RunConfig, canonical_json, effective_config, file_digest, fingerprint,
                     synthetic_dataset_spec)
from .encode import VOCAB_MAGIC
from .errors import ConfigError, ConvergenceError, DataError, IfmError
from .kinfeat import Standardizer, feature_block
from .preprocess import INTENTIONS, PreprocessConfig, load_trials, preprocess_trial, save_trials
from .videofeat import io as vio
from .videofeat.dense import DTParams, extract
from .videofeat.flow import FLOW_MAGIC, estimate_flow

log = logging.getLogger("ifmotion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONVERGENCE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _announce(command, settings):
    fp = hashlib.sha256(canonical_json({"command": command, **settings}).encode()).hexdigest()
    sys.stderr.write(f"fingerprint {fp}\n")
    return fp


def _out_dir(path):
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _jsonl_rows(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
    return rows


def _preprocess_config(args):
    return PreprocessConfig(cutoff_hz=args.cutoff, epsilon_mm_s=args.epsilon, resample_count=args.resample,
                            filter_order=args.order)


def _dt_params(L, nt):
    if nt in (None, "auto"):
        nt = 1 if L == 5 else 3
    return DTParams(L=int(L), n_t=int(nt))


# ----------------------------------------------------------------- commands

def cmd_synth(args):
    if args.config and not Path(args.config).exists():
        raise DataError(f"no such file: {args.config}")
    values = synth.parse_config_text(Path(args.config).read_text()) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    cfg, view, extras = synth.config_from_mapping(values)
    write_frames = bool(extras.get("write_frames", True)) and not args.no_frames
    write_flows = bool(extras.get("write_flows", False)) or args.write_flows
    _announce("synth", {"synth": cfg.to_dict(), "frames": write_frames, "flows": write_flows})
    data = synth.synth_dataset(cfg, args.out, view, write_frames=write_frames, write_flows=write_flows)
    print(f"wrote {len(data.trials)} trials to {args.out}")


def cmd_preprocess(args):
    cfg = _preprocess_config(args)
    _announce("preprocess", {"preprocess": vars(cfg)})
    trials = load_trials(args.input)
    out = [preprocess_trial(t, cfg)[0] for t in trials]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_trials(out, args.out)
    print(f"preprocessed {len(out)} trials")


def cmd_extract_kin(args):
    cfg = PreprocessConfig()
    _announce("extract-kin", {"block": args.block, "preprocess": vars(cfg), "trimmed": not args.raw})
    trials = load_trials(args.input)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as fh:
        for t in trials:
            # trials are trimmed here unless the input was already preprocessed
            trimmed = t if args.raw else preprocess_trial(t, cfg)[0]
            fb = feature_block(trimmed, args.block, cfg)
            fh.write(json.dumps({"trial_id": t.trial_id, "subject_id": t.subject_id, "intention": t.intention,
                                 "block": fb.name, "values": fb.flattened.tolist()}) + "\n")
    print(f"wrote {len(trials)} feature vectors")


def _synthetic_source(manifest_path):
    """Trials of a synthetic dataset directory, or None if not synthetic."""
    base = Path(manifest_path).parent
    if (base / "synth.toml").exists() and (base / "trials.jsonl").exists():
        cfg, view, _ = synth.config_from_mapping(synth.parse_config_text((base / "synth.toml").read_text()))
        return {t.trial_id: t for t in load_trials(base / "trials.jsonl")}, view
    return None


def _entry_flows(entry, frames, mode, source):
    if mode in ("auto", "files") and entry.flow_dir is not None:
        return entry.flows()
    if mode == "files":
        raise DataError(f"trial {entry.trial_id!r}: manifest lists no flow_dir")
    if mode in ("auto", "synthetic") and source is not None and entry.trial_id in source[0]:
        trimmed, _ = preprocess_trial(source[0][entry.trial_id])
        return synth.render_flow(trimmed, source[1])
    if mode == "synthetic":
        raise DataError(f"trial {entry.trial_id!r}: not part of a synthetic dataset")
    return [estimate_flow(frames[i], frames[i + 1]) for i in range(len(frames) - 1)]


def _video_from_dir(path, flows_dir):
    frames = vio.read_frame_dir(path)
    if flows_dir:
        flows = vio.read_flow_dir(flows_dir)
    else:
        bins = sorted(Path(path).glob("*.bin"))
        flows = vio.read_flow_dir(path) if bins else None
    return frames, flows


def cmd_extract_dt(args):
    p = _dt_params(args.L, args.nt)
    _announce("extract-dt", {"L": p.L, "n_t": p.n_t, "flow": args.flow})
    src = Path(args.input)
    if src.is_dir():
        frames, flows = _video_from_dir(src, args.flows)
        hog, hof = extract(frames, p, flows=flows, trial_id=args.trial_id or src.name)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        vio.write_descriptors(args.out, [hog, hof])
        print(f"wrote {len(hog)} descriptors per channel")
        return
    entries = vio.load_manifest(src)
    out = _out_dir(args.out)
    source = _synthetic_source(src)
    total = 0
    for e in entries:
        frames = e.frames()
        flows = _entry_flows(e, frames, args.flow, source)
        hog, hof = extract(frames, p, flows=flows, trial_id=e.trial_id)
        vio.write_descriptors(out / f"{e.trial_id}.bin", [hog, hof])
        total += len(hog)
    print(f"wrote descriptors of {len(entries)} videos ({total} per channel) to {out}")


def _descriptor_files(path):
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.bin"))
        if not files:
            raise DataError(f"{path}: no descriptor files")
        return files
    if not path.exists():
        raise DataError(f"no such file: {path}")
    return [path]


def cmd_build_vocab(args):
    cfg = replace(RunConfig().vocab, S=args.S, cap=args.cap, seed=args.seed, max_iters=args.max_iters)
    _announce("build-vocab", {"vocab": vars(cfg)})
    pairs = [vio.descriptor_pair(vio.read_descriptors(f)) for f in _descriptor_files(args.descriptors)]
    vocabs = evaluation.build_vocabularies(pairs, RunConfig(vocab=cfg))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    encode.write_vocabularies(args.out, [vocabs[c] for c in ("HOG", "HOF")])
    print(f"wrote {cfg.S}-word HOG and HOF vocabularies")


def cmd_encode(args):
    _announce("encode", {"snippet": args.snippet})
    vocabs = encode.read_vocabularies(args.vocab)
    labels = {}
    if args.manifest:
        labels = {e.trial_id: e for e in vio.load_manifest(args.manifest)}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(args.out, "w") as fh:
        for f in _descriptor_files(args.descriptors):
            pair = vio.descriptor_pair(vio.read_descriptors(f))
            tid = pair[0].trial_id
            if args.snippet is not None:
                if args.n_frames is None and tid not in labels:
                    raise DataError("--snippet needs --manifest or --n-frames to know the video length")
                T = args.n_frames or len(labels[tid].frames())
                pair = tuple(evaluation.snippet_filter(ds, args.snippet, T) for ds in pair)
            e = labels.get(tid)
            prof = encode.encode(tid, pair, vocabs, e.subject_id if e else "", e.intention if e else "")
            fh.write(json.dumps(prof.to_json()) + "\n")
            n += 1
    print(f"encoded {n} trials")


def cmd_train(args):
    if bool(args.histograms) == bool(args.features):
        raise UsageError("train: give exactly one of --histograms or --features")
    kernel = args.kernel or ("expchi2" if args.histograms else "linear")
    _announce("train", {"kernel": kernel, "C": args.C, "tol": args.tol})
    if args.histograms:
        if kernel != ksvm.EXPCHI2:
            raise UsageError("train: histograms use --kernel expchi2")
        profiles = [encode.HistogramProfile.from_json(r) for r in _jsonl_rows(args.histograms)]
        labels = [p.intention for p in profiles]
        ids = [p.trial_id for p in profiles]
        kcfg = ksvm.KernelConfig.fit(profiles)
        K = ksvm.gram(profiles, kcfg)
        support = {c: np.stack([p.histograms[c] for p in profiles]) for c in kcfg.channels}
        extra = {"train_ids": ids}
    else:
        if kernel != ksvm.LINEAR:
            raise UsageError("train: feature vectors use --kernel linear")
        rows = _jsonl_rows(args.features)
        X = np.asarray([r["values"] for r in rows], dtype=float)
        labels = [r["intention"] for r in rows]
        ids = [r["trial_id"] for r in rows]
        std = Standardizer().fit(X)
        Xs = std.transform(X)
        kcfg = ksvm.KernelConfig(ksvm.LINEAR)
        K = ksvm.gram(Xs, kcfg)
        support = Xs
        extra = {"train_ids": ids, "mean": std.mean_.tolist(), "scale": std.scale_.tolist()}
    if any(lab not in INTENTIONS for lab in labels):
        raise DataError("every training row needs an intention label")
    classes = [c for c in INTENTIONS if c in set(labels)]
    model = ksvm.ovo_train(K, labels, classes, args.C, args.tol, kernel=kcfg, train_ids=ids)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ksvm.save_model(args.out, model, support, extra)
    print(f"trained {len(model.pairs)} pairwise models on {len(labels)} trials")


def _dataset_spec(arg):
    """Resolve ``--dataset`` into a dataset description for the config."""
    if arg.startswith("synthetic"):
        _, _, path = arg.partition(":")
        values = synth.parse_config_text(Path(path).read_text()) if path else {}
        cfg, view, _ = synth.config_from_mapping(values)
        return synthetic_dataset_spec(cfg, view)
    p = Path(arg)
    if not p.exists():
        raise DataError(f"no such file or directory: {p}")
    p = p.resolve()
    spec = {"source": "files", "path": str(p)}
    files = [p / "trials.jsonl", p / "manifest.jsonl"] if p.is_dir() else [p]
    spec["sha256"] = {f.name: file_digest(f) for f in files if f.exists()}
    return spec


def _locate(spec, kind):
    p = Path(spec["path"])
    if p.is_dir():
        f = p / ("trials.jsonl" if kind == "trials" else "manifest.jsonl")
    else:
        first = _jsonl_rows(p)[:1]
        is_manifest = bool(first) and "frame_dir" in first[0]
        if (kind == "manifest") == is_manifest:
            f = p
        else:
            f = p.parent / ("trials.jsonl" if kind == "trials" else "manifest.jsonl")
    if not f.exists():
        raise DataError(f"no {kind} file found for dataset {p}")
    return f


def load_samples(cfg: RunConfig, jobs=1, flow_mode="auto"):
    """Build evaluation samples for ``cfg.track`` from ``cfg.dataset``."""
    spec = cfg.dataset
    if spec.get("source") == "synthetic":
        scfg, view = cfg.synth()
        trials = synth.generate(scfg).trials
        if cfg.track == "kin":
            return evaluation.kin_samples(trials, cfg.preprocess, cfg.block)
        return evaluation.synthetic_video_samples(trials, [cfg.dt], view, cfg.preprocess, jobs)
    if spec.get("source") != "files":
        raise DataError("configuration has no dataset")
    for name, digest in spec.get("sha256", {}).items():
        path = Path(spec["path"]) if Path(spec["path"]).is_file() else Path(spec["path"]) / name
        if path.exists() and file_digest(path) != digest:
            raise DataError(f"{path} changed since the fingerprinted run")
    if cfg.track == "kin":
        return evaluation.kin_samples(load_trials(_locate(spec, "trials")), cfg.preprocess, cfg.block)
    manifest = _locate(spec, "manifest")
    source = _synthetic_source(manifest)
    samples = []
    for e in vio.load_manifest(manifest):
        frames = e.frames()
        flows = _entry_flows(e, frames, flow_mode, source)
        samples.append(evaluation.video_sample(e.trial_id, e.subject_id, e.intention, frames, flows, [cfg.dt]))
    return samples


def cmd_evaluate(args):
    if args.rerun:
        meta = json.loads(Path(args.rerun).read_text()) if Path(args.rerun).exists() else None
        if meta is None:
            raise DataError(f"no such file: {args.rerun}")
        cfg = RunConfig.from_dict(meta["config"])
    else:
        if not args.dataset:
            raise UsageError("evaluate: --dataset is required (or --rerun)")
        flags = {"track": args.track, "protocol": args.protocol, "comparisons": args.comparisons,
                 "seed": args.seed, "snippet": args.snippet, "block": args.block,
                 "vocab.S": args.S, "vocab.cap": args.cap, "vocab.seed": args.vocab_seed, "svm.C": args.C}
        if args.L is not None:
            flags["dt.L"] = args.L
            flags["dt.n_t"] = _dt_params(args.L, args.nt).n_t
        cfg = effective_config(args.config, flags)
        cfg = replace(cfg, dataset=_dataset_spec(args.dataset))
    fp = fingerprint(cfg)
    log.info("fingerprint %s", fp)
    print(f"fingerprint {fp}")
    samples = load_samples(cfg, args.jobs)
    audit = evaluation.Audit()
    plan, results = evaluation.run_experiment(samples, cfg, audit, jobs=args.jobs)
    exempt = {"vocabulary:HOG", "vocabulary:HOF"} if cfg.snippet else set()
    leaks = audit.leaks(plan, exempt)
    if leaks:
        raise DataError(f"leakage audit failed: {leaks[0][2]} in fold {leaks[0][1]} saw test trials")
    evaluation.report(results, cfg, args.out, plan, {"dataset": cfg.dataset})
    sys.stdout.write(evaluation.tables_text(results, cfg))


def cmd_report(args):
    src = Path(args.results)
    path = src / "results.json" if src.is_dir() else src
    if not path.exists():
        raise DataError(f"no such file: {path}")
    doc = json.loads(path.read_text())
    cfg = RunConfig.from_dict(doc["config"])
    results = evaluation.load_results(path)
    if args.out:
        evaluation.report(results, cfg, args.out)
    sys.stdout.write(evaluation.tables_text(results, cfg))


# ------------------------------------------------------------------- parser

def build_parser():
    parser = _Parser(prog="ifmotion", description="Intention-from-motion pipeline.")
    parser.add_argument("--version", action="version",
                        version=f"ifmotion {__version__} (formats: {FLOW_MAGIC.decode()}, {vio.DESC_MAGIC.decode()}, "
                                f"{VOCAB_MAGIC.rstrip(bytes(1)).decode()}, "
                                f"{ksvm.SVM_MAGIC.rstrip(bytes(1)).decode()})")
    parser.add_argument("--jobs", type=int, default=evaluation.available_jobs(),
                        help="worker processes (default: available processors)")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="key = value file of SynthConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--write-flows", action="store_true")
    p.add_argument("--no-frames", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="filter and trim trials")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epsilon", type=float, default=20.0)
    p.add_argument("--cutoff", type=float, default=6.0)
    p.add_argument("--resample", type=int, default=100)
    p.add_argument("--order", type=int, default=2)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("extract-kin", help="kinematic feature blocks")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--block", choices=["local", "global", "k"], default="k")
    p.add_argument("--raw", action="store_true", help="input is already preprocessed; skip trimming")
    p.set_defaults(func=cmd_extract_kin)

    p = sub.add_parser("extract-dt", help="dense-trajectory descriptors")
    p.add_argument("--in", dest="input", required=True, help="frame directory or video manifest")
    p.add_argument("--out", required=True, help="descriptor file (or directory for a manifest)")
    p.add_argument("--L", type=int, choices=[15, 5], default=15)
    p.add_argument("--nt", default="auto")
    p.add_argument("--flows", help="directory of flow files for a single video")
    p.add_argument("--flow", choices=["auto", "files", "synthetic", "estimate"], default="auto")
    p.add_argument("--trial-id")
    p.set_defaults(func=cmd_extract_dt)

    p = sub.add_parser("build-vocab", help="k-means vocabularies")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--S", type=int, default=1000)
    p.add_argument("--cap", type=int, default=900_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iters", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("encode", help="bag-of-features histograms")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="attach subject and intention labels")
    p.add_argument("--snippet", type=float, help="keep only the leading fraction of each video")
    p.add_argument("--n-frames", type=int)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="train a one-vs-one SVM")
    p.add_argument("--histograms")
    p.add_argument("--features")
    p.add_argument("--kernel", choices=[ksvm.EXPCHI2, ksvm.LINEAR])
    p.add_argument("--C", type=float, default=10.0)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run an evaluation protocol")
    p.add_argument("--dataset", help="dataset directory, trials/manifest JSONL, or synthetic[:<config>]")
    p.add_argument("--track", choices=["kin", "video"])
    p.add_argument("--protocol")
    p.add_argument("--comparisons")
    p.add_argument("--snippet", help="comma-separated fractions, e.g. 0.4,0.5,...,1.0")
    p.add_argument("--seed", type=int)
    p.add_argument("--block", choices=["local", "global", "k"])
    p.add_argument("--L", type=int, choices=[15, 5])
    p.add_argument("--nt", default="auto")
    p.add_argument("--S", type=int)
    p.add_argument("--cap", type=int)
    p.add_argument("--vocab-seed", type=int)
    p.add_argument("--C", type=float)
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--rerun", help="fingerprint.json of an earlier run")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="re-render tables from results.json")
    p.add_argument("--results", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except ConvergenceError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_CONVERGENCE
    except (DataError, ConfigError, IfmError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
