"""Run configuration: defaults, config files, flags and the fingerprint.

Values are layered ``defaults < config file < command-line flags``.  The
fingerprint is the SHA-256 of the canonical JSON of the effective
configuration, so it changes exactly when some effective value changes.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .preprocess import PreprocessConfig
from .synth import SynthConfig, ViewConfig, parse_config_text
from .videofeat.dense import DTParams

FORMAT_VERSION = 1

COMPARISONS = (
    ("pouring", "placing"),
    ("pouring", "drinking"),
    ("pouring", "passing"),
    ("passing", "drinking"),
    ("passing", "placing"),
    ("drinking", "placing"),
)
ALLCLASS = "allclass"
SNIPPET_FRACTIONS = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


def comparison_name(pair):
    return ALLCLASS if pair is None else f"{pair[0]}-{pair[1]}"


@dataclass(frozen=True)
class VocabConfig:
    S: int = 1000
    cap: int = 900_000
    seed: int = 0
    max_iters: int = 100

    def __post_init__(self):
        if self.S < 1 or self.cap < 1 or self.max_iters < 1:
            raise ConfigError("S, cap and max_iters must be positive")


@dataclass(frozen=True)
class SVMConfig:
    C: float = 10.0
    tol: float = 1e-3

    def __post_init__(self):
        if not (self.C > 0 and self.tol > 0):
            raise ConfigError("C and tol must be positive")


def parse_protocol(text):
    """``"loso"`` or ``"kfold:<k>"`` -> ``("loso", None)`` / ``("kfold", k)``."""
    text = str(text).strip().lower()
    if text == "loso":
        return "loso", None
    if text.startswith("kfold"):
        _, _, k = text.partition(":")
        try:
            k = int(k or 10)
        except ValueError:
            raise ConfigError(f"bad protocol {text!r}; use loso or kfold:<k>") from None
        if k < 2:
            raise ConfigError("k-fold needs k >= 2")
        return "kfold", k
    raise ConfigError(f"unknown protocol {text!r}; use loso or kfold:<k>")


def parse_comparisons(text):
    """``all`` -> six pairs plus all-class; ``allclass``; ``pair:a-b``."""
    text = str(text).strip().lower()
    if text == "all":
        return list(COMPARISONS) + [None]
    if text == ALLCLASS:
        return [None]
    if text.startswith("pair:"):
        a, sep, b = text[5:].partition("-")
        names = {x for p in COMPARISONS for x in p}
        if not sep or a not in names or b not in names or a == b:
            raise ConfigError(f"bad comparison {text!r}; expected pair:<intention>-<intention>")
        return [(a, b)]
    raise ConfigError(f"unknown comparisons {text!r}; use all, allclass or pair:a-b")


@dataclass(frozen=True)
class RunConfig:
    track: str = "kin"  # "kin" or "video"
    block: str = "k"
    protocol: str = "loso"
    comparisons: str = "all"
    snippet: tuple = ()
    seed: int = 0
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    dt: DTParams = field(default_factory=DTParams)
    vocab: VocabConfig = field(default_factory=VocabConfig)
    svm: SVMConfig = field(default_factory=SVMConfig)
    dataset: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.track not in ("kin", "video"):
            raise ConfigError(f"unknown track {self.track!r}; use kin or video")
        if self.block not in ("local", "global", "k"):
            raise ConfigError(f"unknown block {self.block!r}")
        parse_protocol(self.protocol)
        parse_comparisons(self.comparisons)
        snip = tuple(float(p) for p in self.snippet)
        if any(not 0 < p <= 1 for p in snip):
            raise ConfigError("snippet fractions must lie in (0, 1]")
        object.__setattr__(self, "snippet", snip)

    def to_dict(self):
        d = asdict(self)
        d["snippet"] = list(self.snippet)
        d["dt"]["scales"] = list(self.dt.scales)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        sub = {"preprocess": PreprocessConfig, "dt": DTParams, "vocab": VocabConfig, "svm": SVMConfig}
        for key, typ in sub.items():
            if key in d:
                vals = dict(d[key])
                if key == "dt" and "scales" in vals:
                    vals["scales"] = tuple(vals["scales"])
                d[key] = typ(**vals)
        if "snippet" in d:
            d["snippet"] = tuple(d["snippet"])
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        return cls(**d)

    def synth(self):
        """Synthetic generator settings when the dataset is synthetic."""
        if self.dataset.get("source") != "synthetic":
            return None
        s = dict(self.dataset.get("synth", {}))
        for k in ("duration_range", "lead_in_range", "lead_out_range"):
            if k in s:
                s[k] = tuple(s[k])
        return SynthConfig(**s), ViewConfig(**self.dataset.get("view", {}))


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def fingerprint(cfg: RunConfig):
    return hashlib.sha256(canonical_json(cfg.to_dict()).encode("utf-8")).hexdigest()


def synthetic_dataset_spec(synth: SynthConfig, view: ViewConfig = ViewConfig()):
    return {"source": "synthetic", "synth": synth.to_dict(), "view": asdict(view)}


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# ------------------------------------------------------------- layering

def _coerce(current, value):
    if isinstance(current, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes")
        return bool(value)
    if isinstance(current, int) and not isinstance(value, bool):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        return tuple(float(v) for v in value)
    return value


def apply_overrides(cfg: RunConfig, values: dict) -> RunConfig:
    """Apply flat ``key`` / ``section.key`` overrides (e.g. ``vocab.S``)."""
    top = {}
    nested = {}
    for key, value in values.items():
        if value is None:
            continue
        section, dot, name = key.partition(".")
        if dot:
            nested.setdefault(section, {})[name] = value
        else:
            top[key] = value
    for section, vals in nested.items():
        if section not in ("preprocess", "dt", "vocab", "svm"):
            raise ConfigError(f"unknown configuration section {section!r}")
        obj = getattr(cfg, section)
        names = {f.name for f in fields(obj)}
        bad = set(vals) - names
        if bad:
            raise ConfigError(f"unknown keys in section {section!r}: {sorted(bad)}")
        coerced = {k: _coerce(getattr(obj, k), v) for k, v in vals.items()}
        cfg = replace(cfg, **{section: replace(obj, **coerced)})
    names = {f.name for f in fields(cfg)}
    bad = set(top) - names
    if bad:
        raise ConfigError(f"unknown configuration keys: {sorted(bad)}")
    coerced = {k: (_coerce(getattr(cfg, k), v) if k != "dataset" else v) for k, v in top.items()}
    return replace(cfg, **coerced)


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    return parse_config_text(path.read_text())


def effective_config(file_path=None, flags=None, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    if file_path is not None:
        cfg = apply_overrides(cfg, load_config_file(file_path))
    return apply_overrides(cfg, flags or {})


def short_trajectory_config(cfg: RunConfig) -> RunConfig:
    """Same run with the shortened ``L=5, n_t=1`` trajectories."""
    return replace(cfg, dt=replace(cfg.dt, L=5, n_t=1))
