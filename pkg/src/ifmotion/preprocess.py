"""Trial data model, JSONL ingestion and marker preprocessing.

Positions are in millimetres and speeds in mm/s throughout, so the default
onset threshold of 20 mm/s applies without unit conversion.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy import signal

from .errors import ConfigError, DataError, NoMovementError

INTENTIONS = ("pouring", "passing", "drinking", "placing")

#: Canonical 20-marker set.  ``hand_base``, ``hand_radial`` and ``hand_ulnar``
#: span the hand-centred frame; ``index_phalanx`` sits on the proximal phalanx.
MARKER_NAMES = (
    "wrist",
    "wrist_ulnar",
    "forearm",
    "hand_base",
    "hand_radial",
    "hand_ulnar",
    "thumb_cmc",
    "thumb_mcp",
    "thumb_ip",
    "thumb_tip",
    "index_mcp",
    "index_phalanx",
    "index_dip",
    "index_tip",
    "middle_mcp",
    "middle_tip",
    "ring_mcp",
    "ring_tip",
    "little_mcp",
    "little_tip",
)


def _frozen(arr):
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Trial:
    """One reach-to-grasp recording.

    ``markers`` maps each canonical marker name to a ``(T, 3)`` array of
    positions in mm.  Arrays are made read-only on construction.
    """

    trial_id: str
    subject_id: str
    intention: str
    sample_rate_hz: float
    markers: Mapping[str, np.ndarray]

    def __post_init__(self):
        if self.intention not in INTENTIONS:
            raise DataError(f"trial {self.trial_id!r}: unknown intention {self.intention!r}")
        if not (self.sample_rate_hz > 0 and math.isfinite(self.sample_rate_hz)):
            raise DataError(f"trial {self.trial_id!r}: sample_rate_hz must be positive")
        missing = [m for m in MARKER_NAMES if m not in self.markers]
        if missing:
            raise DataError(f"trial {self.trial_id!r}: missing marker {missing[0]!r}")
        markers = {}
        length = None
        for name in MARKER_NAMES:
            arr = _frozen(self.markers[name])
            if arr.ndim != 2 or arr.shape[1] != 3:
                raise DataError(f"trial {self.trial_id!r}: marker {name!r} must be a list of [x, y, z]")
            if length is None:
                length = arr.shape[0]
            elif arr.shape[0] != length:
                raise DataError(
                    f"trial {self.trial_id!r}: marker {name!r} has {arr.shape[0]} samples, expected {length}")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"trial {self.trial_id!r}: marker {name!r} has non-finite coordinates")
            markers[name] = arr
        if length < 2:
            raise DataError(f"trial {self.trial_id!r}: need at least 2 samples")
        object.__setattr__(self, "markers", markers)

    def __len__(self):
        return next(iter(self.markers.values())).shape[0]

    def __eq__(self, other):
        if not isinstance(other, Trial):
            return NotImplemented
        return (self.trial_id == other.trial_id
                and self.subject_id == other.subject_id
                and self.intention == other.intention
                and self.sample_rate_hz == other.sample_rate_hz
                and all(np.array_equal(self.markers[m], other.markers[m]) for m in MARKER_NAMES))

    __hash__ = None

    def marker(self, name):
        try:
            return self.markers[name]
        except KeyError:
            raise DataError(f"trial {self.trial_id!r}: missing marker {name!r}") from None

    def with_markers(self, markers):
        return Trial(self.trial_id, self.subject_id, self.intention, self.sample_rate_hz, markers)

    def to_json(self):
        return {
            "trial_id": self.trial_id,
            "subject_id": self.subject_id,
            "intention": self.intention,
            "sample_rate_hz": self.sample_rate_hz,
            "markers": {m: self.markers[m].tolist() for m in MARKER_NAMES},
        }


@dataclass(frozen=True)
class PreprocessConfig:
    cutoff_hz: float = 6.0
    filter_order: int = 2
    epsilon_mm_s: float = 20.0
    resample_count: int = 100

    def __post_init__(self):
        if not self.cutoff_hz > 0:
            raise ConfigError("cutoff_hz must be positive")
        if self.filter_order < 1:
            raise ConfigError("filter_order must be a positive integer")
        if not self.epsilon_mm_s > 0:
            raise ConfigError("epsilon_mm_s must be positive")
        if self.resample_count < 2:
            raise ConfigError("resample_count must be at least 2")


@dataclass(frozen=True)
class TrimWindow:
    """Inclusive sample range ``[t0_index, tf_index]`` of the raw grid."""

    t0_index: int
    tf_index: int


# --------------------------------------------------------------------- I/O

def trial_from_json(obj, where="input"):
    if not isinstance(obj, dict):
        raise DataError(f"{where}: expected a JSON object")
    for key in ("trial_id", "subject_id", "intention", "sample_rate_hz", "markers"):
        if key not in obj:
            raise DataError(f"{where}: missing field {key!r}")
    markers = obj["markers"]
    if not isinstance(markers, dict):
        raise DataError(f"{where}: field 'markers' must be an object")
    for name in MARKER_NAMES:
        if name not in markers:
            raise DataError(f"{where}: missing marker {name!r}")
    try:
        arrays = {name: np.asarray(val, dtype=float) for name, val in markers.items()}
    except (TypeError, ValueError) as exc:
        raise DataError(f"{where}: field 'markers' is not numeric ({exc})") from None
    try:
        rate = float(obj["sample_rate_hz"])
    except (TypeError, ValueError):
        raise DataError(f"{where}: field 'sample_rate_hz' is not a number") from None
    try:
        return Trial(str(obj["trial_id"]), str(obj["subject_id"]), str(obj["intention"]).lower(),
                     rate, arrays)
    except DataError as exc:
        raise DataError(f"{where}: {exc}") from None


def load_trials(path) -> list[Trial]:
    """Read a trial JSONL file; errors name the offending line and field."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    trials = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: malformed JSON ({exc.msg})") from None
            trials.append(trial_from_json(obj, where))
    return trials


def save_trials(trials: Iterable[Trial], path):
    with Path(path).open("w") as fh:
        for trial in trials:
            fh.write(json.dumps(trial.to_json(), separators=(",", ":")))
            fh.write("\n")


# ----------------------------------------------------------------- filters

def design_butterworth(sample_rate_hz, cfg: PreprocessConfig):
    """Digital Butterworth low-pass (bilinear transform with prewarping)."""
    nyquist = sample_rate_hz / 2.0
    if cfg.cutoff_hz >= nyquist:
        raise ConfigError(
            f"cutoff {cfg.cutoff_hz} Hz must be below the Nyquist frequency {nyquist} Hz")
    return signal.butter(cfg.filter_order, cfg.cutoff_hz, btype="low", fs=sample_rate_hz)


def lowpass_single_pass(x, sample_rate_hz, cfg: PreprocessConfig):
    """Causal single application of the designed filter (steady-state start)."""
    b, a = design_butterworth(sample_rate_hz, cfg)
    x = np.asarray(x, dtype=float)
    zi = signal.lfilter_zi(b, a)
    y, _ = signal.lfilter(b, a, x, axis=0, zi=np.multiply.outer(zi, x[0]) if x.ndim > 1 else zi * x[0])
    return y


def butterworth_lowpass(x, sample_rate_hz, cfg: PreprocessConfig = PreprocessConfig()):
    """Zero-phase low-pass filter along axis 0.

    The signal is extended at both ends by an odd reflection of
    ``3 * filter_order`` samples and filtered in both directions; the result
    is the mean of the forward-backward and backward-forward passes.
    """
    x = np.asarray(x, dtype=float)
    b, a = design_butterworth(sample_rate_hz, cfg)
    pad = 3 * cfg.filter_order
    if x.shape[0] < pad:
        raise DataError(f"signal of length {x.shape[0]} is shorter than the {pad}-sample padding")
    if x.shape[0] <= pad:
        pad = x.shape[0] - 1
    head = 2 * x[0] - x[pad:0:-1]
    tail = 2 * x[-1] - x[-2:-pad - 2:-1]
    ext = np.concatenate([head, x, tail], axis=0)
    zi = signal.lfilter_zi(b, a)
    zi = np.multiply.outer(zi, np.ones(x.shape[1:]))

    def run(s):
        out, _ = signal.lfilter(b, a, s, axis=0, zi=zi * s[0])
        return out

    # forward-backward and backward-forward differ only through the edge
    # states; their mean commutes exactly with time reversal
    fb = run(run(ext)[::-1])[::-1]
    bf = run(run(ext[::-1])[::-1])
    return 0.5 * (fb + bf)[pad:pad + x.shape[0]]


def filter_trial(trial: Trial, cfg: PreprocessConfig = PreprocessConfig()) -> Trial:
    return trial.with_markers({
        name: butterworth_lowpass(trial.markers[name], trial.sample_rate_hz, cfg)
        for name in MARKER_NAMES
    })


# ------------------------------------------------------------- kinematics

def speed(positions, sample_rate_hz):
    """Euclidean speed of a ``(T, 3)`` path; central differences inside."""
    positions = np.asarray(positions, dtype=float)
    vel = np.gradient(positions, axis=0) * sample_rate_hz
    return np.linalg.norm(vel, axis=1)


def wrist_speed(trial: Trial):
    return speed(trial.marker("wrist"), trial.sample_rate_hz)


def velocity_window(speed_profile, epsilon, trial_id=None) -> TrimWindow:
    """Onset is the first sample above ``epsilon``; offset is the first
    sample after onset that falls below it (last sample if it never does)."""
    v = np.asarray(speed_profile, dtype=float)
    above = np.flatnonzero(v > epsilon)
    if above.size == 0 or above[0] >= v.size - 1:
        raise NoMovementError(trial_id)
    t0 = int(above[0])
    below = np.flatnonzero(v[t0 + 1:] < epsilon)
    tf = t0 + 1 + int(below[0]) if below.size else v.size - 1
    return TrimWindow(t0, tf)


def crop(trial: Trial, window: TrimWindow) -> Trial:
    sl = slice(window.t0_index, window.tf_index + 1)
    return trial.with_markers({m: trial.markers[m][sl] for m in MARKER_NAMES})


def trim_by_velocity(trial: Trial, cfg: PreprocessConfig = PreprocessConfig()):
    """Crop ``trial`` to the window where the filtered wrist speed is above
    threshold.  Returns ``(cropped_trial, window)``."""
    wrist = butterworth_lowpass(trial.marker("wrist"), trial.sample_rate_hz, cfg)
    window = velocity_window(speed(wrist, trial.sample_rate_hz), cfg.epsilon_mm_s, trial.trial_id)
    return crop(trial, window), window


def preprocess_trial(trial: Trial, cfg: PreprocessConfig = PreprocessConfig()):
    """Filter every marker, then trim to the movement window."""
    filtered = filter_trial(trial, cfg)
    window = velocity_window(wrist_speed(filtered), cfg.epsilon_mm_s, trial.trial_id)
    return crop(filtered, window), window


def normalize_time(series, resample_count=100):
    """Linearly resample ``series`` (along axis 0) onto ``resample_count``
    equispaced points of the unit interval."""
    y = np.asarray(series, dtype=float)
    n = y.shape[0]
    if n < 2:
        raise DataError("normalize_time needs at least 2 samples")
    src = np.linspace(0.0, 1.0, n)
    dst = np.linspace(0.0, 1.0, resample_count)
    if y.ndim == 1:
        out = np.interp(dst, src, y)
    else:
        flat = y.reshape(n, -1)
        out = np.stack([np.interp(dst, src, col) for col in flat.T], axis=1)
        out = out.reshape((resample_count,) + y.shape[1:])
    out[0] = y[0]
    out[-1] = y[-1]
    return out
