"""Kinematic feature blocks on the normalised 100-sample timeline.

Four world-frame signals make up the global block and twelve hand-frame
coordinates make up the local block; their concatenation (local first) is
the 1600-dimensional kinematic vector.

Hand frame
    origin ``hand_base``; x along ``hand_radial - hand_base``; z along
    ``(hand_radial - hand_base) x (hand_ulnar - hand_base)``; y = z x x.

Local targets (3 coordinates each, in this order)
    ``thumb`` tip, ``index`` tip, the unit ``plane`` normal through thumb
    tip / index tip / hand_base (a direction, so not translated), and the
    ``phalanx`` marker on the proximal index phalanx.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateFrameError
from .preprocess import PreprocessConfig, Trial, normalize_time, wrist_speed

GLOBAL_FEATURES = ("wrist_velocity", "wrist_height", "wrist_horizontal", "grip_aperture")
LOCAL_TARGETS = ("thumb", "index", "plane", "phalanx")
LOCAL_FEATURES = tuple(f"{t}_{ax}" for t in LOCAL_TARGETS for ax in "xyz")
BLOCK_SIZES = {"F_local": 12, "F_global": 4, "F_k": 16}

# |a x b| / (|a| |b|) below this is treated as collinear
_MIN_SINE = 1e-6


@dataclass(frozen=True)
class FeatureBlock:
    name: str
    trial_id: str
    feature_names: tuple
    values: np.ndarray  # (n_features, resample_count)

    @property
    def flattened(self):
        return self.values.reshape(-1)

    def feature(self, name):
        return self.values[self.feature_names.index(name)]


@dataclass(frozen=True)
class LocalFrame:
    origin: np.ndarray
    axes: np.ndarray  # rows are the x, y, z directions


def grip_aperture(trial: Trial):
    return np.linalg.norm(trial.marker("thumb_tip") - trial.marker("index_tip"), axis=1)


def global_features(trial: Trial, cfg: PreprocessConfig = PreprocessConfig()) -> FeatureBlock:
    wrist = trial.marker("wrist")
    series = [wrist_speed(trial), wrist[:, 2], wrist[:, 0], grip_aperture(trial)]
    values = np.stack([normalize_time(s, cfg.resample_count) for s in series])
    return FeatureBlock("F_global", trial.trial_id, GLOBAL_FEATURES, values)


def _frames(m1, m2, m3):
    """Vectorised hand frames for ``(T, 3)`` marker arrays.

    Returns ``(axes, sine)`` with ``axes`` of shape ``(T, 3, 3)``.
    """
    a = m2 - m1
    b = m3 - m1
    n = np.cross(a, b)
    la = np.linalg.norm(a, axis=-1)
    lb = np.linalg.norm(b, axis=-1)
    ln = np.linalg.norm(n, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sine = np.where(la * lb > 0, ln / (la * lb), 0.0)
    x = a / np.where(la > 0, la, 1.0)[..., None]
    z = n / np.where(ln > 0, ln, 1.0)[..., None]
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=-2), sine


def _check_sine(sine):
    bad = np.flatnonzero(~(sine > _MIN_SINE))
    if bad.size:
        s = float(sine[bad[0]])
        raise DegenerateFrameError(np.inf if s == 0 else 1.0 / s, int(bad[0]))


def local_frame(trial: Trial, t: int) -> LocalFrame:
    m1 = trial.marker("hand_base")[t]
    m2 = trial.marker("hand_radial")[t]
    m3 = trial.marker("hand_ulnar")[t]
    axes, sine = _frames(m1[None], m2[None], m3[None])
    s = float(sine[0])
    if not s > _MIN_SINE:
        raise DegenerateFrameError(np.inf if s == 0 else 1.0 / s, t)
    return LocalFrame(origin=m1.copy(), axes=axes[0])


def local_coordinates(trial: Trial):
    """Hand-frame coordinates of the four targets, shape ``(T, 4, 3)``."""
    origin = trial.marker("hand_base")
    axes, sine = _frames(origin, trial.marker("hand_radial"), trial.marker("hand_ulnar"))
    _check_sine(sine)
    thumb = trial.marker("thumb_tip")
    index = trial.marker("index_tip")
    normal = np.cross(thumb - origin, index - origin)
    ln = np.linalg.norm(normal, axis=1)
    if not np.all(ln > 0):
        raise DataError(f"trial {trial.trial_id!r}: thumb tip, index tip and hand base are collinear")
    normal = normal / ln[:, None]
    rel = np.stack([thumb - origin, index - origin, normal, trial.marker("index_phalanx") - origin], axis=1)
    return np.einsum("tij,tkj->tki", axes, rel)


def local_features(trial: Trial, cfg: PreprocessConfig = PreprocessConfig()) -> FeatureBlock:
    coords = local_coordinates(trial).reshape(len(trial), 12)
    values = normalize_time(coords, cfg.resample_count).T.copy()
    return FeatureBlock("F_local", trial.trial_id, LOCAL_FEATURES, values)


def assemble(block_local: FeatureBlock, block_global: FeatureBlock) -> FeatureBlock:
    if block_local.trial_id != block_global.trial_id:
        raise DataError(
            f"cannot assemble blocks of different trials: {block_local.trial_id!r} vs {block_global.trial_id!r}")
    if block_local.name != "F_local" or block_global.name != "F_global":
        raise DataError("assemble expects an F_local and an F_global block")
    return FeatureBlock(
        "F_k", block_local.trial_id,
        block_local.feature_names + block_global.feature_names,
        np.concatenate([block_local.values, block_global.values]),
    )


def feature_block(trial: Trial, block="k", cfg: PreprocessConfig = PreprocessConfig()) -> FeatureBlock:
    """``block`` is one of ``"local"``, ``"global"`` or ``"k"``."""
    if block == "local":
        return local_features(trial, cfg)
    if block == "global":
        return global_features(trial, cfg)
    if block == "k":
        return assemble(local_features(trial, cfg), global_features(trial, cfg))
    raise ValueError(f"unknown block {block!r}")


class Standardizer:
    """Per-dimension z-scoring fitted on training vectors only."""

    def fit(self, X):
        X = np.asarray(X, dtype=float)
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        return self

    def transform(self, X):
        return (np.asarray(X, dtype=float) - self.mean_) / self.scale_

    def fit_transform(self, X):
        return self.fit(X).transform(X)
