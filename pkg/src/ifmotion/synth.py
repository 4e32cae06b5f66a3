"""Synthetic reach-to-grasp datasets with known ground truth.

A rigid 20-marker hand template rides a minimum-jerk wrist path.  Thumb and
index tips are articulated by a scripted grip-aperture profile.  Intentions
differ through late modulations of grip aperture, wrist height and forward
(horizontal) wrist position.  Subjects add their own offsets, including an
idiosyncratic per-intention component that only helps classifiers which have
seen the subject before.

World axes: x forward (towards the object), y lateral, z up.  The lateral
camera looks along y and sees the x-z plane.
"""
from __future__ import annotations

import ast
import json
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .preprocess import (INTENTIONS, MARKER_NAMES, PreprocessConfig, Trial, preprocess_trial, save_trials,
                         speed, velocity_window)
from .videofeat.flow import FlowField, write_flow
from .videofeat.io import write_frame

# Per-intention signs of (aperture, height, horizontal) modulation.  Every
# pair of intentions differs in exactly two of the three signals.
INTENTION_SIGNS = {
    "pouring": (1.0, 1.0, 1.0),
    "passing": (-1.0, 1.0, -1.0),
    "drinking": (1.0, -1.0, -1.0),
    "placing": (-1.0, -1.0, 1.0),
}

# Static part of the hand template, hand-frame coordinates in mm.
_TEMPLATE = {
    "wrist": (-25.0, 15.0, 0.0),
    "wrist_ulnar": (-25.0, 45.0, 2.0),
    "forearm": (-110.0, 28.0, 6.0),
    "hand_base": (0.0, 0.0, 0.0),
    "hand_radial": (80.0, 0.0, 0.0),
    "hand_ulnar": (68.0, 46.0, 0.0),
    "thumb_cmc": (12.0, -18.0, -12.0),
    "thumb_mcp": (38.0, -30.0, -22.0),
    "index_mcp": (88.0, -4.0, 4.0),
    "middle_mcp": (84.0, 14.0, 2.0),
    "middle_tip": (135.0, 22.0, -45.0),
    "ring_mcp": (79.0, 30.0, 2.0),
    "ring_tip": (124.0, 36.0, -42.0),
    "little_mcp": (71.0, 52.0, 3.0),
    "little_tip": (108.0, 56.0, -36.0),
}

# Grip centre and opening direction of the thumb/index pair (hand frame).
_GRIP_CENTRE = np.array([112.0, -32.0, -30.0])
_GRIP_AXIS = np.array([0.15, 0.95, 0.27]) / np.linalg.norm([0.15, 0.95, 0.27])

# Hand-frame axes expressed in world coordinates (columns): fingers forward,
# hand y up, dorsum normal pointing to -y.
_BASE_ORIENTATION = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 17
    trials_per_intention: int = 20
    duration_range: tuple = (100, 135)  # reach length in samples
    lead_in_range: tuple = (20, 40)
    lead_out_range: tuple = (20, 40)
    sample_rate_hz: float = 100.0
    effect_aperture_mm: float = 10.0
    effect_height_mm: float = 22.0
    effect_horizontal_mm: float = 22.0
    divergence_onset: float = 0.7
    subject_bias_sd: float = 10.0
    trial_sd_mm: float = 7.0
    noise_sd_mm: float = 0.1
    rejection_rate: float = 0.19
    seed: int = 0

    def __post_init__(self):
        for f in ("effect_aperture_mm", "effect_height_mm", "effect_horizontal_mm",
                  "subject_bias_sd", "trial_sd_mm", "noise_sd_mm"):
            if getattr(self, f) < 0:
                raise ConfigError(f"{f} must be non-negative")
        if not 0 <= self.rejection_rate < 1:
            raise ConfigError("rejection_rate must lie in [0, 1)")
        if not 0 <= self.divergence_onset < 1:
            raise ConfigError("divergence_onset must lie in [0, 1)")
        if self.n_subjects < 1 or self.trials_per_intention < 1:
            raise ConfigError("n_subjects and trials_per_intention must be positive")
        for f in ("duration_range", "lead_in_range", "lead_out_range"):
            lo, hi = getattr(self, f)
            if not 0 <= lo <= hi:
                raise ConfigError(f"{f} must be an increasing pair")
        if self.duration_range[0] < 10:
            raise ConfigError("reach duration must be at least 10 samples")
        object.__setattr__(self, "duration_range", tuple(int(v) for v in self.duration_range))
        object.__setattr__(self, "lead_in_range", tuple(int(v) for v in self.lead_in_range))
        object.__setattr__(self, "lead_out_range", tuple(int(v) for v in self.lead_out_range))

    @classmethod
    def late_divergence(cls, **overrides):
        """The default preset: intentions diverge over the last 30% of the reach."""
        return cls(**overrides)

    @classmethod
    def null_effect(cls, **overrides):
        base = dict(effect_aperture_mm=0.0, effect_height_mm=0.0, effect_horizontal_mm=0.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass(frozen=True)
class ViewConfig:
    """Orthographic lateral projection of world (x, z) onto the pixel grid."""

    width: int = 160
    height: int = 100
    mm_per_px: float = 4.5
    x_origin_mm: float = -170.0
    z_top_mm: float = 330.0
    fps: float = 25.0
    blob_sigma_px: float = 2.0
    flow_sigma_px: float = 4.0

    def project(self, points):
        points = np.asarray(points, dtype=float)
        u = (points[..., 0] - self.x_origin_mm) / self.mm_per_px
        v = (self.z_top_mm - points[..., 2]) / self.mm_per_px
        return np.stack([u, v], axis=-1)


@dataclass
class GroundTruth:
    trial_id: str
    onset: int
    offset: int
    aperture: np.ndarray
    local_thumb: np.ndarray
    local_index: np.ndarray
    local_phalanx: np.ndarray
    modulation: dict
    height_offset: np.ndarray
    wrist_clean: np.ndarray = field(repr=False)

    def to_json(self):
        return {
            "trial_id": self.trial_id,
            "onset": self.onset,
            "offset": self.offset,
            "modulation": self.modulation,
        }


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: str
    start: np.ndarray
    end: np.ndarray
    duration_scale: float
    hand_scale: float
    yaw_start: float
    yaw_end: float
    aperture_peak: float
    idiosyncrasy: dict  # intention -> (aperture, height, horizontal) mm


def minimum_jerk(start, end, T):
    """Minimum-jerk path of ``T`` samples from ``start`` to ``end``."""
    if T < 2:
        raise ValueError("minimum_jerk needs T >= 2")
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    tau = np.linspace(0.0, 1.0, T)
    s = _mj(tau)
    return start + np.multiply.outer(s, end - start)


def _mj(tau):
    tau = np.clip(tau, 0.0, 1.0)
    return 10 * tau ** 3 - 15 * tau ** 4 + 6 * tau ** 5


def late_profile(tau, onset):
    """Zero before ``onset``; smooth minimum-jerk rise to 1 at tau = 1."""
    return _mj((np.asarray(tau, dtype=float) - onset) / (1.0 - onset))


def _rot_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def make_subject(index, cfg: SynthConfig, rng) -> SubjectProfile:
    sd = cfg.subject_bias_sd
    start = np.array([0.0, 0.0, 95.0]) + rng.normal(0.0, 1.5 * sd, 3)
    end = np.array([300.0, 10.0, 150.0]) + rng.normal(0.0, sd, 3)
    idio = {name: tuple(rng.normal(0.0, sd, 3) * np.array([0.5, 1.0, 1.0])) for name in INTENTIONS}
    return SubjectProfile(
        subject_id=f"s{index + 1:02d}",
        start=start,
        end=end,
        duration_scale=float(np.exp(rng.normal(0.0, 0.08 if sd > 0 else 0.0))),
        hand_scale=float(np.exp(rng.normal(0.0, 0.05 if sd > 0 else 0.0))),
        yaw_start=float(rng.normal(-0.15, 0.05 if sd > 0 else 0.0)),
        yaw_end=float(rng.normal(0.1, 0.05 if sd > 0 else 0.0)),
        aperture_peak=float(85.0 + rng.normal(0.0, sd)),
        idiosyncrasy=idio,
    )


def _aperture_profile(tau, rest, peak, final):
    s = _mj(tau)
    bump = tau ** 3 * (1 - tau) ** 2 / 0.03456  # peaks at tau = 0.6 with value 1
    return rest * (1 - s) + final * s + (peak - 0.5 * (rest + final)) * bump


def synth_trial(intention, subject: SubjectProfile, cfg: SynthConfig, rng, trial_id=None):
    """Generate one trial and its ground truth."""
    if intention not in INTENTIONS:
        raise ValueError(f"unknown intention {intention!r}")
    tsd = cfg.trial_sd_mm
    lo, hi = cfg.duration_range
    T = int(round(rng.uniform(lo, hi) * subject.duration_scale))
    T = max(T, 10)
    lead_in = int(rng.integers(cfg.lead_in_range[0], cfg.lead_in_range[1] + 1))
    lead_out = int(rng.integers(cfg.lead_out_range[0], cfg.lead_out_range[1] + 1))
    end = subject.end + rng.normal(0.0, tsd, 3)
    start = subject.start + rng.normal(0.0, 0.5 * tsd, 3)
    effect_jitter = 1.0 + rng.normal(0.0, 0.25 if tsd > 0 else 0.0, 3)
    aperture_peak = subject.aperture_peak + rng.normal(0.0, tsd)
    abduction = rng.normal(0.0, 0.5 * tsd)
    noise = rng.normal(0.0, 1.0, (lead_in + T + lead_out, len(MARKER_NAMES), 3))

    signs = np.array(INTENTION_SIGNS[intention])
    effect = signs * np.array([cfg.effect_aperture_mm, cfg.effect_height_mm, cfg.effect_horizontal_mm])
    effect = effect * effect_jitter + np.array(subject.idiosyncrasy[intention])

    tau = np.linspace(0.0, 1.0, T)
    m = late_profile(tau, cfg.divergence_onset)
    wrist_path = minimum_jerk(start, end, T)
    wrist_path[:, 0] += effect[2] * m
    wrist_path[:, 2] += effect[1] * m

    hs = subject.hand_scale
    rest_ap, final_ap = 25.0 * hs, 68.0 * hs
    aperture = _aperture_profile(tau, rest_ap, aperture_peak * hs, final_ap) + effect[0] * m
    centre = np.tile(_GRIP_CENTRE * hs, (T, 1))
    centre[:, 0] += abduction * _mj(tau)
    thumb = centre - 0.5 * aperture[:, None] * _GRIP_AXIS
    index = centre + 0.5 * aperture[:, None] * _GRIP_AXIS

    yaw = subject.yaw_start + (subject.yaw_end - subject.yaw_start) * _mj(tau)

    local = {name: np.tile(np.array(p) * hs, (T, 1)) for name, p in _TEMPLATE.items()}
    local["thumb_tip"] = thumb
    local["index_tip"] = index
    local["thumb_ip"] = 0.45 * local["thumb_mcp"] + 0.55 * thumb + np.array([0.0, 0.0, -4.0]) * hs
    local["index_phalanx"] = 0.6 * local["index_mcp"] + 0.4 * index + np.array([0.0, 0.0, 5.0]) * hs
    local["index_dip"] = 0.2 * local["index_mcp"] + 0.8 * index + np.array([0.0, 0.0, 4.0]) * hs

    # world = origin + Q @ local, with origin chosen so the wrist marker follows the path
    Q = np.einsum("tij,jk->tik", np.stack([_rot_z(a) for a in yaw]), _BASE_ORIENTATION)
    wrist_local = local["wrist"]
    origin = wrist_path - np.einsum("tij,tj->ti", Q, wrist_local)
    world = {name: origin + np.einsum("tij,tj->ti", Q, local[name]) for name in MARKER_NAMES}

    total = lead_in + T + lead_out
    markers = {}
    for k, name in enumerate(MARKER_NAMES):
        arr = np.empty((total, 3))
        arr[:lead_in] = world[name][0]
        arr[lead_in:lead_in + T] = world[name]
        arr[lead_in + T:] = world[name][-1]
        markers[name] = arr
    clean_wrist = markers["wrist"].copy()
    if cfg.noise_sd_mm > 0:
        for k, name in enumerate(MARKER_NAMES):
            markers[name] = markers[name] + cfg.noise_sd_mm * noise[:, k]

    window = velocity_window(speed(clean_wrist, cfg.sample_rate_hz), PreprocessConfig().epsilon_mm_s)

    def padded(a):
        return np.concatenate([np.repeat(a[:1], lead_in, 0), a, np.repeat(a[-1:], lead_out, 0)])

    height_offset = np.concatenate([np.zeros(lead_in), effect[1] * m, np.full(lead_out, effect[1])])
    trial_id = trial_id or f"{subject.subject_id}_{intention}"
    trial = Trial(trial_id, subject.subject_id, intention, cfg.sample_rate_hz, markers)
    truth = GroundTruth(
        trial_id=trial_id,
        onset=window.t0_index,
        offset=window.tf_index,
        aperture=padded(aperture),
        local_thumb=padded(thumb),
        local_index=padded(index),
        local_phalanx=padded(local["index_phalanx"]),
        modulation={"aperture": float(effect[0]), "height": float(effect[1]),
                    "horizontal": float(effect[2]), "onset_sample": lead_in,
                    "reach_samples": T},
        height_offset=height_offset,
        wrist_clean=clean_wrist,
    )
    return trial, truth


@dataclass
class SynthDataset:
    config: SynthConfig
    trials: list
    truths: list
    subjects: list

    def subset(self, keep):
        keep = set(keep)
        idx = [i for i, t in enumerate(self.trials) if t.trial_id in keep]
        return SynthDataset(self.config, [self.trials[i] for i in idx],
                            [self.truths[i] for i in idx], self.subjects)


def generate(cfg: SynthConfig = SynthConfig()) -> SynthDataset:
    """Generate all trials in memory.  Fully determined by ``cfg.seed``."""
    master = np.random.SeedSequence(cfg.seed)
    subj_seq, trial_seq, reject_seq = master.spawn(3)
    subj_rng = np.random.default_rng(subj_seq)
    subjects = [make_subject(i, cfg, subj_rng) for i in range(cfg.n_subjects)]
    reject_rng = np.random.default_rng(reject_seq)
    streams = trial_seq.spawn(cfg.n_subjects * len(INTENTIONS) * cfg.trials_per_intention)
    trials, truths = [], []
    k = 0
    for subject in subjects:
        for intention in INTENTIONS:
            for rep in range(cfg.trials_per_intention):
                rng = np.random.default_rng(streams[k])
                k += 1
                dropped = reject_rng.random() < cfg.rejection_rate
                if dropped:
                    continue
                tid = f"{subject.subject_id}_{intention}_{rep + 1:02d}"
                trial, truth = synth_trial(intention, subject, cfg, rng, trial_id=tid)
                trials.append(trial)
                truths.append(truth)
    return SynthDataset(cfg, trials, truths, subjects)


# ------------------------------------------------------------------ video

def video_samples(trial: Trial, fps):
    """Resample every marker of ``trial`` at ``fps``; shape ``(F, 20, 3)``."""
    stacked = np.stack([trial.markers[m] for m in MARKER_NAMES], axis=1)
    duration = (len(trial) - 1) / trial.sample_rate_hz
    n_frames = int(np.floor(duration * fps + 1e-9)) + 1
    t_src = np.arange(len(trial)) / trial.sample_rate_hz
    t_dst = np.arange(n_frames) / fps
    flat = stacked.reshape(len(trial), -1)
    out = np.stack([np.interp(t_dst, t_src, col) for col in flat.T], axis=1)
    return out.reshape(n_frames, len(MARKER_NAMES), 3)


def _project_checked(trial, view):
    pts = view.project(video_samples(trial, view.fps))
    margin = 2.0
    if (pts[..., 0].min() < margin or pts[..., 0].max() > view.width - 1 - margin
            or pts[..., 1].min() < margin or pts[..., 1].max() > view.height - 1 - margin):
        raise DataError(
            f"trial {trial.trial_id!r}: markers project outside the {view.width}x{view.height} canvas; "
            "increase mm_per_px or move the view origin")
    return pts


def _marker_gains():
    # fixed per-marker blob intensities give the hand some texture
    return 0.45 + 0.4 * ((np.arange(len(MARKER_NAMES)) * 7) % 5) / 4.0


def _gauss_factors(pts, view, sigma):
    """Separable Gaussian factors: ``(..., K, H)`` along rows and ``(..., K, W)`` along columns."""
    s2 = 2.0 * sigma ** 2
    gy = np.exp(-(np.arange(view.height) - pts[..., 1:2]) ** 2 / s2)
    gx = np.exp(-(np.arange(view.width) - pts[..., 0:1]) ** 2 / s2)
    return gy, gx


def _outer_sum(gy, gx):
    # sum over markers of outer(gy_k, gx_k)
    return np.swapaxes(gy, -1, -2) @ gx


def render_frames(trial: Trial, view: ViewConfig = ViewConfig()):
    """Grey frames in [0, 1] with each marker drawn as a Gaussian blob."""
    pts = _project_checked(trial, view)
    gy, gx = _gauss_factors(pts, view, view.blob_sigma_px)
    frames = 0.1 + _outer_sum(gy * _marker_gains()[:, None], gx)
    return np.clip(frames, 0.0, 1.0)


def _splat(positions, displacements, view):
    gy, gx = _gauss_factors(np.asarray(positions, dtype=float), view, view.flow_sigma_px)
    d = np.asarray(displacements, dtype=float)
    wsum = _outer_sum(gy, gx)
    acc_u = _outer_sum(gy * d[..., 0:1], gx)
    acc_v = _outer_sum(gy * d[..., 1:2], gx)
    mask = wsum > 0.05
    safe = np.where(mask, wsum, 1.0)
    cover = np.minimum(1.0, wsum)
    fu = np.where(mask, acc_u / safe * cover, 0.0)
    fv = np.where(mask, acc_v / safe * cover, 0.0)
    return fu, fv


def splat_flow(positions, displacements, view: ViewConfig):
    """One flow field from per-marker pixel positions and displacements.

    Each marker spreads its displacement as a Gaussian-weighted patch; the
    field is the weighted average, faded where coverage is thin.
    """
    return FlowField(*_splat(positions, displacements, view))


def render_flow(trial: Trial, view: ViewConfig = ViewConfig()):
    """Flow fields between consecutive video frames of ``trial``."""
    pts = _project_checked(trial, view)
    fu, fv = _splat(pts[:-1], np.diff(pts, axis=0), view)
    return [FlowField(u, v) for u, v in zip(fu, fv)]


def flow_mask(trial: Trial, view: ViewConfig = ViewConfig(), threshold=0.05):
    """Per-frame boolean masks of the splat support (moving-hand region)."""
    pts = _project_checked(trial, view)
    gy, gx = _gauss_factors(pts, view, view.flow_sigma_px)
    return _outer_sum(gy, gx) > threshold


def video_clip(trial: Trial, view: ViewConfig = ViewConfig(), cfg: PreprocessConfig = PreprocessConfig()):
    """Frames and synthesised flows of the trimmed reach, as a camera would see it.

    Frames are quantised to 8-bit grey levels, exactly what a written and
    re-read PGM/PNG frame holds.
    """
    trimmed, _ = preprocess_trial(trial, cfg)
    frames = np.round(render_frames(trimmed, view) * 255.0) / 255.0
    return frames, render_flow(trimmed, view)


# ------------------------------------------------------------ config files

def parse_config_text(text):
    """Parse ``key = value`` lines (a TOML subset) into a dict."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        lowered = value.lower()
        if lowered in ("true", "false"):
            out[key] = lowered == "true"
            continue
        try:
            out[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            out[key] = value.strip("\"'")
    return out


def config_from_mapping(values) -> tuple:
    """Split a flat mapping into ``(SynthConfig, ViewConfig, extras)``."""
    synth_keys = {f.name for f in fields(SynthConfig)}
    view_keys = {f.name for f in fields(ViewConfig)}
    s, v, extra = {}, {}, {}
    for key, value in values.items():
        if key in synth_keys:
            s[key] = tuple(value) if isinstance(value, list) else value
        elif key.startswith("view_") and key[5:] in view_keys:
            v[key[5:]] = value
        else:
            extra[key] = value
    unknown = set(extra) - {"write_flows", "write_frames"}
    if unknown:
        raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
    return SynthConfig(**s), ViewConfig(**v), extra


def format_config(cfg: SynthConfig, view: ViewConfig, extras=None):
    lines = []
    for key, value in cfg.to_dict().items():
        lines.append(f"{key} = {json.dumps(value)}")
    for key, value in asdict(view).items():
        lines.append(f"view_{key} = {json.dumps(value)}")
    for key, value in sorted((extras or {}).items()):
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def synth_dataset(cfg: SynthConfig, out_dir, view: ViewConfig = ViewConfig(),
                  write_frames=True, write_flows=False):
    """Generate a dataset and write it under ``out_dir``.

    Layout: ``trials.jsonl``, ``ground_truth.jsonl``, ``manifest.jsonl``,
    ``synth.toml`` and, per trial, ``frames/<trial_id>/frame_0000.pgm`` ...
    and optionally ``flows/<trial_id>/flow_0000.bin`` ....
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = generate(cfg)
    save_trials(data.trials, out / "trials.jsonl")
    with (out / "ground_truth.jsonl").open("w") as fh:
        for truth in data.truths:
            fh.write(json.dumps(truth.to_json(), sort_keys=True) + "\n")
    (out / "synth.toml").write_text(format_config(
        cfg, view, {"write_frames": write_frames, "write_flows": write_flows}))
    with (out / "manifest.jsonl").open("w") as fh:
        for trial in data.trials:
            entry = {"trial_id": trial.trial_id, "subject_id": trial.subject_id,
                     "intention": trial.intention, "frame_dir": f"frames/{trial.trial_id}",
                     "fps": view.fps}
            if write_frames or write_flows:
                frames, flows = video_clip(trial, view)
                if write_frames:
                    fdir = out / "frames" / trial.trial_id
                    if fdir.exists():
                        shutil.rmtree(fdir)
                    fdir.mkdir(parents=True)
                    for i, frame in enumerate(frames):
                        write_frame(fdir / f"frame_{i:04d}.pgm", frame)
                if write_flows:
                    wdir = out / "flows" / trial.trial_id
                    wdir.mkdir(parents=True, exist_ok=True)
                    for i, flow in enumerate(flows):
                        write_flow(wdir / f"flow_{i:04d}.bin", flow)
                    entry["flow_dir"] = f"flows/{trial.trial_id}"
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return data
