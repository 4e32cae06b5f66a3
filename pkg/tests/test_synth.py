import filecmp

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ifmotion.errors import ConfigError, DataError
from ifmotion.preprocess import INTENTIONS, MARKER_NAMES, load_trials, preprocess_trial
from ifmotion.synth import (SynthConfig, ViewConfig, config_from_mapping, flow_mask, format_config, generate,
                            make_subject, minimum_jerk, parse_config_text, render_flow, splat_flow, synth_dataset,
                            synth_trial, video_clip, video_samples)
from ifmotion.videofeat.dense import DTParams, extract

from conftest import make_trial


# ----------------------------------------------------------- minimum jerk

def test_minimum_jerk_endpoints_and_midpoint():
    a, b = np.array([1.0, -2.0, 3.0]), np.array([11.0, 8.0, -7.0])
    path = minimum_jerk(a, b, 101)
    np.testing.assert_array_equal(path[0], a)
    np.testing.assert_allclose(path[-1], b, atol=1e-12)
    np.testing.assert_allclose(path[50], 0.5 * (a + b), atol=1e-12)


@pytest.mark.parametrize("T", [50, 100, 200, 400])
def test_minimum_jerk_endpoint_derivatives_vanish(T):
    path = minimum_jerk([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], T)
    h = 1.0 / (T - 1)
    for end in (path[:3], path[::-1][:3]):
        vel = (end[1] - end[0]) / h
        acc = (end[2] - 2 * end[1] + end[0]) / h ** 2
        # one-sided differences of a polynomial with zero first two derivatives
        assert np.abs(vel).max() <= 10 * h ** 2
        assert np.abs(acc).max() <= 60 * h


def test_minimum_jerk_needs_two_samples():
    with pytest.raises(ValueError):
        minimum_jerk([0, 0, 0], [1, 1, 1], 1)


# --------------------------------------------------------------- trials

def null_config(**kw):
    return SynthConfig.null_effect(noise_sd_mm=0.0, subject_bias_sd=0.0, trial_sd_mm=0.0,
                                   duration_range=(110, 110), lead_in_range=(30, 30),
                                   lead_out_range=(25, 25), rejection_rate=0.0, **kw)


def test_null_effect_trials_identical():
    cfg = null_config()
    subject = make_subject(0, cfg, np.random.default_rng(0))
    trials = [synth_trial(i, subject, cfg, np.random.default_rng(k))[0] for k, i in enumerate(INTENTIONS)]
    for t in trials[1:]:
        for m in MARKER_NAMES:
            np.testing.assert_array_equal(t.markers[m], trials[0].markers[m])


def test_trial_layout():
    cfg = SynthConfig()
    subject = make_subject(2, cfg, np.random.default_rng(1))
    trial, truth = synth_trial("drinking", subject, cfg, np.random.default_rng(2), trial_id="x")
    assert trial.trial_id == truth.trial_id == "x"
    assert trial.subject_id == "s03" and trial.intention == "drinking"
    assert set(trial.markers) == set(MARKER_NAMES)
    lead = truth.modulation["onset_sample"]
    T = truth.modulation["reach_samples"]
    # the speed threshold is crossed just after the reach starts and just before it ends
    assert lead >= cfg.lead_in_range[0]
    assert lead <= truth.onset < truth.offset <= lead + T
    assert truth.aperture.shape == (len(trial),)


def test_unknown_intention():
    cfg = SynthConfig()
    with pytest.raises(ValueError):
        synth_trial("waving", make_subject(0, cfg, np.random.default_rng(0)), cfg, np.random.default_rng(0))


def test_negative_scale_rejected():
    with pytest.raises(ConfigError):
        SynthConfig(noise_sd_mm=-1.0)


def test_generate_deterministic():
    a = generate(SynthConfig(n_subjects=2, trials_per_intention=2, seed=11))
    b = generate(SynthConfig(n_subjects=2, trials_per_intention=2, seed=11))
    assert a.trials == b.trials
    c = generate(SynthConfig(n_subjects=2, trials_per_intention=2, seed=12))
    assert a.trials != c.trials


def test_default_counts():
    data = generate(SynthConfig())
    assert len(data.subjects) == 17
    assert {t.subject_id for t in data.trials} == {f"s{k:02d}" for k in range(1, 18)}
    per = {}
    for t in data.trials:
        per[(t.subject_id, t.intention)] = per.get((t.subject_id, t.intention), 0) + 1
    assert max(per.values()) <= 20
    total = 17 * 4 * 20
    # rejection is Bernoulli(0.19) per trial
    sd = np.sqrt(total * 0.19 * 0.81)
    assert abs((total - len(data.trials)) - 0.19 * total) < 4 * sd
    assert len({t.trial_id for t in data.trials}) == len(data.trials)


# ------------------------------------------------------------------- video

def test_stationary_trial_has_zero_flow():
    flows = render_flow(make_trial(60))
    assert len(flows) == len(video_samples(make_trial(60), 25.0)) - 1
    for f in flows:
        assert not f.u.any() and not f.v.any()


def test_single_marker_splat_profile():
    view = ViewConfig()
    f = splat_flow(np.array([[40.0, 30.0]]), np.array([[1.0, 0.0]]), view)
    assert f.u[30, 40] == pytest.approx(1.0, abs=1e-12)
    assert not f.v.any()
    w = np.exp(-16.0 / (2 * view.flow_sigma_px ** 2))
    assert f.u[30, 44] == pytest.approx(w, abs=1e-12)
    assert f.u[34, 40] == pytest.approx(w, abs=1e-12)
    assert f.u[30, 60] == 0.0


def test_translating_hand_gives_unit_flow():
    view = ViewConfig()
    n = 41
    step_mm = view.mm_per_px * view.fps / 100.0  # one pixel per video frame
    base = make_trial(n)
    shift = np.outer(np.arange(n) * step_mm, [1.0, 0.0, 0.0])
    trial = base.with_markers({m: base.markers[m] + shift for m in MARKER_NAMES})
    pts = view.project(video_samples(trial, view.fps))
    for k, f in enumerate(render_flow(trial, view)):
        # every splat carries u = 1, so the field is 1 up to the coverage fade,
        # which is at most exp(-0.5 / (2 sigma^2)) at the pixel nearest a marker
        floor = np.exp(-0.5 / (2 * view.flow_sigma_px ** 2))
        for x, y in pts[k]:
            assert f.u[int(round(y)), int(round(x))] >= floor - 1e-12
        assert np.abs(f.v).max() < 1e-12
        assert f.u.max() <= 1.0 + 1e-12


def test_out_of_canvas_error():
    trial = generate(SynthConfig(n_subjects=1, trials_per_intention=1, rejection_rate=0.0)).trials[0]
    with pytest.raises(DataError, match="mm_per_px"):
        render_flow(trial, ViewConfig(width=40, height=30))


def test_trajectories_concentrate_on_hand():
    data = generate(SynthConfig(n_subjects=1, trials_per_intention=1, rejection_rate=0.0, seed=2))
    trial = data.trials[0]
    view = ViewConfig()
    frames, flows = video_clip(trial, view)
    trimmed, _ = preprocess_trial(trial)
    mask = flow_mask(trimmed, view)
    hog, _ = extract(frames, DTParams.short(), flows=flows, keep_trajectories=True)
    assert len(hog.trajectories) > 0
    inside = 0
    for traj in hog.trajectories:
        pts = traj.points / traj.scale
        ok = True
        for k, (x, y) in enumerate(pts):
            i = min(max(int(round(y)), 0), view.height - 1)
            j = min(max(int(round(x)), 0), view.width - 1)
            ok &= bool(mask[traj.start_frame + k][i, j])
        inside += ok
    assert inside / len(hog.trajectories) >= 0.8


def test_clip_frames_are_quantised():
    trial = generate(SynthConfig(n_subjects=1, trials_per_intention=1, rejection_rate=0.0)).trials[0]
    frames, flows = video_clip(trial)
    assert len(flows) == len(frames) - 1
    np.testing.assert_array_equal(np.round(frames * 255) / 255, frames)


# ------------------------------------------------------------- files

def test_config_text_round_trip():
    cfg = SynthConfig(n_subjects=3, noise_sd_mm=0.25, duration_range=(90, 120), seed=7)
    view = ViewConfig(width=120, fps=30.0)
    back, vback, extra = config_from_mapping(parse_config_text(format_config(cfg, view, {"write_flows": True})))
    assert back == cfg and vback == view and extra == {"write_flows": True}


def test_config_text_comments_and_errors():
    parsed = parse_config_text("# header\n[synth]\nn_subjects = 4  # four\nseed=2\n")
    assert parsed == {"n_subjects": 4, "seed": 2}
    with pytest.raises(ConfigError):
        parse_config_text("n_subjects 4\n")
    with pytest.raises(ConfigError):
        config_from_mapping({"n_subject": 4})


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 40), st.floats(0.0, 5.0), st.integers(0, 2 ** 31 - 1))
def test_config_values_survive_text(n, noise, seed):
    cfg = SynthConfig(n_subjects=n, noise_sd_mm=noise, seed=seed)
    assert config_from_mapping(parse_config_text(format_config(cfg, ViewConfig())))[0] == cfg


def test_same_seed_byte_identical(tmp_path):
    cfg = SynthConfig(n_subjects=2, trials_per_intention=1, seed=4)
    for name in ("a", "b"):
        synth_dataset(cfg, tmp_path / name, write_frames=True, write_flows=True)
    a, b = tmp_path / "a", tmp_path / "b"
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert any(str(f).startswith("flows") for f in files) and any(str(f).startswith("frames") for f in files)
    match, mismatch, errors = filecmp.cmpfiles(a, b, [str(f) for f in files], shallow=False)
    assert not mismatch and not errors
    data = generate(cfg)
    assert load_trials(a / "trials.jsonl") == data.trials
