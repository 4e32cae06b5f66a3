import numpy as np
import pytest

from ifmotion.preprocess import MARKER_NAMES, Trial
from ifmotion.synth import SynthConfig, generate

# fixed hand layout used when only some markers matter
_OFFSETS = {name: np.array([(k % 5) * 11.0, (k // 5) * 13.0, (k * 7 % 3) * 5.0])
            for k, name in enumerate(MARKER_NAMES)}


def make_trial(n=50, overrides=None, trial_id="t", subject="s01", intention="pouring", rate=100.0):
    """Trial of ``n`` samples with every marker at a fixed offset and some
    markers replaced by explicit ``(n, 3)`` paths."""
    markers = {name: np.tile(off, (n, 1)) for name, off in _OFFSETS.items()}
    for name, path in (overrides or {}).items():
        markers[name] = np.broadcast_to(np.asarray(path, dtype=float), (n, 3)).copy()
    return Trial(trial_id, subject, intention, rate, markers)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture(scope="session")
def small_synth():
    """Four subjects, three trials per intention, default effects."""
    return generate(SynthConfig(n_subjects=4, trials_per_intention=3, rejection_rate=0.0, seed=3))


@pytest.fixture(scope="session")
def clean_synth():
    """Noise-free trials for exact ground-truth recovery."""
    return generate(SynthConfig(n_subjects=2, trials_per_intention=2, rejection_rate=0.0,
                                noise_sd_mm=0.0, seed=5))
