import numpy as np
import pytest

from pcgkit import data, synth


def make_corpus(n_normal, n_abnormal, duration_s=3.0, seed=0, noise=0.02,
                duration_abnormal_s=None):
    """Labeled synthetic recordings at the working rate, ready to window."""
    recs = []
    for i in range(n_normal + n_abnormal):
        abnormal = i >= n_normal
        dur = duration_s
        if abnormal and duration_abnormal_s is not None:
            dur = duration_abnormal_s
        rec_id = f"{'a' if abnormal else 'n'}{i:04d}"
        rec = synth.synth_pcg(synth.SynthConfig(
            duration_s=dur, abnormal=abnormal, seed=seed + i,
            noise_level=noise, jitter=0.02, recording_id=rec_id))
        rec.label = data.ABNORMAL if abnormal else data.NORMAL
        recs.append(rec)
    return recs


def windows_of(recs):
    wins = []
    for rec in recs:
        wins.extend(data.window_signal(rec))
    return wins


@pytest.fixture(scope="session")
def small_corpus():
    return make_corpus(4, 4, duration_s=2.5, seed=11)


@pytest.fixture(scope="session")
def small_windows(small_corpus):
    return windows_of(small_corpus)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
